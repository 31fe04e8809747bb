#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rlab/data.hpp"
#include "rlab/metrics.hpp"

using namespace rlab;

namespace {

Image<double> random_image(uint64_t seed, int h, int w) {
  Rng rng(seed);
  Image<double> img;
  img.channels = 3;
  img.height = h;
  img.width = w;
  img.data.resize(img.size());
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

// independent SSIM oracle: direct 2-D sliding window, two-pass moments
double ssim_oracle(const Image<double>& a, const Image<double>& b) {
  const int win = 11;
  const double sigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  std::vector<double> w(win * win);
  double wsum = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double dy = i - win / 2, dx = j - win / 2;
      w[i * win + j] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      wsum += w[i * win + j];
    }
  for (double& v : w) v /= wsum;

  double total = 0.0;
  int count = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y + win <= a.height; ++y)
      for (int x = 0; x + win <= a.width; ++x) {
        double mu_a = 0, mu_b = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            mu_a += w[i * win + j] * a.at(c, y + i, x + j);
            mu_b += w[i * win + j] * b.at(c, y + i, x + j);
          }
        double va = 0, vb = 0, cov = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double da = a.at(c, y + i, x + j) - mu_a;
            const double db = b.at(c, y + i, x + j) - mu_b;
            va += w[i * win + j] * da * da;
            vb += w[i * win + j] * db * db;
            cov += w[i * win + j] * da * db;
          }
        total += ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) /
                 ((mu_a * mu_a + mu_b * mu_b + C1) * (va + vb + C2));
        ++count;
      }
  return total / count;
}

// naive quadruple-sum DFT bin
std::complex<double> naive_dft_bin(const std::vector<double>& plane, int H, int W,
                                   int k, int l) {
  std::complex<double> acc(0, 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      acc += plane[y * W + x] *
             std::polar(1.0, -2.0 * M_PI * (static_cast<double>(k) * y / H +
                                            static_cast<double>(l) * x / W));
  return acc;
}

}  // namespace

TEST_CASE("psnr") {
  std::vector<double> zeros(48, 0.0), ones(48, 1.0);
  CHECK(psnr<double>(zeros, zeros) == 100.0);
  CHECK(psnr<double>(zeros, ones) == doctest::Approx(0.0));
  std::vector<double> shifted(48, 0.1);
  CHECK(psnr<double>(zeros, shifted) == doctest::Approx(20.0).epsilon(1e-12));

  SUBCASE("strictly decreasing in mse") {
    std::vector<double> a(48, 0.0);
    double prev = 1e9;
    for (double off : {0.01, 0.05, 0.1, 0.3}) {
      std::vector<double> b(48, off);
      const double p = psnr<double>(a, b);
      CHECK(p < prev);
      prev = p;
    }
  }
  SUBCASE("invariant to joint pixel permutation") {
    Rng rng(3);
    std::vector<double> a(64), b(64);
    for (auto& v : a) v = rng.uniform();
    for (auto& v : b) v = rng.uniform();
    std::vector<int> perm(64);
    for (int i = 0; i < 64; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    std::vector<double> ap(64), bp(64);
    for (int i = 0; i < 64; ++i) {
      ap[i] = a[perm[i]];
      bp[i] = b[perm[i]];
    }
    CHECK(psnr<double>(a, b) == doctest::Approx(psnr<double>(ap, bp)).epsilon(1e-13));
  }
  SUBCASE("size mismatch") {
    std::vector<double> a(4, 0.0), b(5, 0.0);
    CHECK_THROWS_AS(psnr<double>(a, b), std::invalid_argument);
  }
}

TEST_CASE("ssim") {
  SUBCASE("identical images score exactly 1") {
    Image<double> a = random_image(7, 32, 32);
    CHECK(std::abs(ssim(a, a) - 1.0) <= 1e-12);
  }
  SUBCASE("symmetry") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
      Image<double> a = random_image(seed, 24, 24);
      Image<double> b = random_image(seed + 100, 24, 24);
      CHECK(std::abs(ssim(a, b) - ssim(b, a)) <= 1e-12);
    }
  }
  SUBCASE("matches the direct-summation oracle on 20 random pairs") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      Image<double> a = random_image(seed + 500, 32, 32);
      Image<double> b = random_image(seed + 600, 32, 32);
      CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-6);
    }
  }
  SUBCASE("degraded image scores below 1") {
    Image<double> a = generate_synthetic_scene<double>(3, 32, 32);
    Image<double> blurred =
        apply_blur(a, make_kernel<double>({KernelKind::gaussian, 5, 1.5, 0, 0}));
    const double s = ssim(a, blurred);
    CHECK(s < 0.999);
    CHECK(s > -1.0);
  }
  SUBCASE("window larger than the image is an error") {
    Image<double> a = random_image(1, 8, 8);
    CHECK_THROWS_WITH_AS(ssim(a, a), doctest::Contains("window"),
                         std::invalid_argument);
  }
}

TEST_CASE("dft2d matches the naive quadruple sum") {
  Rng rng(11);
  const int H = 8, W = 6;
  std::vector<double> plane(H * W);
  for (auto& v : plane) v = rng.uniform();
  auto spec = dft2d(plane, H, W);
  for (int k = 0; k < H; ++k)
    for (int l = 0; l < W; ++l) {
      auto want = naive_dft_bin(plane, H, W, k, l);
      CHECK(std::abs(spec[k * W + l] - want) <= 1e-9);
    }
}

TEST_CASE("luminance uses Rec.601 weights") {
  Image<double> img;
  img.channels = 3;
  img.height = img.width = 1;
  img.data = {1.0, 0.5, 0.25};
  auto y = luminance(img);
  CHECK(y[0] == doctest::Approx(0.299 + 0.587 * 0.5 + 0.114 * 0.25).epsilon(1e-12));
}

TEST_CASE("spectral_artifact_scores") {
  SUBCASE("identity gives (1, 0, 0)") {
    Image<double> a = generate_synthetic_scene<double>(13, 32, 32);
    SpectralScores s = spectral_artifact_scores(a, a);
    CHECK(s.hf_energy_ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.grid_peak_score == doctest::Approx(0.0));
    CHECK(s.color_mixing_score == doctest::Approx(0.0));
  }
  SUBCASE("pure Nyquist checkerboard raises grid_peak_score by its closed form") {
    Image<double> ref = generate_synthetic_scene<double>(17, 32, 32);
    Image<double> restored = ref;
    const double amp = 0.1;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
          restored.at(c, y, x) += amp * (((y + x) % 2 == 0) ? 1.0 : -1.0);
    SpectralScores s = spectral_artifact_scores(restored, ref);
    CHECK(s.grid_peak_score > 0.0);

    // expected value from the independent naive DFT of both luminance planes
    auto lum_ref = luminance(ref);
    auto lum_res = luminance(restored);
    auto peak_of = [&](const std::vector<double>& plane) {
      const double dc = std::abs(naive_dft_bin(plane, 32, 32, 0, 0));
      double best = 0.0;
      for (int l = 0; l < 32; ++l)
        best = std::max(best, std::abs(naive_dft_bin(plane, 32, 32, 16, l)));
      for (int k = 0; k < 32; ++k)
        best = std::max(best, std::abs(naive_dft_bin(plane, 32, 32, k, 16)));
      return best / dc;
    };
    const double want = peak_of(lum_res) - peak_of(lum_ref);
    CHECK(s.grid_peak_score == doctest::Approx(want).epsilon(1e-9));
    // the checkerboard concentrates at the exact Nyquist bin
    auto ny = naive_dft_bin(lum_res, 32, 32, 16, 16);
    CHECK(std::abs(ny) > 0.9 * amp * 32 * 32);
  }
  SUBCASE("blurred reconstruction drops the high-frequency ratio below 1") {
    Image<double> ref = generate_synthetic_scene<double>(19, 32, 32);
    Image<double> blurred =
        apply_blur(ref, make_kernel<double>({KernelKind::gaussian, 5, 1.5, 0, 0}));
    SpectralScores s = spectral_artifact_scores(blurred, ref);
    CHECK(s.hf_energy_ratio < 1.0);
  }
  SUBCASE("translation consistency") {
    Image<double> ref = generate_synthetic_scene<double>(23, 32, 32);
    Image<double> res = apply_blur(ref, make_kernel<double>({KernelKind::box, 3, 0, 0, 0}));
    SpectralScores s0 = spectral_artifact_scores(res, ref);
    auto shift = [](const Image<double>& img, int dy, int dx) {
      Image<double> out = img;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
          for (int x = 0; x < img.width; ++x)
            out.at(c, (y + dy) % img.height, (x + dx) % img.width) = img.at(c, y, x);
      return out;
    };
    SpectralScores s1 = spectral_artifact_scores(shift(res, 5, 9), shift(ref, 5, 9));
    CHECK(std::abs(s0.hf_energy_ratio - s1.hf_energy_ratio) <= 1e-9);
  }
  SUBCASE("channel scrambling raises color_mixing_score") {
    // reference: strongly correlated channels; restored: independent noise
    Rng rng(29);
    Image<double> ref;
    ref.channels = 3;
    ref.height = ref.width = 32;
    ref.data.resize(ref.size());
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const double base = rng.uniform();
        ref.at(0, y, x) = 0.9 * base + 0.05;
        ref.at(1, y, x) = 0.8 * base + 0.1;
        ref.at(2, y, x) = 0.7 * base + 0.15;
      }
    Image<double> noisy = ref;
    for (auto& v : noisy.data) v = rng.uniform();
    SpectralScores s = spectral_artifact_scores(noisy, ref);
    CHECK(s.color_mixing_score > 0.1);
    CHECK(std::isfinite(s.color_mixing_score));
  }
  SUBCASE("odd dimensions are rejected") {
    Image<double> odd = random_image(1, 31, 32);
    CHECK_THROWS_AS(spectral_artifact_scores(odd, odd), std::invalid_argument);
  }
}

TEST_CASE("metrics report csv") {
  MetricsReport rep;
  rep.config_echo = "unit-test";
  rep.rows.push_back({"a", 30.0, 0.9, 1.0, 0.0, 0.0});
  rep.rows.push_back({"b", 20.0, 0.7, 1.5, 0.2, 0.1});
  MetricsAggregate agg = rep.aggregate();
  CHECK(agg.n == 2);
  CHECK(agg.psnr_mean == doctest::Approx(25.0));
  CHECK(agg.psnr_std == doctest::Approx(5.0));
  CHECK(agg.ssim_mean == doctest::Approx(0.8));

  namespace fs = std::filesystem;
  const std::string path = fs::temp_directory_path() / "rlab_metrics.csv";
  rep.write_csv(path);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "# unit-test");
  std::getline(f, line);
  CHECK(line == "image_id,psnr,ssim,hf_energy_ratio,grid_peak_score,color_mixing_score");
  std::getline(f, line);
  CHECK(line == "a,30.00,0.9000,1.000000,0.000000,0.000000");
}
