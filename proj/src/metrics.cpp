#include "rlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace rlab {

template <typename T>
double psnr(std::span<const T> a, std::span<const T> b, double max_val) {
  if (a.size() != b.size())
    throw std::invalid_argument("psnr: size mismatch (" + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()) + ")");
  if (a.empty()) throw std::invalid_argument("psnr: empty input");
  double mse = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return 100.0;  // documented cap for identical inputs
  return std::min(100.0, 10.0 * std::log10(max_val * max_val / mse));
}

// ---- SSIM ----

namespace {

std::vector<double> gaussian_window_1d(int size, double sigma) {
  std::vector<double> w(size);
  const int c = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    w[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

// separable valid-region filter: (H, W) -> (H - k + 1, W - k + 1)
void sep_filter_valid(const std::vector<double>& in, int H, int W,
                      const std::vector<double>& k1d, std::vector<double>& out) {
  const int k = static_cast<int>(k1d.size());
  const int Wv = W - k + 1, Hv = H - k + 1;
  std::vector<double> tmp(static_cast<size_t>(H) * Wv);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < Wv; ++x) {
      double acc = 0.0;
      for (int j = 0; j < k; ++j) acc += k1d[j] * in[static_cast<size_t>(y) * W + x + j];
      tmp[static_cast<size_t>(y) * Wv + x] = acc;
    }
  out.assign(static_cast<size_t>(Hv) * Wv, 0.0);
  for (int y = 0; y < Hv; ++y)
    for (int x = 0; x < Wv; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += k1d[i] * tmp[static_cast<size_t>(y + i) * Wv + x];
      out[static_cast<size_t>(y) * Wv + x] = acc;
    }
}

}  // namespace

template <typename T>
double ssim(const Image<T>& a, const Image<T>& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width)
    throw std::invalid_argument("ssim: image shapes differ");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double kK1 = 0.01, kK2 = 0.03, kL = 1.0;
  if (a.height < kWin || a.width < kWin)
    throw std::invalid_argument("ssim: image " + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " smaller than the " +
                                std::to_string(kWin) + "x" + std::to_string(kWin) +
                                " window");
  const double C1 = (kK1 * kL) * (kK1 * kL);
  const double C2 = (kK2 * kL) * (kK2 * kL);
  const auto win = gaussian_window_1d(kWin, kSigma);
  const int H = a.height, W = a.width;
  const int64_t HW = a.plane();

  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    std::vector<double> pa(HW), pb(HW), paa(HW), pbb(HW), pab(HW);
    for (int64_t i = 0; i < HW; ++i) {
      const double va = static_cast<double>(a.data[c * HW + i]);
      const double vb = static_cast<double>(b.data[c * HW + i]);
      pa[i] = va;
      pb[i] = vb;
      paa[i] = va * va;
      pbb[i] = vb * vb;
      pab[i] = va * vb;
    }
    std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
    sep_filter_valid(pa, H, W, win, mu_a);
    sep_filter_valid(pb, H, W, win, mu_b);
    sep_filter_valid(paa, H, W, win, m_aa);
    sep_filter_valid(pbb, H, W, win, m_bb);
    sep_filter_valid(pab, H, W, win, m_ab);

    double acc = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const double va = m_aa[i] - mu_a[i] * mu_a[i];
      const double vb = m_bb[i] - mu_b[i] * mu_b[i];
      const double cov = m_ab[i] - mu_a[i] * mu_b[i];
      const double num = (2.0 * mu_a[i] * mu_b[i] + C1) * (2.0 * cov + C2);
      const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + C1) * (va + vb + C2);
      acc += num / den;
    }
    total += acc / static_cast<double>(mu_a.size());
  }
  return total / a.channels;
}

// ---- spectral scores ----

std::vector<std::complex<double>> dft2d(std::span<const double> plane, int H, int W) {
  if (static_cast<int64_t>(plane.size()) != static_cast<int64_t>(H) * W)
    throw std::invalid_argument("dft2d: plane size mismatch");
  using cd = std::complex<double>;
  // row transform then column transform via precomputed twiddle tables
  std::vector<cd> ew(static_cast<size_t>(W) * W), eh(static_cast<size_t>(H) * H);
  for (int l = 0; l < W; ++l)
    for (int x = 0; x < W; ++x)
      ew[static_cast<size_t>(l) * W + x] =
          std::polar(1.0, -2.0 * M_PI * static_cast<double>(l) * x / W);
  for (int k = 0; k < H; ++k)
    for (int y = 0; y < H; ++y)
      eh[static_cast<size_t>(k) * H + y] =
          std::polar(1.0, -2.0 * M_PI * static_cast<double>(k) * y / H);

  std::vector<cd> rows(static_cast<size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int l = 0; l < W; ++l) {
      cd acc(0.0, 0.0);
      const cd* tw = &ew[static_cast<size_t>(l) * W];
      for (int x = 0; x < W; ++x) acc += plane[static_cast<size_t>(y) * W + x] * tw[x];
      rows[static_cast<size_t>(y) * W + l] = acc;
    }
  std::vector<cd> out(static_cast<size_t>(H) * W);
  for (int k = 0; k < H; ++k)
    for (int l = 0; l < W; ++l) {
      cd acc(0.0, 0.0);
      const cd* tw = &eh[static_cast<size_t>(k) * H];
      for (int y = 0; y < H; ++y) acc += rows[static_cast<size_t>(y) * W + l] * tw[y];
      out[static_cast<size_t>(k) * W + l] = acc;
    }
  return out;
}

template <typename T>
std::vector<double> luminance(const Image<T>& img) {
  std::vector<double> y(img.plane());
  if (img.channels == 1) {
    for (int64_t i = 0; i < img.plane(); ++i) y[i] = static_cast<double>(img.data[i]);
    return y;
  }
  if (img.channels != 3)
    throw std::invalid_argument("luminance: expected 1 or 3 channels");
  const int64_t HW = img.plane();
  for (int64_t i = 0; i < HW; ++i)
    y[i] = 0.299 * static_cast<double>(img.data[i]) +
           0.587 * static_cast<double>(img.data[HW + i]) +
           0.114 * static_cast<double>(img.data[2 * HW + i]);
  return y;
}

double high_band_energy(std::span<const std::complex<double>> spectrum, int H, int W) {
  double e = 0.0;
  for (int k = 0; k < H; ++k) {
    const double fy = static_cast<double>(std::min(k, H - k)) / H;
    for (int l = 0; l < W; ++l) {
      const double fx = static_cast<double>(std::min(l, W - l)) / W;
      if (std::sqrt(fy * fy + fx * fx) > 0.25)
        e += std::norm(spectrum[static_cast<size_t>(k) * W + l]);
    }
  }
  return e;
}

namespace {

double nyquist_peak(std::span<const std::complex<double>> spec, int H, int W) {
  const double dc = std::max(std::abs(spec[0]), 1e-30);
  double peak = 0.0;
  const int ky = H / 2, kx = W / 2;
  for (int l = 0; l < W; ++l)
    peak = std::max(peak, std::abs(spec[static_cast<size_t>(ky) * W + l]));
  for (int k = 0; k < H; ++k)
    peak = std::max(peak, std::abs(spec[static_cast<size_t>(k) * W + kx]));
  return peak / dc;
}

template <typename T>
double mean_interchannel_corr(const Image<T>& img) {
  const int64_t HW = img.plane();
  double mean[3], var[3];
  for (int c = 0; c < 3; ++c) {
    double m = 0.0;
    for (int64_t i = 0; i < HW; ++i) m += static_cast<double>(img.data[c * HW + i]);
    m /= static_cast<double>(HW);
    double v = 0.0;
    for (int64_t i = 0; i < HW; ++i) {
      const double d = static_cast<double>(img.data[c * HW + i]) - m;
      v += d * d;
    }
    mean[c] = m;
    var[c] = v / static_cast<double>(HW);
  }
  double acc = 0.0;
  int n = 0;
  for (int c1 = 0; c1 < 3; ++c1)
    for (int c2 = c1 + 1; c2 < 3; ++c2) {
      double cov = 0.0;
      for (int64_t i = 0; i < HW; ++i)
        cov += (static_cast<double>(img.data[c1 * HW + i]) - mean[c1]) *
               (static_cast<double>(img.data[c2 * HW + i]) - mean[c2]);
      cov /= static_cast<double>(HW);
      const double denom = std::sqrt(var[c1] * var[c2]);
      acc += denom > 1e-12 ? cov / denom : 0.0;
      ++n;
    }
  return acc / n;
}

}  // namespace

template <typename T>
SpectralScores spectral_artifact_scores(const Image<T>& restored,
                                        const Image<T>& reference) {
  if (restored.channels != reference.channels || restored.height != reference.height ||
      restored.width != reference.width)
    throw std::invalid_argument("spectral_artifact_scores: image shapes differ");
  const int H = restored.height, W = restored.width;
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument(
        "spectral_artifact_scores: even image dims required for the Nyquist bins");

  const std::vector<double> lr = luminance(restored);
  const std::vector<double> lf = luminance(reference);
  const auto fr = dft2d(lr, H, W);
  const auto ff = dft2d(lf, H, W);

  SpectralScores s;
  const double er = high_band_energy(fr, H, W);
  const double ef = high_band_energy(ff, H, W);
  s.hf_energy_ratio = er / std::max(ef, 1e-30);
  s.grid_peak_score = nyquist_peak(fr, H, W) - nyquist_peak(ff, H, W);
  if (restored.channels == 3) {
    const double rr = mean_interchannel_corr(restored);
    const double rf = mean_interchannel_corr(reference);
    s.color_mixing_score = std::abs(rf) > 1e-9 ? 1.0 - rr / rf : 0.0;
  }
  return s;
}

// ---- reports ----

MetricsAggregate MetricsReport::aggregate() const {
  MetricsAggregate a;
  a.n = static_cast<int>(rows.size());
  if (rows.empty()) return a;
  for (const MetricsRow& r : rows) {
    a.psnr_mean += r.psnr;
    a.ssim_mean += r.ssim;
    a.hf_energy_ratio_mean += r.hf_energy_ratio;
    a.grid_peak_score_mean += r.grid_peak_score;
    a.color_mixing_score_mean += r.color_mixing_score;
  }
  a.psnr_mean /= a.n;
  a.ssim_mean /= a.n;
  a.hf_energy_ratio_mean /= a.n;
  a.grid_peak_score_mean /= a.n;
  a.color_mixing_score_mean /= a.n;
  for (const MetricsRow& r : rows) {
    a.psnr_std += (r.psnr - a.psnr_mean) * (r.psnr - a.psnr_mean);
    a.ssim_std += (r.ssim - a.ssim_mean) * (r.ssim - a.ssim_mean);
  }
  a.psnr_std = std::sqrt(a.psnr_std / a.n);
  a.ssim_std = std::sqrt(a.ssim_std / a.n);
  return a;
}

void MetricsReport::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("metrics: cannot write " + path);
  if (!config_echo.empty()) f << "# " << config_echo << "\n";
  f << "image_id,psnr,ssim,hf_energy_ratio,grid_peak_score,color_mixing_score\n";
  char buf[256];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.2f,%.4f,%.6f,%.6f,%.6f\n",
                  r.image_id.c_str(), r.psnr, r.ssim, r.hf_energy_ratio,
                  r.grid_peak_score, r.color_mixing_score);
    f << buf;
  }
}

#define RLAB_INSTANTIATE_METRICS(T)                                              \
  template double psnr<T>(std::span<const T>, std::span<const T>, double);       \
  template double ssim<T>(const Image<T>&, const Image<T>&);                     \
  template std::vector<double> luminance<T>(const Image<T>&);                    \
  template SpectralScores spectral_artifact_scores<T>(const Image<T>&,           \
                                                      const Image<T>&);

RLAB_INSTANTIATE_METRICS(float)
RLAB_INSTANTIATE_METRICS(double)

#undef RLAB_INSTANTIATE_METRICS

}  // namespace rlab
