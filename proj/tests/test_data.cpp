#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <set>

#include "rlab/data.hpp"
#include "rlab/metrics.hpp"

using namespace rlab;

namespace {

double hf_fraction(const Image<double>& img) {
  auto lum = luminance(img);
  auto spec = dft2d(lum, img.height, img.width);
  double total = 0.0;
  for (auto& c : spec) total += std::norm(c);
  return high_band_energy(spec, img.height, img.width) / total;
}

}  // namespace

TEST_CASE("scene generation is deterministic") {
  Image<double> a = generate_synthetic_scene<double>(7, 32, 32);
  Image<double> b = generate_synthetic_scene<double>(7, 32, 32);
  Image<double> c = generate_synthetic_scene<double>(8, 32, 32);
  CHECK(a.data == b.data);
  CHECK(a.data != c.data);
  CHECK_THROWS_AS(generate_synthetic_scene<double>(0, 8, 8), std::invalid_argument);
}

TEST_CASE("scenes span the intensity range and carry high-band energy") {
  int range_ok = 0, hf_ok = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Image<double> img = generate_synthetic_scene<double>(seed, 32, 32);
    double lo = 1.0, hi = 0.0;
    for (double v : img.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo >= 0.5) ++range_ok;
    if (hf_fraction(img) >= 0.01) ++hf_ok;
  }
  CHECK(range_ok == 100);
  CHECK(hf_ok == 100);
}

TEST_CASE("kernels") {
  SUBCASE("normalized and nonnegative") {
    for (auto desc : {BlurDescriptor{KernelKind::gaussian, 5, 1.2, 0, 0},
                      BlurDescriptor{KernelKind::box, 3, 0, 0, 0},
                      BlurDescriptor{KernelKind::linear_motion, 7, 0, 0.7, 5.0}}) {
      BlurKernel<double> k = make_kernel<double>(desc);
      double sum = 0.0;
      for (double w : k.weights) {
        CHECK(w >= 0.0);
        sum += w;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
  SUBCASE("even sizes rejected") {
    CHECK_THROWS_WITH_AS(
        make_kernel<double>(BlurDescriptor{KernelKind::box, 4, 0, 0, 0}),
        doctest::Contains("odd"), std::invalid_argument);
  }
}

TEST_CASE("apply_blur") {
  SUBCASE("identity kernel leaves the image unchanged") {
    Image<double> img = generate_synthetic_scene<double>(3, 16, 16);
    BlurKernel<double> delta = make_kernel<double>({KernelKind::box, 1, 0, 0, 0});
    Image<double> out = apply_blur(img, delta);
    CHECK(out.data == img.data);
  }
  SUBCASE("constant image is a fixed point") {
    Image<double> img;
    img.channels = 3;
    img.height = img.width = 16;
    img.data.assign(img.size(), 0.37);
    BlurKernel<double> k = make_kernel<double>({KernelKind::gaussian, 5, 1.0, 0, 0});
    for (double v : apply_blur(img, k).data)
      CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  }
  SUBCASE("3x3 box on a unit impulse yields a 1/9 plateau") {
    Image<double> img;
    img.channels = 3;
    img.height = img.width = 9;
    img.data.assign(img.size(), 0.0);
    img.at(0, 4, 4) = 1.0;
    Image<double> out = apply_blur(img, make_kernel<double>({KernelKind::box, 3, 0, 0, 0}));
    for (int y = 3; y <= 5; ++y)
      for (int x = 3; x <= 5; ++x)
        CHECK(out.at(0, y, x) == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
    CHECK(out.at(0, 2, 2) == doctest::Approx(0.0));
  }
  SUBCASE("linearity") {
    Image<double> a = generate_synthetic_scene<double>(11, 16, 16);
    Image<double> b = generate_synthetic_scene<double>(13, 16, 16);
    BlurKernel<double> k = make_kernel<double>({KernelKind::gaussian, 5, 1.3, 0, 0});
    const double ca = 0.3, cb = 0.7;
    Image<double> mix = a;
    for (int64_t i = 0; i < mix.size(); ++i)
      mix.data[i] = ca * a.data[i] + cb * b.data[i];
    Image<double> lhs = apply_blur(mix, k);
    Image<double> ba_ = apply_blur(a, k);
    Image<double> bb = apply_blur(b, k);
    for (int64_t i = 0; i < lhs.size(); ++i)
      CHECK(std::abs(lhs.data[i] - (ca * ba_.data[i] + cb * bb.data[i])) <= 1e-7);
  }
  SUBCASE("output stays in range") {
    Image<double> img = generate_synthetic_scene<double>(17, 16, 16);
    for (double v : apply_blur(img, make_kernel<double>({KernelKind::box, 5, 0, 0, 0})).data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  SUBCASE("gaussian and box blur strictly reduce high-band energy") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      Image<double> img = generate_synthetic_scene<double>(seed + 50, 32, 32);
      auto lum = luminance(img);
      const double before =
          high_band_energy(dft2d(lum, 32, 32), 32, 32);
      for (auto desc : {BlurDescriptor{KernelKind::gaussian, 5, 1.2, 0, 0},
                        BlurDescriptor{KernelKind::box, 3, 0, 0, 0}}) {
        Image<double> out = apply_blur(img, make_kernel<double>(desc));
        auto lum2 = luminance(out);
        CHECK(high_band_energy(dft2d(lum2, 32, 32), 32, 32) < before);
      }
    }
  }
}

TEST_CASE("make_dataset") {
  DatasetSpec spec;
  spec.n_train = 12;
  spec.n_test = 5;
  spec.seed = 9;
  const auto t0 = std::chrono::steady_clock::now();
  Dataset<double> ds = make_dataset<double>(spec);
  CHECK(ds.train.size() == 12);
  CHECK(ds.test.size() == 5);

  SUBCASE("pairs are recomputable from their descriptors") {
    for (const auto& p : ds.train) {
      Image<double> again = apply_blur(p.x, make_kernel<double>(p.blur));
      for (int64_t i = 0; i < again.size(); ++i)
        CHECK(std::abs(again.data[i] - p.y_clean.data[i]) <= 1e-7);
    }
  }
  SUBCASE("train and test ids are disjoint") {
    std::set<int64_t> ids;
    for (const auto& p : ds.train) ids.insert(p.id);
    for (const auto& p : ds.test) CHECK(ids.count(p.id) == 0);
  }
  SUBCASE("deterministic rebuild") {
    Dataset<double> again = make_dataset<double>(spec);
    CHECK(again.train[3].x.data == ds.train[3].x.data);
    CHECK(again.test[1].y_clean.data == ds.test[1].y_clean.data);
  }
  SUBCASE("200-pair dataset generates quickly") {
    DatasetSpec big;
    big.n_train = 200;
    big.n_test = 0;
    Dataset<double> bigds = make_dataset<double>(big);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(bigds.train.size() == 200);
    CHECK(secs < 5.0);
  }
}

TEST_CASE("png round trip") {
  namespace fs = std::filesystem;
  const std::string dir = fs::temp_directory_path() / "rlab_png_test";
  fs::create_directories(dir);
  Image<double> img = generate_synthetic_scene<double>(21, 24, 20);

  const std::string p = dir + "/img.png";
  save_png(p, img);
  Image<double> back = load_png<double>(p);
  CHECK(back.height == 24);
  CHECK(back.width == 20);
  SUBCASE("quantization error is at most half a step") {
    for (int64_t i = 0; i < img.size(); ++i)
      CHECK(std::abs(back.data[i] - img.data[i]) <= 1.0 / 510.0 + 1e-12);
  }
  SUBCASE("second round trip is lossless") {
    const std::string p2 = dir + "/img2.png";
    save_png(p2, back);
    Image<double> back2 = load_png<double>(p2);
    CHECK(back2.data == back.data);
  }
  SUBCASE("missing file error carries the path") {
    CHECK_THROWS_WITH_AS(load_png<double>(dir + "/nope.png"),
                         doctest::Contains("nope.png"), std::runtime_error);
  }
}

TEST_CASE("dataset directory round trip") {
  namespace fs = std::filesystem;
  const std::string dir = fs::temp_directory_path() / "rlab_ds_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  DatasetSpec spec;
  spec.n_train = 4;
  spec.n_test = 2;
  spec.seed = 31;
  Dataset<double> ds = make_dataset<double>(spec);
  write_dataset(dir, ds, spec);
  CHECK(fs::exists(dir + "/manifest.json"));
  Dataset<double> back = load_dataset<double>(dir);
  CHECK(back.train.size() == 4);
  CHECK(back.test.size() == 2);
  // y_clean is recomputed from the stored sharp frame and descriptor, so the
  // pair invariant holds exactly on the loaded data
  for (const auto& p : back.train) {
    Image<double> again = apply_blur(p.x, make_kernel<double>(p.blur));
    CHECK(again.data == p.y_clean.data);
    for (double v : p.x.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}
