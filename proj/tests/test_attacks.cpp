#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rlab/attacks.hpp"

using namespace rlab;

namespace {

using GD = Graph<double>;
using TD = Tensor<double>;

std::vector<double> random01(uint64_t seed, int64_t n) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform();
  return v;
}

ArchVariant tiny_variant(ArchKind kind = ArchKind::nafnet) {
  ArchVariant v;
  v.kind = kind;
  v.width = 4;
  v.levels = 1;
  v.set_default_blocks();
  return v;
}

// G(y) = 2y; with target x = 0 and MSE loss the input gradient is
// 8 y / n, so the ascent direction is sign(y).
ForwardFn<double> linear_2x() {
  return [](GD& g, TD y) { return scale(y, 2.0); };
}

bool bit_equal(const AttackResult<double>& a, const AttackResult<double>& b) {
  if (a.delta != b.delta || a.y_adv != b.y_adv) return false;
  if (a.loss_trace != b.loss_trace) return false;
  if (a.zero_grad_fraction != b.zero_grad_fraction) return false;
  return true;
}

}  // namespace

TEST_CASE("project_linf") {
  const double eps = 8.0 / 255.0;
  SUBCASE("clamps to the budget") {
    std::vector<double> d{0.05};
    project_linf(std::span<double>(d), eps);
    CHECK(d[0] == doctest::Approx(eps));
  }
  SUBCASE("in-budget values unchanged") {
    std::vector<double> d{0.01, -0.02};
    auto before = d;
    project_linf(std::span<double>(d), eps);
    CHECK(d == before);
  }
  SUBCASE("idempotent on random inputs") {
    auto d = random01(3, 100);
    for (auto& v : d) v = v * 0.4 - 0.2;
    auto once = d;
    project_linf(std::span<double>(once), eps);
    auto twice = once;
    project_linf(std::span<double>(twice), eps);
    CHECK(once == twice);
  }
}

TEST_CASE("clip_range") {
  std::vector<double> y{-0.2, 0.5, 1.3};
  clip_range(std::span<double>(y));
  CHECK(y == std::vector<double>{0.0, 0.5, 1.0});
  auto r = random01(5, 64);
  auto before = r;
  clip_range(std::span<double>(r));
  CHECK(r == before);
  clip_range(std::span<double>(r));
  CHECK(r == before);
}

TEST_CASE("cossim kernel") {
  std::vector<double> u{1.0, 0.0}, v{1.0, 1.0};
  CHECK(cossim<double>(u, v) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(cossim<double>(u, u) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cossim_weights") {
  const Shape shape{1, 3, 2, 2};
  SUBCASE("identical prediction gives unit weights") {
    auto x = random01(7, numel(shape));
    auto w = cossim_weights<double>(x, x, shape);
    CHECK(w.size() == 4);
    for (double v : w) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("saturated one-hot channels are orthogonal") {
    // scale s -> infinity turns softmax into one-hot; use s = 60
    std::vector<double> a(numel(shape), 0.0), b(numel(shape), 0.0);
    for (int i = 0; i < 4; ++i) {
      a[0 + i] = 60.0;  // channel 0 hot
      b[4 + i] = 60.0;  // channel 1 hot
    }
    auto w = cossim_weights<double>(a, b, shape);
    for (double v : w) CHECK(v < 1e-10);
  }
  SUBCASE("weights lie in (0, 1]") {
    auto a = random01(11, numel(shape));
    auto b = random01(13, numel(shape));
    for (double v : cossim_weights<double>(a, b, shape)) {
      CHECK(v > 0.0);
      CHECK(v <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("fgsm on the linear model matches the closed form") {
  const Shape shape{1, 3, 4, 4};
  auto y = random01(17, numel(shape));
  std::vector<double> x(numel(shape), 0.0);
  const double eps = 8.0 / 255.0;
  AttackResult<double> r = fgsm_attack<double>(linear_2x(), y, x, shape, eps);
  for (size_t i = 0; i < y.size(); ++i) {
    const double want = std::clamp(y[i] + eps * (y[i] > 0 ? 1.0 : (y[i] < 0 ? -1.0 : 0.0)),
                                   0.0, 1.0);
    CHECK(r.y_adv[i] == doctest::Approx(want).epsilon(1e-15));
  }
  CHECK(r.loss_trace.size() == 2);
  CHECK(r.loss_trace[1] > r.loss_trace[0]);
}

TEST_CASE("fgsm with zero budget returns the clean input") {
  const Shape shape{1, 3, 4, 4};
  auto y = random01(19, numel(shape));
  std::vector<double> x(numel(shape), 0.0);
  AttackResult<double> r = fgsm_attack<double>(linear_2x(), y, x, shape, 0.0);
  CHECK(r.y_adv == y);
  for (double d : r.delta) CHECK(d == 0.0);
}

TEST_CASE("pgd saturates on the linear model when alpha >= 2 eps") {
  const Shape shape{1, 3, 4, 4};
  Rng rng(23);
  std::vector<double> y(numel(shape));
  for (auto& v : y) v = rng.uniform(0.2, 0.8);  // interior, positive
  std::vector<double> x(numel(shape), 0.0);

  AttackConfig<double> cfg;
  cfg.kind = AttackKind::pgd;
  cfg.epsilon = 0.03;
  cfg.alpha = 0.1;  // >= 2 eps
  cfg.iterations = 5;
  AttackResult<double> r = pgd_attack(linear_2x(), std::span<const double>(y),
                                      std::span<const double>(x), shape, cfg);
  for (size_t i = 0; i < y.size(); ++i)
    CHECK(r.y_adv[i] == doctest::Approx(y[i] + cfg.epsilon).epsilon(1e-12));
  // loss is flat after the first step
  for (size_t t = 2; t < r.loss_trace.size(); ++t)
    CHECK(r.loss_trace[t] == doctest::Approx(r.loss_trace[1]).epsilon(1e-12));
}

TEST_CASE("fgsm is bit-identical to single-step pgd with alpha = eps") {
  Model<double> m = build_model<double>(tiny_variant(), 29);
  const Shape shape{1, 3, 8, 8};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto y = random01(seed + 100, numel(shape));
    auto x = random01(seed + 200, numel(shape));
    AttackResult<double> f =
        fgsm_attack<double>(model_forward_fn(m), y, x, shape, 8.0 / 255.0);
    AttackConfig<double> cfg;
    cfg.kind = AttackKind::pgd;
    cfg.epsilon = 8.0 / 255.0;
    cfg.alpha = 8.0 / 255.0;
    cfg.iterations = 1;
    AttackResult<double> p = pgd_attack(model_forward_fn(m), std::span<const double>(y),
                                        std::span<const double>(x), shape, cfg);
    CHECK(bit_equal(f, p));
  }
}

TEST_CASE("cospgd with unit weights is bit-identical to pgd") {
  Model<double> m = build_model<double>(tiny_variant(ArchKind::intermediate), 31);
  const Shape shape{1, 3, 8, 8};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto y = random01(seed + 300, numel(shape));
    auto x = random01(seed + 400, numel(shape));
    AttackConfig<double> pc;
    pc.kind = AttackKind::pgd;
    pc.epsilon = 8.0 / 255.0;
    pc.alpha = 0.01;
    pc.iterations = 3;
    AttackResult<double> p = pgd_attack(model_forward_fn(m), std::span<const double>(y),
                                        std::span<const double>(x), shape, pc);
    AttackConfig<double> cc = pc;
    cc.kind = AttackKind::cospgd;
    cc.cospgd_unit_weights = true;
    AttackResult<double> c = cospgd_attack(model_forward_fn(m),
                                           std::span<const double>(y),
                                           std::span<const double>(x), shape, cc);
    CHECK(bit_equal(p, c));
  }
}

TEST_CASE("cospgd weighted loss never exceeds the unweighted loss") {
  Model<double> m = build_model<double>(tiny_variant(), 37);
  const Shape shape{1, 3, 8, 8};
  auto y = random01(41, numel(shape));
  auto x = random01(43, numel(shape));
  AttackConfig<double> cc;
  cc.kind = AttackKind::cospgd;
  cc.epsilon = 8.0 / 255.0;
  cc.alpha = 0.01;
  cc.iterations = 3;
  AttackResult<double> c = cospgd_attack(model_forward_fn(m), std::span<const double>(y),
                                         std::span<const double>(x), shape, cc);
  AttackConfig<double> pc = cc;
  pc.kind = AttackKind::pgd;
  AttackResult<double> p = pgd_attack(model_forward_fn(m), std::span<const double>(y),
                                      std::span<const double>(x), shape, pc);
  // same starting point: the weighted objective at y_clean is <= the plain MSE
  CHECK(c.loss_trace[0] <= p.loss_trace[0] + 1e-15);
}

TEST_CASE("attack invariants under fuzzing") {
  Model<double> m = build_model<double>(tiny_variant(), 47);
  const uint64_t checksum_before = m.params.checksum();
  const Shape shape{1, 3, 8, 8};
  Rng rng(53);
  for (int run = 0; run < 60; ++run) {
    AttackConfig<double> cfg;
    const int kind = static_cast<int>(rng.uniform_int(0, 2));
    cfg.kind = kind == 0 ? AttackKind::fgsm : (kind == 1 ? AttackKind::pgd
                                                         : AttackKind::cospgd);
    cfg.epsilon = rng.uniform(0.005, 0.1);
    cfg.alpha = cfg.kind == AttackKind::fgsm ? cfg.epsilon : rng.uniform(0.002, 0.05);
    cfg.iterations = cfg.kind == AttackKind::fgsm
                         ? 1
                         : static_cast<int>(rng.uniform_int(1, 4));
    auto y = random01(rng.next_u64(), numel(shape));
    auto x = random01(rng.next_u64(), numel(shape));
    AttackResult<double> r = run_attack(m, std::span<const double>(y),
                                        std::span<const double>(x), shape, cfg);
    for (size_t i = 0; i < r.delta.size(); ++i) {
      CHECK(std::abs(r.delta[i]) <= cfg.epsilon + 1e-7);
      CHECK(r.y_adv[i] >= 0.0);
      CHECK(r.y_adv[i] <= 1.0);
      CHECK(r.y_adv[i] == std::clamp(y[i] + r.delta[i], 0.0, 1.0));
    }
    CHECK(r.loss_trace.size() == static_cast<size_t>(cfg.iterations) + 1);
    CHECK(r.zero_grad_fraction.size() == static_cast<size_t>(cfg.iterations));
  }
  CHECK(m.params.checksum() == checksum_before);
}

TEST_CASE("attacks are deterministic") {
  Model<double> m = build_model<double>(tiny_variant(ArchKind::baseline), 59);
  const Shape shape{1, 3, 8, 8};
  auto y = random01(61, numel(shape));
  auto x = random01(67, numel(shape));
  AttackConfig<double> cfg;
  cfg.kind = AttackKind::cospgd;
  cfg.epsilon = 2.0 / 255.0;
  cfg.alpha = 0.01;
  cfg.iterations = 3;
  AttackResult<double> a = run_attack(m, std::span<const double>(y),
                                      std::span<const double>(x), shape, cfg);
  AttackResult<double> b = run_attack(m, std::span<const double>(y),
                                      std::span<const double>(x), shape, cfg);
  CHECK(bit_equal(a, b));
}

TEST_CASE("config validation") {
  AttackConfig<double> cfg;
  cfg.kind = AttackKind::pgd;
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.epsilon = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.epsilon = 0.03;
  cfg.alpha = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.alpha = 0.01;
  cfg.iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.iterations = 2;
  cfg.kind = AttackKind::fgsm;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("fgsm"),
                       std::invalid_argument);
  AttackConfig<double> bad_range;
  bad_range.kind = AttackKind::pgd;
  std::vector<double> y{1.5};
  std::vector<double> x{0.0};
  CHECK_THROWS_WITH_AS(pgd_attack(linear_2x(), std::span<const double>(y),
                                  std::span<const double>(x), Shape{1, 1, 1, 1},
                                  bad_range),
                       doctest::Contains("[0, 1]"), std::invalid_argument);
}

TEST_CASE("out-of-range epsilon composition: projection then clip is stable") {
  // the composed projection/clip applied twice equals once
  Rng rng(71);
  for (int i = 0; i < 200; ++i) {
    double yc = rng.uniform();
    double d = rng.uniform(-0.5, 0.5);
    const double eps = 0.06;
    auto compose = [&](double delta) {
      double p = std::clamp(delta, -eps, eps);
      return std::clamp(yc + p, 0.0, 1.0);
    };
    double once = compose(d);
    double twice = compose(once - yc);
    CHECK(once == doctest::Approx(twice).epsilon(1e-15));
  }
}
