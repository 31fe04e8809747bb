#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <sstream>

#include "rlab/tensor.hpp"

using namespace rlab;

namespace {

using GD = Graph<double>;
using TD = Tensor<double>;
using BuildFn = std::function<TD(GD&, TD)>;

std::vector<double> random_values(uint64_t seed, int64_t n, double lo = -1.0,
                                  double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// analytic-vs-central-difference relative error for d(build)/dx at x0
double grad_rel_err(const BuildFn& build, const Shape& shape,
                    std::span<const double> x0, double h = 1e-5) {
  GD g;
  TD x = g.leaf(shape, std::vector<double>(x0.begin(), x0.end()), true);
  TD loss = build(g, x);
  g.backward(loss);
  std::span<const double> analytic = g.grad(x.id);
  REQUIRE(!analytic.empty());

  auto f = [&](std::span<const double> xv) {
    GD g2;
    TD x2 = g2.leaf(shape, std::vector<double>(xv.begin(), xv.end()), false);
    return build(g2, x2).value()[0];
  };
  std::vector<double> fd = finite_difference_gradient<double>(f, x0, h);
  return gradcheck_rel_err<double>(analytic, std::span<const double>(fd));
}

// random projection to a scalar so every output element feeds the loss
TD project_scalar(GD& g, TD t, uint64_t seed) {
  TD r = g.leaf(t.shape(), random_values(seed, t.numel(), 0.1, 1.0), false);
  return reduce_sum_all(mul(t, r));
}

}  // namespace

TEST_CASE("conv2d counting example: all-ones 3x3, pad 1") {
  GD g;
  TD x = g.constant({1, 1, 3, 3}, 1.0);
  TD w = g.constant({1, 1, 3, 3}, 1.0);
  TD y = conv2d(x, w, Conv2dSpec{1, 1, 1});
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  std::span<const double> v = y.value();
  CHECK(v[4] == doctest::Approx(9.0));  // center
  CHECK(v[0] == doctest::Approx(4.0));  // corners
  CHECK(v[2] == doctest::Approx(4.0));
  CHECK(v[6] == doctest::Approx(4.0));
  CHECK(v[8] == doctest::Approx(4.0));
  CHECK(v[1] == doctest::Approx(6.0));  // edges
}

TEST_CASE("conv2d depthwise 1x1 scales each channel") {
  GD g;
  TD x = g.leaf({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, false);
  TD w = g.leaf({2, 1, 1, 1}, {2.0, 3.0}, false);
  TD y = conv2d(x, w, Conv2dSpec{1, 0, 2});
  std::span<const double> v = y.value();
  for (int i = 0; i < 4; ++i) CHECK(v[i] == doctest::Approx(2.0 * (i + 1)));
  for (int i = 0; i < 4; ++i) CHECK(v[4 + i] == doctest::Approx(3.0 * (5 + i)));
}

TEST_CASE("conv2d gradients match finite differences") {
  const Shape xs{1, 3, 5, 5};
  const Shape ws{4, 3, 3, 3};
  const auto wv = random_values(7, numel(ws), -0.5, 0.5);

  SUBCASE("input gradient") {
    BuildFn build = [&](GD& g, TD x) {
      TD w = g.leaf(ws, wv, false);
      return project_scalar(g, conv2d(x, w, Conv2dSpec{1, 1, 1}), 99);
    };
    for (uint64_t seed = 0; seed < 5; ++seed) {
      auto x0 = random_values(seed, numel(xs));
      CHECK(grad_rel_err(build, xs, x0) < 1e-5);
    }
  }
  SUBCASE("weight gradient") {
    const auto xv = random_values(11, numel(xs));
    BuildFn build = [&](GD& g, TD w) {
      TD x = g.leaf(xs, xv, false);
      return project_scalar(g, conv2d(x, w, Conv2dSpec{1, 1, 1}), 99);
    };
    for (uint64_t seed = 0; seed < 5; ++seed) {
      auto w0 = random_values(seed + 100, numel(ws), -0.5, 0.5);
      CHECK(grad_rel_err(build, ws, w0) < 1e-5);
    }
  }
  SUBCASE("bias gradient") {
    const auto xv = random_values(12, numel(xs));
    BuildFn build = [&](GD& g, TD b) {
      TD x = g.leaf(xs, xv, false);
      TD w = g.leaf(ws, wv, false);
      return project_scalar(g, conv2d(x, w, b, Conv2dSpec{1, 1, 1}), 99);
    };
    auto b0 = random_values(3, 4);
    CHECK(grad_rel_err(build, {4}, b0) < 1e-6);
  }
  SUBCASE("grouped and strided path") {
    const Shape gxs{1, 4, 6, 6};
    const Shape gws{4, 2, 3, 3};
    const auto gwv = random_values(21, numel(gws), -0.5, 0.5);
    BuildFn build = [&](GD& g, TD x) {
      TD w = g.leaf(gws, gwv, false);
      return project_scalar(g, conv2d(x, w, Conv2dSpec{2, 1, 2}), 98);
    };
    auto x0 = random_values(5, numel(gxs));
    CHECK(grad_rel_err(build, gxs, x0) < 1e-5);
  }
}

TEST_CASE("conv2d shape errors name the offending dimension") {
  GD g;
  TD x = g.constant({1, 3, 4, 4}, 0.0);
  TD w = g.constant({4, 2, 3, 3}, 0.0);
  CHECK_THROWS_WITH_AS(conv2d(x, w, Conv2dSpec{1, 1, 1}),
                       doctest::Contains("expected input channels per group"),
                       std::invalid_argument);
  TD w2 = g.constant({4, 3, 3, 3}, 0.0);
  CHECK_THROWS_AS(conv2d(x, w2, Conv2dSpec{1, 1, 2}), std::invalid_argument);
  TD wbig = g.constant({1, 3, 9, 9}, 0.0);
  CHECK_THROWS_WITH_AS(conv2d(x, wbig, Conv2dSpec{1, 0, 1}),
                       doctest::Contains("does not fit"), std::invalid_argument);
}

TEST_CASE("layer_norm_channels basics") {
  SUBCASE("constant input maps to zero") {
    GD g;
    TD x = g.constant({1, 4, 2, 2}, 3.7);
    TD gamma = g.constant({4}, 1.0);
    TD beta = g.constant({4}, 0.0);
    TD y = layer_norm_channels(x, gamma, beta, 1e-6);
    for (double v : y.value()) CHECK(v == doctest::Approx(0.0));
  }
  SUBCASE("symmetric two-channel input normalizes to +-1") {
    GD g;
    TD x = g.leaf({1, 2, 1, 1}, {-3.0, 3.0}, false);
    TD y = layer_norm_channels(x, g.constant({2}, 1.0), g.constant({2}, 0.0), 1e-12);
    CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("gradient check") {
    const Shape xs{2, 3, 2, 2};
    const auto gv = random_values(31, 3, 0.5, 1.5);
    const auto bv = random_values(32, 3);
    BuildFn build = [&](GD& g, TD x) {
      TD gamma = g.leaf({3}, gv, false);
      TD beta = g.leaf({3}, bv, false);
      return project_scalar(g, layer_norm_channels(x, gamma, beta, 1e-6), 97);
    };
    for (uint64_t seed = 0; seed < 5; ++seed) {
      auto x0 = random_values(seed + 40, numel(xs));
      CHECK(grad_rel_err(build, xs, x0) < 1e-5);
    }
  }
  SUBCASE("gamma/beta gradients") {
    const Shape xs{1, 3, 2, 2};
    const auto xv = random_values(33, numel(xs));
    BuildFn build = [&](GD& g, TD gamma) {
      TD x = g.leaf(xs, xv, false);
      TD beta = g.constant({3}, 0.1);
      return project_scalar(g, layer_norm_channels(x, gamma, beta, 1e-6), 96);
    };
    auto g0 = random_values(44, 3, 0.5, 1.5);
    CHECK(grad_rel_err(build, {3}, g0) < 1e-6);
  }
  SUBCASE("normalization property: per-location mean ~0, var ~1") {
    GD g;
    const Shape xs{1, 8, 4, 4};
    TD x = g.leaf(xs, random_values(55, numel(xs)), false);
    TD y = layer_norm_channels(x, g.constant({8}, 1.0), g.constant({8}, 0.0), 1e-10);
    std::span<const double> v = y.value();
    const int64_t HW = 16;
    for (int64_t s = 0; s < HW; ++s) {
      double mu = 0, var = 0;
      for (int c = 0; c < 8; ++c) mu += v[c * HW + s];
      mu /= 8;
      for (int c = 0; c < 8; ++c) var += (v[c * HW + s] - mu) * (v[c * HW + s] - mu);
      var /= 8;
      CHECK(std::abs(mu) < 1e-7);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("activations") {
  GD g;
  TD x = g.leaf({3}, {-1.0, 0.0, 2.0}, false);
  std::span<const double> r = activation(Act::relu, x).value();
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);

  TD z = g.leaf({1}, {0.0}, false);
  CHECK(activation(Act::gelu, z).value()[0] == doctest::Approx(0.0));
  CHECK(activation(Act::sigmoid, z).value()[0] == doctest::Approx(0.5));

  SUBCASE("gelu gradient at fixed points") {
    for (double p : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
      BuildFn build = [](GD& gg, TD t) { return reduce_sum_all(activation(Act::gelu, t)); };
      std::vector<double> x0{p};
      CHECK(grad_rel_err(build, {1}, x0, 1e-5) < 1e-6);
    }
  }
  SUBCASE("sigmoid/relu gradients") {
    BuildFn bs = [](GD& gg, TD t) {
      return project_scalar(gg, activation(Act::sigmoid, t), 5);
    };
    BuildFn br = [](GD& gg, TD t) {
      return project_scalar(gg, activation(Act::relu, t), 5);
    };
    auto x0 = random_values(9, 16, -2.0, 2.0);  // away from the relu kink
    CHECK(grad_rel_err(bs, {16}, x0) < 1e-6);
    CHECK(grad_rel_err(br, {16}, x0) < 1e-6);
  }
}

TEST_CASE("simple_gate") {
  SUBCASE("ones in the gate half is the identity") {
    GD g;
    std::vector<double> v = {1, 2, 3, 4, 1, 1, 1, 1};
    TD x = g.leaf({1, 2, 2, 2}, v, false);
    std::span<const double> y = simple_gate(x).value();
    for (int i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(v[i]));
  }
  SUBCASE("elementwise product") {
    GD g;
    TD x = g.leaf({1, 2, 1, 1}, {2.0, 3.0}, false);
    CHECK(simple_gate(x).value()[0] == doctest::Approx(6.0));
  }
  SUBCASE("odd channel count rejected") {
    GD g;
    TD x = g.constant({1, 3, 2, 2}, 1.0);
    CHECK_THROWS_AS(simple_gate(x), std::invalid_argument);
  }
  SUBCASE("gradient w.r.t. both halves") {
    const Shape xs{1, 4, 3, 3};
    BuildFn build = [](GD& g, TD x) { return project_scalar(g, simple_gate(x), 3); };
    for (uint64_t seed = 0; seed < 5; ++seed) {
      auto x0 = random_values(seed + 60, numel(xs));
      CHECK(grad_rel_err(build, xs, x0) < 1e-6);
    }
  }
  SUBCASE("halves channel count exactly") {
    GD g;
    TD x = g.constant({2, 6, 4, 4}, 0.5);
    CHECK(simple_gate(x).shape() == Shape{2, 3, 4, 4});
  }
}

TEST_CASE("softmax_axis") {
  SUBCASE("uniform input") {
    GD g;
    TD x = g.constant({2, 5}, 0.3);
    for (double v : softmax_axis(x, 1).value()) CHECK(v == doctest::Approx(0.2));
  }
  SUBCASE("analytic two-point case") {
    GD g;
    TD x = g.leaf({2}, {0.0, std::log(3.0)}, false);
    std::span<const double> y = softmax_axis(x, 0).value();
    CHECK(y[0] == doctest::Approx(0.25));
    CHECK(y[1] == doctest::Approx(0.75));
  }
  SUBCASE("rows sum to one, entries in (0,1)") {
    GD g;
    const Shape xs{3, 4, 7};
    TD x = g.leaf(xs, random_values(71, numel(xs), -5.0, 5.0), false);
    TD y = softmax_axis(x, -1);
    std::span<const double> v = y.value();
    for (int r = 0; r < 12; ++r) {
      double s = 0;
      for (int k = 0; k < 7; ++k) {
        s += v[r * 7 + k];
        CHECK(v[r * 7 + k] > 0.0);
        CHECK(v[r * 7 + k] < 1.0);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
  SUBCASE("shift invariance") {
    GD g;
    const Shape xs{4, 6};
    auto x0 = random_values(81, numel(xs), -2.0, 2.0);
    TD a = softmax_axis(g.leaf(xs, x0, false), 1);
    for (auto& v : x0) v += 13.25;
    TD b = softmax_axis(g.leaf(xs, x0, false), 1);
    for (int64_t i = 0; i < numel(xs); ++i)
      CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-12));
  }
  SUBCASE("gradient check over a middle axis") {
    const Shape xs{2, 5, 3};
    BuildFn build = [](GD& g, TD x) { return project_scalar(g, softmax_axis(x, 1), 4); };
    for (uint64_t seed = 0; seed < 5; ++seed) {
      auto x0 = random_values(seed + 90, numel(xs), -3.0, 3.0);
      CHECK(grad_rel_err(build, xs, x0) < 1e-5);
    }
  }
}

TEST_CASE("global_avg_pool") {
  SUBCASE("constant input") {
    GD g;
    TD x = g.constant({1, 3, 4, 4}, 0.77);
    for (double v : global_avg_pool(x).value()) CHECK(v == doctest::Approx(0.77));
  }
  SUBCASE("2x2 plane mean") {
    GD g;
    TD x = g.leaf({1, 1, 2, 2}, {1, 2, 3, 6}, false);
    CHECK(global_avg_pool(x).value()[0] == doctest::Approx(3.0));
  }
  SUBCASE("gradient of pooled sum spreads uniformly") {
    GD g;
    TD x = g.leaf({1, 2, 2, 2}, random_values(1, 8), true);
    TD loss = reduce_sum_all(global_avg_pool(x));
    g.backward(loss);
    for (double v : g.grad(x.id)) CHECK(v == doctest::Approx(0.25));
  }
}

TEST_CASE("pixel_shuffle") {
  SUBCASE("round trip is bit exact") {
    GD g;
    const Shape xs{1, 4, 8, 8};
    auto x0 = random_values(101, numel(xs));
    TD x = g.leaf(xs, x0, false);
    TD rt = pixel_shuffle(pixel_shuffle(x, 2, Shuffle::down), 2, Shuffle::up);
    std::span<const double> v = rt.value();
    for (int64_t i = 0; i < numel(xs); ++i) CHECK(v[i] == x0[i]);  // exact
  }
  SUBCASE("down on 1x1x2x2 packs the four pixels") {
    GD g;
    TD x = g.leaf({1, 1, 2, 2}, {10, 11, 12, 13}, false);
    TD y = pixel_shuffle(x, 2, Shuffle::down);
    CHECK(y.shape() == Shape{1, 4, 1, 1});
    std::span<const double> v = y.value();
    CHECK(v[0] == 10);
    CHECK(v[1] == 11);
    CHECK(v[2] == 12);
    CHECK(v[3] == 13);
  }
  SUBCASE("divisibility errors") {
    GD g;
    CHECK_THROWS_AS(pixel_shuffle(g.constant({1, 1, 3, 4}, 0.0), 2, Shuffle::down),
                    std::invalid_argument);
    CHECK_THROWS_AS(pixel_shuffle(g.constant({1, 3, 4, 4}, 0.0), 2, Shuffle::up),
                    std::invalid_argument);
  }
  SUBCASE("gradient of down") {
    const Shape xs{1, 2, 4, 4};
    BuildFn build = [](GD& g, TD x) {
      return project_scalar(g, pixel_shuffle(x, 2, Shuffle::down), 6);
    };
    auto x0 = random_values(7, numel(xs));
    CHECK(grad_rel_err(build, xs, x0) < 1e-6);
  }
}

TEST_CASE("matmul_batched") {
  SUBCASE("identity times m") {
    GD g;
    TD eye = g.leaf({2, 2}, {1, 0, 0, 1}, false);
    auto mv = random_values(3, 4);
    TD m = g.leaf({2, 2}, mv, false);
    std::span<const double> v = matmul_batched(eye, m).value();
    for (int i = 0; i < 4; ++i) CHECK(v[i] == doctest::Approx(mv[i]));
  }
  SUBCASE("batch broadcasting over leading dims") {
    GD g;
    TD a = g.leaf({2, 1, 2, 3}, random_values(5, 12), false);
    TD b = g.leaf({1, 4, 3, 2}, random_values(6, 24), false);
    TD y = matmul_batched(a, b);
    CHECK(y.shape() == Shape{2, 4, 2, 2});
  }
  SUBCASE("inner dim mismatch error") {
    GD g;
    TD a = g.constant({2, 3}, 1.0);
    TD b = g.constant({4, 2}, 1.0);
    CHECK_THROWS_WITH_AS(matmul_batched(a, b), doctest::Contains("inner dims"),
                         std::invalid_argument);
  }
  SUBCASE("gradients for all transpose flags") {
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        const Shape as = ta ? Shape{4, 3} : Shape{3, 4};
        const Shape bs = tb ? Shape{5, 4} : Shape{4, 5};
        const auto bv = random_values(17, numel(bs));
        BuildFn build = [&, ta, tb](GD& g, TD a) {
          TD b = g.leaf(bs, bv, false);
          return project_scalar(g, matmul_batched(a, b, ta, tb), 8);
        };
        auto a0 = random_values(23, numel(as));
        CHECK(grad_rel_err(build, as, a0) < 1e-6);

        const auto av = random_values(29, numel(as));
        BuildFn build_b = [&, ta, tb](GD& g, TD b) {
          TD a = g.leaf(as, av, false);
          return project_scalar(g, matmul_batched(a, b, ta, tb), 8);
        };
        auto b0 = random_values(31, numel(bs));
        CHECK(grad_rel_err(build_b, bs, b0) < 1e-6);
      }
  }
}

TEST_CASE("elementwise ops and broadcasting") {
  SUBCASE("mul with ones is the identity") {
    GD g;
    auto xv = random_values(41, 12);
    TD x = g.leaf({3, 4}, xv, false);
    TD ones = g.constant({3, 4}, 1.0);
    std::span<const double> v = mul(x, ones).value();
    for (int i = 0; i < 12; ++i) CHECK(v[i] == xv[i]);
  }
  SUBCASE("sum over all axes has unit gradient") {
    GD g;
    TD x = g.leaf({2, 3}, random_values(42, 6), true);
    g.backward(reduce_sum_all(x));
    for (double v : g.grad(x.id)) CHECK(v == 1.0);
  }
  SUBCASE("broadcast gradient reduces over stretched dims") {
    const Shape bshape{1, 3, 1, 1};
    const Shape xshape{2, 3, 4, 4};
    const auto xv = random_values(43, numel(xshape));
    BuildFn build = [&](GD& g, TD b) {
      TD x = g.leaf(xshape, xv, false);
      return project_scalar(g, mul(x, b), 9);
    };
    auto b0 = random_values(44, numel(bshape));
    CHECK(grad_rel_err(build, bshape, b0) < 1e-6);
  }
  SUBCASE("divide and sqrt gradients") {
    const Shape xs{2, 5};
    const auto dv = random_values(45, numel(xs), 0.5, 2.0);
    BuildFn build = [&](GD& g, TD x) {
      TD d = g.leaf(xs, dv, false);
      return project_scalar(g, divide(x, d), 10);
    };
    auto x0 = random_values(46, numel(xs));
    CHECK(grad_rel_err(build, xs, x0) < 1e-6);

    BuildFn bsqrt = [](GD& g, TD x) { return project_scalar(g, sqrt_elem(x), 11); };
    auto p0 = random_values(47, numel(xs), 0.5, 3.0);
    CHECK(grad_rel_err(bsqrt, xs, p0) < 1e-6);
  }
  SUBCASE("incompatible shapes") {
    GD g;
    CHECK_THROWS_AS(add(g.constant({2, 3}, 0.0), g.constant({2, 4}, 0.0)),
                    std::invalid_argument);
  }
}

TEST_CASE("reductions") {
  SUBCASE("mean with keepdims") {
    GD g;
    TD x = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6}, false);
    TD m = reduce_mean(x, {1}, true);
    CHECK(m.shape() == Shape{2, 1});
    CHECK(m.value()[0] == doctest::Approx(2.0));
    CHECK(m.value()[1] == doctest::Approx(5.0));
  }
  SUBCASE("partial-axis gradient") {
    const Shape xs{2, 3, 4};
    BuildFn build = [](GD& g, TD x) {
      return project_scalar(g, reduce_sum(x, {0, 2}, false), 12);
    };
    auto x0 = random_values(48, numel(xs));
    CHECK(grad_rel_err(build, xs, x0) < 1e-6);
  }
}

TEST_CASE("backward semantics") {
  SUBCASE("loss = sum(x*x) analytic gradient") {
    GD g;
    TD x = g.leaf({2}, {1.0, 2.0}, true);
    g.backward(reduce_sum_all(mul(x, x)));
    CHECK(g.grad(x.id)[0] == doctest::Approx(2.0));
    CHECK(g.grad(x.id)[1] == doctest::Approx(4.0));
  }
  SUBCASE("composite block: conv -> gelu -> conv -> mse") {
    const Shape xs{1, 2, 6, 6};
    const Shape w1s{4, 2, 3, 3}, w2s{2, 4, 3, 3};
    const auto w1v = random_values(51, numel(w1s), -0.4, 0.4);
    const auto w2v = random_values(52, numel(w2s), -0.4, 0.4);
    const auto tv = random_values(53, numel(xs), 0.0, 1.0);
    BuildFn build = [&](GD& g, TD x) {
      TD w1 = g.leaf(w1s, w1v, false);
      TD w2 = g.leaf(w2s, w2v, false);
      TD h = activation(Act::gelu, conv2d(x, w1, Conv2dSpec{1, 1, 1}));
      TD out = conv2d(h, w2, Conv2dSpec{1, 1, 1});
      TD target = g.leaf(xs, tv, false);
      return mse_loss(out, target);
    };
    for (uint64_t seed = 0; seed < 3; ++seed) {
      auto x0 = random_values(seed + 70, numel(xs));
      CHECK(grad_rel_err(build, xs, x0) < 1e-4);
    }
  }
  SUBCASE("backward visits each recorded op exactly once") {
    GD g;
    TD x = g.leaf({4}, random_values(1, 4), true);
    TD y = mul(add(x, x), x);       // 2 ops
    TD loss = reduce_sum_all(y);    // 1 op
    g.backward(loss);
    CHECK(g.op_count() == 3);
    CHECK(g.last_backward_visits() == 3);
  }
  SUBCASE("gradients reset by default, accumulate on request") {
    GD g;
    TD x = g.leaf({2}, {1.0, 1.0}, true);
    TD loss = reduce_sum_all(mul(x, x));
    g.backward(loss);
    CHECK(g.grad(x.id)[0] == doctest::Approx(2.0));
    g.backward(loss);  // reset
    CHECK(g.grad(x.id)[0] == doctest::Approx(2.0));
    g.backward(loss, /*accumulate=*/true);
    CHECK(g.grad(x.id)[0] == doctest::Approx(4.0));
  }
  SUBCASE("non-scalar loss rejected") {
    GD g;
    TD x = g.leaf({3}, {1, 2, 3}, true);
    CHECK_THROWS_WITH_AS(g.backward(mul(x, x)), doctest::Contains("scalar"),
                         std::invalid_argument);
  }
}

TEST_CASE("finite difference oracle sanity") {
  SUBCASE("f = sum has unit gradient") {
    auto f = [](std::span<const double> x) {
      double s = 0;
      for (double v : x) s += v;
      return s;
    };
    auto x0 = random_values(61, 5);
    auto g = finite_difference_gradient<double>(f, x0, 1e-5);
    for (double v : g) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("f = sum of squares at x=3") {
    auto f = [](std::span<const double> x) {
      double s = 0;
      for (double v : x) s += v * v;
      return s;
    };
    std::vector<double> x0{3.0};
    auto g = finite_difference_gradient<double>(f, x0, 1e-5);
    CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-8));
  }
}

TEST_CASE("graph utilities") {
  SUBCASE("debug dump lists one edge line per op") {
    GD g;
    TD x = g.leaf({2}, {1, 2}, false);
    reduce_sum_all(mul(x, x));
    std::ostringstream os;
    g.dump_edges(os);
    const std::string s = os.str();
    CHECK(std::count(s.begin(), s.end(), '\n') == 2);
    CHECK(s.find("mul") != std::string::npos);
    CHECK(s.find("reduce_sum") != std::string::npos);
  }
  SUBCASE("finite check traps NaN when enabled") {
    Graph<double> g(Graph<double>::Options{.check_finite = true});
    TD a = g.constant({1}, 0.0);
    TD b = g.constant({1}, 0.0);
    CHECK_THROWS_WITH_AS(divide(a, b), doctest::Contains("non-finite"),
                         std::runtime_error);
  }
  SUBCASE("per-op finite-difference agreement across many seeds") {
    // every primitive again, 20 seeds each, as a property sweep
    const Shape xs{1, 4, 4, 4};
    std::vector<std::pair<const char*, BuildFn>> ops = {
        {"gelu", [](GD& g, TD x) { return project_scalar(g, activation(Act::gelu, x), 2); }},
        {"sigmoid", [](GD& g, TD x) { return project_scalar(g, activation(Act::sigmoid, x), 2); }},
        {"simple_gate", [](GD& g, TD x) { return project_scalar(g, simple_gate(x), 2); }},
        {"softmax", [](GD& g, TD x) { return project_scalar(g, softmax_axis(x, 1), 2); }},
        {"gap", [](GD& g, TD x) { return project_scalar(g, global_avg_pool(x), 2); }},
        {"shuffle_down", [](GD& g, TD x) { return project_scalar(g, pixel_shuffle(x, 2, Shuffle::down), 2); }},
    };
    for (auto& [name, build] : ops) {
      double worst = 0;
      for (uint64_t seed = 0; seed < 20; ++seed)
        worst = std::max(worst, grad_rel_err(build, xs, random_values(seed, numel(xs))));
      INFO(name);
      CHECK(worst < 1e-4);
    }
  }
}
