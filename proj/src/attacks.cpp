#include "rlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rlab {

const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cospgd: return "cospgd";
  }
  return "?";
}

AttackKind attack_kind_from_name(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "cospgd") return AttackKind::cospgd;
  throw std::invalid_argument("unknown attack kind '" + s + "'");
}

template <typename T>
void AttackConfig<T>::validate() const {
  if (!(epsilon > T(0) && epsilon <= T(1)))
    throw std::invalid_argument("attack: epsilon must be in (0, 1]");
  if (!(alpha > T(0))) throw std::invalid_argument("attack: alpha must be > 0");
  if (iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
  if (kind == AttackKind::fgsm && (iterations != 1 || alpha != epsilon))
    throw std::invalid_argument(
        "attack: fgsm requires iterations == 1 and alpha == epsilon");
}

template <typename T>
void project_linf(std::span<T> delta, T epsilon) {
  if (!(epsilon > T(0))) throw std::invalid_argument("project_linf: epsilon must be > 0");
  for (T& d : delta) d = std::clamp(d, -epsilon, epsilon);
}

template <typename T>
void clip_range(std::span<T> y) {
  for (T& v : y) v = std::clamp(v, T(0), T(1));
}

template <typename T>
T cossim(std::span<const T> u, std::span<const T> v) {
  T dot = T(0), nu = T(0), nv = T(0);
  for (size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

template <typename T>
std::vector<T> cossim_weights(std::span<const T> pred, std::span<const T> target,
                              const Shape& shape) {
  if (shape.size() != 4)
    throw std::invalid_argument("cossim_weights: expected NxCxHxW, got " +
                                shape_str(shape));
  const int N = shape[0], C = shape[1];
  const int64_t HW = static_cast<int64_t>(shape[2]) * shape[3];
  std::vector<T> w(static_cast<size_t>(N) * HW);
  std::vector<T> u(C), v(C);
  for (int n = 0; n < N; ++n) {
    const T* pp = pred.data() + static_cast<int64_t>(n) * C * HW;
    const T* pt = target.data() + static_cast<int64_t>(n) * C * HW;
    for (int64_t s = 0; s < HW; ++s) {
      // channel softmax of both vectors, then cosine similarity
      auto softmax_lane = [&](const T* base, std::vector<T>& out) {
        T m = base[s];
        for (int c = 1; c < C; ++c) m = std::max(m, base[c * HW + s]);
        T sum = T(0);
        for (int c = 0; c < C; ++c) {
          out[c] = std::exp(base[c * HW + s] - m);
          sum += out[c];
        }
        for (int c = 0; c < C; ++c) out[c] /= sum;
      };
      softmax_lane(pp, u);
      softmax_lane(pt, v);
      w[static_cast<int64_t>(n) * HW + s] = cossim<T>(u, v);
    }
  }
  return w;
}

namespace {

template <typename T>
T sgn(T x) {
  return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));  // sign(0) = 0
}

template <typename T>
void check_range01(std::span<const T> v, const char* what) {
  for (T x : v)
    if (!(x >= T(0) && x <= T(1)))
      throw std::invalid_argument(std::string("attack: ") + what +
                                  " must lie in [0, 1]");
}

// Shared iterate. FGSM is this loop with iterations=1 and alpha=epsilon; the
// CosPGD objective only differs by the detached per-pixel weights.
template <typename T>
AttackResult<T> attack_core(const ForwardFn<T>& forward, std::span<const T> y_clean,
                            std::span<const T> x, const Shape& shape, T epsilon,
                            T alpha, int iterations, bool cos_weighted,
                            bool unit_weights, bool random_start, uint64_t seed) {
  const int64_t n = numel(shape);
  if (static_cast<int64_t>(y_clean.size()) != n ||
      static_cast<int64_t>(x.size()) != n)
    throw std::invalid_argument("attack: y_clean/x size does not match shape " +
                                shape_str(shape));
  check_range01(y_clean, "y_clean");
  check_range01(x, "x");

  AttackResult<T> res;
  std::vector<T> y_adv(y_clean.begin(), y_clean.end());
  if (random_start) {
    Rng rng(mix_seed(seed, 0x5eedu));
    for (int64_t i = 0; i < n; ++i) {
      T d = static_cast<T>(rng.uniform(-static_cast<double>(epsilon),
                                       static_cast<double>(epsilon)));
      y_adv[i] = std::clamp(y_clean[i] + d, T(0), T(1));
    }
  }
  res.loss_trace.reserve(iterations + 1);
  res.zero_grad_fraction.reserve(iterations);

  auto build_loss = [&](Graph<T>& g, Tensor<T> yt) {
    Tensor<T> pred = forward(g, yt);
    if (pred.shape() != shape)
      throw std::invalid_argument("attack: forward output shape " +
                                  shape_str(pred.shape()) + " != input shape " +
                                  shape_str(shape));
    Tensor<T> target = g.leaf(shape, std::vector<T>(x.begin(), x.end()), false);
    Tensor<T> e = sub(pred, target);
    Tensor<T> se = mul(e, e);
    if (cos_weighted) {
      std::vector<T> w;
      if (unit_weights)
        w.assign(static_cast<size_t>(shape[0]) * shape[2] * shape[3], T(1));
      else
        w = cossim_weights<T>(pred.value(), x, shape);
      Tensor<T> wt = g.leaf({shape[0], 1, shape[2], shape[3]}, std::move(w), false);
      se = mul(wt, se);
    }
    return reduce_mean_all(se);
  };

  for (int t = 0; t < iterations; ++t) {
    Graph<T> g;
    Tensor<T> yt = g.leaf(shape, y_adv, true);
    Tensor<T> loss = build_loss(g, yt);
    const T lv = loss.value()[0];
    if (!std::isfinite(static_cast<double>(lv)))
      throw std::runtime_error("attack: non-finite loss at iteration " +
                               std::to_string(t));
    res.loss_trace.push_back(lv);
    g.backward(loss);
    std::span<const T> grad = g.grad(yt.id);

    int64_t zeros = 0;
    for (int64_t i = 0; i < n; ++i)
      if (grad[i] == T(0)) ++zeros;
    res.zero_grad_fraction.push_back(static_cast<T>(zeros) / static_cast<T>(n));

    for (int64_t i = 0; i < n; ++i) {
      T step = y_adv[i] + alpha * sgn(grad[i]);
      T d = std::clamp(step - y_clean[i], -epsilon, epsilon);
      y_adv[i] = std::clamp(y_clean[i] + d, T(0), T(1));
    }
  }

  {
    Graph<T> g;
    Tensor<T> yt = g.leaf(shape, y_adv, false);
    Tensor<T> loss = build_loss(g, yt);
    const T lv = loss.value()[0];
    if (!std::isfinite(static_cast<double>(lv)))
      throw std::runtime_error("attack: non-finite final loss");
    res.loss_trace.push_back(lv);
  }

  res.y_adv = std::move(y_adv);
  res.delta.resize(n);
  for (int64_t i = 0; i < n; ++i) res.delta[i] = res.y_adv[i] - y_clean[i];
  return res;
}

}  // namespace

template <typename T>
AttackResult<T> fgsm_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                            std::span<const T> x, const Shape& shape, T epsilon) {
  if (!(epsilon >= T(0) && epsilon <= T(1)))
    throw std::invalid_argument("fgsm_attack: epsilon must be in [0, 1]");
  if (epsilon == T(0)) {
    // degenerate budget: no perturbation
    AttackResult<T> res;
    res.y_adv.assign(y_clean.begin(), y_clean.end());
    res.delta.assign(y_clean.size(), T(0));
    return res;
  }
  return attack_core(forward, y_clean, x, shape, epsilon, epsilon, 1, false, false,
                     false, 0);
}

template <typename T>
AttackResult<T> pgd_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                           std::span<const T> x, const Shape& shape,
                           const AttackConfig<T>& config) {
  if (config.kind != AttackKind::pgd)
    throw std::invalid_argument("pgd_attack: config.kind must be pgd");
  config.validate();
  return attack_core(forward, y_clean, x, shape, config.epsilon, config.alpha,
                     config.iterations, false, false, config.random_start,
                     config.seed);
}

template <typename T>
AttackResult<T> cospgd_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                              std::span<const T> x, const Shape& shape,
                              const AttackConfig<T>& config) {
  if (config.kind != AttackKind::cospgd)
    throw std::invalid_argument("cospgd_attack: config.kind must be cospgd");
  config.validate();
  return attack_core(forward, y_clean, x, shape, config.epsilon, config.alpha,
                     config.iterations, true, config.cospgd_unit_weights,
                     config.random_start, config.seed);
}

template <typename T>
AttackResult<T> run_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                           std::span<const T> x, const Shape& shape,
                           const AttackConfig<T>& config) {
  config.validate();
  switch (config.kind) {
    case AttackKind::fgsm:
      return fgsm_attack(forward, y_clean, x, shape, config.epsilon);
    case AttackKind::pgd:
      return pgd_attack(forward, y_clean, x, shape, config);
    case AttackKind::cospgd:
      return cospgd_attack(forward, y_clean, x, shape, config);
  }
  throw std::logic_error("run_attack: unreachable");
}

template <typename T>
ForwardFn<T> model_forward_fn(const Model<T>& model) {
  const Model<T>* m = &model;
  return [m](Graph<T>& g, Tensor<T> y) {
    return model_forward(g, *m, y, /*params_require_grad=*/false);
  };
}

template <typename T>
AttackResult<T> run_attack(const Model<T>& model, std::span<const T> y_clean,
                           std::span<const T> x, const Shape& shape,
                           const AttackConfig<T>& config) {
  return run_attack(model_forward_fn(model), y_clean, x, shape, config);
}

#define RLAB_INSTANTIATE_ATTACKS(T)                                                \
  template struct AttackConfig<T>;                                                 \
  template void project_linf<T>(std::span<T>, T);                                  \
  template void clip_range<T>(std::span<T>);                                       \
  template T cossim<T>(std::span<const T>, std::span<const T>);                    \
  template std::vector<T> cossim_weights<T>(std::span<const T>,                    \
                                            std::span<const T>, const Shape&);     \
  template AttackResult<T> fgsm_attack<T>(const ForwardFn<T>&, std::span<const T>, \
                                          std::span<const T>, const Shape&, T);    \
  template AttackResult<T> pgd_attack<T>(const ForwardFn<T>&, std::span<const T>,  \
                                         std::span<const T>, const Shape&,         \
                                         const AttackConfig<T>&);                  \
  template AttackResult<T> cospgd_attack<T>(                                       \
      const ForwardFn<T>&, std::span<const T>, std::span<const T>, const Shape&,   \
      const AttackConfig<T>&);                                                     \
  template AttackResult<T> run_attack<T>(const ForwardFn<T>&, std::span<const T>,  \
                                         std::span<const T>, const Shape&,         \
                                         const AttackConfig<T>&);                  \
  template AttackResult<T> run_attack<T>(const Model<T>&, std::span<const T>,      \
                                         std::span<const T>, const Shape&,         \
                                         const AttackConfig<T>&);                  \
  template ForwardFn<T> model_forward_fn<T>(const Model<T>&);

RLAB_INSTANTIATE_ATTACKS(float)
RLAB_INSTANTIATE_ATTACKS(double)

#undef RLAB_INSTANTIATE_ATTACKS

}  // namespace rlab
