#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rlab/nets.hpp"
#include "rlab/tensor.hpp"

namespace rlab {

enum class AttackKind { fgsm, pgd, cospgd };

const char* attack_kind_name(AttackKind k);
AttackKind attack_kind_from_name(const std::string& s);

template <typename T>
struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  T epsilon = T(8) / T(255);  // l_inf budget in intensity units
  T alpha = T(0.01);          // step size
  int iterations = 1;
  uint64_t seed = 0;            // reserved for the optional random start
  bool random_start = false;   // off by default: delta_0 = 0
  bool cospgd_unit_weights = false;  // test hook: forces all weights to 1

  void validate() const;
};

template <typename T>
struct AttackResult {
  std::vector<T> delta;       // final perturbation, max|delta| <= epsilon
  std::vector<T> y_adv;       // clip(y_clean + delta), in [0, 1]
  std::vector<T> loss_trace;  // loss at y_adv_0 (== y_clean) and after each step
  std::vector<T> zero_grad_fraction;  // per step: share of exactly-zero input grads
};

// Forward map under attack; must mount any parameters itself (untracked).
template <typename T>
using ForwardFn = std::function<Tensor<T>(Graph<T>&, Tensor<T>)>;

// Elementwise clamp to [-epsilon, epsilon]; idempotent.
template <typename T>
void project_linf(std::span<T> delta, T epsilon);

// Elementwise clamp to the valid intensity range [0, 1]; idempotent.
template <typename T>
void clip_range(std::span<T> y);

// Per-pixel cosine similarity between the channel-softmaxed prediction and
// target. Returns one weight in (0, 1] per (n, h, w); weights are detached
// (no gradient flows through them).
template <typename T>
std::vector<T> cossim_weights(std::span<const T> pred, std::span<const T> target,
                              const Shape& shape);

// Raw cosine-similarity kernel between two vectors (no softmax).
template <typename T>
T cossim(std::span<const T> u, std::span<const T> v);

template <typename T>
AttackResult<T> fgsm_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                            std::span<const T> x, const Shape& shape, T epsilon);

template <typename T>
AttackResult<T> pgd_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                           std::span<const T> x, const Shape& shape,
                           const AttackConfig<T>& config);

template <typename T>
AttackResult<T> cospgd_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                              std::span<const T> x, const Shape& shape,
                              const AttackConfig<T>& config);

// Dispatch on config.kind.
template <typename T>
AttackResult<T> run_attack(const ForwardFn<T>& forward, std::span<const T> y_clean,
                           std::span<const T> x, const Shape& shape,
                           const AttackConfig<T>& config);

// Convenience overload attacking a model (parameters stay frozen).
template <typename T>
AttackResult<T> run_attack(const Model<T>& model, std::span<const T> y_clean,
                           std::span<const T> x, const Shape& shape,
                           const AttackConfig<T>& config);

template <typename T>
ForwardFn<T> model_forward_fn(const Model<T>& model);

}  // namespace rlab
