#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "rlab/common.hpp"

namespace rlab {

// Reverse-mode tensor engine. A Graph is an eagerly-evaluated tape: every op
// computes its output immediately and records how to push gradients back.
// Tensors are cheap handles (graph pointer + node id); node storage lives in
// the graph. Canonical image layout is N x C x H x W throughout.

template <typename T>
class Graph;

template <typename T>
struct Tensor {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Shape& shape() const;
  int64_t numel() const;
  std::span<const T> value() const;
  std::span<T> value_mut();
  std::span<const T> grad() const;  // empty until backward reaches this node
  bool requires_grad() const;
};

template <typename T>
class Graph {
 public:
  struct Options {
    bool check_finite = false;  // scan every op output for NaN/Inf
  };

  Graph() = default;
  explicit Graph(Options opts) : opts_(opts) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor<T> leaf(Shape shape, std::vector<T> values, bool requires_grad = false);
  Tensor<T> constant(Shape shape, T fill);
  Tensor<T> scalar(T v) { return leaf({}, {v}, false); }

  // Populates grads of every node reachable from `loss` (which must be a
  // scalar). By default all gradients are reset first; with accumulate=true,
  // existing leaf gradients are kept and new contributions added.
  void backward(const Tensor<T>& loss, bool accumulate = false);

  size_t op_count() const { return ops_.size(); }
  size_t node_count() const { return nodes_.size(); }
  // number of op backward functions invoked by the last backward() call
  size_t last_backward_visits() const { return last_visits_; }
  void dump_edges(std::ostream& os) const;

  // --- op implementation interface ---
  // Ops call make_result (allocates the output node, propagates requires_grad
  // from the inputs, runs the finite check) and then add_op with a backward
  // closure that typically captures the fresh output id.
  using BackwardFn = std::function<void(Graph<T>&)>;
  Tensor<T> make_result(Shape out_shape, std::vector<T> out_values,
                        std::initializer_list<int> inputs, const char* kind);
  void add_op(const char* kind, std::vector<int> inputs, int output, BackwardFn fn);
  // Zero-initialized gradient buffer for node `id`; empty span when the node
  // does not require gradients.
  std::span<T> grad_accum(int id);

  const Shape& shape(int id) const { return nodes_[id].shape; }
  std::span<const T> value(int id) const { return nodes_[id].value; }
  std::span<T> value_mut(int id) { return nodes_[id].value; }
  std::span<const T> grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
  };
  struct OpRec {
    const char* kind;
    std::vector<int> inputs;
    int output;
    BackwardFn backward;
  };

  int add_node(Shape shape, std::vector<T> values, bool requires_grad, bool is_leaf);

  std::vector<Node> nodes_;
  std::vector<OpRec> ops_;
  Options opts_;
  size_t last_visits_ = 0;
};

// ---- ops ----

struct Conv2dSpec {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

// Cross-correlation. input NxCxHxW, weight Ox(C/groups)xkHxkW, bias O.
template <typename T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> weight, std::optional<Tensor<T>> bias,
                 Conv2dSpec spec = {});

template <typename T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> weight, Tensor<T> bias,
                 Conv2dSpec spec = {}) {
  return conv2d(input, weight, std::optional<Tensor<T>>(bias), spec);
}

template <typename T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> weight, Conv2dSpec spec = {}) {
  return conv2d(input, weight, std::optional<Tensor<T>>(), spec);
}

// Normalizes across the channel axis independently at every (n, h, w).
template <typename T>
Tensor<T> layer_norm_channels(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                              T eps = T(1e-6));

enum class Act { relu, gelu, sigmoid };

template <typename T>
Tensor<T> activation(Act kind, Tensor<T> x);

// First channel half times second channel half: NxCxHxW -> Nx(C/2)xHxW.
template <typename T>
Tensor<T> simple_gate(Tensor<T> x);

template <typename T>
Tensor<T> softmax_axis(Tensor<T> x, int axis);

template <typename T>
Tensor<T> global_avg_pool(Tensor<T> x);

enum class Shuffle { down, up };

// down: NxCxHxW -> NxC*r^2x(H/r)x(W/r); up is its exact inverse.
template <typename T>
Tensor<T> pixel_shuffle(Tensor<T> x, int factor, Shuffle dir);

// a [..., M, K] x b [..., K, N] -> [..., M, N]; leading dims broadcast.
// trans flags interpret the stored trailing two dims as transposed.
template <typename T>
Tensor<T> matmul_batched(Tensor<T> a, Tensor<T> b, bool trans_a = false,
                         bool trans_b = false);

template <typename T> Tensor<T> add(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> sub(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> mul(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> divide(Tensor<T> a, Tensor<T> b);

template <typename T> Tensor<T> sqrt_elem(Tensor<T> x);  // pre: x >= 0
template <typename T> Tensor<T> scale(Tensor<T> x, T c);
template <typename T> Tensor<T> add_scalar(Tensor<T> x, T c);

template <typename T>
Tensor<T> reduce_sum(Tensor<T> x, std::vector<int> axes, bool keepdims = false);
template <typename T>
Tensor<T> reduce_mean(Tensor<T> x, std::vector<int> axes, bool keepdims = false);
template <typename T> Tensor<T> reduce_sum_all(Tensor<T> x);
template <typename T> Tensor<T> reduce_mean_all(Tensor<T> x);

template <typename T> Tensor<T> reshape(Tensor<T> x, Shape new_shape);

// [begin, end) along the channel axis of an NxCxHxW tensor.
template <typename T> Tensor<T> slice_channels(Tensor<T> x, int begin, int end);

// mean((pred - target)^2) over all elements
template <typename T> Tensor<T> mse_loss(Tensor<T> pred, Tensor<T> target);

// ---- gradient verification ----

// Central differences (f(x+h e_i) - f(x-h e_i)) / (2h) per element.
template <typename T>
std::vector<T> finite_difference_gradient(
    const std::function<T(std::span<const T>)>& f, std::span<const T> x, T h);

// max_i |a_i - b_i| / max(||a||_inf, ||b||_inf, tiny)
template <typename T>
T gradcheck_rel_err(std::span<const T> analytic, std::span<const T> numeric);

Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace rlab
