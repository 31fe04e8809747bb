#include "rlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>

namespace rlab {

// ---- common helpers ----

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::vector<int64_t> strides_for(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  require(a >= 0 && a < rank, std::string(op) + ": axis " + std::to_string(axis) +
                                  " out of range for rank " + std::to_string(rank));
  return a;
}

// Row-major odometer over an output shape driving two broadcast input offsets.
struct BcastIter {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;

  BcastIter(const Shape& sa, const Shape& sb, const Shape& so) : out(so) {
    int rank = static_cast<int>(so.size());
    stride_a.assign(rank, 0);
    stride_b.assign(rank, 0);
    auto fill = [&](const Shape& s, std::vector<int64_t>& stride) {
      auto st = strides_for(s);
      int off = rank - static_cast<int>(s.size());
      for (size_t i = 0; i < s.size(); ++i)
        stride[off + i] = (s[i] == 1 && so[off + i] != 1) ? 0 : st[i];
    };
    fill(sa, stride_a);
    fill(sb, stride_b);
  }

  template <typename F>
  void for_each(F&& visit) const {
    int rank = static_cast<int>(out.size());
    int64_t total = numel(out);
    std::vector<int> idx(rank, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < total; ++i) {
      visit(i, oa, ob);
      for (int d = rank - 1; d >= 0; --d) {
        oa += stride_a[d];
        ob += stride_b[d];
        if (++idx[d] < out[d]) break;
        oa -= stride_a[d] * out[d];
        ob -= stride_b[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  int rank = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(rank);
  for (int i = 0; i < rank; ++i) {
    int da = i < rank - static_cast<int>(a.size())
                 ? 1
                 : a[i - (rank - static_cast<int>(a.size()))];
    int db = i < rank - static_cast<int>(b.size())
                 ? 1
                 : b[i - (rank - static_cast<int>(b.size()))];
    if (da != db && da != 1 && db != 1)
      require(false, "broadcast: incompatible shapes " + shape_str(a) + " and " +
                         shape_str(b) + " at dim " + std::to_string(i));
    out[i] = std::max(da, db);
  }
  return out;
}

// ---- Tensor handle ----

template <typename T> const Shape& Tensor<T>::shape() const { return graph->shape(id); }
template <typename T> int64_t Tensor<T>::numel() const { return rlab::numel(shape()); }
template <typename T> std::span<const T> Tensor<T>::value() const { return graph->value(id); }
template <typename T> std::span<T> Tensor<T>::value_mut() { return graph->value_mut(id); }
template <typename T> std::span<const T> Tensor<T>::grad() const { return graph->grad(id); }
template <typename T> bool Tensor<T>::requires_grad() const { return graph->requires_grad(id); }

// ---- Graph ----

template <typename T>
int Graph<T>::add_node(Shape shape, std::vector<T> values, bool requires_grad,
                       bool is_leaf) {
  require(static_cast<int64_t>(values.size()) == rlab::numel(shape),
          "tensor: data size " + std::to_string(values.size()) +
              " does not match shape " + shape_str(shape));
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = requires_grad;
  n.is_leaf = is_leaf;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
Tensor<T> Graph<T>::leaf(Shape shape, std::vector<T> values, bool requires_grad) {
  int id = add_node(std::move(shape), std::move(values), requires_grad, true);
  return {this, id};
}

template <typename T>
Tensor<T> Graph<T>::constant(Shape shape, T fill) {
  std::vector<T> v(static_cast<size_t>(rlab::numel(shape)), fill);
  return leaf(std::move(shape), std::move(v), false);
}

template <typename T>
Tensor<T> Graph<T>::make_result(Shape out_shape, std::vector<T> out_values,
                                std::initializer_list<int> inputs, const char* kind) {
  bool rg = false;
  for (int in : inputs) rg = rg || nodes_[in].requires_grad;
  if (opts_.check_finite) {
    for (T v : out_values)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error(std::string("non-finite value in output of op '") +
                                 kind + "'");
  }
  int out = add_node(std::move(out_shape), std::move(out_values), rg, false);
  return {this, out};
}

template <typename T>
void Graph<T>::add_op(const char* kind, std::vector<int> inputs, int output,
                      BackwardFn fn) {
  ops_.push_back(OpRec{kind, std::move(inputs), output, std::move(fn)});
}

template <typename T>
std::span<T> Graph<T>::grad_accum(int id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss, bool accumulate) {
  require(loss.graph == this, "backward: loss belongs to a different graph");
  require(rlab::numel(nodes_[loss.id].shape) == 1,
          "backward: loss must be scalar, got shape " +
              shape_str(nodes_[loss.id].shape));
  for (Node& n : nodes_) {
    if (!(accumulate && n.is_leaf)) n.grad.clear();
  }
  last_visits_ = 0;
  if (!nodes_[loss.id].requires_grad) return;

  std::span<T> lg = grad_accum(loss.id);
  lg[0] += T(1);

  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node& out = nodes_[it->output];
    if (!out.requires_grad || out.grad.empty()) continue;
    it->backward(*this);
    ++last_visits_;
  }
}

template <typename T>
void Graph<T>::dump_edges(std::ostream& os) const {
  for (size_t i = 0; i < ops_.size(); ++i) {
    const OpRec& op = ops_[i];
    os << "op " << i << ": " << op.kind << " (";
    for (size_t j = 0; j < op.inputs.size(); ++j) {
      if (j) os << ", ";
      os << op.inputs[j];
    }
    os << ") -> " << op.output << " " << shape_str(nodes_[op.output].shape) << "\n";
  }
}

// ---- elementwise binary ops with numpy-style broadcasting ----

namespace {

enum class BinOp { add, sub, mul, div };

template <typename T>
Tensor<T> binary_op(const char* kind, BinOp op, Tensor<T> a, Tensor<T> b) {
  require(a.graph == b.graph, std::string(kind) + ": operands from different graphs");
  Graph<T>& g = *a.graph;
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  Shape so = broadcast_shapes(sa, sb);
  std::vector<T> out(static_cast<size_t>(numel(so)));

  const T* pa = g.value(a.id).data();
  const T* pb = g.value(b.id).data();
  const bool same = sa == sb;
  if (same) {
    int64_t n = static_cast<int64_t>(out.size());
    switch (op) {
      case BinOp::add: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; break;
      case BinOp::sub: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; break;
      case BinOp::mul: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; break;
      case BinOp::div: for (int64_t i = 0; i < n; ++i) out[i] = pa[i] / pb[i]; break;
    }
  } else {
    BcastIter it(sa, sb, so);
    switch (op) {
      case BinOp::add: it.for_each([&](int64_t i, int64_t oa, int64_t ob) { out[i] = pa[oa] + pb[ob]; }); break;
      case BinOp::sub: it.for_each([&](int64_t i, int64_t oa, int64_t ob) { out[i] = pa[oa] - pb[ob]; }); break;
      case BinOp::mul: it.for_each([&](int64_t i, int64_t oa, int64_t ob) { out[i] = pa[oa] * pb[ob]; }); break;
      case BinOp::div: it.for_each([&](int64_t i, int64_t oa, int64_t ob) { out[i] = pa[oa] / pb[ob]; }); break;
    }
  }

  Tensor<T> res = g.make_result(so, std::move(out), {a.id, b.id}, kind);
  const int aid = a.id, bid = b.id, oid = res.id;
  g.add_op(kind, {aid, bid}, oid, [kind, op, aid, bid, oid, sa, sb, so, same](Graph<T>& gr) {
    (void)kind;
    std::span<const T> dy = gr.grad(oid);
    std::span<T> da = gr.grad_accum(aid);
    std::span<T> db = gr.grad_accum(bid);
    const T* va = gr.value(aid).data();
    const T* vb = gr.value(bid).data();
    if (same) {
      int64_t n = static_cast<int64_t>(dy.size());
      switch (op) {
        case BinOp::add:
          if (!da.empty()) for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
          if (!db.empty()) for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
          break;
        case BinOp::sub:
          if (!da.empty()) for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
          if (!db.empty()) for (int64_t i = 0; i < n; ++i) db[i] -= dy[i];
          break;
        case BinOp::mul:
          if (!da.empty()) for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * vb[i];
          if (!db.empty()) for (int64_t i = 0; i < n; ++i) db[i] += dy[i] * va[i];
          break;
        case BinOp::div:
          if (!da.empty()) for (int64_t i = 0; i < n; ++i) da[i] += dy[i] / vb[i];
          if (!db.empty()) for (int64_t i = 0; i < n; ++i) db[i] -= dy[i] * va[i] / (vb[i] * vb[i]);
          break;
      }
    } else {
      BcastIter it(sa, sb, so);
      bool wa = !da.empty(), wb = !db.empty();
      switch (op) {
        case BinOp::add:
          it.for_each([&](int64_t i, int64_t oa, int64_t ob) {
            if (wa) da[oa] += dy[i];
            if (wb) db[ob] += dy[i];
          });
          break;
        case BinOp::sub:
          it.for_each([&](int64_t i, int64_t oa, int64_t ob) {
            if (wa) da[oa] += dy[i];
            if (wb) db[ob] -= dy[i];
          });
          break;
        case BinOp::mul:
          it.for_each([&](int64_t i, int64_t oa, int64_t ob) {
            if (wa) da[oa] += dy[i] * vb[ob];
            if (wb) db[ob] += dy[i] * va[oa];
          });
          break;
        case BinOp::div:
          it.for_each([&](int64_t i, int64_t oa, int64_t ob) {
            if (wa) da[oa] += dy[i] / vb[ob];
            if (wb) db[ob] -= dy[i] * va[oa] / (vb[ob] * vb[ob]);
          });
          break;
      }
    }
  });
  return res;
}

}  // namespace

template <typename T> Tensor<T> add(Tensor<T> a, Tensor<T> b) { return binary_op("add", BinOp::add, a, b); }
template <typename T> Tensor<T> sub(Tensor<T> a, Tensor<T> b) { return binary_op("sub", BinOp::sub, a, b); }
template <typename T> Tensor<T> mul(Tensor<T> a, Tensor<T> b) { return binary_op("mul", BinOp::mul, a, b); }
template <typename T> Tensor<T> divide(Tensor<T> a, Tensor<T> b) { return binary_op("div", BinOp::div, a, b); }

// ---- unary elementwise ----

template <typename T>
Tensor<T> activation(Act kind, Tensor<T> x) {
  Graph<T>& g = *x.graph;
  std::span<const T> v = x.value();
  std::vector<T> out(v.size());
  const T inv_sqrt2 = T(0.7071067811865475244);
  switch (kind) {
    case Act::relu:
      for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
      break;
    case Act::gelu:
      // exact Gaussian-CDF form: x * Phi(x)
      for (size_t i = 0; i < v.size(); ++i)
        out[i] = T(0.5) * v[i] * (T(1) + std::erf(v[i] * inv_sqrt2));
      break;
    case Act::sigmoid:
      for (size_t i = 0; i < v.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-v[i]));
      break;
  }
  const char* name = kind == Act::relu ? "relu" : (kind == Act::gelu ? "gelu" : "sigmoid");
  Tensor<T> res = g.make_result(x.shape(), std::move(out), {x.id}, name);
  const int xid = x.id, oid = res.id;
  g.add_op(name, {xid}, oid, [kind, xid, oid, inv_sqrt2](Graph<T>& gr) {
    std::span<const T> dy = gr.grad(oid);
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    const T* vx = gr.value(xid).data();
    const T* vy = gr.value(oid).data();
    const T inv_sqrt2pi = T(0.3989422804014326779);
    switch (kind) {
      case Act::relu:
        for (size_t i = 0; i < dy.size(); ++i)
          if (vx[i] > T(0)) dx[i] += dy[i];  // subgradient at 0 is 0
        break;
      case Act::gelu:
        for (size_t i = 0; i < dy.size(); ++i) {
          T phi_big = T(0.5) * (T(1) + std::erf(vx[i] * inv_sqrt2));
          T phi_small = inv_sqrt2pi * std::exp(T(-0.5) * vx[i] * vx[i]);
          dx[i] += dy[i] * (phi_big + vx[i] * phi_small);
        }
        break;
      case Act::sigmoid:
        for (size_t i = 0; i < dy.size(); ++i)
          dx[i] += dy[i] * vy[i] * (T(1) - vy[i]);
        break;
    }
  });
  return res;
}

template <typename T>
Tensor<T> sqrt_elem(Tensor<T> x) {
  Graph<T>& g = *x.graph;
  std::span<const T> v = x.value();
  std::vector<T> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = std::sqrt(v[i]);
  Tensor<T> res = g.make_result(x.shape(), std::move(out), {x.id}, "sqrt");
  const int xid = x.id, oid = res.id;
  g.add_op("sqrt", {xid}, oid, [xid, oid](Graph<T>& gr) {
    std::span<const T> dy = gr.grad(oid);
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    const T* vy = gr.value(oid).data();
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * T(0.5) / vy[i];
  });
  return res;
}

template <typename T>
Tensor<T> scale(Tensor<T> x, T c) {
  Graph<T>& g = *x.graph;
  std::span<const T> v = x.value();
  std::vector<T> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = c * v[i];
  Tensor<T> res = g.make_result(x.shape(), std::move(out), {x.id}, "scale");
  const int xid = x.id, oid = res.id;
  g.add_op("scale", {xid}, oid, [xid, oid, c](Graph<T>& gr) {
    std::span<const T> dy = gr.grad(oid);
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += c * dy[i];
  });
  return res;
}

template <typename T>
Tensor<T> add_scalar(Tensor<T> x, T c) {
  Graph<T>& g = *x.graph;
  std::span<const T> v = x.value();
  std::vector<T> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] + c;
  Tensor<T> res = g.make_result(x.shape(), std::move(out), {x.id}, "add_scalar");
  const int xid = x.id, oid = res.id;
  g.add_op("add_scalar", {xid}, oid, [xid, oid](Graph<T>& gr) {
    std::span<const T> dy = gr.grad(oid);
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
  return res;
}

// ---- conv2d ----

namespace {

struct ConvDims {
  int N, Cin, H, W, Cout, Cpg, Opg, kH, kW, Ho, Wo;
};

template <typename T>
ConvDims conv_check(const Shape& xs, const Shape& ws,
                    const std::optional<Tensor<T>>& bias, const Conv2dSpec& spec) {
  require(xs.size() == 4, "conv2d: input must be NxCxHxW, got " + shape_str(xs));
  require(ws.size() == 4, "conv2d: weight must be Ox(C/groups)xkHxkW, got " + shape_str(ws));
  ConvDims d;
  d.N = xs[0]; d.Cin = xs[1]; d.H = xs[2]; d.W = xs[3];
  d.Cout = ws[0]; d.kH = ws[2]; d.kW = ws[3];
  require(spec.groups >= 1, "conv2d: groups must be >= 1");
  require(d.Cin % spec.groups == 0,
          "conv2d: input channels (" + std::to_string(d.Cin) +
              ") not divisible by groups (" + std::to_string(spec.groups) + ")");
  require(d.Cout % spec.groups == 0,
          "conv2d: output channels (" + std::to_string(d.Cout) +
              ") not divisible by groups (" + std::to_string(spec.groups) + ")");
  d.Cpg = d.Cin / spec.groups;
  d.Opg = d.Cout / spec.groups;
  require(ws[1] == d.Cpg, "conv2d: weight dim 1 is " + std::to_string(ws[1]) +
                              ", expected input channels per group " +
                              std::to_string(d.Cpg));
  require(spec.stride >= 1 && spec.padding >= 0, "conv2d: bad stride/padding");
  require(d.H + 2 * spec.padding >= d.kH && d.W + 2 * spec.padding >= d.kW,
          "conv2d: kernel " + std::to_string(d.kH) + "x" + std::to_string(d.kW) +
              " does not fit padded input " + std::to_string(d.H + 2 * spec.padding) +
              "x" + std::to_string(d.W + 2 * spec.padding));
  if (bias) {
    const Shape& bs = bias->shape();
    require(bs.size() == 1 && bs[0] == d.Cout,
            "conv2d: bias must have shape [" + std::to_string(d.Cout) + "], got " +
                shape_str(bs));
  }
  d.Ho = (d.H + 2 * spec.padding - d.kH) / spec.stride + 1;
  d.Wo = (d.W + 2 * spec.padding - d.kW) / spec.stride + 1;
  return d;
}

// stride-1 forward: inner loops run over contiguous output rows
template <typename T>
void conv_fwd_s1(const T* x, const T* w, const T* b, T* y, const ConvDims& d, int p) {
  const int64_t xplane = static_cast<int64_t>(d.H) * d.W;
  const int64_t yplane = static_cast<int64_t>(d.Ho) * d.Wo;
  for (int n = 0; n < d.N; ++n) {
    for (int oc = 0; oc < d.Cout; ++oc) {
      const int gi = oc / d.Opg;
      T* yp = y + (static_cast<int64_t>(n) * d.Cout + oc) * yplane;
      const T bv = b ? b[oc] : T(0);
      for (int64_t i = 0; i < yplane; ++i) yp[i] = bv;
      for (int icg = 0; icg < d.Cpg; ++icg) {
        const int ic = gi * d.Cpg + icg;
        const T* xp = x + (static_cast<int64_t>(n) * d.Cin + ic) * xplane;
        const T* wb = w + (static_cast<int64_t>(oc) * d.Cpg + icg) * d.kH * d.kW;
        for (int kh = 0; kh < d.kH; ++kh) {
          for (int kw = 0; kw < d.kW; ++kw) {
            const T wv = wb[kh * d.kW + kw];
            const int ow0 = std::max(0, p - kw);
            const int ow1 = std::min(d.Wo, d.W + p - kw);
            if (ow0 >= ow1) continue;
            for (int oh = 0; oh < d.Ho; ++oh) {
              const int ih = oh - p + kh;
              if (ih < 0 || ih >= d.H) continue;
              const T* xr = xp + static_cast<int64_t>(ih) * d.W + (ow0 - p + kw);
              T* yr = yp + static_cast<int64_t>(oh) * d.Wo + ow0;
              const int len = ow1 - ow0;
              for (int t = 0; t < len; ++t) yr[t] += wv * xr[t];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_input_s1(T* dx, const T* w, const T* dy, const ConvDims& d, int p) {
  const int64_t xplane = static_cast<int64_t>(d.H) * d.W;
  const int64_t yplane = static_cast<int64_t>(d.Ho) * d.Wo;
  for (int n = 0; n < d.N; ++n) {
    for (int oc = 0; oc < d.Cout; ++oc) {
      const int gi = oc / d.Opg;
      const T* dyp = dy + (static_cast<int64_t>(n) * d.Cout + oc) * yplane;
      for (int icg = 0; icg < d.Cpg; ++icg) {
        const int ic = gi * d.Cpg + icg;
        T* dxp = dx + (static_cast<int64_t>(n) * d.Cin + ic) * xplane;
        const T* wb = w + (static_cast<int64_t>(oc) * d.Cpg + icg) * d.kH * d.kW;
        for (int kh = 0; kh < d.kH; ++kh) {
          for (int kw = 0; kw < d.kW; ++kw) {
            const T wv = wb[kh * d.kW + kw];
            const int ow0 = std::max(0, p - kw);
            const int ow1 = std::min(d.Wo, d.W + p - kw);
            if (ow0 >= ow1) continue;
            for (int oh = 0; oh < d.Ho; ++oh) {
              const int ih = oh - p + kh;
              if (ih < 0 || ih >= d.H) continue;
              T* dxr = dxp + static_cast<int64_t>(ih) * d.W + (ow0 - p + kw);
              const T* dyr = dyp + static_cast<int64_t>(oh) * d.Wo + ow0;
              const int len = ow1 - ow0;
              for (int t = 0; t < len; ++t) dxr[t] += wv * dyr[t];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_weight_s1(T* dw, const T* x, const T* dy, const ConvDims& d, int p) {
  const int64_t xplane = static_cast<int64_t>(d.H) * d.W;
  const int64_t yplane = static_cast<int64_t>(d.Ho) * d.Wo;
  for (int n = 0; n < d.N; ++n) {
    for (int oc = 0; oc < d.Cout; ++oc) {
      const int gi = oc / d.Opg;
      const T* dyp = dy + (static_cast<int64_t>(n) * d.Cout + oc) * yplane;
      for (int icg = 0; icg < d.Cpg; ++icg) {
        const int ic = gi * d.Cpg + icg;
        const T* xp = x + (static_cast<int64_t>(n) * d.Cin + ic) * xplane;
        T* wb = dw + (static_cast<int64_t>(oc) * d.Cpg + icg) * d.kH * d.kW;
        for (int kh = 0; kh < d.kH; ++kh) {
          for (int kw = 0; kw < d.kW; ++kw) {
            const int ow0 = std::max(0, p - kw);
            const int ow1 = std::min(d.Wo, d.W + p - kw);
            if (ow0 >= ow1) continue;
            T acc = T(0);
            for (int oh = 0; oh < d.Ho; ++oh) {
              const int ih = oh - p + kh;
              if (ih < 0 || ih >= d.H) continue;
              const T* xr = xp + static_cast<int64_t>(ih) * d.W + (ow0 - p + kw);
              const T* dyr = dyp + static_cast<int64_t>(oh) * d.Wo + ow0;
              const int len = ow1 - ow0;
              T rowacc = T(0);
              for (int t = 0; t < len; ++t) rowacc += xr[t] * dyr[t];
              acc += rowacc;
            }
            wb[kh * d.kW + kw] += acc;
          }
        }
      }
    }
  }
}

// generic stride path (rarely used; the networks are stride-1 throughout)
template <typename T>
void conv_fwd_generic(const T* x, const T* w, const T* b, T* y, const ConvDims& d,
                      int stride, int p) {
  const int64_t xplane = static_cast<int64_t>(d.H) * d.W;
  const int64_t yplane = static_cast<int64_t>(d.Ho) * d.Wo;
  for (int n = 0; n < d.N; ++n)
    for (int oc = 0; oc < d.Cout; ++oc) {
      const int gi = oc / d.Opg;
      T* yp = y + (static_cast<int64_t>(n) * d.Cout + oc) * yplane;
      for (int oh = 0; oh < d.Ho; ++oh)
        for (int ow = 0; ow < d.Wo; ++ow) {
          T acc = b ? b[oc] : T(0);
          for (int icg = 0; icg < d.Cpg; ++icg) {
            const int ic = gi * d.Cpg + icg;
            const T* xp = x + (static_cast<int64_t>(n) * d.Cin + ic) * xplane;
            const T* wb = w + (static_cast<int64_t>(oc) * d.Cpg + icg) * d.kH * d.kW;
            for (int kh = 0; kh < d.kH; ++kh) {
              const int ih = oh * stride - p + kh;
              if (ih < 0 || ih >= d.H) continue;
              for (int kw = 0; kw < d.kW; ++kw) {
                const int iw = ow * stride - p + kw;
                if (iw < 0 || iw >= d.W) continue;
                acc += wb[kh * d.kW + kw] * xp[static_cast<int64_t>(ih) * d.W + iw];
              }
            }
          }
          yp[static_cast<int64_t>(oh) * d.Wo + ow] = acc;
        }
    }
}

template <typename T>
void conv_bwd_generic(T* dx, T* dw, T* db, const T* x, const T* w, const T* dy,
                      const ConvDims& d, int stride, int p) {
  const int64_t xplane = static_cast<int64_t>(d.H) * d.W;
  const int64_t yplane = static_cast<int64_t>(d.Ho) * d.Wo;
  for (int n = 0; n < d.N; ++n)
    for (int oc = 0; oc < d.Cout; ++oc) {
      const int gi = oc / d.Opg;
      const T* dyp = dy + (static_cast<int64_t>(n) * d.Cout + oc) * yplane;
      for (int oh = 0; oh < d.Ho; ++oh)
        for (int ow = 0; ow < d.Wo; ++ow) {
          const T g = dyp[static_cast<int64_t>(oh) * d.Wo + ow];
          if (db) db[oc] += g;
          for (int icg = 0; icg < d.Cpg; ++icg) {
            const int ic = gi * d.Cpg + icg;
            const int64_t xoff = (static_cast<int64_t>(n) * d.Cin + ic) * xplane;
            const int64_t woff = (static_cast<int64_t>(oc) * d.Cpg + icg) * d.kH * d.kW;
            for (int kh = 0; kh < d.kH; ++kh) {
              const int ih = oh * stride - p + kh;
              if (ih < 0 || ih >= d.H) continue;
              for (int kw = 0; kw < d.kW; ++kw) {
                const int iw = ow * stride - p + kw;
                if (iw < 0 || iw >= d.W) continue;
                if (dx) dx[xoff + static_cast<int64_t>(ih) * d.W + iw] += g * w[woff + kh * d.kW + kw];
                if (dw) dw[woff + kh * d.kW + kw] += g * x[xoff + static_cast<int64_t>(ih) * d.W + iw];
              }
            }
          }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> weight, std::optional<Tensor<T>> bias,
                 Conv2dSpec spec) {
  Graph<T>& g = *input.graph;
  require(weight.graph == &g && (!bias || bias->graph == &g),
          "conv2d: operands from different graphs");
  ConvDims d = conv_check(input.shape(), weight.shape(), bias, spec);

  std::vector<T> out(static_cast<size_t>(d.N) * d.Cout * d.Ho * d.Wo);
  const T* px = g.value(input.id).data();
  const T* pw = g.value(weight.id).data();
  const T* pb = bias ? g.value(bias->id).data() : nullptr;
  if (spec.stride == 1)
    conv_fwd_s1(px, pw, pb, out.data(), d, spec.padding);
  else
    conv_fwd_generic(px, pw, pb, out.data(), d, spec.stride, spec.padding);

  Shape os{d.N, d.Cout, d.Ho, d.Wo};
  std::vector<int> ins{input.id, weight.id};
  if (bias) ins.push_back(bias->id);
  Tensor<T> res = g.make_result(os, std::move(out), bias
                                    ? std::initializer_list<int>{input.id, weight.id, bias->id}
                                    : std::initializer_list<int>{input.id, weight.id},
                                "conv2d");
  const int xid = input.id, wid = weight.id, oid = res.id;
  const int bid = bias ? bias->id : -1;
  g.add_op("conv2d", std::move(ins), oid, [xid, wid, bid, oid, d, spec](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    const T* vx = gr.value(xid).data();
    const T* vw = gr.value(wid).data();
    std::span<T> dx = gr.grad_accum(xid);
    std::span<T> dw = gr.grad_accum(wid);
    std::span<T> db = bid >= 0 ? gr.grad_accum(bid) : std::span<T>{};
    if (spec.stride == 1) {
      if (!dx.empty()) conv_bwd_input_s1(dx.data(), vw, dy, d, spec.padding);
      if (!dw.empty()) conv_bwd_weight_s1(dw.data(), vx, dy, d, spec.padding);
      if (!db.empty()) {
        const int64_t yplane = static_cast<int64_t>(d.Ho) * d.Wo;
        for (int n = 0; n < d.N; ++n)
          for (int oc = 0; oc < d.Cout; ++oc) {
            const T* dyp = dy + (static_cast<int64_t>(n) * d.Cout + oc) * yplane;
            T acc = T(0);
            for (int64_t i = 0; i < yplane; ++i) acc += dyp[i];
            db[oc] += acc;
          }
      }
    } else {
      conv_bwd_generic(dx.empty() ? nullptr : dx.data(),
                       dw.empty() ? nullptr : dw.data(),
                       db.empty() ? nullptr : db.data(), vx, vw, dy, d, spec.stride,
                       spec.padding);
    }
  });
  return res;
}

// ---- layer norm over channels ----

template <typename T>
Tensor<T> layer_norm_channels(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta, T eps) {
  Graph<T>& g = *x.graph;
  const Shape& xs = x.shape();
  require(xs.size() == 4, "layer_norm_channels: input must be NxCxHxW, got " + shape_str(xs));
  require(eps > T(0), "layer_norm_channels: eps must be > 0");
  const int C = xs[1];
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "layer_norm_channels: gamma/beta must have shape [" + std::to_string(C) + "]");
  const int N = xs[0];
  const int64_t HW = static_cast<int64_t>(xs[2]) * xs[3];

  std::vector<T> out(static_cast<size_t>(numel(xs)));
  auto xhat = std::make_shared<std::vector<T>>(out.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * HW);

  const T* px = g.value(x.id).data();
  const T* pg = g.value(gamma.id).data();
  const T* pbt = g.value(beta.id).data();
  for (int n = 0; n < N; ++n) {
    const T* xb = px + static_cast<int64_t>(n) * C * HW;
    T* ob = out.data() + static_cast<int64_t>(n) * C * HW;
    T* hb = xhat->data() + static_cast<int64_t>(n) * C * HW;
    for (int64_t s = 0; s < HW; ++s) {
      T mean = T(0);
      for (int c = 0; c < C; ++c) mean += xb[c * HW + s];
      mean /= T(C);
      T var = T(0);
      for (int c = 0; c < C; ++c) {
        T diff = xb[c * HW + s] - mean;
        var += diff * diff;
      }
      var /= T(C);
      T inv = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<int64_t>(n) * HW + s] = inv;
      for (int c = 0; c < C; ++c) {
        T h = (xb[c * HW + s] - mean) * inv;
        hb[c * HW + s] = h;
        ob[c * HW + s] = pg[c] * h + pbt[c];
      }
    }
  }

  Tensor<T> res = g.make_result(xs, std::move(out), {x.id, gamma.id, beta.id},
                                "layer_norm_channels");
  const int xid = x.id, gid = gamma.id, bid = beta.id, oid = res.id;
  g.add_op("layer_norm_channels", {xid, gid, bid}, oid,
           [xid, gid, bid, oid, N, C, HW, xhat, inv_std](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> dx = gr.grad_accum(xid);
    std::span<T> dgamma = gr.grad_accum(gid);
    std::span<T> dbeta = gr.grad_accum(bid);
    const T* pg = gr.value(gid).data();
    const T* h = xhat->data();
    const T* inv = inv_std->data();
    for (int n = 0; n < N; ++n) {
      const int64_t base = static_cast<int64_t>(n) * C * HW;
      for (int64_t s = 0; s < HW; ++s) {
        T s1 = T(0), s2 = T(0);
        for (int c = 0; c < C; ++c) {
          const int64_t i = base + c * HW + s;
          T gdy = dy[i] * pg[c];
          s1 += gdy;
          s2 += gdy * h[i];
        }
        s1 /= T(C);
        s2 /= T(C);
        const T is = inv[static_cast<int64_t>(n) * HW + s];
        for (int c = 0; c < C; ++c) {
          const int64_t i = base + c * HW + s;
          if (!dx.empty()) dx[i] += is * (dy[i] * pg[c] - s1 - h[i] * s2);
          if (!dgamma.empty()) dgamma[c] += dy[i] * h[i];
          if (!dbeta.empty()) dbeta[c] += dy[i];
        }
      }
    }
  });
  return res;
}

// ---- simple gate ----

template <typename T>
Tensor<T> simple_gate(Tensor<T> x) {
  Graph<T>& g = *x.graph;
  const Shape& xs = x.shape();
  require(xs.size() == 4, "simple_gate: input must be NxCxHxW, got " + shape_str(xs));
  require(xs[1] % 2 == 0,
          "simple_gate: channel count must be even, got " + std::to_string(xs[1]));
  const int N = xs[0], C = xs[1], Ch = xs[1] / 2;
  const int64_t HW = static_cast<int64_t>(xs[2]) * xs[3];

  std::vector<T> out(static_cast<size_t>(N) * Ch * HW);
  const T* px = g.value(x.id).data();
  for (int n = 0; n < N; ++n) {
    const T* a = px + static_cast<int64_t>(n) * C * HW;
    const T* b = a + static_cast<int64_t>(Ch) * HW;
    T* o = out.data() + static_cast<int64_t>(n) * Ch * HW;
    for (int64_t i = 0; i < Ch * HW; ++i) o[i] = a[i] * b[i];
  }

  Shape os{N, Ch, xs[2], xs[3]};
  Tensor<T> res = g.make_result(os, std::move(out), {x.id}, "simple_gate");
  const int xid = x.id, oid = res.id;
  g.add_op("simple_gate", {xid}, oid, [xid, oid, N, C, Ch, HW](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    const T* px = gr.value(xid).data();
    for (int n = 0; n < N; ++n) {
      const T* a = px + static_cast<int64_t>(n) * C * HW;
      const T* b = a + static_cast<int64_t>(Ch) * HW;
      T* da = dx.data() + static_cast<int64_t>(n) * C * HW;
      T* db = da + static_cast<int64_t>(Ch) * HW;
      const T* dyp = dy + static_cast<int64_t>(n) * Ch * HW;
      for (int64_t i = 0; i < Ch * HW; ++i) {
        da[i] += dyp[i] * b[i];
        db[i] += dyp[i] * a[i];
      }
    }
  });
  return res;
}

// ---- softmax ----

template <typename T>
Tensor<T> softmax_axis(Tensor<T> x, int axis) {
  Graph<T>& g = *x.graph;
  const Shape& xs = x.shape();
  const int rank = static_cast<int>(xs.size());
  const int ax = normalize_axis(axis, rank, "softmax_axis");
  const int len = xs[ax];
  int64_t inner = 1, outer = 1;
  for (int i = ax + 1; i < rank; ++i) inner *= xs[i];
  for (int i = 0; i < ax; ++i) outer *= xs[i];

  std::vector<T> out(static_cast<size_t>(numel(xs)));
  const T* px = g.value(x.id).data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t r = 0; r < inner; ++r) {
      const int64_t base = o * len * inner + r;
      T m = px[base];
      for (int k = 1; k < len; ++k) m = std::max(m, px[base + k * inner]);
      T sum = T(0);
      for (int k = 0; k < len; ++k) {
        T e = std::exp(px[base + k * inner] - m);
        out[base + k * inner] = e;
        sum += e;
      }
      for (int k = 0; k < len; ++k) out[base + k * inner] /= sum;
    }
  }

  Tensor<T> res = g.make_result(xs, std::move(out), {x.id}, "softmax");
  const int xid = x.id, oid = res.id;
  g.add_op("softmax", {xid}, oid, [xid, oid, len, inner, outer](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    const T* y = gr.value(oid).data();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t r = 0; r < inner; ++r) {
        const int64_t base = o * len * inner + r;
        T dot = T(0);
        for (int k = 0; k < len; ++k) dot += dy[base + k * inner] * y[base + k * inner];
        for (int k = 0; k < len; ++k) {
          const int64_t i = base + k * inner;
          dx[i] += y[i] * (dy[i] - dot);
        }
      }
    }
  });
  return res;
}

// ---- global average pool ----

template <typename T>
Tensor<T> global_avg_pool(Tensor<T> x) {
  Graph<T>& g = *x.graph;
  const Shape& xs = x.shape();
  require(xs.size() == 4, "global_avg_pool: input must be NxCxHxW, got " + shape_str(xs));
  require(xs[2] >= 1 && xs[3] >= 1, "global_avg_pool: empty spatial dims");
  const int N = xs[0], C = xs[1];
  const int64_t HW = static_cast<int64_t>(xs[2]) * xs[3];

  std::vector<T> out(static_cast<size_t>(N) * C);
  const T* px = g.value(x.id).data();
  for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
    const T* xp = px + p * HW;
    T acc = T(0);
    for (int64_t i = 0; i < HW; ++i) acc += xp[i];
    out[p] = acc / T(HW);
  }

  Shape os{N, C, 1, 1};
  Tensor<T> res = g.make_result(os, std::move(out), {x.id}, "global_avg_pool");
  const int xid = x.id, oid = res.id;
  g.add_op("global_avg_pool", {xid}, oid, [xid, oid, N, C, HW](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
      const T gup = dy[p] / T(HW);
      T* dxp = dx.data() + p * HW;
      for (int64_t i = 0; i < HW; ++i) dxp[i] += gup;
    }
  });
  return res;
}

// ---- pixel shuffle ----

template <typename T>
Tensor<T> pixel_shuffle(Tensor<T> x, int factor, Shuffle dir) {
  Graph<T>& g = *x.graph;
  const Shape& xs = x.shape();
  require(xs.size() == 4, "pixel_shuffle: input must be NxCxHxW, got " + shape_str(xs));
  require(factor >= 1, "pixel_shuffle: factor must be >= 1");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int r = factor, r2 = factor * factor;

  Shape os;
  if (dir == Shuffle::down) {
    require(H % r == 0 && W % r == 0,
            "pixel_shuffle(down): spatial dims " + std::to_string(H) + "x" +
                std::to_string(W) + " not divisible by factor " + std::to_string(r));
    os = {N, C * r2, H / r, W / r};
  } else {
    require(C % r2 == 0, "pixel_shuffle(up): channels " + std::to_string(C) +
                             " not divisible by factor^2 " + std::to_string(r2));
    os = {N, C / r2, H * r, W * r};
  }

  // down: out[n][c*r2 + dy*r + dx][oh][ow] = in[n][c][oh*r+dy][ow*r+dx]
  std::vector<T> out(static_cast<size_t>(numel(os)));
  const T* px = g.value(x.id).data();
  if (dir == Shuffle::down) {
    const int Ho = H / r, Wo = W / r;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int dy_ = 0; dy_ < r; ++dy_)
          for (int dx_ = 0; dx_ < r; ++dx_) {
            const int oc = c * r2 + dy_ * r + dx_;
            const T* ip = px + ((static_cast<int64_t>(n) * C + c) * H + dy_) * W;
            T* op = out.data() + ((static_cast<int64_t>(n) * C * r2 + oc) * Ho) * Wo;
            for (int oh = 0; oh < Ho; ++oh) {
              const T* irow = ip + static_cast<int64_t>(oh) * r * W + dx_;
              T* orow = op + static_cast<int64_t>(oh) * Wo;
              for (int ow = 0; ow < Wo; ++ow) orow[ow] = irow[ow * r];
            }
          }
  } else {
    const int Co = C / r2, Ho = H * r, Wo = W * r;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Co; ++c)
        for (int dy_ = 0; dy_ < r; ++dy_)
          for (int dx_ = 0; dx_ < r; ++dx_) {
            const int ic = c * r2 + dy_ * r + dx_;
            const T* ip = px + ((static_cast<int64_t>(n) * C + ic) * H) * W;
            T* op = out.data() + ((static_cast<int64_t>(n) * Co + c) * Ho + dy_) * Wo;
            for (int ih = 0; ih < H; ++ih) {
              const T* irow = ip + static_cast<int64_t>(ih) * W;
              T* orow = op + static_cast<int64_t>(ih) * r * Wo + dx_;
              for (int iw = 0; iw < W; ++iw) orow[iw * r] = irow[iw];
            }
          }
  }

  Tensor<T> res = g.make_result(os, std::move(out), {x.id}, "pixel_shuffle");
  const int xid = x.id, oid = res.id;
  g.add_op("pixel_shuffle", {xid}, oid, [xid, oid, N, C, H, W, r, r2, dir](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    if (dir == Shuffle::down) {
      const int Ho = H / r, Wo = W / r;
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int dy_ = 0; dy_ < r; ++dy_)
            for (int dx_ = 0; dx_ < r; ++dx_) {
              const int oc = c * r2 + dy_ * r + dx_;
              T* ip = dx.data() + ((static_cast<int64_t>(n) * C + c) * H + dy_) * W;
              const T* op = dy + ((static_cast<int64_t>(n) * C * r2 + oc) * Ho) * Wo;
              for (int oh = 0; oh < Ho; ++oh) {
                T* irow = ip + static_cast<int64_t>(oh) * r * W + dx_;
                const T* orow = op + static_cast<int64_t>(oh) * Wo;
                for (int ow = 0; ow < Wo; ++ow) irow[ow * r] += orow[ow];
              }
            }
    } else {
      const int Co = C / r2, Ho = H * r, Wo = W * r;
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Co; ++c)
          for (int dy_ = 0; dy_ < r; ++dy_)
            for (int dx_ = 0; dx_ < r; ++dx_) {
              const int ic = c * r2 + dy_ * r + dx_;
              T* ip = dx.data() + ((static_cast<int64_t>(n) * C + ic) * H) * W;
              const T* op = dy + ((static_cast<int64_t>(n) * Co + c) * Ho + dy_) * Wo;
              for (int ih = 0; ih < H; ++ih) {
                T* irow = ip + static_cast<int64_t>(ih) * W;
                const T* orow = op + static_cast<int64_t>(ih) * r * Wo + dx_;
                for (int iw = 0; iw < W; ++iw) irow[iw] += orow[iw * r];
              }
            }
    }
  });
  return res;
}

// ---- batched matmul ----

namespace {

// C[M x N] += op(A) * op(B); all blocks row-major contiguous
template <typename T>
void gemm_block(const T* A, const T* B, T* C, int M, int N, int K, bool ta, bool tb) {
  if (!ta && !tb) {
    for (int m = 0; m < M; ++m) {
      T* crow = C + static_cast<int64_t>(m) * N;
      const T* arow = A + static_cast<int64_t>(m) * K;
      for (int k = 0; k < K; ++k) {
        const T av = arow[k];
        const T* brow = B + static_cast<int64_t>(k) * N;
        for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
      }
    }
  } else if (!ta && tb) {
    for (int m = 0; m < M; ++m) {
      const T* arow = A + static_cast<int64_t>(m) * K;
      T* crow = C + static_cast<int64_t>(m) * N;
      for (int n = 0; n < N; ++n) {
        const T* brow = B + static_cast<int64_t>(n) * K;
        T acc = T(0);
        for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
        crow[n] += acc;
      }
    }
  } else if (ta && !tb) {
    for (int k = 0; k < K; ++k) {
      const T* arow = A + static_cast<int64_t>(k) * M;
      const T* brow = B + static_cast<int64_t>(k) * N;
      for (int m = 0; m < M; ++m) {
        const T av = arow[m];
        T* crow = C + static_cast<int64_t>(m) * N;
        for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
      }
    }
  } else {
    for (int m = 0; m < M; ++m) {
      T* crow = C + static_cast<int64_t>(m) * N;
      for (int n = 0; n < N; ++n) {
        const T* brow = B + static_cast<int64_t>(n) * K;
        T acc = T(0);
        for (int k = 0; k < K; ++k) acc += A[static_cast<int64_t>(k) * M + m] * brow[k];
        crow[n] += acc;
      }
    }
  }
}

struct MatmulDims {
  int M, N, K;
  Shape batch;                      // broadcast batch dims
  std::vector<int64_t> a_bstride;  // batch strides (0 where broadcast)
  std::vector<int64_t> b_bstride;
  int64_t a_block, b_block;
};

MatmulDims matmul_check(const Shape& sa, const Shape& sb, bool ta, bool tb) {
  require(sa.size() >= 2 && sb.size() >= 2,
          "matmul_batched: operands must have rank >= 2, got " + shape_str(sa) +
              " and " + shape_str(sb));
  MatmulDims d;
  const int ra = static_cast<int>(sa.size()), rb = static_cast<int>(sb.size());
  const int am = sa[ra - 2], an = sa[ra - 1];
  const int bm = sb[rb - 2], bn = sb[rb - 1];
  d.M = ta ? an : am;
  const int Ka = ta ? am : an;
  const int Kb = tb ? bn : bm;
  d.N = tb ? bm : bn;
  require(Ka == Kb, "matmul_batched: inner dims disagree (" + std::to_string(Ka) +
                        " vs " + std::to_string(Kb) + ") for " + shape_str(sa) +
                        " x " + shape_str(sb));
  d.K = Ka;
  Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
  d.batch = broadcast_shapes(ba, bb);
  const int rank = static_cast<int>(d.batch.size());
  d.a_bstride.assign(rank, 0);
  d.b_bstride.assign(rank, 0);
  auto fill = [&](const Shape& s, std::vector<int64_t>& stride, int64_t block) {
    auto st = strides_for(s);
    int off = rank - static_cast<int>(s.size());
    for (size_t i = 0; i < s.size(); ++i)
      stride[off + i] = (s[i] == 1 && d.batch[off + i] != 1) ? 0 : st[i] * block;
  };
  d.a_block = static_cast<int64_t>(am) * an;
  d.b_block = static_cast<int64_t>(bm) * bn;
  fill(ba, d.a_bstride, d.a_block);
  fill(bb, d.b_bstride, d.b_block);
  return d;
}

// iterate batch producing (batch_index, a_offset, b_offset)
template <typename F>
void for_each_batch(const MatmulDims& d, F&& visit) {
  const int rank = static_cast<int>(d.batch.size());
  int64_t total = 1;
  for (int v : d.batch) total *= v;
  std::vector<int> idx(rank, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < total; ++i) {
    visit(i, oa, ob);
    for (int dd = rank - 1; dd >= 0; --dd) {
      oa += d.a_bstride[dd];
      ob += d.b_bstride[dd];
      if (++idx[dd] < d.batch[dd]) break;
      oa -= d.a_bstride[dd] * d.batch[dd];
      ob -= d.b_bstride[dd] * d.batch[dd];
      idx[dd] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul_batched(Tensor<T> a, Tensor<T> b, bool trans_a, bool trans_b) {
  Graph<T>& g = *a.graph;
  require(b.graph == &g, "matmul_batched: operands from different graphs");
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  MatmulDims d = matmul_check(sa, sb, trans_a, trans_b);

  Shape os = d.batch;
  os.push_back(d.M);
  os.push_back(d.N);
  std::vector<T> out(static_cast<size_t>(numel(os)), T(0));
  const T* pa = g.value(a.id).data();
  const T* pb = g.value(b.id).data();
  const int64_t oblock = static_cast<int64_t>(d.M) * d.N;
  for_each_batch(d, [&](int64_t i, int64_t oa, int64_t ob) {
    gemm_block(pa + oa, pb + ob, out.data() + i * oblock, d.M, d.N, d.K, trans_a,
               trans_b);
  });

  Tensor<T> res = g.make_result(os, std::move(out), {a.id, b.id}, "matmul");
  const int aid = a.id, bid = b.id, oid = res.id;
  g.add_op("matmul", {aid, bid}, oid,
           [aid, bid, oid, d, trans_a, trans_b, oblock](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> da = gr.grad_accum(aid);
    std::span<T> db = gr.grad_accum(bid);
    const T* va = gr.value(aid).data();
    const T* vb = gr.value(bid).data();
    MatmulDims dd = d;
    for_each_batch(dd, [&](int64_t i, int64_t oa, int64_t ob) {
      const T* dyb = dy + i * oblock;
      if (!da.empty()) {
        // dA roles: see the four trans combinations
        if (!trans_a)
          gemm_block(dyb, vb + ob, da.data() + oa, d.M, d.K, d.N, false, !trans_b);
        else
          gemm_block(vb + ob, dyb, da.data() + oa, d.K, d.M, d.N, trans_b, true);
      }
      if (!db.empty()) {
        if (!trans_b)
          gemm_block(va + oa, dyb, db.data() + ob, d.K, d.N, d.M, !trans_a, false);
        else
          gemm_block(dyb, va + oa, db.data() + ob, d.N, d.K, d.M, true, trans_a);
      }
    });
  });
  return res;
}

// ---- reductions ----

namespace {

struct ReduceDims {
  Shape out_shape;
  std::vector<int64_t> out_stride_per_in_dim;  // 0 at reduced dims
  int64_t count = 1;
};

ReduceDims reduce_check(const Shape& xs, std::vector<int>& axes, bool keepdims,
                        const char* op) {
  const int rank = static_cast<int>(xs.size());
  for (int& a : axes) a = normalize_axis(a, rank, op);
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(rank, false);
  for (int a : axes) reduced[a] = true;

  ReduceDims d;
  for (int i = 0; i < rank; ++i) {
    if (reduced[i]) {
      d.count *= xs[i];
      if (keepdims) d.out_shape.push_back(1);
    } else {
      d.out_shape.push_back(xs[i]);
    }
  }
  auto ost = strides_for(d.out_shape);
  d.out_stride_per_in_dim.assign(rank, 0);
  int oi = 0;
  for (int i = 0; i < rank; ++i) {
    if (reduced[i]) {
      if (keepdims) ++oi;  // stride 0 regardless (dim is 1)
      continue;
    }
    d.out_stride_per_in_dim[i] = ost[oi++];
  }
  return d;
}

template <typename T, typename F>
void reduce_iterate(const Shape& xs, const ReduceDims& d, F&& visit) {
  const int rank = static_cast<int>(xs.size());
  const int64_t total = numel(xs);
  std::vector<int> idx(rank, 0);
  int64_t off = 0;
  for (int64_t i = 0; i < total; ++i) {
    visit(i, off);
    for (int dd = rank - 1; dd >= 0; --dd) {
      off += d.out_stride_per_in_dim[dd];
      if (++idx[dd] < xs[dd]) break;
      off -= d.out_stride_per_in_dim[dd] * xs[dd];
      idx[dd] = 0;
    }
  }
}

template <typename T>
Tensor<T> reduce_impl(Tensor<T> x, std::vector<int> axes, bool keepdims, bool mean,
                      const char* kind) {
  Graph<T>& g = *x.graph;
  const Shape xs = x.shape();
  ReduceDims d = reduce_check(xs, axes, keepdims, kind);

  std::vector<T> out(static_cast<size_t>(numel(d.out_shape)), T(0));
  const T* px = g.value(x.id).data();
  reduce_iterate<T>(xs, d, [&](int64_t i, int64_t off) { out[off] += px[i]; });
  const T inv = mean ? T(1) / T(d.count) : T(1);
  if (mean)
    for (T& v : out) v *= inv;

  Tensor<T> res = g.make_result(d.out_shape, std::move(out), {x.id}, kind);
  const int xid = x.id, oid = res.id;
  g.add_op(kind, {xid}, oid, [xid, oid, xs, d, inv](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    T* pdx = dx.data();
    reduce_iterate<T>(xs, d, [&](int64_t i, int64_t off) { pdx[i] += dy[off] * inv; });
  });
  return res;
}

}  // namespace

template <typename T>
Tensor<T> reduce_sum(Tensor<T> x, std::vector<int> axes, bool keepdims) {
  return reduce_impl(x, std::move(axes), keepdims, false, "reduce_sum");
}

template <typename T>
Tensor<T> reduce_mean(Tensor<T> x, std::vector<int> axes, bool keepdims) {
  return reduce_impl(x, std::move(axes), keepdims, true, "reduce_mean");
}

template <typename T>
Tensor<T> reduce_sum_all(Tensor<T> x) {
  std::vector<int> axes(x.shape().size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_impl(x, std::move(axes), false, false, "reduce_sum");
}

template <typename T>
Tensor<T> reduce_mean_all(Tensor<T> x) {
  std::vector<int> axes(x.shape().size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_impl(x, std::move(axes), false, true, "reduce_mean");
}

// ---- reshape / slice ----

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape new_shape) {
  Graph<T>& g = *x.graph;
  require(numel(new_shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  std::span<const T> v = x.value();
  std::vector<T> out(v.begin(), v.end());
  Tensor<T> res = g.make_result(std::move(new_shape), std::move(out), {x.id}, "reshape");
  const int xid = x.id, oid = res.id;
  g.add_op("reshape", {xid}, oid, [xid, oid](Graph<T>& gr) {
    std::span<const T> dy = gr.grad(oid);
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
  return res;
}

template <typename T>
Tensor<T> slice_channels(Tensor<T> x, int begin, int end) {
  Graph<T>& g = *x.graph;
  const Shape& xs = x.shape();
  require(xs.size() == 4, "slice_channels: input must be NxCxHxW, got " + shape_str(xs));
  require(begin >= 0 && end <= xs[1] && begin < end,
          "slice_channels: bad range [" + std::to_string(begin) + ", " +
              std::to_string(end) + ") for C=" + std::to_string(xs[1]));
  const int N = xs[0], C = xs[1], Cs = end - begin;
  const int64_t HW = static_cast<int64_t>(xs[2]) * xs[3];

  std::vector<T> out(static_cast<size_t>(N) * Cs * HW);
  const T* px = g.value(x.id).data();
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + static_cast<int64_t>(n) * Cs * HW,
                px + (static_cast<int64_t>(n) * C + begin) * HW,
                sizeof(T) * static_cast<size_t>(Cs) * HW);

  Shape os{N, Cs, xs[2], xs[3]};
  Tensor<T> res = g.make_result(os, std::move(out), {x.id}, "slice_channels");
  const int xid = x.id, oid = res.id;
  g.add_op("slice_channels", {xid}, oid, [xid, oid, N, C, Cs, begin, HW](Graph<T>& gr) {
    const T* dy = gr.grad(oid).data();
    std::span<T> dx = gr.grad_accum(xid);
    if (dx.empty()) return;
    for (int n = 0; n < N; ++n) {
      T* dst = dx.data() + (static_cast<int64_t>(n) * C + begin) * HW;
      const T* src = dy + static_cast<int64_t>(n) * Cs * HW;
      for (int64_t i = 0; i < Cs * HW; ++i) dst[i] += src[i];
    }
  });
  return res;
}

template <typename T>
Tensor<T> mse_loss(Tensor<T> pred, Tensor<T> target) {
  Tensor<T> d = sub(pred, target);
  return reduce_mean_all(mul(d, d));
}

// ---- finite differences ----

template <typename T>
std::vector<T> finite_difference_gradient(
    const std::function<T(std::span<const T>)>& f, std::span<const T> x, T h) {
  require(h > T(0), "finite_difference_gradient: h must be > 0");
  std::vector<T> xb(x.begin(), x.end());
  std::vector<T> grad(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const T orig = xb[i];
    xb[i] = orig + h;
    const T fp = f(xb);
    xb[i] = orig - h;
    const T fm = f(xb);
    xb[i] = orig;
    grad[i] = (fp - fm) / (T(2) * h);
  }
  return grad;
}

template <typename T>
T gradcheck_rel_err(std::span<const T> analytic, std::span<const T> numeric) {
  require(analytic.size() == numeric.size(), "gradcheck: size mismatch");
  T max_diff = T(0), max_mag = T(0);
  for (size_t i = 0; i < analytic.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(analytic[i] - numeric[i]));
    max_mag = std::max({max_mag, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (max_mag < T(1e-30)) return T(0);
  return max_diff / max_mag;
}

// ---- explicit instantiations ----

#define RLAB_INSTANTIATE(T)                                                          \
  template struct Tensor<T>;                                                         \
  template class Graph<T>;                                                           \
  template Tensor<T> add<T>(Tensor<T>, Tensor<T>);                                   \
  template Tensor<T> sub<T>(Tensor<T>, Tensor<T>);                                   \
  template Tensor<T> mul<T>(Tensor<T>, Tensor<T>);                                   \
  template Tensor<T> divide<T>(Tensor<T>, Tensor<T>);                                \
  template Tensor<T> activation<T>(Act, Tensor<T>);                                  \
  template Tensor<T> sqrt_elem<T>(Tensor<T>);                                        \
  template Tensor<T> scale<T>(Tensor<T>, T);                                         \
  template Tensor<T> add_scalar<T>(Tensor<T>, T);                                    \
  template Tensor<T> conv2d<T>(Tensor<T>, Tensor<T>, std::optional<Tensor<T>>,       \
                               Conv2dSpec);                                          \
  template Tensor<T> layer_norm_channels<T>(Tensor<T>, Tensor<T>, Tensor<T>, T);     \
  template Tensor<T> simple_gate<T>(Tensor<T>);                                      \
  template Tensor<T> softmax_axis<T>(Tensor<T>, int);                                \
  template Tensor<T> global_avg_pool<T>(Tensor<T>);                                  \
  template Tensor<T> pixel_shuffle<T>(Tensor<T>, int, Shuffle);                      \
  template Tensor<T> matmul_batched<T>(Tensor<T>, Tensor<T>, bool, bool);            \
  template Tensor<T> reduce_sum<T>(Tensor<T>, std::vector<int>, bool);               \
  template Tensor<T> reduce_mean<T>(Tensor<T>, std::vector<int>, bool);              \
  template Tensor<T> reduce_sum_all<T>(Tensor<T>);                                   \
  template Tensor<T> reduce_mean_all<T>(Tensor<T>);                                  \
  template Tensor<T> reshape<T>(Tensor<T>, Shape);                                   \
  template Tensor<T> slice_channels<T>(Tensor<T>, int, int);                         \
  template Tensor<T> mse_loss<T>(Tensor<T>, Tensor<T>);                              \
  template std::vector<T> finite_difference_gradient<T>(                             \
      const std::function<T(std::span<const T>)>&, std::span<const T>, T);           \
  template T gradcheck_rel_err<T>(std::span<const T>, std::span<const T>);

RLAB_INSTANTIATE(float)
RLAB_INSTANTIATE(double)

#undef RLAB_INSTANTIATE

}  // namespace rlab
