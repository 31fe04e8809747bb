#include "rlab/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace rlab {

using nlohmann::json;

const char* arch_kind_name(ArchKind k) {
  switch (k) {
    case ArchKind::restormer: return "restormer";
    case ArchKind::baseline: return "baseline";
    case ArchKind::nafnet: return "nafnet";
    case ArchKind::intermediate: return "intermediate";
    case ArchKind::intermediate_relu: return "intermediate_relu";
  }
  return "?";
}

ArchKind arch_kind_from_name(const std::string& s) {
  for (ArchKind k : all_arch_kinds())
    if (s == arch_kind_name(k)) return k;
  throw std::invalid_argument("unknown architecture kind '" + s + "'");
}

std::vector<ArchKind> all_arch_kinds() {
  return {ArchKind::restormer, ArchKind::baseline, ArchKind::nafnet,
          ArchKind::intermediate, ArchKind::intermediate_relu};
}

void ArchVariant::set_default_blocks() {
  enc_blocks.assign(levels, 1);
  dec_blocks.assign(levels - 1, 1);
}

void ArchVariant::validate() const {
  if (width < 2 || width % 2 != 0)
    throw std::invalid_argument("variant: width must be even and >= 2, got " +
                                std::to_string(width));
  if (levels < 1) throw std::invalid_argument("variant: levels must be >= 1");
  if (static_cast<int>(enc_blocks.size()) != levels)
    throw std::invalid_argument("variant: enc_blocks must have one entry per level");
  if (static_cast<int>(dec_blocks.size()) != levels - 1)
    throw std::invalid_argument("variant: dec_blocks must have levels-1 entries");
  for (int b : enc_blocks)
    if (b < 1) throw std::invalid_argument("variant: block counts must be >= 1");
  for (int b : dec_blocks)
    if (b < 1) throw std::invalid_argument("variant: block counts must be >= 1");
  if (kind == ArchKind::restormer) {
    if (attention_heads < 1 || width % attention_heads != 0)
      throw std::invalid_argument("variant: attention_heads must divide width");
  }
  if (kind == ArchKind::baseline) {
    if (ca_reduction < 1 || (2 * width) % ca_reduction != 0)
      throw std::invalid_argument("variant: ca_reduction must divide 2*width");
  }
}

// ---- ParamStore ----

template <typename T>
int ParamStore<T>::find(const std::string& name) const {
  for (size_t i = 0; i < entries.size(); ++i)
    if (entries[i].name == name) return static_cast<int>(i);
  return -1;
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::at(const std::string& name) const {
  int i = find(name);
  if (i < 0) throw std::invalid_argument("params: missing entry '" + name + "'");
  return entries[i];
}

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::at(const std::string& name) {
  int i = find(name);
  if (i < 0) throw std::invalid_argument("params: missing entry '" + name + "'");
  return entries[i];
}

template <typename T>
int64_t ParamStore<T>::total_count() const {
  int64_t n = 0;
  for (const Entry& e : entries) n += numel(e.shape);
  return n;
}

template <typename T>
uint64_t ParamStore<T>::checksum() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const Entry& e : entries) {
    uint64_t hn = fnv1a64(e.name.data(), e.name.size());
    uint64_t hv = fnv1a64(e.values.data(), e.values.size() * sizeof(T));
    h = mix_seed(h, hn);
    h = mix_seed(h, hv);
  }
  return h;
}

// ---- parameter enumeration ----

namespace {

using Init = ParamSpec::Init;

void push(std::vector<ParamSpec>& out, std::string name, Shape shape, Init init) {
  out.push_back(ParamSpec{std::move(name), std::move(shape), init});
}

void norm_specs(std::vector<ParamSpec>& out, const std::string& p, int C) {
  push(out, p + ".gamma", {C}, Init::ones);
  push(out, p + ".beta", {C}, Init::zeros);
}

void conv_specs(std::vector<ParamSpec>& out, const std::string& p, int co, int ci,
                int k) {
  push(out, p + ".weight", {co, ci, k, k}, Init::conv_fan_in);
  push(out, p + ".bias", {co}, Init::zeros);
}

void dwconv_specs(std::vector<ParamSpec>& out, const std::string& p, int c, int k) {
  push(out, p + ".weight", {c, 1, k, k}, Init::conv_fan_in);
  push(out, p + ".bias", {c}, Init::zeros);
}

}  // namespace

std::vector<ParamSpec> enumerate_block_params(const ArchVariant& v, int C,
                                              const std::string& prefix) {
  std::vector<ParamSpec> out;
  if (v.kind == ArchKind::restormer) {
    norm_specs(out, prefix + "norm1", C);
    conv_specs(out, prefix + "attn.qkv", 3 * C, C, 1);
    dwconv_specs(out, prefix + "attn.qkv_dw", 3 * C, 3);
    push(out, prefix + "attn.temperature", {v.attention_heads, 1, 1}, Init::ones);
    conv_specs(out, prefix + "attn.proj", C, C, 1);
    push(out, prefix + "skip1", {C, 1, 1}, Init::ones);
    norm_specs(out, prefix + "norm2", C);
    conv_specs(out, prefix + "ffn.in", 4 * C, C, 1);
    dwconv_specs(out, prefix + "ffn.dw", 4 * C, 3);
    conv_specs(out, prefix + "ffn.out", C, 2 * C, 1);
    push(out, prefix + "skip2", {C, 1, 1}, Init::ones);
    return out;
  }
  const bool gated = v.kind == ArchKind::nafnet;
  const int F = gated ? C : 2 * C;  // width where the attention gate applies
  norm_specs(out, prefix + "norm1", C);
  conv_specs(out, prefix + "conv1", 2 * C, C, 1);
  dwconv_specs(out, prefix + "dwconv", 2 * C, 3);
  if (v.kind == ArchKind::baseline) {
    const int Fr = F / v.ca_reduction;
    conv_specs(out, prefix + "ca.fc1", Fr, F, 1);
    conv_specs(out, prefix + "ca.fc2", F, Fr, 1);
  } else {
    conv_specs(out, prefix + "sca", F, F, 1);
  }
  conv_specs(out, prefix + "conv2", C, F, 1);
  push(out, prefix + "skip1", {C, 1, 1}, Init::ones);
  norm_specs(out, prefix + "norm2", C);
  conv_specs(out, prefix + "ffn1", 2 * C, C, 1);
  conv_specs(out, prefix + "ffn2", C, gated ? C : 2 * C, 1);
  push(out, prefix + "skip2", {C, 1, 1}, Init::ones);
  return out;
}

std::vector<ParamSpec> enumerate_model_params(const ArchVariant& v) {
  v.validate();
  std::vector<ParamSpec> out;
  conv_specs(out, "intro", v.width, 3, 3);
  for (int lv = 0; lv < v.levels; ++lv) {
    const int C = v.width << lv;
    for (int b = 0; b < v.enc_blocks[lv]; ++b) {
      auto specs = enumerate_block_params(
          v, C, "enc" + std::to_string(lv) + ".b" + std::to_string(b) + ".");
      out.insert(out.end(), specs.begin(), specs.end());
    }
    if (lv < v.levels - 1)
      conv_specs(out, "down" + std::to_string(lv), 2 * C, 4 * C, 1);
  }
  for (int lv = v.levels - 2; lv >= 0; --lv) {
    const int C = v.width << lv;
    conv_specs(out, "up" + std::to_string(lv), 4 * C, 2 * C, 1);
    for (int b = 0; b < v.dec_blocks[lv]; ++b) {
      auto specs = enumerate_block_params(
          v, C, "dec" + std::to_string(lv) + ".b" + std::to_string(b) + ".");
      out.insert(out.end(), specs.begin(), specs.end());
    }
  }
  conv_specs(out, "outro", 3, v.width, 3);
  return out;
}

int64_t block_param_count(const ArchVariant& v, int channels) {
  int64_t n = 0;
  for (const ParamSpec& s : enumerate_block_params(v, channels, ""))
    n += numel(s.shape);
  return n;
}

int64_t variant_param_count(const ArchVariant& v) {
  int64_t n = 0;
  for (const ParamSpec& s : enumerate_model_params(v)) n += numel(s.shape);
  return n;
}

template <typename T>
ParamStore<T> init_params(const std::vector<ParamSpec>& specs, uint64_t seed) {
  Rng rng(seed);
  ParamStore<T> store;
  store.entries.reserve(specs.size());
  for (const ParamSpec& s : specs) {
    typename ParamStore<T>::Entry e;
    e.name = s.name;
    e.shape = s.shape;
    const int64_t n = numel(s.shape);
    e.values.resize(n);
    switch (s.init) {
      case Init::zeros:
        std::fill(e.values.begin(), e.values.end(), T(0));
        break;
      case Init::ones:
        std::fill(e.values.begin(), e.values.end(), T(1));
        break;
      case Init::conv_fan_in: {
        const int64_t fan_in =
            static_cast<int64_t>(s.shape[1]) * s.shape[2] * s.shape[3];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (int64_t i = 0; i < n; ++i)
          e.values[i] = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
    store.entries.push_back(std::move(e));
  }
  return store;
}

template <typename T>
Model<T> build_model(const ArchVariant& v, uint64_t seed) {
  ArchVariant vv = v;
  if (vv.enc_blocks.empty() && vv.dec_blocks.empty()) vv.set_default_blocks();
  vv.validate();
  Model<T> m;
  m.variant = vv;
  m.params = init_params<T>(enumerate_model_params(vv), seed);
  return m;
}

// ---- forward ----

namespace {

template <typename T>
struct Mounter {
  Graph<T>* g;
  const ParamStore<T>* store;
  std::vector<int> nodes;

  Mounter(Graph<T>& graph, const ParamStore<T>& s, bool requires_grad,
          std::vector<int>* out_nodes)
      : g(&graph), store(&s) {
    nodes.reserve(s.entries.size());
    for (const auto& e : s.entries) {
      Tensor<T> t = graph.leaf(e.shape, e.values, requires_grad);
      nodes.push_back(t.id);
    }
    if (out_nodes) *out_nodes = nodes;
  }

  Tensor<T> operator()(const std::string& name) const {
    int i = store->find(name);
    if (i < 0) throw std::invalid_argument("params: missing entry '" + name + "'");
    return Tensor<T>{g, nodes[i]};
  }
};

template <typename T>
Tensor<T> channel_attention_gate(Tensor<T> u, const Mounter<T>& P,
                                 const std::string& prefix) {
  Tensor<T> a = global_avg_pool(u);
  a = conv2d(a, P(prefix + "ca.fc1.weight"), P(prefix + "ca.fc1.bias"), {});
  a = activation(Act::relu, a);
  a = conv2d(a, P(prefix + "ca.fc2.weight"), P(prefix + "ca.fc2.bias"), {});
  a = activation(Act::sigmoid, a);
  return mul(u, a);
}

template <typename T>
Tensor<T> simplified_channel_attention_gate(Tensor<T> u, const Mounter<T>& P,
                                            const std::string& prefix) {
  Tensor<T> a = global_avg_pool(u);
  a = conv2d(a, P(prefix + "sca.weight"), P(prefix + "sca.bias"), {});
  return mul(u, a);
}

template <typename T>
Tensor<T> mdta_impl(Tensor<T> x, const Mounter<T>& P, const std::string& prefix,
                    int heads, Tensor<T>* attention_out = nullptr) {
  const Shape& xs = x.shape();
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (C % heads != 0)
    throw std::invalid_argument("mdta: channels " + std::to_string(C) +
                                " not divisible by heads " + std::to_string(heads));
  const int ch = C / heads;
  const int HW = H * W;

  Tensor<T> qkv = conv2d(x, P(prefix + "qkv.weight"), P(prefix + "qkv.bias"), {});
  qkv = conv2d(qkv, P(prefix + "qkv_dw.weight"), P(prefix + "qkv_dw.bias"),
               {1, 1, 3 * C});
  Tensor<T> q = reshape(slice_channels(qkv, 0, C), {N, heads, ch, HW});
  Tensor<T> k = reshape(slice_channels(qkv, C, 2 * C), {N, heads, ch, HW});
  Tensor<T> v = reshape(slice_channels(qkv, 2 * C, 3 * C), {N, heads, ch, HW});

  auto l2_normalize_rows = [](Tensor<T> t) {
    Tensor<T> ss = reduce_sum(mul(t, t), {3}, true);
    return divide(t, sqrt_elem(add_scalar(ss, T(1e-12))));
  };
  q = l2_normalize_rows(q);
  k = l2_normalize_rows(k);

  // channel-similarity attention: (C/heads)^2 per head, independent of H,W
  Tensor<T> logits = matmul_batched(q, k, false, true);
  logits = mul(logits, P(prefix + "temperature"));
  Tensor<T> attn = softmax_axis(logits, -1);
  if (attention_out) *attention_out = attn;
  Tensor<T> out = matmul_batched(attn, v);
  out = reshape(out, {N, C, H, W});
  return conv2d(out, P(prefix + "proj.weight"), P(prefix + "proj.bias"), {});
}

template <typename T>
Tensor<T> gdfn_impl(Tensor<T> x, const Mounter<T>& P, const std::string& prefix) {
  const int C = x.shape()[1];
  Tensor<T> h = conv2d(x, P(prefix + "in.weight"), P(prefix + "in.bias"), {});
  h = conv2d(h, P(prefix + "dw.weight"), P(prefix + "dw.bias"), {1, 1, 4 * C});
  Tensor<T> h1 = slice_channels(h, 0, 2 * C);
  Tensor<T> h2 = slice_channels(h, 2 * C, 4 * C);
  Tensor<T> gated = mul(activation(Act::gelu, h1), h2);
  return conv2d(gated, P(prefix + "out.weight"), P(prefix + "out.bias"), {});
}

template <typename T>
Tensor<T> block_forward(const ArchVariant& v, Tensor<T> x, const Mounter<T>& P,
                        const std::string& pre) {
  Graph<T>& g = *x.graph;
  (void)g;
  const int C = x.shape()[1];
  auto ln = [&](Tensor<T> t, const char* n) {
    return layer_norm_channels(t, P(pre + n + ".gamma"), P(pre + n + ".beta"),
                               T(1e-6));
  };

  if (v.kind == ArchKind::restormer) {
    Tensor<T> a = mdta_impl(ln(x, "norm1"), P, pre + "attn.", v.attention_heads);
    x = add(x, mul(P(pre + "skip1"), a));
    Tensor<T> f = gdfn_impl(ln(x, "norm2"), P, pre + "ffn.");
    return add(x, mul(P(pre + "skip2"), f));
  }

  const bool gated = v.kind == ArchKind::nafnet;
  const Act act = v.kind == ArchKind::intermediate_relu ? Act::relu : Act::gelu;

  Tensor<T> u = conv2d(ln(x, "norm1"), P(pre + "conv1.weight"),
                       P(pre + "conv1.bias"), {});
  u = conv2d(u, P(pre + "dwconv.weight"), P(pre + "dwconv.bias"), {1, 1, 2 * C});
  if (gated)
    u = simple_gate(u);
  else
    u = activation(act, u);
  if (v.kind == ArchKind::baseline)
    u = channel_attention_gate(u, P, pre);
  else
    u = simplified_channel_attention_gate(u, P, pre);
  u = conv2d(u, P(pre + "conv2.weight"), P(pre + "conv2.bias"), {});
  x = add(x, mul(P(pre + "skip1"), u));

  Tensor<T> f = conv2d(ln(x, "norm2"), P(pre + "ffn1.weight"),
                       P(pre + "ffn1.bias"), {});
  if (gated)
    f = simple_gate(f);
  else
    f = activation(act, f);
  f = conv2d(f, P(pre + "ffn2.weight"), P(pre + "ffn2.bias"), {});
  return add(x, mul(P(pre + "skip2"), f));
}

}  // namespace

template <typename T>
Tensor<T> restoration_block(Graph<T>& g, const ArchVariant& v, Tensor<T> x,
                            const ParamStore<T>& params, const std::string& prefix,
                            bool params_require_grad,
                            std::vector<int>* param_nodes) {
  Mounter<T> P(g, params, params_require_grad, param_nodes);
  return block_forward(v, x, P, prefix);
}

template <typename T>
Tensor<T> channel_attention(Graph<T>& g, Tensor<T> x, const ParamStore<T>& params,
                            const std::string& prefix, bool params_require_grad) {
  Mounter<T> P(g, params, params_require_grad, nullptr);
  return channel_attention_gate(x, P, prefix);
}

template <typename T>
Tensor<T> simplified_channel_attention(Graph<T>& g, Tensor<T> x,
                                       const ParamStore<T>& params,
                                       const std::string& prefix,
                                       bool params_require_grad) {
  Mounter<T> P(g, params, params_require_grad, nullptr);
  return simplified_channel_attention_gate(x, P, prefix);
}

template <typename T>
Tensor<T> mdta(Graph<T>& g, Tensor<T> x, const ParamStore<T>& params,
               const std::string& prefix, int heads, bool params_require_grad,
               Tensor<T>* attention_out) {
  Mounter<T> P(g, params, params_require_grad, nullptr);
  return mdta_impl(x, P, prefix, heads, attention_out);
}

template <typename T>
Tensor<T> gdfn(Graph<T>& g, Tensor<T> x, const ParamStore<T>& params,
               const std::string& prefix, bool params_require_grad) {
  Mounter<T> P(g, params, params_require_grad, nullptr);
  return gdfn_impl(x, P, prefix);
}

template <typename T>
Tensor<T> model_forward(Graph<T>& g, const Model<T>& m, Tensor<T> y,
                        bool params_require_grad, std::vector<int>* param_nodes) {
  const ArchVariant& v = m.variant;
  const Shape& ys = y.shape();
  if (ys.size() != 4 || ys[1] != 3)
    throw std::invalid_argument("model_forward: input must be Nx3xHxW, got " +
                                shape_str(ys));
  const int div = 1 << (v.levels - 1);
  if (ys[2] % div != 0 || ys[3] % div != 0)
    throw std::invalid_argument(
        "model_forward: spatial dims " + std::to_string(ys[2]) + "x" +
        std::to_string(ys[3]) + " must be divisible by " + std::to_string(div) +
        " for levels=" + std::to_string(v.levels) + "; pad the input");

  Mounter<T> P(g, m.params, params_require_grad, param_nodes);

  Tensor<T> f = conv2d(y, P("intro.weight"), P("intro.bias"), {1, 1, 1});
  std::vector<Tensor<T>> skips;
  for (int lv = 0; lv < v.levels; ++lv) {
    for (int b = 0; b < v.enc_blocks[lv]; ++b)
      f = block_forward(v, f, P,
                        "enc" + std::to_string(lv) + ".b" + std::to_string(b) + ".");
    if (lv < v.levels - 1) {
      skips.push_back(f);
      f = pixel_shuffle(f, 2, Shuffle::down);
      f = conv2d(f, P("down" + std::to_string(lv) + ".weight"),
                 P("down" + std::to_string(lv) + ".bias"), {});
    }
  }
  for (int lv = v.levels - 2; lv >= 0; --lv) {
    f = conv2d(f, P("up" + std::to_string(lv) + ".weight"),
               P("up" + std::to_string(lv) + ".bias"), {});
    f = pixel_shuffle(f, 2, Shuffle::up);
    f = add(f, skips[lv]);
    for (int b = 0; b < v.dec_blocks[lv]; ++b)
      f = block_forward(v, f, P,
                        "dec" + std::to_string(lv) + ".b" + std::to_string(b) + ".");
  }
  Tensor<T> res = conv2d(f, P("outro.weight"), P("outro.bias"), {1, 1, 1});
  return add(y, res);
}

// ---- checkpoint interop ----

std::string variant_to_json(const ArchVariant& v) {
  json j;
  j["kind"] = arch_kind_name(v.kind);
  j["width"] = v.width;
  j["levels"] = v.levels;
  j["enc_blocks"] = v.enc_blocks;
  j["dec_blocks"] = v.dec_blocks;
  j["attention_heads"] = v.attention_heads;
  j["ca_reduction"] = v.ca_reduction;
  return j.dump();
}

ArchVariant variant_from_json(const std::string& s) {
  json j = json::parse(s);
  ArchVariant v;
  v.kind = arch_kind_from_name(j.at("kind").get<std::string>());
  v.width = j.at("width").get<int>();
  v.levels = j.at("levels").get<int>();
  v.enc_blocks = j.at("enc_blocks").get<std::vector<int>>();
  v.dec_blocks = j.at("dec_blocks").get<std::vector<int>>();
  v.attention_heads = j.value("attention_heads", 2);
  v.ca_reduction = j.value("ca_reduction", 2);
  v.validate();
  return v;
}

template <typename T>
void save_model(const std::string& path, const Model<T>& m, ArrayDType dtype) {
  CheckpointFile ck;
  json meta;
  meta["type"] = "model";
  meta["variant"] = json::parse(variant_to_json(m.variant));
  ck.meta_json = meta.dump();
  ck.arrays.reserve(m.params.entries.size());
  for (const auto& e : m.params.entries) {
    NamedArray a;
    a.name = e.name;
    a.shape = e.shape;
    a.dtype = dtype;
    a.values.assign(e.values.begin(), e.values.end());
    if (dtype == ArrayDType::f32) {
      // keep in-memory values identical to what a reload would produce
      for (double& x : a.values) x = static_cast<double>(static_cast<float>(x));
    }
    ck.arrays.push_back(std::move(a));
  }
  save_checkpoint_file(path, ck);
}

template <typename T>
Model<T> load_model(const std::string& path) {
  CheckpointFile ck = load_checkpoint_file(path);
  json meta = json::parse(ck.meta_json);
  if (meta.value("type", "") != "model")
    throw std::runtime_error("checkpoint " + path + " is not a model file");
  Model<T> m;
  m.variant = variant_from_json(meta.at("variant").dump());
  m.params.entries.reserve(ck.arrays.size());
  for (const NamedArray& a : ck.arrays) {
    typename ParamStore<T>::Entry e;
    e.name = a.name;
    e.shape = a.shape;
    e.values.assign(a.values.begin(), a.values.end());
    m.params.entries.push_back(std::move(e));
  }
  return m;
}

// ---- explicit instantiations ----

#define RLAB_INSTANTIATE_NETS(T)                                                  \
  template struct ParamStore<T>;                                                  \
  template ParamStore<T> init_params<T>(const std::vector<ParamSpec>&, uint64_t); \
  template Model<T> build_model<T>(const ArchVariant&, uint64_t);                 \
  template Tensor<T> model_forward<T>(Graph<T>&, const Model<T>&, Tensor<T>,      \
                                      bool, std::vector<int>*);                   \
  template Tensor<T> restoration_block<T>(Graph<T>&, const ArchVariant&,          \
                                          Tensor<T>, const ParamStore<T>&,        \
                                          const std::string&, bool,               \
                                          std::vector<int>*);                     \
  template Tensor<T> channel_attention<T>(Graph<T>&, Tensor<T>,                   \
                                          const ParamStore<T>&,                   \
                                          const std::string&, bool);              \
  template Tensor<T> simplified_channel_attention<T>(Graph<T>&, Tensor<T>,        \
                                                     const ParamStore<T>&,        \
                                                     const std::string&, bool);   \
  template Tensor<T> mdta<T>(Graph<T>&, Tensor<T>, const ParamStore<T>&,          \
                             const std::string&, int, bool, Tensor<T>*);          \
  template Tensor<T> gdfn<T>(Graph<T>&, Tensor<T>, const ParamStore<T>&,          \
                             const std::string&, bool);                           \
  template void save_model<T>(const std::string&, const Model<T>&, ArrayDType);   \
  template Model<T> load_model<T>(const std::string&);

RLAB_INSTANTIATE_NETS(float)
RLAB_INSTANTIATE_NETS(double)

#undef RLAB_INSTANTIATE_NETS

}  // namespace rlab
