#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlab/checkpoint.hpp"
#include "rlab/tensor.hpp"

namespace rlab {

// The five block designs: a restoration transformer block (channel-wise
// multi-head attention + gated depthwise feed-forward), the channel-attention
// baseline derived from it, the activation-free variant with simple gates and
// simplified channel attention, and the two intermediate steps that swap in
// simplified channel attention while keeping GELU or ReLU.
enum class ArchKind { restormer, baseline, nafnet, intermediate, intermediate_relu };

const char* arch_kind_name(ArchKind k);
ArchKind arch_kind_from_name(const std::string& s);
std::vector<ArchKind> all_arch_kinds();

struct ArchVariant {
  ArchKind kind = ArchKind::nafnet;
  int width = 8;  // base channel count (full-scale configs use 32)
  int levels = 3;
  std::vector<int> enc_blocks;  // size `levels`; last entry is the bottom level
  std::vector<int> dec_blocks;  // size `levels - 1`
  int attention_heads = 2;      // restormer only
  int ca_reduction = 2;         // channel-attention bottleneck ratio

  void set_default_blocks();  // one block per level
  void validate() const;
};

template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<T> values;
  };
  std::vector<Entry> entries;

  int find(const std::string& name) const;
  const Entry& at(const std::string& name) const;
  Entry& at(const std::string& name);
  int64_t total_count() const;
  uint64_t checksum() const;
};

template <typename T>
struct Model {
  ArchVariant variant;
  ParamStore<T> params;
};

// Deterministic initialization: fan-in-scaled uniform conv weights, zero
// biases, unit norm affines and skip scales.
template <typename T>
Model<T> build_model(const ArchVariant& v, uint64_t seed);

// Mounts parameters into `g` as leaf tensors and builds the forward graph.
// The network is a UNet-style encoder-decoder with additive skips, pixel
// shuffle resolution changes and a global input->output residual.
// `param_nodes`, when given, receives one node id per ParamStore entry.
template <typename T>
Tensor<T> model_forward(Graph<T>& g, const Model<T>& m, Tensor<T> y,
                        bool params_require_grad = false,
                        std::vector<int>* param_nodes = nullptr);

// One repeating block applied at channel width C; params must hold the
// entries enumerated for `prefix` (see enumerate_block_params).
template <typename T>
Tensor<T> restoration_block(Graph<T>& g, const ArchVariant& v, Tensor<T> x,
                            const ParamStore<T>& params, const std::string& prefix,
                            bool params_require_grad = false,
                            std::vector<int>* param_nodes = nullptr);

// Squeeze-excitation style gate: x * sigmoid(fc2(relu(fc1(gap(x))))).
// Params: <prefix>ca.fc1.{weight,bias}, <prefix>ca.fc2.{weight,bias}.
template <typename T>
Tensor<T> channel_attention(Graph<T>& g, Tensor<T> x, const ParamStore<T>& params,
                            const std::string& prefix,
                            bool params_require_grad = false);

// Activation-free gate: x * (W gap(x) + b). Params: <prefix>sca.{weight,bias}.
template <typename T>
Tensor<T> simplified_channel_attention(Graph<T>& g, Tensor<T> x,
                                       const ParamStore<T>& params,
                                       const std::string& prefix,
                                       bool params_require_grad = false);

// Channel-wise multi-head attention over the (C/heads)^2 similarity matrix.
// Params: <prefix>{qkv,qkv_dw,proj}.{weight,bias}, <prefix>temperature.
// attention_out, when given, receives the row-stochastic attention tensor.
template <typename T>
Tensor<T> mdta(Graph<T>& g, Tensor<T> x, const ParamStore<T>& params,
               const std::string& prefix, int heads,
               bool params_require_grad = false,
               Tensor<T>* attention_out = nullptr);

// Gated depthwise feed-forward: out = proj(gelu(path1) * path2).
// Params: <prefix>{in,dw,out}.{weight,bias}.
template <typename T>
Tensor<T> gdfn(Graph<T>& g, Tensor<T> x, const ParamStore<T>& params,
               const std::string& prefix, bool params_require_grad = false);

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { conv_fan_in, zeros, ones } init;
};

std::vector<ParamSpec> enumerate_model_params(const ArchVariant& v);
std::vector<ParamSpec> enumerate_block_params(const ArchVariant& v, int channels,
                                              const std::string& prefix);

int64_t variant_param_count(const ArchVariant& v);
int64_t block_param_count(const ArchVariant& v, int channels);

// Builds a ParamStore from specs with the deterministic init.
template <typename T>
ParamStore<T> init_params(const std::vector<ParamSpec>& specs, uint64_t seed);

// ---- checkpoint interop ----

template <typename T>
void save_model(const std::string& path, const Model<T>& m, ArrayDType dtype);

template <typename T>
Model<T> load_model(const std::string& path);

std::string variant_to_json(const ArchVariant& v);
ArchVariant variant_from_json(const std::string& json);

}  // namespace rlab
