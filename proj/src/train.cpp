#include "rlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "rlab/metrics.hpp"

namespace rlab {

using nlohmann::json;

template <typename T>
void TrainConfig<T>::validate() const {
  if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (adversarial && batch_size % 2 != 0)
    throw std::invalid_argument(
        "train: adversarial training needs an even batch size for the 50/50 split");
  if (!(lr > T(0))) throw std::invalid_argument("train: lr must be > 0");
  if (!(epsilon >= T(0) && epsilon <= T(1)))
    throw std::invalid_argument("train: epsilon must be in [0, 1]");
}

template <typename T>
void TrainLog<T>::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("trainlog: cannot write " + path);
  if (!header_note.empty()) f << "# " << header_note << "\n";
  f << "step,clean_loss,adv_loss,lr,val_psnr\n";
  char buf[256];
  for (const auto& r : rows) {
    if (r.has_val)
      std::snprintf(buf, sizeof(buf), "%d,%.8g,%.8g,%.8g,%.4f\n", r.step,
                    static_cast<double>(r.clean_loss), static_cast<double>(r.adv_loss),
                    static_cast<double>(r.lr), static_cast<double>(r.val_psnr));
    else
      std::snprintf(buf, sizeof(buf), "%d,%.8g,%.8g,%.8g,\n", r.step,
                    static_cast<double>(r.clean_loss), static_cast<double>(r.adv_loss),
                    static_cast<double>(r.lr));
    f << buf;
  }
}

template <typename T>
AdamW<T>::AdamW(const ParamStore<T>& params) {
  m_.reserve(params.entries.size());
  v_.reserve(params.entries.size());
  for (const auto& e : params.entries) {
    m_.emplace_back(e.values.size(), T(0));
    v_.emplace_back(e.values.size(), T(0));
  }
}

template <typename T>
bool AdamW<T>::step(ParamStore<T>& params, std::vector<std::vector<T>>& grads,
                    const TrainConfig<T>& cfg, T lr) {
  if (grads.size() != params.entries.size() || m_.size() != params.entries.size())
    throw std::invalid_argument("adamw: gradient/moment layout mismatch");

  bool clipped = false;
  if (cfg.grad_clip_norm > T(0)) {
    T sq = T(0);
    for (const auto& g : grads)
      for (T v : g) sq += v * v;
    const T norm = std::sqrt(sq);
    if (norm > cfg.grad_clip_norm) {
      const T s = cfg.grad_clip_norm / norm;
      for (auto& g : grads)
        for (T& v : g) v *= s;
      clipped = true;
    }
  }

  ++t_;
  const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(t_));
  const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(t_));
  for (size_t k = 0; k < params.entries.size(); ++k) {
    auto& theta = params.entries[k].values;
    auto& mk = m_[k];
    auto& vk = v_[k];
    const auto& gk = grads[k];
    for (size_t i = 0; i < theta.size(); ++i) {
      mk[i] = cfg.beta1 * mk[i] + (T(1) - cfg.beta1) * gk[i];
      vk[i] = cfg.beta2 * vk[i] + (T(1) - cfg.beta2) * gk[i] * gk[i];
      const T mhat = mk[i] / bc1;
      const T vhat = vk[i] / bc2;
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                        cfg.weight_decay * theta[i]);
    }
  }
  return clipped;
}

template <typename T>
T cosine_lr(const TrainConfig<T>& cfg, int step) {
  if (cfg.steps <= 1) return cfg.lr;
  const double t = static_cast<double>(step) / (cfg.steps - 1);
  const double v = static_cast<double>(cfg.lr_min) +
                   0.5 * (static_cast<double>(cfg.lr) - static_cast<double>(cfg.lr_min)) *
                       (1.0 + std::cos(M_PI * t));
  return static_cast<T>(v);
}

std::vector<int> deterministic_batch(uint64_t seed, int step, int batch_size, int n) {
  if (n < 1) throw std::invalid_argument("deterministic_batch: empty dataset");
  std::vector<int> out(batch_size);
  int64_t pos = static_cast<int64_t>(step) * batch_size;
  int64_t epoch = pos / n;
  std::vector<int> perm(n);
  auto build_perm = [&](int64_t e) {
    for (int i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, 0x5eed0000ull + static_cast<uint64_t>(e)));
    rng.shuffle(perm.begin(), perm.end());
  };
  build_perm(epoch);
  for (int i = 0; i < batch_size; ++i) {
    const int64_t p = pos + i;
    if (p / n != epoch) {
      epoch = p / n;
      build_perm(epoch);
    }
    out[i] = perm[p % n];
  }
  return out;
}

// ---- gradient accumulation over per-sample graphs ----

namespace {

template <typename T>
struct GradAccum {
  std::vector<std::vector<T>> g;

  explicit GradAccum(const ParamStore<T>& params) {
    g.reserve(params.entries.size());
    for (const auto& e : params.entries) g.emplace_back(e.values.size(), T(0));
  }

  void add(const Graph<T>& graph, const std::vector<int>& param_nodes) {
    for (size_t k = 0; k < param_nodes.size(); ++k) {
      std::span<const T> pg = graph.grad(param_nodes[k]);
      if (pg.empty()) continue;
      auto& gk = g[k];
      for (size_t i = 0; i < gk.size(); ++i) gk[i] += pg[i];
    }
  }

  void scale(T s) {
    for (auto& gk : g)
      for (T& v : gk) v *= s;
  }
};

template <typename T>
Shape sample_shape(const ImagePair<T>& p) {
  return Shape{1, p.x.channels, p.x.height, p.x.width};
}

// forward + backward for one sample; returns the per-sample mean-MSE loss
template <typename T>
T sample_loss_and_grads(const Model<T>& m, const Image<T>& input,
                        const Image<T>& target, GradAccum<T>& acc) {
  Graph<T> g;
  Tensor<T> y = g.leaf({1, input.channels, input.height, input.width},
                       input.data, false);
  std::vector<int> pnodes;
  Tensor<T> out = model_forward(g, m, y, /*params_require_grad=*/true, &pnodes);
  Tensor<T> x = g.leaf({1, target.channels, target.height, target.width},
                       target.data, false);
  Tensor<T> loss = mse_loss(out, x);
  const T lv = loss.value()[0];
  if (!std::isfinite(static_cast<double>(lv)))
    throw std::runtime_error("training: non-finite sample loss");
  g.backward(loss);
  acc.add(g, pnodes);
  return lv;
}

}  // namespace

template <typename T>
T train_step_standard(Model<T>& m, std::span<const ImagePair<T>> batch,
                      AdamW<T>& opt, const TrainConfig<T>& cfg, int step,
                      bool* clipped) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  GradAccum<T> acc(m.params);
  T loss_sum = T(0);
  for (const ImagePair<T>& p : batch)
    loss_sum += sample_loss_and_grads(m, p.y_clean, p.x, acc);
  const T inv = T(1) / static_cast<T>(batch.size());
  acc.scale(inv);
  const bool c = opt.step(m.params, acc.g, cfg, cosine_lr(cfg, step));
  if (clipped) *clipped = c;
  return loss_sum * inv;
}

template <typename T>
AdvStepLosses<T> train_step_adversarial(Model<T>& m,
                                        std::span<const ImagePair<T>> batch,
                                        AdamW<T>& opt, const TrainConfig<T>& cfg,
                                        int step, bool* clipped) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  if (batch.size() % 2 != 0)
    throw std::invalid_argument("train_step_adversarial: batch size must be even");
  const size_t half = batch.size() / 2;

  // Adversarial inputs are generated against the current parameters, before
  // the single optimizer update below.
  std::vector<Image<T>> inputs(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const ImagePair<T>& p = batch[i];
    if (i < half || cfg.epsilon == T(0)) {
      inputs[i] = p.y_clean;
    } else {
      AttackResult<T> r = fgsm_attack<T>(model_forward_fn(m),
                                         std::span<const T>(p.y_clean.data),
                                         std::span<const T>(p.x.data),
                                         sample_shape(p), cfg.epsilon);
      inputs[i] = p.y_clean;
      inputs[i].data = std::move(r.y_adv);
    }
  }

  GradAccum<T> acc(m.params);
  AdvStepLosses<T> losses;
  for (size_t i = 0; i < batch.size(); ++i) {
    const T lv = sample_loss_and_grads(m, inputs[i], batch[i].x, acc);
    if (i < half)
      losses.clean_loss += lv;
    else
      losses.adv_loss += lv;
  }
  const T inv = T(1) / static_cast<T>(batch.size());
  acc.scale(inv);
  const bool c = opt.step(m.params, acc.g, cfg, cosine_lr(cfg, step));
  if (clipped) *clipped = c;
  losses.clean_loss /= static_cast<T>(half);
  losses.adv_loss /= static_cast<T>(half);
  return losses;
}

template <typename T>
double validation_psnr(const Model<T>& m, std::span<const ImagePair<T>> val) {
  if (val.empty()) return 0.0;
  double acc = 0.0;
  for (const ImagePair<T>& p : val) {
    Graph<T> g;
    Tensor<T> y = g.leaf({1, p.y_clean.channels, p.y_clean.height, p.y_clean.width},
                         p.y_clean.data, false);
    Tensor<T> out = model_forward(g, m, y, false);
    acc += psnr<T>(out.value(), std::span<const T>(p.x.data), 1.0);
  }
  return acc / static_cast<double>(val.size());
}

// ---- state checkpointing ----

template <typename T>
void save_train_state(const std::string& path, const Model<T>& m,
                      const AdamW<T>& opt, int next_step) {
  CheckpointFile ck;
  json meta;
  meta["type"] = "train_state";
  meta["variant"] = json::parse(variant_to_json(m.variant));
  meta["next_step"] = next_step;
  meta["adam_t"] = opt.steps_taken();
  ck.meta_json = meta.dump();
  const ArrayDType dtype =
      sizeof(T) == sizeof(double) ? ArrayDType::f64 : ArrayDType::f32;
  for (size_t k = 0; k < m.params.entries.size(); ++k) {
    const auto& e = m.params.entries[k];
    NamedArray a;
    a.name = e.name;
    a.shape = e.shape;
    a.dtype = dtype;
    a.values.assign(e.values.begin(), e.values.end());
    ck.arrays.push_back(std::move(a));
    NamedArray am;
    am.name = "adam.m." + e.name;
    am.shape = e.shape;
    am.dtype = dtype;
    am.values.assign(opt.m()[k].begin(), opt.m()[k].end());
    ck.arrays.push_back(std::move(am));
    NamedArray av;
    av.name = "adam.v." + e.name;
    av.shape = e.shape;
    av.dtype = dtype;
    av.values.assign(opt.v()[k].begin(), opt.v()[k].end());
    ck.arrays.push_back(std::move(av));
  }
  save_checkpoint_file(path, ck);
}

template <typename T>
TrainState<T> load_train_state(const std::string& path) {
  CheckpointFile ck = load_checkpoint_file(path);
  json meta = json::parse(ck.meta_json);
  if (meta.value("type", "") != "train_state")
    throw std::runtime_error("checkpoint " + path + " is not a train state");
  TrainState<T> st;
  st.model.variant = variant_from_json(meta.at("variant").dump());
  st.next_step = meta.at("next_step").get<int>();

  std::vector<std::vector<T>> ms, vs;
  for (const NamedArray& a : ck.arrays) {
    if (a.name.rfind("adam.m.", 0) == 0) {
      ms.emplace_back(a.values.begin(), a.values.end());
    } else if (a.name.rfind("adam.v.", 0) == 0) {
      vs.emplace_back(a.values.begin(), a.values.end());
    } else {
      typename ParamStore<T>::Entry e;
      e.name = a.name;
      e.shape = a.shape;
      e.values.assign(a.values.begin(), a.values.end());
      st.model.params.entries.push_back(std::move(e));
    }
  }
  st.opt = AdamW<T>(st.model.params);
  st.opt.m() = std::move(ms);
  st.opt.v() = std::move(vs);
  st.opt.set_steps_taken(meta.at("adam_t").get<int64_t>());
  return st;
}

template <typename T>
TrainResult<T> train_loop(const Model<T>& init, const Dataset<T>& data,
                          const TrainConfig<T>& cfg, const std::string& resume_from) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train_loop: empty train set");

  Model<T> model = init;
  AdamW<T> opt(model.params);
  int start_step = 0;
  if (!resume_from.empty()) {
    TrainState<T> st = load_train_state<T>(resume_from);
    model = std::move(st.model);
    opt = std::move(st.opt);
    start_step = st.next_step;
  }

  TrainResult<T> res;
  res.best_val_psnr = T(-1);
  res.log.header_note =
      std::string("optimizer=adamw lr=") + std::to_string(static_cast<double>(cfg.lr)) +
      " lr_min=" + std::to_string(static_cast<double>(cfg.lr_min)) +
      " wd=" + std::to_string(static_cast<double>(cfg.weight_decay)) +
      " precision=" + (sizeof(T) == 8 ? "f64" : "f32") +
      (cfg.adversarial ? " adversarial=fgsm" : " adversarial=none");

  std::string last_ckpt;
  for (int step = start_step; step < cfg.steps; ++step) {
    std::vector<int> idx =
        deterministic_batch(cfg.seed, step, cfg.batch_size,
                            static_cast<int>(data.train.size()));
    std::vector<ImagePair<T>> batch;
    batch.reserve(idx.size());
    for (int i : idx) batch.push_back(data.train[i]);

    TrainLogRow<T> row;
    row.step = step;
    row.lr = cosine_lr(cfg, step);
    try {
      if (cfg.adversarial) {
        AdvStepLosses<T> l = train_step_adversarial(
            model, std::span<const ImagePair<T>>(batch), opt, cfg, step, &row.clipped);
        row.clean_loss = l.clean_loss;
        row.adv_loss = l.adv_loss;
      } else {
        row.clean_loss = train_step_standard(
            model, std::span<const ImagePair<T>>(batch), opt, cfg, step, &row.clipped);
      }
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string(e.what()) + " at step " +
                               std::to_string(step) + "; last good checkpoint: " +
                               (last_ckpt.empty() ? "(none)" : last_ckpt));
    }

    const bool last = step + 1 == cfg.steps;
    if (cfg.val_interval > 0 && ((step + 1) % cfg.val_interval == 0 || last) &&
        !data.test.empty()) {
      row.has_val = true;
      row.val_psnr = static_cast<T>(validation_psnr(model, std::span<const ImagePair<T>>(data.test)));
      if (row.val_psnr > res.best_val_psnr) {
        res.best_val_psnr = row.val_psnr;
        res.best_model = model;
      }
    }
    res.log.rows.push_back(row);

    if (cfg.checkpoint_interval > 0 && !cfg.checkpoint_dir.empty() &&
        ((step + 1) % cfg.checkpoint_interval == 0 || last)) {
      last_ckpt = cfg.checkpoint_dir + "/state_" + std::to_string(step + 1) + ".ckpt";
      save_train_state(last_ckpt, model, opt, step + 1);
    }
  }

  res.final_model = model;
  if (res.best_val_psnr < T(0)) {
    res.best_model = model;  // no validation points: final == best
    res.best_val_psnr = T(0);
  }
  return res;
}

#define RLAB_INSTANTIATE_TRAIN(T)                                                   \
  template struct TrainConfig<T>;                                                   \
  template struct TrainLog<T>;                                                      \
  template class AdamW<T>;                                                          \
  template T cosine_lr<T>(const TrainConfig<T>&, int);                              \
  template T train_step_standard<T>(Model<T>&, std::span<const ImagePair<T>>,       \
                                    AdamW<T>&, const TrainConfig<T>&, int, bool*);  \
  template AdvStepLosses<T> train_step_adversarial<T>(                              \
      Model<T>&, std::span<const ImagePair<T>>, AdamW<T>&, const TrainConfig<T>&,   \
      int, bool*);                                                                  \
  template double validation_psnr<T>(const Model<T>&, std::span<const ImagePair<T>>); \
  template TrainResult<T> train_loop<T>(const Model<T>&, const Dataset<T>&,         \
                                        const TrainConfig<T>&, const std::string&); \
  template void save_train_state<T>(const std::string&, const Model<T>&,            \
                                    const AdamW<T>&, int);                          \
  template TrainState<T> load_train_state<T>(const std::string&);

RLAB_INSTANTIATE_TRAIN(float)
RLAB_INSTANTIATE_TRAIN(double)

#undef RLAB_INSTANTIATE_TRAIN

}  // namespace rlab
