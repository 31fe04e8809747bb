#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rlab/attacks.hpp"
#include "rlab/data.hpp"
#include "rlab/nets.hpp"

namespace rlab {

template <typename T>
struct TrainConfig {
  int steps = 2000;
  int batch_size = 8;
  T lr = T(1e-3);
  T lr_min = T(1e-6);  // cosine decay target
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T adam_eps = T(1e-8);
  T weight_decay = T(1e-4);
  T grad_clip_norm = T(1.0);  // global-norm clip; 0 disables
  bool adversarial = false;   // half-clean / half-FGSM batches
  T epsilon = T(8) / T(255);  // FGSM budget during adversarial training
  uint64_t seed = 0;
  int val_interval = 200;
  int checkpoint_interval = 0;  // 0: no periodic state checkpoints
  std::string checkpoint_dir;

  void validate() const;
};

template <typename T>
struct TrainLogRow {
  int step = 0;
  T clean_loss = T(0);
  T adv_loss = T(0);  // 0 for standard steps
  T lr = T(0);
  bool clipped = false;
  bool has_val = false;
  T val_psnr = T(0);
};

template <typename T>
struct TrainLog {
  std::vector<TrainLogRow<T>> rows;
  std::string header_note;  // optimizer/precision echo, written as a comment
  void write_csv(const std::string& path) const;
};

// Adam with decoupled weight decay; moment buffers aligned with the store.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParamStore<T>& params);

  // grads[k] matches params.entries[k]; returns true when the global-norm
  // clip fired
  bool step(ParamStore<T>& params, std::vector<std::vector<T>>& grads,
            const TrainConfig<T>& cfg, T lr);

  int64_t steps_taken() const { return t_; }

  std::vector<std::vector<T>>& m() { return m_; }
  std::vector<std::vector<T>>& v() { return v_; }
  const std::vector<std::vector<T>>& m() const { return m_; }
  const std::vector<std::vector<T>>& v() const { return v_; }
  void set_steps_taken(int64_t t) { t_ = t; }

 private:
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 0;
};

template <typename T>
T cosine_lr(const TrainConfig<T>& cfg, int step);

// deterministic shuffled batch: pure function of (seed, step)
std::vector<int> deterministic_batch(uint64_t seed, int step, int batch_size, int n);

template <typename T>
T train_step_standard(Model<T>& m, std::span<const ImagePair<T>> batch,
                      AdamW<T>& opt, const TrainConfig<T>& cfg, int step,
                      bool* clipped = nullptr);

template <typename T>
struct AdvStepLosses {
  T clean_loss = T(0);
  T adv_loss = T(0);
};

// First half of the batch clean, second half perturbed by FGSM against the
// current parameters; one update on the mean objective over the full batch.
template <typename T>
AdvStepLosses<T> train_step_adversarial(Model<T>& m,
                                        std::span<const ImagePair<T>> batch,
                                        AdamW<T>& opt, const TrainConfig<T>& cfg,
                                        int step, bool* clipped = nullptr);

template <typename T>
struct TrainResult {
  Model<T> best_model;   // highest validation PSNR seen
  Model<T> final_model;  // parameters after the last step
  TrainLog<T> log;
  T best_val_psnr = T(0);
};

// resume_from: path of a train-state checkpoint; continues to cfg.steps and
// reproduces the uninterrupted trajectory exactly.
template <typename T>
TrainResult<T> train_loop(const Model<T>& init, const Dataset<T>& data,
                          const TrainConfig<T>& cfg,
                          const std::string& resume_from = "");

template <typename T>
void save_train_state(const std::string& path, const Model<T>& m,
                      const AdamW<T>& opt, int next_step);

template <typename T>
struct TrainState {
  Model<T> model;
  AdamW<T> opt;
  int next_step = 0;
};

template <typename T>
TrainState<T> load_train_state(const std::string& path);

template <typename T>
double validation_psnr(const Model<T>& m, std::span<const ImagePair<T>> val);

}  // namespace rlab
