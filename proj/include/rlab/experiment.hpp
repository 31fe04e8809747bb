#pragma once

#include <array>
#include <string>
#include <vector>

#include "rlab/attacks.hpp"
#include "rlab/data.hpp"
#include "rlab/metrics.hpp"
#include "rlab/nets.hpp"

namespace rlab {

enum class Precision { f32, f64 };

const char* precision_name(Precision p);
Precision precision_from_name(const std::string& s);

// "8/255" stays a string everywhere it is displayed; parsed exactly when used.
double parse_rational(const std::string& s);

struct AttackSweep {
  AttackKind kind = AttackKind::cospgd;
  std::string epsilon = "8/255";
  double alpha = 0.01;
  std::vector<int> iterations = {5};
};

struct ExperimentConfig {
  int schema_version = 1;
  uint64_t seed = 0;
  Precision precision = Precision::f64;

  DatasetSpec dataset;      // in-memory synthetic dataset...
  std::string dataset_dir;  // ...or a directory written by gen-data

  std::vector<ArchVariant> variants;
  std::vector<std::string> defenses = {"none", "fgsm"};

  int train_steps = 2000;
  int batch_size = 8;
  double lr = 1e-3;
  double lr_min = 1e-6;
  double weight_decay = 1e-4;
  int val_interval = 500;
  std::string train_epsilon = "8/255";  // FGSM budget for the +ADV twins

  std::vector<AttackSweep> attacks;
  int panel_samples = 3;

  bool evaluate_only = false;     // referenced checkpoints must already exist
  std::string checkpoints_dir;    // reuse checkpoints from a previous run

  void validate() const;
};

ExperimentConfig experiment_config_from_json(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

struct CellKey {
  std::string architecture;
  std::string defense;    // "none" | "fgsm"
  std::string attack;     // "none" for the clean row
  std::string epsilon;    // rational string; "0" for clean
  int iterations = 0;
};

std::string cell_key_filename(const CellKey& key);  // e.g. panel__nafnet__none__cospgd__eps8-255__it5.png
CellKey parse_cell_filename(const std::string& filename);

struct ResultRow {
  CellKey key;
  MetricsAggregate agg;
  bool ok = true;
  std::string error;
};

struct ResultTable {
  std::vector<ResultRow> rows;
  const ResultRow* find(const CellKey& key) const;
};

void emit_table(const ResultTable& table, const std::string& format,
                const std::string& path);

struct ExperimentOutcome {
  ResultTable table;
  std::string run_dir;
  bool any_failed = false;
};

// Runs the full (variant x defense x attack-cell) grid: trains or loads each
// model, evaluates clean and attacked restoration quality, writes table.csv,
// table.md, per-run attack traces (attacks.jsonl), sample panels and a
// manifest with full provenance. Deterministic byte-for-byte at f64.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                 const std::string& run_dir);

// k x 4 tile grid: ground truth, degraded, restored-clean, restored-attacked.
template <typename T>
Image<T> make_panel(const std::vector<std::array<Image<T>, 4>>& rows);

}  // namespace rlab
