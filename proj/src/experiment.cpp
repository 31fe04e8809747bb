#include "rlab/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "rlab/train.hpp"

namespace rlab {

using nlohmann::json;
namespace fs = std::filesystem;

static constexpr const char* kCodeVersion = "0.1.0";

const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_name(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + s + "'");
}

double parse_rational(const std::string& s) {
  const size_t slash = s.find('/');
  try {
    if (slash == std::string::npos) return std::stod(s);
    const double num = std::stod(s.substr(0, slash));
    const double den = std::stod(s.substr(slash + 1));
    if (den == 0.0) throw std::invalid_argument("zero denominator");
    return num / den;
  } catch (const std::exception&) {
    throw std::invalid_argument("cannot parse rational '" + s + "'");
  }
}

// ---- config ----

void ExperimentConfig::validate() const {
  if (variants.empty()) throw std::invalid_argument("experiment: no variants configured");
  if (defenses.empty()) throw std::invalid_argument("experiment: no defenses configured");
  for (const std::string& d : defenses)
    if (d != "none" && d != "fgsm")
      throw std::invalid_argument("experiment: unknown defense '" + d + "'");
  for (const AttackSweep& a : attacks) {
    if (a.iterations.empty())
      throw std::invalid_argument("experiment: attack sweep with no iteration counts");
    parse_rational(a.epsilon);
  }
  parse_rational(train_epsilon);
  if (std::find(defenses.begin(), defenses.end(), "fgsm") != defenses.end() &&
      batch_size % 2 != 0)
    throw std::invalid_argument("experiment: fgsm defense needs an even batch size");
}

namespace {

json sweep_to_json(const AttackSweep& a) {
  json j;
  j["kind"] = attack_kind_name(a.kind);
  j["epsilon"] = a.epsilon;
  j["alpha"] = a.alpha;
  j["iterations"] = a.iterations;
  return j;
}

AttackSweep sweep_from_json(const json& j) {
  AttackSweep a;
  a.kind = attack_kind_from_name(j.at("kind").get<std::string>());
  a.epsilon = j.at("epsilon").get<std::string>();
  a.alpha = j.value("alpha", 0.01);
  a.iterations = j.at("iterations").get<std::vector<int>>();
  return a;
}

json dataset_to_json(const DatasetSpec& d) {
  json j;
  j["n_train"] = d.n_train;
  j["n_test"] = d.n_test;
  j["height"] = d.height;
  j["width"] = d.width;
  j["kernel_family"] = kernel_kind_name(d.kernel_family);
  j["seed"] = d.seed;
  j["sigma_min"] = d.sigma_min;
  j["sigma_max"] = d.sigma_max;
  return j;
}

DatasetSpec dataset_from_json(const json& j) {
  DatasetSpec d;
  d.n_train = j.value("n_train", 200);
  d.n_test = j.value("n_test", 50);
  d.height = j.value("height", 32);
  d.width = j.value("width", 32);
  d.kernel_family = kernel_kind_from_name(j.value("kernel_family", "gaussian"));
  d.seed = j.value("seed", 0ull);
  d.sigma_min = j.value("sigma_min", 0.9);
  d.sigma_max = j.value("sigma_max", 1.6);
  return d;
}

}  // namespace

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["schema_version"] = cfg.schema_version;
  j["seed"] = cfg.seed;
  j["precision"] = precision_name(cfg.precision);
  j["dataset"] = dataset_to_json(cfg.dataset);
  if (!cfg.dataset_dir.empty()) j["dataset_dir"] = cfg.dataset_dir;
  json vars = json::array();
  for (const ArchVariant& v : cfg.variants) vars.push_back(json::parse(variant_to_json(v)));
  j["variants"] = vars;
  j["defenses"] = cfg.defenses;
  j["train"] = {{"steps", cfg.train_steps},
                {"batch_size", cfg.batch_size},
                {"lr", cfg.lr},
                {"lr_min", cfg.lr_min},
                {"weight_decay", cfg.weight_decay},
                {"val_interval", cfg.val_interval},
                {"epsilon", cfg.train_epsilon}};
  json atks = json::array();
  for (const AttackSweep& a : cfg.attacks) atks.push_back(sweep_to_json(a));
  j["attacks"] = atks;
  j["panel_samples"] = cfg.panel_samples;
  j["evaluate_only"] = cfg.evaluate_only;
  if (!cfg.checkpoints_dir.empty()) j["checkpoints_dir"] = cfg.checkpoints_dir;
  return j.dump(2);
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  json j = json::parse(text);
  ExperimentConfig cfg;
  cfg.schema_version = j.value("schema_version", 1);
  if (cfg.schema_version != 1)
    throw std::invalid_argument("experiment config: unsupported schema_version " +
                                std::to_string(cfg.schema_version));
  cfg.seed = j.value("seed", 0ull);
  cfg.precision = precision_from_name(j.value("precision", "f64"));
  if (j.contains("dataset")) cfg.dataset = dataset_from_json(j["dataset"]);
  cfg.dataset_dir = j.value("dataset_dir", "");
  cfg.variants.clear();
  for (const json& vj : j.at("variants")) {
    if (vj.is_string()) {
      ArchVariant v;
      v.kind = arch_kind_from_name(vj.get<std::string>());
      v.set_default_blocks();
      cfg.variants.push_back(v);
    } else {
      cfg.variants.push_back(variant_from_json(vj.dump()));
    }
  }
  if (j.contains("defenses")) cfg.defenses = j["defenses"].get<std::vector<std::string>>();
  if (j.contains("train")) {
    const json& t = j["train"];
    cfg.train_steps = t.value("steps", 2000);
    cfg.batch_size = t.value("batch_size", 8);
    cfg.lr = t.value("lr", 1e-3);
    cfg.lr_min = t.value("lr_min", 1e-6);
    cfg.weight_decay = t.value("weight_decay", 1e-4);
    cfg.val_interval = t.value("val_interval", 500);
    cfg.train_epsilon = t.value("epsilon", std::string("8/255"));
  }
  cfg.attacks.clear();
  if (j.contains("attacks"))
    for (const json& aj : j["attacks"]) cfg.attacks.push_back(sweep_from_json(aj));
  cfg.panel_samples = j.value("panel_samples", 3);
  cfg.evaluate_only = j.value("evaluate_only", false);
  cfg.checkpoints_dir = j.value("checkpoints_dir", "");
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open experiment config " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return experiment_config_from_json(text);
}

// ---- cell keys ----

namespace {

std::string sanitize_eps(const std::string& eps) {
  std::string s = eps;
  for (char& c : s)
    if (c == '/') c = '-';
  return s;
}

std::string unsanitize_eps(const std::string& eps) {
  std::string s = eps;
  for (char& c : s)
    if (c == '-') c = '/';
  return s;
}

}  // namespace

std::string cell_key_filename(const CellKey& key) {
  return "panel__" + key.architecture + "__" + key.defense + "__" + key.attack +
         "__eps" + sanitize_eps(key.epsilon) + "__it" + std::to_string(key.iterations) +
         ".png";
}

CellKey parse_cell_filename(const std::string& filename) {
  std::string s = filename;
  const std::string ext = ".png";
  if (s.size() > ext.size() && s.substr(s.size() - ext.size()) == ext)
    s = s.substr(0, s.size() - ext.size());
  std::vector<std::string> parts;
  size_t pos = 0;
  while (true) {
    const size_t next = s.find("__", pos);
    if (next == std::string::npos) {
      parts.push_back(s.substr(pos));
      break;
    }
    parts.push_back(s.substr(pos, next - pos));
    pos = next + 2;
  }
  if (parts.size() != 6 || parts[0] != "panel" || parts[4].rfind("eps", 0) != 0 ||
      parts[5].rfind("it", 0) != 0)
    throw std::invalid_argument("not a panel filename: " + filename);
  CellKey key;
  key.architecture = parts[1];
  key.defense = parts[2];
  key.attack = parts[3];
  key.epsilon = unsanitize_eps(parts[4].substr(3));
  key.iterations = std::stoi(parts[5].substr(2));
  return key;
}

// ---- result table ----

const ResultRow* ResultTable::find(const CellKey& key) const {
  for (const ResultRow& r : rows)
    if (r.key.architecture == key.architecture && r.key.defense == key.defense &&
        r.key.attack == key.attack && r.key.epsilon == key.epsilon &&
        r.key.iterations == key.iterations)
      return &r;
  return nullptr;
}

namespace {

std::vector<std::string> row_cells(const ResultRow& r) {
  std::vector<std::string> out = {r.key.architecture, r.key.defense, r.key.attack,
                                  r.key.epsilon, std::to_string(r.key.iterations)};
  if (!r.ok) {
    for (int i = 0; i < 7; ++i) out.push_back("ERR");
    out.push_back(std::to_string(r.agg.n));
    out.push_back("ERR");
    return out;
  }
  char buf[64];
  auto fmt = [&](const char* f, double v) {
    std::snprintf(buf, sizeof(buf), f, v);
    return std::string(buf);
  };
  out.push_back(fmt("%.2f", r.agg.psnr_mean));
  out.push_back(fmt("%.2f", r.agg.psnr_std));
  out.push_back(fmt("%.4f", r.agg.ssim_mean));
  out.push_back(fmt("%.4f", r.agg.ssim_std));
  out.push_back(fmt("%.6f", r.agg.hf_energy_ratio_mean));
  out.push_back(fmt("%.6f", r.agg.grid_peak_score_mean));
  out.push_back(fmt("%.6f", r.agg.color_mixing_score_mean));
  out.push_back(std::to_string(r.agg.n));
  out.push_back("ok");
  return out;
}

const char* kTableColumns[] = {
    "architecture", "defense", "attack", "epsilon", "iterations",
    "psnr_mean", "psnr_std", "ssim_mean", "ssim_std",
    "hf_energy_ratio_mean", "grid_peak_score_mean", "color_mixing_score_mean",
    "n_images", "status"};

}  // namespace

void emit_table(const ResultTable& table, const std::string& format,
                const std::string& path) {
  if (table.rows.empty()) throw std::invalid_argument("emit_table: empty table");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("emit_table: cannot write " + path);
  const size_t ncols = std::size(kTableColumns);
  if (format == "csv") {
    for (size_t i = 0; i < ncols; ++i) f << (i ? "," : "") << kTableColumns[i];
    f << "\n";
    for (const ResultRow& r : table.rows) {
      auto cells = row_cells(r);
      for (size_t i = 0; i < cells.size(); ++i) f << (i ? "," : "") << cells[i];
      f << "\n";
    }
  } else if (format == "markdown") {
    f << "|";
    for (size_t i = 0; i < ncols; ++i) f << " " << kTableColumns[i] << " |";
    f << "\n|";
    for (size_t i = 0; i < ncols; ++i) f << " --- |";
    f << "\n";
    for (const ResultRow& r : table.rows) {
      auto cells = row_cells(r);
      f << "|";
      for (const std::string& c : cells) f << " " << c << " |";
      f << "\n";
    }
  } else {
    throw std::invalid_argument("emit_table: unknown format '" + format + "'");
  }
}

// ---- panels ----

template <typename T>
Image<T> make_panel(const std::vector<std::array<Image<T>, 4>>& rows) {
  if (rows.empty()) throw std::invalid_argument("make_panel: no rows");
  const int H = rows[0][0].height, W = rows[0][0].width;
  Image<T> panel;
  panel.channels = 3;
  panel.height = static_cast<int>(rows.size()) * H;
  panel.width = 4 * W;
  panel.data.assign(panel.size(), T(0));
  for (size_t r = 0; r < rows.size(); ++r)
    for (int t = 0; t < 4; ++t) {
      const Image<T>& tile = rows[r][t];
      if (tile.height != H || tile.width != W || tile.channels != 3)
        throw std::invalid_argument("make_panel: tile shapes differ");
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            panel.at(c, static_cast<int>(r) * H + y, t * W + x) = tile.at(c, y, x);
    }
  return panel;
}

// ---- experiment driver ----

namespace {

template <typename T>
Image<T> restore(const Model<T>& m, const Image<T>& y) {
  Graph<T> g;
  Tensor<T> yt = g.leaf({1, y.channels, y.height, y.width}, y.data, false);
  Tensor<T> out = model_forward(g, m, yt, false);
  Image<T> img = y;
  std::span<const T> v = out.value();
  img.data.assign(v.begin(), v.end());
  return img;
}

template <typename T>
uint64_t dataset_hash(const Dataset<T>& ds) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto fold = [&](const std::vector<ImagePair<T>>& pairs) {
    for (const ImagePair<T>& p : pairs) {
      h = mix_seed(h, static_cast<uint64_t>(p.id));
      h = mix_seed(h, fnv1a64(p.x.data.data(), p.x.data.size() * sizeof(T)));
      h = mix_seed(h, fnv1a64(p.y_clean.data.data(), p.y_clean.data.size() * sizeof(T)));
    }
  };
  fold(ds.train);
  fold(ds.test);
  return h;
}

std::string cell_name(const CellKey& k) {
  return k.architecture + "/" + k.defense + "/" + k.attack + "/" + k.epsilon + "/it" +
         std::to_string(k.iterations);
}

template <typename T>
MetricsRow image_metrics(const std::string& id, const Image<T>& restored,
                         const Image<T>& reference) {
  MetricsRow r;
  r.image_id = id;
  r.psnr = psnr<T>(restored.data, reference.data, 1.0);
  r.ssim = ssim(restored, reference);
  SpectralScores s = spectral_artifact_scores(restored, reference);
  r.hf_energy_ratio = s.hf_energy_ratio;
  r.grid_peak_score = s.grid_peak_score;
  r.color_mixing_score = s.color_mixing_score;
  return r;
}

template <typename T>
std::string format_trace(const std::vector<T>& trace) {
  std::string s = "[";
  char buf[64];
  for (size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(trace[i]));
    if (i) s += ",";
    s += buf;
  }
  s += "]";
  return s;
}

template <typename T>
ExperimentOutcome run_experiment_impl(const ExperimentConfig& cfg,
                                      const std::string& run_dir) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  fs::create_directories(run_dir);
  fs::create_directories(run_dir + "/checkpoints");
  fs::create_directories(run_dir + "/panels");
  fs::create_directories(run_dir + "/trainlogs");

  Dataset<T> data = cfg.dataset_dir.empty() ? make_dataset<T>(cfg.dataset)
                                            : load_dataset<T>(cfg.dataset_dir);
  if (data.test.empty()) throw std::invalid_argument("experiment: empty test split");

  json manifest;
  manifest["config"] = json::parse(experiment_config_to_json(cfg));
  manifest["code_version"] = kCodeVersion;
  manifest["dataset_hash"] = hex64(dataset_hash(data));
  manifest["optimizer"] = "adamw(lr cosine-decayed, decoupled weight decay)";
  json cells_json = json::array();
  json ckpt_json = json::object();

  std::ofstream jsonl(run_dir + "/attacks.jsonl");
  if (!jsonl) throw std::runtime_error("experiment: cannot write attacks.jsonl");

  const std::string ckpt_dir =
      cfg.checkpoints_dir.empty() ? run_dir + "/checkpoints" : cfg.checkpoints_dir;

  ExperimentOutcome outcome;
  outcome.run_dir = run_dir;

  for (size_t vi = 0; vi < cfg.variants.size(); ++vi) {
    ArchVariant variant = cfg.variants[vi];
    if (variant.enc_blocks.empty() && variant.dec_blocks.empty())
      variant.set_default_blocks();
    const std::string arch = arch_kind_name(variant.kind);

    for (const std::string& defense : cfg.defenses) {
      const std::string tag = arch + "__" + defense;
      const std::string ckpt_path = ckpt_dir + "/" + tag + ".ckpt";

      Model<T> model;
      if (fs::exists(ckpt_path)) {
        model = load_model<T>(ckpt_path);
      } else if (cfg.evaluate_only) {
        throw std::invalid_argument("experiment: evaluate_only but checkpoint " +
                                    ckpt_path + " does not exist");
      } else {
        const uint64_t model_seed = mix_seed(cfg.seed, 0xa0c0 + vi);
        Model<T> init = build_model<T>(variant, model_seed);
        TrainConfig<T> tc;
        tc.steps = cfg.train_steps;
        tc.batch_size = cfg.batch_size;
        tc.lr = static_cast<T>(cfg.lr);
        tc.lr_min = static_cast<T>(cfg.lr_min);
        tc.weight_decay = static_cast<T>(cfg.weight_decay);
        tc.val_interval = cfg.val_interval;
        tc.adversarial = defense == "fgsm";
        tc.epsilon = static_cast<T>(parse_rational(cfg.train_epsilon));
        tc.seed = mix_seed(cfg.seed, 0x7a00 + vi);  // twins share the seed
        TrainResult<T> tr = train_loop(init, data, tc);
        model = std::move(tr.best_model);
        const ArrayDType dtype =
            sizeof(T) == 8 ? ArrayDType::f64 : ArrayDType::f32;
        save_model(ckpt_path, model, dtype);
        tr.log.write_csv(run_dir + "/trainlogs/" + tag + ".csv");
      }
      ckpt_json[tag] = hex64(file_hash(ckpt_path));

      // clean evaluation; reconstructions cached for the panels
      std::vector<Image<T>> restored_clean;
      restored_clean.reserve(data.test.size());
      CellKey clean_key{arch, defense, "none", "0", 0};
      {
        ResultRow row;
        row.key = clean_key;
        try {
          MetricsReport rep;
          for (size_t i = 0; i < data.test.size(); ++i) {
            const ImagePair<T>& p = data.test[i];
            restored_clean.push_back(restore(model, p.y_clean));
            rep.rows.push_back(image_metrics("test/" + std::to_string(i),
                                             restored_clean.back(), p.x));
          }
          row.agg = rep.aggregate();
        } catch (const std::exception& e) {
          row.ok = false;
          row.error = e.what();
          outcome.any_failed = true;
        }
        json cj;
        cj["cell"] = cell_name(row.key);
        cj["status"] = row.ok ? "ok" : row.error;
        cells_json.push_back(cj);
        outcome.table.rows.push_back(std::move(row));
      }

      for (const AttackSweep& sweep : cfg.attacks) {
        for (int iters : sweep.iterations) {
          CellKey key{arch, defense, attack_kind_name(sweep.kind), sweep.epsilon, iters};
          ResultRow row;
          row.key = key;
          try {
            AttackConfig<T> ac;
            ac.kind = sweep.kind;
            ac.epsilon = static_cast<T>(parse_rational(sweep.epsilon));
            ac.alpha = static_cast<T>(sweep.alpha);
            ac.iterations = iters;
            if (ac.kind == AttackKind::fgsm) {
              ac.iterations = 1;
              ac.alpha = ac.epsilon;
            }

            MetricsReport rep;
            std::vector<std::array<Image<T>, 4>> panel_rows;
            for (size_t i = 0; i < data.test.size(); ++i) {
              const ImagePair<T>& p = data.test[i];
              AttackResult<T> ar = run_attack(model, std::span<const T>(p.y_clean.data),
                                              std::span<const T>(p.x.data),
                                              Shape{1, 3, p.x.height, p.x.width}, ac);
              Image<T> y_adv = p.y_clean;
              y_adv.data = ar.y_adv;
              Image<T> restored_adv = restore(model, y_adv);
              rep.rows.push_back(image_metrics("test/" + std::to_string(i),
                                               restored_adv, p.x));
              jsonl << "{\"cell\":\"" << cell_name(key) << "\",\"image\":\"test/" << i
                    << "\",\"loss_trace\":" << format_trace(ar.loss_trace)
                    << ",\"zero_grad_fraction\":" << format_trace(ar.zero_grad_fraction)
                    << "}\n";
              if (static_cast<int>(i) < cfg.panel_samples && !restored_clean.empty())
                panel_rows.push_back(
                    {p.x, p.y_clean, restored_clean[i], restored_adv});
            }
            row.agg = rep.aggregate();
            if (!panel_rows.empty())
              save_png(run_dir + "/panels/" + cell_key_filename(key),
                       make_panel(panel_rows));
          } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
            outcome.any_failed = true;
          }
          json cj;
          cj["cell"] = cell_name(row.key);
          cj["status"] = row.ok ? "ok" : row.error;
          cells_json.push_back(cj);
          outcome.table.rows.push_back(std::move(row));
        }
      }
    }
  }

  emit_table(outcome.table, "csv", run_dir + "/table.csv");
  emit_table(outcome.table, "markdown", run_dir + "/table.md");

  manifest["cells"] = cells_json;
  manifest["checkpoints"] = ckpt_json;
  manifest["elapsed_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  std::ofstream mf(run_dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";

  return outcome;
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                 const std::string& run_dir) {
  if (cfg.precision == Precision::f32) return run_experiment_impl<float>(cfg, run_dir);
  return run_experiment_impl<double>(cfg, run_dir);
}

template Image<float> make_panel<float>(const std::vector<std::array<Image<float>, 4>>&);
template Image<double> make_panel<double>(const std::vector<std::array<Image<double>, 4>>&);

}  // namespace rlab
