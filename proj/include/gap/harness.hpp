// SPDX-License-Identifier: Apache-2.0
//
// Training, evaluation and ablation sweeps over generated datasets.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gap/adam.hpp"
#include "gap/checkpoint.hpp"
#include "gap/config.hpp"
#include "gap/models.hpp"
#include "gap/pipeline.hpp"
#include "gap/taskgen.hpp"

namespace gap {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 1e-4;  // 0 freezes the parameters
  std::uint64_t seed = 0;
  std::size_t patience = 10;  // epochs without a better validation accuracy; 0 disables
  bool hflip = false;
  bool vflip = false;
  double time_budget_s = 0.0;       // stop after the epoch that crosses it; 0 = unlimited
  std::size_t trace_samples = 0;    // validation traces dumped into the run directory

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (!(time_budget_s >= 0.0)) throw ConfigError("train: time budget must be >= 0");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"lr", c.lr},
       {"seed", c.seed},             {"patience", c.patience},     {"hflip", c.hflip},
       {"vflip", c.vflip},           {"time_budget_s", c.time_budget_s},
       {"trace_samples", c.trace_samples}};
}
inline void from_json(const json& j, TrainConfig& c) {
  detail::FieldReader(j, "train")("epochs", c.epochs)("batch_size", c.batch_size)("lr", c.lr)("seed", c.seed)(
      "patience", c.patience)("hflip", c.hflip)("vflip", c.vflip)("time_budget_s", c.time_budget_s)(
      "trace_samples", c.trace_samples);
}

struct SplitMetrics {
  std::size_t total = 0;
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  double loss = 0.0;  // mean BCE

  double accuracy() const { return total ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0; }
};

inline void to_json(json& j, const SplitMetrics& m) {
  j = {{"accuracy", m.accuracy()}, {"loss", m.loss}, {"total", m.total},
       {"tp", m.tp},               {"tn", m.tn},     {"fp", m.fp},       {"fn", m.fn}};
}

struct EvalReport {
  std::map<std::string, SplitMetrics> splits;
  std::string config_hash;
  double wall_seconds = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;

  double accuracy(const std::string& split) const {
    const auto it = splits.find(split);
    if (it == splits.end()) throw UsageError("report has no split '" + split + "'");
    return it->second.accuracy();
  }
};

// Wall time is left out so that reruns produce identical files.
inline void to_json(json& j, const EvalReport& r) {
  j = {{"splits", r.splits},
       {"config_hash", r.config_hash},
       {"best_epoch", r.best_epoch},
       {"epochs_run", r.epochs_run}};
}

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Glimpse traces for every sample of a split. Flipped variants are perceived
/// on first use, since saliency and the glimpse path depend on the flip.
class PerceivedSplit {
 public:
  PerceivedSplit(const std::vector<Sample>& samples, const PerceptionConfig& cfg)
      : samples_(&samples), cfg_(cfg), traces_(samples.size()) {
    for (std::size_t i = 0; i < samples.size(); ++i) trace(i, 0);
  }

  std::size_t size() const { return samples_->size(); }
  int label(std::size_t i) const { return (*samples_)[i].label; }
  const Sample& sample(std::size_t i) const { return (*samples_)[i]; }

  /// flip bit 0 = horizontal, bit 1 = vertical.
  const GlimpseTrace& trace(std::size_t i, unsigned flip) {
    auto& slot = traces_[i][flip & 3u];
    if (!slot) {
      Image img = (*samples_)[i].image;
      if (flip & 1u) img = flip_horizontal(img);
      if (flip & 2u) img = flip_vertical(img);
      slot = perceive(img, cfg_);
    }
    return *slot;
  }

 private:
  const std::vector<Sample>* samples_;
  PerceptionConfig cfg_;
  std::vector<std::array<std::optional<GlimpseTrace>, 4>> traces_;
};

inline void check_geometry(const ModelConfig& cfg, const std::vector<Sample>& samples, const std::string& what) {
  for (const auto& s : samples) {
    if (s.image.height != cfg.image_height || s.image.width != cfg.image_width ||
        s.image.channels != cfg.image_channels) {
      throw ConfigError(what + ": image " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                        "x" + std::to_string(s.image.channels) + " does not match model geometry " +
                        std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width) + "x" +
                        std::to_string(cfg.image_channels));
    }
  }
}

/// Inference over a whole split, dropout off.
inline SplitMetrics evaluate(const ParamStore<float>& ps, const ModelConfig& cfg, PerceivedSplit& split,
                             std::size_t batch_size = 64, std::vector<float>* logits_out = nullptr) {
  SplitMetrics m;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    std::vector<const GlimpseTrace*> traces;
    std::vector<int> labels;
    for (std::size_t i = start; i < end; ++i) {
      traces.push_back(&split.trace(i, 0));
      labels.push_back(split.label(i));
    }
    const auto batch = make_batch<float>(traces, labels);
    const auto logits = forward(ps, cfg, batch);
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const float z = logits.at(k);
      if (!std::isfinite(z)) throw NumericError("evaluate: non-finite logit");
      if (logits_out) logits_out->push_back(z);
      // Per-sample loss in double, so the mean does not depend on batching.
      const double zd = z;
      loss_sum += std::max(zd, 0.0) - zd * labels[k] + std::log1p(std::exp(-std::abs(zd)));
      const bool pred = z >= 0.0f;
      const bool truth = labels[k] == 1;
      (pred ? (truth ? m.tp : m.fp) : (truth ? m.fn : m.tn))++;
      ++m.total;
    }
  }
  m.loss = m.total ? loss_sum / static_cast<double>(m.total) : 0.0;
  return m;
}

struct TrainOptions {
  std::optional<std::filesystem::path> run_dir;
  const ParamStore<float>* init = nullptr;  // start from these values instead of a fresh init
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  ParamStore<float> best;
  EvalReport report;
  std::vector<EpochMetrics> history;
  double first_batch_loss = 0.0;
};

inline json run_config_json(const ModelConfig& model, const TrainConfig& train) {
  return {{"model", model}, {"train", train}};
}

/// Trains with Adam on BCE, keeping the parameters of the best validation
/// epoch, then reports train/val/test metrics of those parameters.
inline TrainResult train(const ModelConfig& cfg, const DatasetSplits& data, const TrainConfig& tcfg,
                         const TrainOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  tcfg.validate();
  if (data.train.empty() || data.val.empty()) throw InputError("train: empty train or validation split");
  check_geometry(cfg, data.train, "train split");
  check_geometry(cfg, data.val, "val split");
  check_geometry(cfg, data.test, "test split");

  const json run_cfg = run_config_json(cfg, tcfg);
  TrainResult result;
  result.report.config_hash = config_hash(run_cfg);

  std::ofstream metrics_csv;
  if (opts.run_dir) {
    std::filesystem::create_directories(*opts.run_dir);
    std::ofstream(*opts.run_dir / "config.json") << run_cfg.dump(2) << '\n';
    metrics_csv.open(*opts.run_dir / "metrics.csv");
    metrics_csv << "epoch,split,loss,acc\n";
  }

  ParamStore<float> ps = opts.init ? opts.init->clone() : init_params<float>(cfg, tcfg.seed);
  std::optional<Adam<float>> adam;
  if (tcfg.lr > 0.0) adam.emplace(AdamConfig{tcfg.lr});

  PerceivedSplit train_set(data.train, cfg.perception);
  PerceivedSplit val_set(data.val, cfg.perception);

  std::mt19937_64 order_rng(mix_seed(tcfg.seed, 0x0d3e));
  std::vector<std::size_t> order(train_set.size());
  double best_acc = -1.0;
  std::size_t since_best = 0;
  bool first = true;

  auto record = [&](const EpochMetrics& e) {
    result.history.push_back(e);
    if (metrics_csv.is_open()) metrics_csv << e.epoch << ',' << e.split << ',' << e.loss << ',' << e.accuracy << '\n';
    if (opts.on_epoch) opts.on_epoch(e);
  };

  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += tcfg.batch_size, ++b) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      const std::uint64_t batch_seed = mix_seed(tcfg.seed, (epoch << 32) | b);
      std::mt19937_64 rng(batch_seed);
      std::vector<const GlimpseTrace*> traces;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        unsigned flip = 0;
        if (tcfg.hflip && std::bernoulli_distribution(0.5)(rng)) flip |= 1u;
        if (tcfg.vflip && std::bernoulli_distribution(0.5)(rng)) flip |= 2u;
        traces.push_back(&train_set.trace(order[k], flip));
        labels.push_back(train_set.label(order[k]));
      }
      const auto batch = make_batch<float>(traces, labels);
      ForwardContext<float> ctx{true, &rng};
      Tensor<float> loss;
      try {
        const auto logits = forward(ps, cfg, batch, ctx);
        loss = bce_with_logits(logits, batch.labels);
        for (std::size_t k = 0; k < labels.size(); ++k) correct += (logits.at(k) >= 0.0f) == (labels[k] == 1);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                           " (batch seed " + std::to_string(batch_seed) + "): " + e.what());
      }
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                           " (batch seed " + std::to_string(batch_seed) + "): loss " + std::to_string(lv));
      }
      if (first) {
        result.first_batch_loss = lv;
        first = false;
      }
      loss_sum += lv * static_cast<double>(end - start);
      if (adam) {
        ps.zero_grad();
        backward(loss);
        adam->step(ps);
      }
    }
    record({epoch, "train", loss_sum / static_cast<double>(order.size()),
            static_cast<double>(correct) / static_cast<double>(order.size())});

    const SplitMetrics val = evaluate(ps, cfg, val_set, tcfg.batch_size);
    record({epoch, "val", val.loss, val.accuracy()});
    result.report.epochs_run = epoch;
    if (val.accuracy() > best_acc) {
      best_acc = val.accuracy();
      result.best = ps.clone();
      result.report.best_epoch = epoch;
      since_best = 0;
    } else if (tcfg.patience > 0 && ++since_best >= tcfg.patience) {
      break;
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (tcfg.time_budget_s > 0.0 && elapsed >= tcfg.time_budget_s) break;
  }

  PerceivedSplit train_eval(data.train, cfg.perception);
  result.report.splits["train"] = evaluate(result.best, cfg, train_eval, tcfg.batch_size);
  result.report.splits["val"] = evaluate(result.best, cfg, val_set, tcfg.batch_size);
  if (!data.test.empty()) {
    PerceivedSplit test_set(data.test, cfg.perception);
    result.report.splits["test"] = evaluate(result.best, cfg, test_set, tcfg.batch_size);
  }
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (opts.run_dir) {
    save_checkpoint((*opts.run_dir / "best.ckpt").string(), result.best, run_cfg);
    std::ofstream(*opts.run_dir / "report.json") << json(result.report).dump(2) << '\n';
    if (tcfg.trace_samples > 0) {
      const auto dir = *opts.run_dir / "trace-samples";
      std::filesystem::create_directories(dir);
      for (std::size_t i = 0; i < std::min(tcfg.trace_samples, val_set.size()); ++i) {
        std::ofstream(dir / ("val_" + std::to_string(i) + ".json"))
            << trace_json(val_set.trace(i, 0), cfg.perception).dump() << '\n';
      }
    }
  }
  return result;
}

/// Reads a checkpoint written by train() and evaluates it on `samples`.
inline SplitMetrics evaluate_checkpoint(const std::string& path, const std::vector<Sample>& samples,
                                        ModelConfig* cfg_out = nullptr) {
  const auto ckpt = load_checkpoint<float>(path);
  ModelConfig cfg;
  try {
    from_json(ckpt.config.at("model"), cfg);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint " + path + " has no usable model config: " + e.what());
  }
  cfg.validate();
  check_geometry(cfg, samples, "evaluate");
  if (cfg_out) *cfg_out = cfg;
  PerceivedSplit split(samples, cfg.perception);
  return evaluate(ckpt.params, cfg, split);
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationMode { both, what_only, where_only, gap_regular, vit_patches };

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::both: return "both";
    case AblationMode::what_only: return "what-only";
    case AblationMode::where_only: return "where-only";
    case AblationMode::gap_regular: return "gap-regular";
    case AblationMode::vit_patches: return "vit-patches";
  }
  return "?";
}

inline AblationMode parse_ablation(const std::string& s) {
  for (AblationMode m : {AblationMode::both, AblationMode::what_only, AblationMode::where_only,
                         AblationMode::gap_regular, AblationMode::vit_patches})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown ablation mode '" + s + "' (expected both|what-only|where-only|gap-regular|vit-patches)");
}

inline ModelConfig apply_ablation(ModelConfig cfg, AblationMode m) {
  switch (m) {
    case AblationMode::both: break;
    case AblationMode::what_only: cfg.streams = StreamMode::what_only; break;
    case AblationMode::where_only: cfg.streams = StreamMode::where_only; break;
    case AblationMode::gap_regular: cfg.perception.mode = PerceptionMode::gap_regular; break;
    case AblationMode::vit_patches: cfg.perception.mode = PerceptionMode::vit_patches; break;
  }
  return cfg;
}

struct AblationRow {
  AblationMode mode;
  std::uint64_t seed;
  EvalReport report;
};

/// Every mode x seed under the same training budget and data.
inline std::vector<AblationRow> ablation_suite(const ModelConfig& base, const DatasetSplits& data,
                                               const TrainConfig& tcfg, const std::vector<AblationMode>& modes,
                                               const std::vector<std::uint64_t>& seeds,
                                               const std::function<void(const AblationRow&)>& on_row = {}) {
  if (modes.empty()) throw ConfigError("ablation: no modes requested");
  if (seeds.empty()) throw ConfigError("ablation: no seeds requested");
  std::vector<AblationRow> rows;
  for (AblationMode m : modes)
    for (std::uint64_t seed : seeds) {
      TrainConfig t = tcfg;
      t.seed = seed;
      rows.push_back({m, seed, train(apply_ablation(base, m), data, t).report});
      if (on_row) on_row(rows.back());
    }
  return rows;
}

/// Mean test accuracy per mode, as a fixed-width text table.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::vector<AblationMode> order;
  std::map<AblationMode, std::vector<double>> acc;
  for (const auto& r : rows) {
    if (!acc.count(r.mode)) order.push_back(r.mode);
    const auto& s = r.report.splits;
    acc[r.mode].push_back(s.count("test") ? r.report.accuracy("test") : r.report.accuracy("val"));
  }
  std::ostringstream os;
  os << "mode          seeds  mean_acc  min_acc  max_acc\n";
  for (AblationMode m : order) {
    const auto& v = acc[m];
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    char line[96];
    std::snprintf(line, sizeof line, "%-12s  %5zu  %8.4f  %7.4f  %7.4f\n", to_string(m), v.size(), mean,
                  *std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end()));
    os << line;
  }
  return os.str();
}

}  // namespace gap
