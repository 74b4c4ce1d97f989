// SPDX-License-Identifier: Apache-2.0
//
// gap: saliency maps, glimpse traces, dataset generation, training,
// evaluation, ablation sweeps and gradient checks from one binary.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gap/checkpoint.hpp"
#include "gap/config.hpp"
#include "gap/gradcheck.hpp"
#include "gap/harness.hpp"

namespace fs = std::filesystem;
using namespace gap;

namespace gap {
inline void from_json(const json& j, SplitCounts& c) {
  detail::FieldReader(j, "counts")("train", c.train)("val", c.val)("test", c.test);
}
}  // namespace gap

namespace {

// ---------------------------------------------------------------------------
// Settings shared by every subcommand: preset, then --config file, then flags.

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config_file;
};

struct Settings {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
  TaskConfig data = TaskConfig::make(TaskKind::same_different, ShapeFamily::polygon, 64);
  ShapeFamily test_family = ShapeFamily::blob;
  SplitCounts counts;
  std::uint64_t seed = 0;
};

json counts_json(const SplitCounts& c) { return {{"train", c.train}, {"val", c.val}, {"test", c.test}}; }

ModelConfig preset(const std::string& dims) {
  if (dims == "toy") return ModelConfig::toy();
  if (dims == "desk") return ModelConfig::desk();
  if (dims == "large") return ModelConfig::large();
  throw ConfigError("--dims: expected toy|desk|large, got '" + dims + "'");
}

Settings load_settings(const Common& common, const ModelConfig& base) {
  Settings s;
  s.model = base;
  if (!common.config_file.empty()) {
    std::ifstream is(common.config_file);
    if (!is) throw ConfigError("cannot read config file " + common.config_file);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError(common.config_file + ": " + e.what());
    }
    detail::FieldReader(j, "config")("model", s.model)("train", s.train)("data", s.data)(
        "test_family", s.test_family)("counts", s.counts);
  }
  s.seed = common.seed.value_or(s.train.seed);
  s.train.seed = s.seed;
  s.model.perception.gap.random_seed = s.seed;
  return s;
}

template <typename E>
E parse_enum(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  E e{};
  from_json(json(s), e);
  return e;
}

void echo(const std::string& command, const json& resolved) {
  std::cerr << command << ": resolved config " << resolved.dump() << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << text;
  if (!os) throw InputError("cannot write " + path.string());
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Seed for every random choice");
  sub->add_option("--config", c.config_file, "JSON file with model/train/data sections; flags override it");
}

// ---------------------------------------------------------------------------
// Perception flags (saliency, trace)

struct PerceptionFlags {
  std::optional<std::size_t> patch;
  std::optional<std::string> agg, border, mask, policy, sensor, mode;
  std::optional<std::size_t> glimpses;

  void add(CLI::App* sub, bool glimpse_flags) {
    sub->add_option("--patch", patch, "Error-neuron patch side (odd)");
    sub->add_option("--agg", agg, "Patch aggregation: min|sum");
    sub->add_option("--border", border, "Border policy: zero|replicate");
    if (!glimpse_flags) return;
    sub->add_option("--T", glimpses, "Number of glimpses");
    sub->add_option("--mask", mask, "IoR mask: hard:<radius> or soft:<epsilon>");
    sub->add_option("--policy", policy, "Glimpse policy: standard|regular_grid|random");
    sub->add_option("--sensor", sensor, "Sensor: multiscale|logpolar");
    sub->add_option("--mode", mode, "Perception: gap|gap_regular|vit_patches");
  }

  void apply(PerceptionConfig& p) const {
    if (patch) p.saliency.patch_height = p.saliency.patch_width = *patch;
    if (agg) p.saliency.aggregation = parse_enum<Aggregation>(*agg);
    if (border) p.saliency.border = parse_enum<BorderPolicy>(*border);
    if (glimpses) p.gap.glimpses = *glimpses;
    if (mask) p.gap.mask = parse_mask(*mask, p.gap.mask);
    if (policy) p.gap.policy = parse_enum<PolicyKind>(*policy);
    if (sensor) p.sensor.kind = parse_enum<SensorKind>(*sensor);
    if (mode) p.mode = parse_enum<PerceptionMode>(*mode);
  }
};

// ---------------------------------------------------------------------------
// Model and training flags (train, ablate)

struct TrainFlags {
  std::string dims = "desk";
  std::optional<std::string> head, streams, mode;
  std::optional<std::size_t> epochs, batch, patience, trace_samples;
  std::optional<double> lr, budget;
  std::optional<bool> flips;

  void add(CLI::App* sub) {
    sub->add_option("--dims", dims, "Model size preset: toy|desk|large")->capture_default_str();
    sub->add_option("--head", head, "Relational head: transformer|abstractor");
    sub->add_option("--streams", streams, "Token streams: both|what_only|where_only");
    sub->add_option("--mode", mode, "Perception: gap|gap_regular|vit_patches");
    sub->add_option("--epochs", epochs, "Maximum epochs");
    sub->add_option("--lr", lr, "Adam learning rate (0 freezes the model)");
    sub->add_option("--batch", batch, "Batch size");
    sub->add_option("--patience", patience, "Early-stopping patience in epochs (0 disables)");
    sub->add_option("--flips", flips, "Random horizontal and vertical flips during training");
    sub->add_option("--budget", budget, "Wall-clock budget in seconds (0 = none)");
    sub->add_option("--trace-samples", trace_samples, "Validation traces to dump into the run directory");
  }

  void apply(Settings& s) const {
    if (head) s.model.head = parse_enum<HeadKind>(*head);
    if (streams) s.model.streams = parse_enum<StreamMode>(*streams);
    if (mode) s.model.perception.mode = parse_enum<PerceptionMode>(*mode);
    if (epochs) s.train.epochs = *epochs;
    if (lr) s.train.lr = *lr;
    if (batch) s.train.batch_size = *batch;
    if (patience) s.train.patience = *patience;
    if (flips) s.train.hflip = s.train.vflip = *flips;
    if (budget) s.train.time_budget_s = *budget;
    if (trace_samples) s.train.trace_samples = *trace_samples;
  }
};

/// Data for train/ablate: read from disk, or generated from the settings.
DatasetSplits load_data(const std::string& dir, Settings& s) {
  DatasetSplits d = dir.empty() ? gen_splits(s.data, s.test_family, s.counts, s.seed) : read_dataset(dir);
  if (d.train.empty()) throw InputError("dataset has no training samples");
  // The data fixes the image geometry the model is built for.
  const Image& img = d.train.front().image;
  s.model.image_height = img.height;
  s.model.image_width = img.width;
  s.model.image_channels = img.channels;
  return d;
}

json data_source(const std::string& dir, const Settings& s) {
  if (!dir.empty()) return {{"dir", dir}};
  return {{"generated", s.data}, {"test_family", s.test_family}, {"counts", counts_json(s.counts)}};
}

// ---------------------------------------------------------------------------
// Trace overlay: the image upscaled, each glimpse box outlined and numbered.

constexpr const char* kDigits[10] = {"111101101101111", "010110010010111", "111001111100111", "111001111001111",
                                     "101101111001001", "111100111001111", "111100111101111", "111001001001001",
                                     "111101111101111", "111101111001111"};

void put(Image& rgb, long y, long x, double r, double g, double b) {
  if (!rgb.contains(y, x)) return;
  rgb.at(y, x, 0) = r;
  rgb.at(y, x, 1) = g;
  rgb.at(y, x, 2) = b;
}

void draw_number(Image& rgb, long y, long x, std::size_t n, long px) {
  const std::string text = std::to_string(n);
  for (std::size_t k = 0; k < text.size(); ++k) {
    const char* glyph = kDigits[text[k] - '0'];
    const long x0 = x + static_cast<long>(k) * 4 * px;
    // Dark backing so the digits stay legible on white strokes.
    for (long yy = -1; yy < 5 * px + 1; ++yy)
      for (long xx = -1; xx < 3 * px + 1; ++xx) put(rgb, y + yy, x0 + xx, 0.0, 0.0, 0.0);
    for (long r = 0; r < 5; ++r)
      for (long c = 0; c < 3; ++c)
        if (glyph[r * 3 + c] == '1')
          for (long dy = 0; dy < px; ++dy)
            for (long dx = 0; dx < px; ++dx) put(rgb, y + r * px + dy, x0 + c * px + dx, 1.0, 1.0, 0.0);
  }
}

Image overlay(const Image& img, const GlimpseTrace& trace, const SensorConfig& sensor, long scale) {
  Image rgb = Image::zeros(img.height * scale, img.width * scale, 3);
  for (std::size_t y = 0; y < rgb.height; ++y)
    for (std::size_t x = 0; x < rgb.width; ++x) {
      double v = 0.0;
      for (std::size_t c = 0; c < img.channels; ++c) v += img.at(y / scale, x / scale, c);
      v /= static_cast<double>(img.channels);
      for (std::size_t c = 0; c < 3; ++c) rgb.at(y, x, c) = 0.6 * v;
    }
  const long hh = static_cast<long>(sensor.glimpse_height / 2), hw = static_cast<long>(sensor.glimpse_width / 2);
  for (std::size_t t = 0; t < trace.locations.size(); ++t) {
    const long cy = static_cast<long>(trace.locations[t].y), cx = static_cast<long>(trace.locations[t].x);
    const long y0 = (cy - hh) * scale, y1 = (cy + hh + 1) * scale - 1;
    const long x0 = (cx - hw) * scale, x1 = (cx + hw + 1) * scale - 1;
    for (long x = x0; x <= x1; ++x) {
      put(rgb, y0, x, 1.0, 0.2, 0.2);
      put(rgb, y1, x, 1.0, 0.2, 0.2);
    }
    for (long y = y0; y <= y1; ++y) {
      put(rgb, y, x0, 1.0, 0.2, 0.2);
      put(rgb, y, x1, 1.0, 0.2, 0.2);
    }
    for (long d = -scale / 2; d <= scale / 2; ++d) {
      put(rgb, cy * scale + scale / 2, cx * scale + scale / 2 + d, 0.2, 1.0, 0.2);
      put(rgb, cy * scale + scale / 2 + d, cx * scale + scale / 2, 0.2, 1.0, 0.2);
    }
    draw_number(rgb, std::max(y0, 0L) + 2, std::max(x0, 0L) + 2, t + 1, std::max(1L, scale / 2));
  }
  return rgb;
}

void dump_glimpses(const fs::path& dir, const GlimpseTrace& trace) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < trace.contents.size(); ++t) {
    const GlimpseContent& g = trace.contents[t];
    for (std::size_t s = 0; s < g.scales; ++s) {
      Image out = Image::zeros(g.height, g.width, g.channels);
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x)
          for (std::size_t c = 0; c < g.channels; ++c) out.at(y, x, c) = g.at(s, y, x, c);
      const std::string ext = g.channels == 1 ? ".pgm" : ".ppm";
      write_pnm((dir / ("g_" + std::to_string(t) + "_" + std::to_string(s) + ext)).string(), out);
    }
  }
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_saliency(const Common& common, const PerceptionFlags& pf, const std::string& in, const std::string& out,
                 std::string sidecar) {
  Settings s = load_settings(common, ModelConfig::desk());
  pf.apply(s.model.perception);
  const ErrorNeuronConfig& cfg = s.model.perception.saliency;
  if (sidecar.empty()) sidecar = out + ".f64";
  echo("saliency", {{"in", in}, {"out", out}, {"sidecar", sidecar}, {"saliency", cfg}});

  const Image img = read_pnm(in);
  img.validate();
  const SaliencyMap map = compute_saliency(img, cfg);
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  Image pgm = Image::zeros(map.height, map.width, 1);
  if (*hi > *lo)
    for (std::size_t i = 0; i < map.values.size(); ++i) pgm.pixels[i] = (map.values[i] - *lo) / (*hi - *lo);
  write_pnm(out, pgm);

  std::ofstream os(sidecar, std::ios::binary);
  for (double v : map.values) detail::write_le(os, v);
  if (!os) throw InputError("cannot write " + sidecar);
  std::cerr << "saliency: " << map.height << "x" << map.width << " range [" << *lo << ", " << *hi << "]\n";
  return 0;
}

int cmd_trace(const Common& common, const PerceptionFlags& pf, const std::string& in, const std::string& json_out,
              const std::string& overlay_out, long overlay_scale, const std::string& glimpse_dir) {
  Settings s = load_settings(common, ModelConfig::desk());
  pf.apply(s.model.perception);
  const PerceptionConfig& p = s.model.perception;
  p.validate();
  if (overlay_scale < 1) throw ConfigError("--overlay-scale must be >= 1");
  echo("trace", {{"in", in}, {"perception", p}});

  const Image img = read_pnm(in);
  const GlimpseTrace trace = perceive(img, p);
  const std::string doc = trace_json(trace, p).dump(2) + "\n";
  if (json_out.empty()) std::cout << doc;
  else write_text(json_out, doc);
  if (!overlay_out.empty()) write_pnm(overlay_out, overlay(img, trace, p.sensor, overlay_scale));
  if (!glimpse_dir.empty()) dump_glimpses(glimpse_dir, trace);
  std::cerr << "trace: " << trace.locations.size() << " glimpses" << (trace.exhausted ? " (saliency exhausted)" : "")
            << '\n';
  return 0;
}

struct GenFlags {
  std::string out;
  std::optional<std::string> task, family, test_family;
  std::optional<std::size_t> train, val, test, size;
};

int cmd_gen(const Common& common, const GenFlags& g) {
  Settings s = load_settings(common, ModelConfig::desk());
  if (g.task || g.size) {
    s.data = TaskConfig::make(g.task ? parse_enum<TaskKind>(*g.task) : s.data.task, s.data.family,
                              g.size ? *g.size : s.data.image_size);
  }
  if (g.family) s.data.family = parse_enum<ShapeFamily>(*g.family);
  if (g.test_family) s.test_family = parse_enum<ShapeFamily>(*g.test_family);
  if (g.train) s.counts.train = *g.train;
  if (g.val) s.counts.val = *g.val;
  if (g.test) s.counts.test = *g.test;
  s.data.validate();
  const json manifest = manifest_json(s.data, s.test_family, s.counts, s.seed);
  echo("gen-data", {{"out", g.out}, {"manifest", manifest}});

  const DatasetSplits d = gen_splits(s.data, s.test_family, s.counts, s.seed);
  write_dataset(g.out, d, manifest);
  std::cerr << "gen-data: wrote " << d.train.size() << "/" << d.val.size() << "/" << d.test.size()
            << " samples to " << g.out << '\n';
  return 0;
}

void log_report(const std::string& tag, const EvalReport& r) {
  std::cerr << tag << ":";
  for (const auto& [name, m] : r.splits) std::cerr << ' ' << name << "_acc=" << m.accuracy();
  std::cerr << " best_epoch=" << r.best_epoch << " epochs=" << r.epochs_run << " wall=" << r.wall_seconds << "s\n";
}

int cmd_train(const Common& common, const TrainFlags& tf, const std::string& data_dir, const std::string& run) {
  Settings s = load_settings(common, preset(tf.dims));
  tf.apply(s);
  const DatasetSplits d = load_data(data_dir, s);
  s.model.validate();
  s.train.validate();
  echo("train", {{"run", run}, {"data", data_source(data_dir, s)}, {"model", s.model}, {"train", s.train}});

  TrainOptions opts;
  opts.run_dir = fs::path(run);
  opts.on_epoch = [](const EpochMetrics& m) {
    std::cerr << "epoch " << m.epoch << ' ' << m.split << " loss=" << m.loss << " acc=" << m.accuracy << '\n';
  };
  const TrainResult r = train(s.model, d, s.train, opts);
  log_report("train", r.report);
  return 0;
}

int cmd_eval(const Common& common, const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& json_out) {
  load_settings(common, ModelConfig::desk());  // validates --config if given
  if (split != "train" && split != "val" && split != "test") {
    throw ConfigError("--split: expected train|val|test, got '" + split + "'");
  }
  echo("eval", {{"ckpt", ckpt}, {"data", data_dir}, {"split", split}});
  const std::vector<Sample> samples = read_split(fs::path(data_dir) / split);
  ModelConfig cfg;
  const SplitMetrics m = evaluate_checkpoint(ckpt, samples, &cfg);
  const json doc = {{"checkpoint", ckpt}, {"split", split}, {"metrics", m}, {"model_hash", config_hash(cfg)}};
  if (json_out.empty()) std::cout << doc.dump(2) << '\n';
  else write_text(json_out, doc.dump(2) + "\n");
  std::cerr << "eval: " << split << " accuracy " << m.accuracy() << " loss " << m.loss << '\n';
  return 0;
}

int cmd_ablate(const Common& common, const TrainFlags& tf, const std::string& data_dir,
               const std::vector<std::string>& mode_names, std::vector<std::uint64_t> seeds,
               const std::string& out, const std::string& json_out) {
  Settings s = load_settings(common, preset(tf.dims));
  tf.apply(s);
  const DatasetSplits d = load_data(data_dir, s);
  std::vector<AblationMode> modes;
  for (const auto& m : mode_names) modes.push_back(parse_ablation(m));
  if (seeds.empty()) seeds.push_back(s.seed);
  s.model.validate();
  s.train.validate();
  echo("ablate", {{"data", data_source(data_dir, s)},
                  {"modes", mode_names},
                  {"seeds", seeds},
                  {"model", s.model},
                  {"train", s.train}});

  const auto rows = ablation_suite(s.model, d, s.train, modes, seeds, [](const AblationRow& r) {
    log_report(std::string("ablate ") + to_string(r.mode) + " seed " + std::to_string(r.seed), r.report);
  });
  const std::string table = ablation_table(rows);
  std::cerr << table;
  if (!out.empty()) write_text(out, table);
  if (!json_out.empty()) {
    json arr = json::array();
    for (const auto& r : rows) arr.push_back({{"mode", to_string(r.mode)}, {"seed", r.seed}, {"report", r.report}});
    write_text(json_out, arr.dump(2) + "\n");
  }
  return 0;
}

int cmd_gradcheck(const Common& common, const std::string& head, const std::string& dims, std::size_t per_tensor) {
  Settings s = load_settings(common, preset(dims));
  s.model.head = parse_enum<HeadKind>(head);
  s.model.validate();
  echo("gradcheck", {{"model", s.model}, {"seed", s.seed}, {"per_tensor", per_tensor}});
  const GradcheckReport r = gradcheck_model(s.model, s.seed, per_tensor);
  constexpr double kTolerance = 1e-3;
  std::cout << "max relative error " << r.max_rel_error << " over " << r.checked << " entries in " << r.tensors
            << " tensors (worst " << r.worst_param << "[" << r.worst_index << "])\n";
  return r.max_rel_error < kTolerance ? 0 : 2;
}

// ---------------------------------------------------------------------------
// Unknown-flag suggestions

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1])});
      diag = up;
    }
  }
  return row[b.size()];
}

void suggest(const CLI::App& app, const std::vector<std::string>& args) {
  const CLI::App* scope = &app;
  for (const CLI::App* sub : app.get_subcommands()) scope = sub;
  std::vector<std::string> known;
  for (const CLI::App* a : {&app, scope})
    for (const CLI::Option* o : a->get_options())
      for (const auto& n : o->get_lnames()) known.push_back("--" + n);
  for (const auto& arg : args) {
    if (!arg.starts_with("--")) continue;
    const std::string name = arg.substr(0, arg.find('='));
    if (std::find(known.begin(), known.end(), name) != known.end()) continue;
    const auto best = std::min_element(known.begin(), known.end(), [&](const auto& x, const auto& y) {
      return edit_distance(name, x) < edit_distance(name, y);
    });
    if (best != known.end() && edit_distance(name, *best) <= std::max<std::size_t>(2, name.size() / 3)) {
      std::cerr << "unknown flag " << name << "; did you mean " << *best << "?\n";
    } else {
      std::cerr << "unknown flag " << name << '\n';
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Glimpse-based visual reasoning: saliency, glimpses, relational heads"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gap 1.0");
  Common common;

  auto* sal = app.add_subcommand("saliency", "Error-neuron saliency map of an image");
  std::string sal_in, sal_out, sal_sidecar;
  PerceptionFlags sal_pf;
  sal->add_option("--in", sal_in, "Input PGM/PPM")->required();
  sal->add_option("--out", sal_out, "Output PGM, normalized to [0,255]")->required();
  sal->add_option("--sidecar", sal_sidecar, "Exact values as little-endian doubles (default <out>.f64)");
  sal_pf.add(sal, false);
  add_common(sal, common);

  auto* tr = app.add_subcommand("trace", "Glimpse locations chosen for an image");
  std::string tr_in, tr_json, tr_overlay, tr_dump;
  long tr_scale = 4;
  PerceptionFlags tr_pf;
  tr->add_option("--in", tr_in, "Input PGM/PPM")->required();
  tr->add_option("--json", tr_json, "Trace JSON output (default stdout)");
  tr->add_option("--overlay", tr_overlay, "PPM overlay with numbered glimpse boxes");
  tr->add_option("--overlay-scale", tr_scale, "Overlay upscaling factor")->capture_default_str();
  tr->add_option("--dump-glimpses", tr_dump, "Directory for g_<t>_<scale> glimpse images");
  tr_pf.add(tr, true);
  add_common(tr, common);

  auto* gen = app.add_subcommand("gen-data", "Generate a same/different or RMTS dataset");
  GenFlags gf;
  gen->add_option("--out", gf.out, "Output directory")->required();
  gen->add_option("--task", gf.task, "same_different|rmts");
  gen->add_option("--family", gf.family, "Training shape family: polygon|blob|open_curve");
  gen->add_option("--test-family", gf.test_family, "Test shape family");
  gen->add_option("--train", gf.train, "Training samples");
  gen->add_option("--val", gf.val, "Validation samples");
  gen->add_option("--test", gf.test, "Test samples");
  gen->add_option("--size", gf.size, "Image side in pixels");
  add_common(gen, common);

  auto* trn = app.add_subcommand("train", "Train a model and write a run directory");
  std::string trn_data, trn_run;
  TrainFlags trn_tf;
  trn->add_option("--data", trn_data, "Dataset directory (default: generate from the config)");
  trn->add_option("--run", trn_run, "Run directory")->required();
  trn_tf.add(trn);
  add_common(trn, common);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_json;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "train|val|test")->capture_default_str();
  ev->add_option("--json", ev_json, "Metrics JSON output (default stdout)");
  add_common(ev, common);

  auto* abl = app.add_subcommand("ablate", "Train every ablation mode under one budget");
  std::string abl_data, abl_out, abl_json;
  std::vector<std::string> abl_modes = {"both", "what-only", "where-only", "gap-regular", "vit-patches"};
  std::vector<std::uint64_t> abl_seeds;
  TrainFlags abl_tf;
  abl->add_option("--data", abl_data, "Dataset directory (default: generate from the config)");
  abl->add_option("--modes", abl_modes, "Comma-separated ablation modes")->delimiter(',')->capture_default_str();
  abl->add_option("--seeds", abl_seeds, "Comma-separated training seeds (default --seed)")->delimiter(',');
  abl->add_option("--out", abl_out, "Summary table output");
  abl->add_option("--json", abl_json, "Per-run reports as JSON");
  abl_tf.add(abl);
  add_common(abl, common);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of all model gradients");
  std::string gc_head = "abstractor", gc_dims = "toy";
  std::size_t gc_per = 3;
  gc->add_option("--model", gc_head, "transformer|abstractor")->capture_default_str();
  gc->add_option("--dims", gc_dims, "toy|desk|large")->capture_default_str();
  gc->add_option("--per-tensor", gc_per, "Entries checked per parameter tensor")->capture_default_str();
  add_common(gc, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ExtrasError& e) {
    std::cerr << e.what() << '\n';
    suggest(app, std::vector<std::string>(argv + 1, argv + argc));
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sal) return cmd_saliency(common, sal_pf, sal_in, sal_out, sal_sidecar);
    if (*tr) return cmd_trace(common, tr_pf, tr_in, tr_json, tr_overlay, tr_scale, tr_dump);
    if (*gen) return cmd_gen(common, gf);
    if (*trn) return cmd_train(common, trn_tf, trn_data, trn_run);
    if (*ev) return cmd_eval(common, ev_ckpt, ev_data, ev_split, ev_json);
    if (*abl) return cmd_ablate(common, abl_tf, abl_data, abl_modes, abl_seeds, abl_out, abl_json);
    if (*gc) return cmd_gradcheck(common, gc_head, gc_dims, gc_per);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
