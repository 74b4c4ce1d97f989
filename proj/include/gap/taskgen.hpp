// SPDX-License-Identifier: Apache-2.0
//
// Synthetic same/different datasets built from three procedural shape
// families. Shapes are binary stroke masks pasted at integer offsets, so two
// copies of a shape are pixel-identical up to translation.
#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "gap/errors.hpp"
#include "gap/image.hpp"

namespace gap {

enum class ShapeFamily { polygon, blob, open_curve };
enum class TaskKind { same_different, rmts };

inline const char* to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::polygon: return "polygon";
    case ShapeFamily::blob: return "blob";
    case ShapeFamily::open_curve: return "open_curve";
  }
  return "?";
}

inline ShapeFamily parse_family(const std::string& s) {
  if (s == "polygon") return ShapeFamily::polygon;
  if (s == "blob") return ShapeFamily::blob;
  if (s == "open_curve" || s == "curve") return ShapeFamily::open_curve;
  throw ConfigError("unknown shape family '" + s + "'");
}

inline const char* to_string(TaskKind t) { return t == TaskKind::same_different ? "same_different" : "rmts"; }

inline TaskKind parse_task(const std::string& s) {
  if (s == "same_different" || s == "sd") return TaskKind::same_different;
  if (s == "rmts") return TaskKind::rmts;
  throw ConfigError("unknown task '" + s + "'");
}

struct ShapeSpec {
  ShapeFamily family = ShapeFamily::polygon;
  std::uint64_t seed = 0;
  double scale = 16.0;  // extent of the longer bounding-box side, pixels
  double stroke = 1.0;
};

/// Tight binary mask of a rendered shape.
struct ShapeMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
  std::size_t area() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
};

struct TaskConfig {
  TaskKind task = TaskKind::same_different;
  ShapeFamily family = ShapeFamily::polygon;
  std::size_t image_size = 64;
  std::size_t margin = 8;
  double min_scale = 12.0;
  double max_scale = 18.0;
  double stroke = 1.0;
  double iou_threshold = 0.8;
  std::size_t max_attempts = 1000;

  /// Presets scale shape sizes with the canvas; RMTS packs four shapes.
  static TaskConfig make(TaskKind task, ShapeFamily family, std::size_t image_size = 64) {
    TaskConfig c;
    c.task = task;
    c.family = family;
    c.image_size = image_size;
    const double k = static_cast<double>(image_size) / 64.0;
    c.min_scale = (task == TaskKind::rmts ? 9.0 : 12.0) * k;
    c.max_scale = (task == TaskKind::rmts ? 14.0 : 18.0) * k;
    c.stroke = k;
    return c;
  }

  void validate() const {
    if (image_size < 2 * margin + 4) throw ConfigError("taskgen: image too small for the margin");
    if (!(min_scale >= 2.0 && max_scale >= min_scale)) throw ConfigError("taskgen: bad scale range");
    if (!(stroke > 0.0)) throw ConfigError("taskgen: stroke must be positive");
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ConfigError("taskgen: iou threshold outside (0,1]");
    if (max_attempts == 0) throw ConfigError("taskgen: max_attempts must be positive");
  }
};

struct Sample {
  Image image;
  int label = 0;
  std::uint64_t seed = 0;                 // per-sample seed
  std::vector<std::uint64_t> shape_seeds;  // one per rendered shape
};

/// 64-bit mixer (splitmix64 finalizer) used to derive independent seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

using Pt = std::array<double, 2>;  // (x, y)

inline std::vector<Pt> polygon_outline(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nv(3, 7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = nv(rng);
  std::vector<double> angles;
  const double phase = u(rng) * 2 * std::numbers::pi;
  for (int i = 0; i < n; ++i) angles.push_back(phase + (i + 0.35 + 0.3 * u(rng)) * 2 * std::numbers::pi / n);
  std::vector<Pt> pts;
  for (double a : angles) {
    const double r = 0.45 + 0.55 * u(rng);
    pts.push_back({r * std::cos(a), r * std::sin(a)});
  }
  pts.push_back(pts.front());
  return pts;
}

inline std::vector<Pt> blob_outline(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double amp[5], phase[5];
  for (int k = 2; k <= 4; ++k) {
    amp[k] = (0.08 + 0.17 * u(rng)) / (k - 1);
    phase[k] = u(rng) * 2 * std::numbers::pi;
  }
  std::vector<Pt> pts;
  const int n = 96;
  for (int i = 0; i <= n; ++i) {
    const double a = 2 * std::numbers::pi * i / n;
    double r = 1.0;
    for (int k = 2; k <= 4; ++k) r += amp[k] * std::cos(k * a + phase[k]);
    pts.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return pts;
}

/// Smooth non-closing path: heading follows a random walk in curvature.
inline std::vector<Pt> open_curve(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> turn(0.0, 0.12);
  double heading = u(rng) * 2 * std::numbers::pi;
  double curvature = (u(rng) - 0.5) * 0.3;
  std::vector<Pt> pts{{0.0, 0.0}};
  for (int i = 0; i < 40; ++i) {
    curvature = std::clamp(curvature + turn(rng), -0.35, 0.35);
    heading += curvature;
    pts.push_back({pts.back()[0] + std::cos(heading), pts.back()[1] + std::sin(heading)});
  }
  return pts;
}

}  // namespace detail

/// Rasterizes a shape into its tight binary mask. The polyline is fitted so
/// that its longer side spans `scale` pixels.
inline ShapeMask render_shape(const ShapeSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::vector<detail::Pt> pts;
  switch (spec.family) {
    case ShapeFamily::polygon: pts = detail::polygon_outline(rng); break;
    case ShapeFamily::blob: pts = detail::blob_outline(rng); break;
    case ShapeFamily::open_curve: pts = detail::open_curve(rng); break;
  }
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& p : pts) {
    x0 = std::min(x0, p[0]);
    x1 = std::max(x1, p[0]);
    y0 = std::min(y0, p[1]);
    y1 = std::max(y1, p[1]);
  }
  const double k = (spec.scale - 1.0) / std::max({x1 - x0, y1 - y0, 1e-9});
  const double r = spec.stroke / 2.0;
  const double pad = std::ceil(r) + 1.0;
  const std::size_t w = static_cast<std::size_t>(std::ceil((x1 - x0) * k + 2 * pad)) + 1;
  const std::size_t h = static_cast<std::size_t>(std::ceil((y1 - y0) * k + 2 * pad)) + 1;
  std::vector<std::uint8_t> canvas(h * w, 0);
  auto stamp = [&](double px, double py) {
    canvas[static_cast<std::size_t>(std::lround(py)) * w + static_cast<std::size_t>(std::lround(px))] = 1;
    const long lo_y = static_cast<long>(std::floor(py - r)), hi_y = static_cast<long>(std::ceil(py + r));
    const long lo_x = static_cast<long>(std::floor(px - r)), hi_x = static_cast<long>(std::ceil(px + r));
    for (long y = lo_y; y <= hi_y; ++y)
      for (long x = lo_x; x <= hi_x; ++x)
        if ((x - px) * (x - px) + (y - py) * (y - py) <= r * r) canvas[static_cast<std::size_t>(y) * w + x] = 1;
  };
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const double ax = (pts[i][0] - x0) * k + pad, ay = (pts[i][1] - y0) * k + pad;
    const double bx = (pts[i + 1][0] - x0) * k + pad, by = (pts[i + 1][1] - y0) * k + pad;
    const int steps = std::max(1, static_cast<int>(std::ceil(std::hypot(bx - ax, by - ay) * 4)));
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      stamp(ax + t * (bx - ax), ay + t * (by - ay));
    }
  }
  // Crop to the inked bounding box.
  std::size_t ry0 = h, ry1 = 0, rx0 = w, rx1 = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (canvas[y * w + x]) {
        ry0 = std::min(ry0, y);
        ry1 = std::max(ry1, y);
        rx0 = std::min(rx0, x);
        rx1 = std::max(rx1, x);
      }
  ShapeMask m{ry1 - ry0 + 1, rx1 - rx0 + 1, {}};
  m.bits.resize(m.height * m.width);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) m.bits[y * m.width + x] = canvas[(y + ry0) * w + x + rx0];
  return m;
}

/// Largest IoU of two masks over all integer translations of `b` against `a`.
inline double aligned_iou(const ShapeMask& a, const ShapeMask& b) {
  const double na = static_cast<double>(a.area()), nb = static_cast<double>(b.area());
  double best = 0.0;
  const long ah = static_cast<long>(a.height), aw = static_cast<long>(a.width);
  const long bh = static_cast<long>(b.height), bw = static_cast<long>(b.width);
  for (long dy = -(bh - 1); dy < ah; ++dy)
    for (long dx = -(bw - 1); dx < aw; ++dx) {
      const long oy0 = std::max(0L, dy), oy1 = std::min(ah, dy + bh);
      const long ox0 = std::max(0L, dx), ox1 = std::min(aw, dx + bw);
      std::size_t inter = 0;
      for (long y = oy0; y < oy1; ++y)
        for (long x = ox0; x < ox1; ++x) inter += a.bits[y * aw + x] & b.bits[(y - dy) * bw + (x - dx)];
      const double in = static_cast<double>(inter);
      best = std::max(best, in / (na + nb - in));
    }
  return best;
}

/// Pastes a mask with its top-left corner at (y, x).
inline void paste(Image& img, const ShapeMask& m, std::size_t y, std::size_t x) {
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c)
      if (m.at(r, c)) img.at(y + r, x + c) = 1.0;
}

namespace detail {

struct Box {
  std::size_t y, x, h, w;
};

/// True when the boxes are separated by at least one empty pixel, so their
/// ink cannot touch under 8-connectivity.
inline bool separated(const Box& a, const Box& b) {
  return a.y + a.h + 1 <= b.y || b.y + b.h + 1 <= a.y || a.x + a.w + 1 <= b.x || b.x + b.w + 1 <= a.x;
}

/// Places masks inside the given regions (y0, x0, y1, x1 exclusive) without touching.
template <typename Rng>
bool place(const std::vector<const ShapeMask*>& masks, const std::vector<std::array<std::size_t, 4>>& regions,
           Rng& rng, std::size_t attempts, std::vector<Box>& out) {
  for (std::size_t a = 0; a < attempts; ++a) {
    out.clear();
    bool ok = true;
    for (std::size_t i = 0; i < masks.size() && ok; ++i) {
      const auto& r = regions[i];
      if (masks[i]->height > r[2] - r[0] || masks[i]->width > r[3] - r[1]) return false;
      std::uniform_int_distribution<std::size_t> py(r[0], r[2] - masks[i]->height);
      std::uniform_int_distribution<std::size_t> px(r[1], r[3] - masks[i]->width);
      const Box b{py(rng), px(rng), masks[i]->height, masks[i]->width};
      for (const auto& o : out) ok = ok && separated(o, b);
      out.push_back(b);
    }
    if (ok) return true;
  }
  return false;
}

inline ShapeSpec spec_for(const TaskConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5ca1e));
  std::uniform_real_distribution<double> s(cfg.min_scale, cfg.max_scale);
  return {cfg.family, seed, s(rng), cfg.stroke};
}

/// A pair of masks for one relation: identical when `same`, else rejection
/// sampled to aligned IoU below the threshold.
inline std::array<ShapeMask, 2> relation_pair(const TaskConfig& cfg, bool same, std::uint64_t seed,
                                              std::vector<std::uint64_t>& shape_seeds) {
  const std::uint64_t s0 = mix_seed(seed, 1);
  ShapeMask a = render_shape(spec_for(cfg, s0));
  shape_seeds.push_back(s0);
  if (same) {
    shape_seeds.push_back(s0);
    return {a, a};
  }
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const std::uint64_t s1 = mix_seed(seed, 2 + attempt);
    ShapeMask b = render_shape(spec_for(cfg, s1));
    if (aligned_iou(a, b) < cfg.iou_threshold) {
      shape_seeds.push_back(s1);
      return {a, std::move(b)};
    }
  }
  throw GenerationError("taskgen: no sufficiently different shape after " + std::to_string(cfg.max_attempts) +
                        " attempts (seed " + std::to_string(seed) + ")");
}

inline Sample same_different_sample(const TaskConfig& cfg, int label, std::uint64_t seed) {
  Sample s;
  s.seed = seed;
  s.label = label;
  s.image = Image::zeros(cfg.image_size, cfg.image_size);
  const auto pair = relation_pair(cfg, label == 1, seed, s.shape_seeds);
  const std::size_t lo = cfg.margin, hi = cfg.image_size - cfg.margin;
  std::mt19937_64 rng(mix_seed(seed, 0x91ace));
  std::vector<Box> boxes;
  if (!place({&pair[0], &pair[1]}, {{lo, lo, hi, hi}, {lo, lo, hi, hi}}, rng, cfg.max_attempts, boxes)) {
    throw GenerationError("taskgen: could not place two shapes (seed " + std::to_string(seed) + ")");
  }
  for (std::size_t i = 0; i < 2; ++i) paste(s.image, pair[i], boxes[i].y, boxes[i].x);
  return s;
}

inline Sample rmts_sample(const TaskConfig& cfg, int label, std::uint64_t seed) {
  Sample s;
  s.seed = seed;
  s.label = label;
  s.image = Image::zeros(cfg.image_size, cfg.image_size);
  std::mt19937_64 rng(mix_seed(seed, 0x4e75));
  const bool top_same = std::bernoulli_distribution(0.5)(rng);
  const bool bottom_same = label == 1 ? top_same : !top_same;
  const auto top = relation_pair(cfg, top_same, mix_seed(seed, 10), s.shape_seeds);
  const auto bottom = relation_pair(cfg, bottom_same, mix_seed(seed, 11), s.shape_seeds);
  const std::size_t lo = cfg.margin, hi = cfg.image_size - cfg.margin, mid = (lo + hi) / 2;
  // One quadrant per shape; the one-pixel gutter keeps neighbours apart.
  const std::vector<std::array<std::size_t, 4>> regions = {
      {lo, lo, mid - 1, mid - 1}, {lo, mid, mid - 1, hi}, {mid, lo, hi, mid - 1}, {mid, mid, hi, hi}};
  std::vector<Box> boxes;
  if (!place({&top[0], &top[1], &bottom[0], &bottom[1]}, regions, rng, cfg.max_attempts, boxes)) {
    throw GenerationError("taskgen: shapes do not fit the 2x2 layout (seed " + std::to_string(seed) + ")");
  }
  const ShapeMask* masks[4] = {&top[0], &top[1], &bottom[0], &bottom[1]};
  for (std::size_t i = 0; i < 4; ++i) paste(s.image, *masks[i], boxes[i].y, boxes[i].x);
  return s;
}

}  // namespace detail

/// Sample i has seed mix_seed(seed, i) and label 1 for even i, so every
/// prefix is balanced to within one sample.
inline std::vector<Sample> generate(const TaskConfig& cfg, std::size_t count, std::uint64_t seed) {
  cfg.validate();
  if (count < 2) throw ConfigError("taskgen: count must be at least 2");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = i % 2 == 0 ? 1 : 0;
    const std::uint64_t s = mix_seed(seed, i);
    out.push_back(cfg.task == TaskKind::same_different ? detail::same_different_sample(cfg, label, s)
                                                       : detail::rmts_sample(cfg, label, s));
  }
  return out;
}

inline std::vector<Sample> gen_same_different(std::size_t count, ShapeFamily family, std::uint64_t seed,
                                              std::size_t image_size = 64) {
  return generate(TaskConfig::make(TaskKind::same_different, family, image_size), count, seed);
}

inline std::vector<Sample> gen_rmts(std::size_t count, ShapeFamily family, std::uint64_t seed,
                                    std::size_t image_size = 64) {
  return generate(TaskConfig::make(TaskKind::rmts, family, image_size), count, seed);
}

struct SplitCounts {
  std::size_t train = 500;
  std::size_t val = 500;
  std::size_t test = 1000;
};

struct DatasetSplits {
  std::vector<Sample> train, val, test;
};

/// Seeds every split from its own stream; train and val use the same task
/// config, test swaps in `test_family`.
inline DatasetSplits gen_splits(const TaskConfig& train_cfg, ShapeFamily test_family, const SplitCounts& counts,
                                std::uint64_t seed) {
  TaskConfig test_cfg = train_cfg;
  test_cfg.family = test_family;
  // An empty split is allowed here, e.g. a run without a test set.
  auto split = [](const TaskConfig& c, std::size_t n, std::uint64_t s) {
    return n == 0 ? std::vector<Sample>{} : generate(c, n, s);
  };
  DatasetSplits d{split(train_cfg, counts.train, mix_seed(seed, 101)), split(train_cfg, counts.val, mix_seed(seed, 102)),
                  split(test_cfg, counts.test, mix_seed(seed, 103))};
  std::set<std::uint64_t> seen_train, seen_val;
  for (const auto& s : d.train) seen_train.insert(s.shape_seeds.begin(), s.shape_seeds.end());
  for (const auto& s : d.val) {
    for (auto k : s.shape_seeds) {
      if (seen_train.count(k)) throw GenerationError("taskgen: shape seed shared between train and val");
      seen_val.insert(k);
    }
  }
  for (const auto& s : d.test)
    for (auto k : s.shape_seeds)
      if (seen_train.count(k) || seen_val.count(k)) throw GenerationError("taskgen: shape seed reused in test");
  return d;
}

inline DatasetSplits gen_ood_split(ShapeFamily train_family, ShapeFamily test_family, const SplitCounts& counts,
                                   std::uint64_t seed, TaskKind task = TaskKind::same_different,
                                   std::size_t image_size = 64) {
  if (train_family == test_family) {
    throw ConfigError(std::string("taskgen: OOD split needs distinct families, got ") + to_string(train_family) +
                      " twice");
  }
  return gen_splits(TaskConfig::make(task, train_family, image_size), test_family, counts, seed);
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/<split>/{NNNNNN.pgm, labels.csv}, <root>/manifest.json

inline nlohmann::json manifest_json(const TaskConfig& cfg, ShapeFamily test_family, const SplitCounts& counts,
                                    std::uint64_t seed) {
  return {{"generator", "gap-taskgen"},
          {"version", 1},
          {"task", to_string(cfg.task)},
          {"train_family", to_string(cfg.family)},
          {"test_family", to_string(test_family)},
          {"image_size", cfg.image_size},
          {"margin", cfg.margin},
          {"min_scale", cfg.min_scale},
          {"max_scale", cfg.max_scale},
          {"stroke", cfg.stroke},
          {"iou_threshold", cfg.iou_threshold},
          {"max_attempts", cfg.max_attempts},
          {"seed", seed},
          {"counts", {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}}}};
}

inline void write_split(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "labels.csv");
  if (!csv) throw InputError("cannot write " + (dir / "labels.csv").string());
  csv << "filename,label,seed\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.pgm", i);
    write_pnm((dir / name).string(), samples[i].image);
    csv << name << ',' << samples[i].label << ',' << samples[i].seed << '\n';
  }
  if (!csv) throw InputError("write failed for " + (dir / "labels.csv").string());
}

inline void write_dataset(const std::filesystem::path& root, const DatasetSplits& d, const nlohmann::json& manifest) {
  write_split(root / "train", d.train);
  write_split(root / "val", d.val);
  write_split(root / "test", d.test);
  std::ofstream os(root / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw InputError("cannot write manifest in " + root.string());
}

/// Reads one split directory. Shape seeds are not stored on disk.
inline std::vector<Sample> read_split(const std::filesystem::path& dir) {
  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw InputError("missing " + (dir / "labels.csv").string());
  std::string line;
  std::getline(csv, line);
  if (line != "filename,label,seed") throw InputError("labels.csv: unexpected header '" + line + "'");
  std::vector<Sample> out;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, label, seed;
    if (!std::getline(ss, name, ',') || !std::getline(ss, label, ',') || !std::getline(ss, seed)) {
      throw InputError("labels.csv: malformed row '" + line + "'");
    }
    Sample s;
    if (label != "0" && label != "1") throw InputError("labels.csv: label must be 0 or 1, got '" + label + "'");
    s.label = label == "1";
    try {
      s.seed = std::stoull(seed);
    } catch (const std::exception&) {
      throw InputError("labels.csv: bad seed '" + seed + "'");
    }
    s.image = read_pnm((dir / name).string());
    out.push_back(std::move(s));
  }
  return out;
}

inline DatasetSplits read_dataset(const std::filesystem::path& root) {
  return {read_split(root / "train"), read_split(root / "val"), read_split(root / "test")};
}

}  // namespace gap
