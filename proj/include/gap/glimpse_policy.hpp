// SPDX-License-Identifier: Apache-2.0
//
// Glimpse selection: winner-takes-all over the saliency map followed by
// multiplicative inhibition of return, repeated for a fixed number of steps.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "gap/errors.hpp"
#include "gap/image.hpp"
#include "gap/saliency.hpp"

namespace gap {

/// Integer pixel coordinates: x is the column, y the row.
struct GlimpseLocation {
  std::size_t x = 0;
  std::size_t y = 0;

  bool operator==(const GlimpseLocation&) const = default;

  /// Each component mapped to [-1,1] via 2*pixel/(extent-1) - 1, as (x, y).
  std::array<double, 2> normalized(std::size_t height, std::size_t width) const {
    auto norm = [](std::size_t p, std::size_t extent) {
      return extent <= 1 ? 0.0 : 2.0 * static_cast<double>(p) / static_cast<double>(extent - 1) - 1.0;
    };
    return {norm(x, width), norm(y, height)};
  }
};

enum class MaskKind { hard, soft };

struct MaskConfig {
  MaskKind kind = MaskKind::hard;
  double radius = 5.0;     // hard: pixels with distance <= radius are zeroed
  double epsilon = 450.0;  // soft: kernel sharpness, distance in image diagonals
  // Soft kernel exactly as e^{-eps d}, i.e. 1 at the glimpsed location. Off by
  // default: 1 - e^{-eps d} is the form that actually suppresses.
  bool soft_literal = false;
};

enum class PolicyKind { standard, regular_grid, random };

struct GapConfig {
  std::size_t glimpses = 15;
  MaskConfig mask;
  PolicyKind policy = PolicyKind::standard;
  std::size_t grid_stride = 16;  // regular_grid only
  std::uint64_t random_seed = 0;  // random only

  void validate() const {
    if (glimpses < 1) throw ConfigError("gap: T must be >= 1");
    if (mask.kind == MaskKind::hard && mask.radius < 1.0) throw ConfigError("gap: hard radius must be >= 1");
    if (mask.kind == MaskKind::soft && !(mask.epsilon > 0.0)) throw ConfigError("gap: soft epsilon must be > 0");
    if (policy == PolicyKind::regular_grid && grid_stride == 0) throw ConfigError("gap: grid stride must be > 0");
  }
};

/// Multiplier grid applied to the saliency map around one glimpse.
struct IoRMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

inline IoRMask make_ior_mask(std::size_t height, std::size_t width, GlimpseLocation loc,
                             const MaskConfig& cfg) {
  IoRMask m{height, width, std::vector<double>(height * width, 1.0)};
  const double diag = std::sqrt(static_cast<double>(height * height + width * width));
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double dy = static_cast<double>(y) - static_cast<double>(loc.y);
      const double dx = static_cast<double>(x) - static_cast<double>(loc.x);
      const double d2 = dy * dy + dx * dx;
      double v;
      if (cfg.kind == MaskKind::hard) {
        v = d2 <= cfg.radius * cfg.radius ? 0.0 : 1.0;
      } else {
        const double k = std::exp(-cfg.epsilon * std::sqrt(d2) / diag);
        v = cfg.soft_literal ? k : 1.0 - k;
      }
      m.values[y * width + x] = v;
    }
  }
  return m;
}

/// Location of the largest saliency; ties go to the smallest row-major index.
/// NaN entries never win; an all-NaN map is a numeric error.
inline GlimpseLocation wta(const SaliencyMap& map) {
  if (map.values.empty()) throw InputError("wta: empty saliency map");
  std::size_t best = map.values.size();
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const double v = map.values[i];
    if (std::isnan(v)) continue;
    if (best == map.values.size() || v > map.values[best]) best = i;
  }
  if (best == map.values.size()) throw NumericError("wta: saliency map is all NaN");
  return {best % map.width, best / map.width};
}

/// S_{t+1} = S_t * M(x_t); the input map is left untouched.
inline SaliencyMap apply_ior(const SaliencyMap& map, GlimpseLocation loc, const IoRMask& mask) {
  if (loc.y >= map.height || loc.x >= map.width) throw BoundsError("apply_ior: location outside map");
  if (mask.height != map.height || mask.width != map.width) {
    throw DimensionError("apply_ior: mask extent differs from map");
  }
  SaliencyMap out = map;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= mask.values[i];
  out.iteration = map.iteration + 1;
  return out;
}

/// Centres of a regular grid of cells of size `stride`, centred in `extent`.
inline std::vector<std::size_t> grid_points(std::size_t extent, std::size_t stride) {
  const std::size_t cells = std::max<std::size_t>(1, extent / stride);
  const std::size_t used = std::min(extent, cells * stride);
  const std::size_t offset = (extent - used) / 2 + std::min(stride, extent) / 2;
  std::vector<std::size_t> pts;
  for (std::size_t k = 0; k < cells; ++k) pts.push_back(std::min(extent - 1, offset + k * stride));
  return pts;
}

inline std::size_t snap_to(const std::vector<std::size_t>& pts, std::size_t p) {
  std::size_t best = pts.front();
  for (std::size_t q : pts) {
    const auto d = [p](std::size_t a) { return a > p ? a - p : p - a; };
    if (d(q) < d(best)) best = q;
  }
  return best;
}

/// Locations produced by one run of the glimpsing loop.
struct GlimpsePath {
  std::vector<GlimpseLocation> locations;
  // Saliency ran out (the map was all zero) before T glimpses were taken.
  bool exhausted = false;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// The glimpsing loop over a precomputed saliency map.
///
/// When every remaining saliency is zero the winner falls back to the first
/// row-major location not yet fully inhibited, and `exhausted` is set. Under
/// the regular-grid policy the winner drives inhibition as usual but the
/// emitted location is snapped to the nearest grid centre.
inline GlimpsePath run_gap(const SaliencyMap& saliency, const GapConfig& cfg) {
  cfg.validate();
  GlimpsePath path;
  path.height = saliency.height;
  path.width = saliency.width;
  SaliencyMap s = saliency;
  std::vector<double> coverage(s.values.size(), 1.0);
  std::mt19937_64 rng(cfg.random_seed);
  std::uniform_int_distribution<std::size_t> pick(0, s.values.size() - 1);
  const auto rows = grid_points(s.height, cfg.grid_stride);
  const auto cols = grid_points(s.width, cfg.grid_stride);

  for (std::size_t t = 0; t < cfg.glimpses; ++t) {
    GlimpseLocation winner;
    if (cfg.policy == PolicyKind::random) {
      const std::size_t i = pick(rng);
      winner = {i % s.width, i / s.width};
    } else {
      winner = wta(s);
      if (!(s.at(winner.y, winner.x) > 0.0)) {
        path.exhausted = true;
        winner = {0, 0};
        for (std::size_t i = 0; i < coverage.size(); ++i) {
          if (coverage[i] > 0.0) {
            winner = {i % s.width, i / s.width};
            break;
          }
        }
      }
    }
    const IoRMask mask = make_ior_mask(s.height, s.width, winner, cfg.mask);
    s = apply_ior(s, winner, mask);
    for (std::size_t i = 0; i < coverage.size(); ++i) coverage[i] *= mask.values[i];

    GlimpseLocation emitted = winner;
    if (cfg.policy == PolicyKind::regular_grid) {
      emitted = {snap_to(cols, winner.x), snap_to(rows, winner.y)};
    }
    path.locations.push_back(emitted);
  }
  return path;
}

inline GlimpsePath run_gap(const Image& img, const ErrorNeuronConfig& saliency_cfg,
                           const GapConfig& cfg) {
  return run_gap(compute_saliency(img, saliency_cfg), cfg);
}

}  // namespace gap
