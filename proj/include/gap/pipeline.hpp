// SPDX-License-Identifier: Apache-2.0
//
// Perception front end: saliency -> glimpse locations -> glimpse contents.
// Nothing here is differentiable; it only selects what the networks see.
#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "gap/errors.hpp"
#include "gap/glimpse_policy.hpp"
#include "gap/image.hpp"
#include "gap/saliency.hpp"
#include "gap/sensors.hpp"

namespace gap {

enum class PerceptionMode {
  gap,           // saliency-driven glimpses
  gap_regular,   // saliency-driven, locations snapped to a coarse grid
  vit_patches,   // every non-overlapping patch of a regular grid, no saliency
};

struct PerceptionConfig {
  ErrorNeuronConfig saliency;
  GapConfig gap;
  SensorConfig sensor;
  PerceptionMode mode = PerceptionMode::gap;

  /// Grid spacing used by the two grid-based modes: one glimpse width.
  std::size_t grid_stride() const { return sensor.glimpse_width; }

  /// Number of glimpses per image of the given extent.
  std::size_t glimpse_count(std::size_t height, std::size_t width) const {
    if (mode == PerceptionMode::vit_patches) {
      return grid_points(height, grid_stride()).size() * grid_points(width, grid_stride()).size();
    }
    return gap.glimpses;
  }

  void validate() const {
    saliency.validate();
    gap.validate();
    sensor.validate();
  }
};

struct GlimpseTrace {
  std::vector<GlimpseLocation> locations;
  std::vector<std::array<double, 2>> normalized;  // (x, y) in [-1,1]
  std::vector<GlimpseContent> contents;
  bool exhausted = false;
};

inline std::vector<GlimpseLocation> vit_patch_locations(std::size_t height, std::size_t width,
                                                        std::size_t stride) {
  std::vector<GlimpseLocation> locs;
  for (std::size_t y : grid_points(height, stride))
    for (std::size_t x : grid_points(width, stride)) locs.push_back({x, y});
  return locs;
}

inline GlimpsePath glimpse_path(const Image& img, const PerceptionConfig& cfg) {
  if (cfg.mode == PerceptionMode::vit_patches) {
    return {vit_patch_locations(img.height, img.width, cfg.grid_stride()), false, img.height, img.width};
  }
  GapConfig gcfg = cfg.gap;
  if (cfg.mode == PerceptionMode::gap_regular) {
    gcfg.policy = PolicyKind::regular_grid;
    gcfg.grid_stride = cfg.grid_stride();
  }
  return run_gap(img, cfg.saliency, gcfg);
}

inline GlimpseTrace perceive(const Image& img, const PerceptionConfig& cfg) {
  cfg.validate();
  img.validate();
  const GlimpsePath path = glimpse_path(img, cfg);
  GlimpseTrace trace;
  trace.exhausted = path.exhausted;
  trace.locations = path.locations;
  for (const auto& loc : path.locations) {
    trace.normalized.push_back(loc.normalized(img.height, img.width));
    trace.contents.push_back(sense(img, loc, cfg.sensor));
  }
  return trace;
}

}  // namespace gap
