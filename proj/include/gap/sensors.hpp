// SPDX-License-Identifier: Apache-2.0
//
// Glimpse sensors: what the model sees around a glimpse location.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "gap/errors.hpp"
#include "gap/glimpse_policy.hpp"
#include "gap/image.hpp"

namespace gap {

enum class SensorKind { multiscale, logpolar };

struct SensorConfig {
  SensorKind kind = SensorKind::multiscale;
  std::size_t glimpse_height = 15;
  std::size_t glimpse_width = 15;
  // Multi-scale: side of the square region sampled at each scale. The first
  // entry is the native-resolution crop and must equal the glimpse size.
  std::vector<std::size_t> region_sizes = {15, 30, 45};
  double logpolar_radius = 48.0;

  std::size_t scales() const { return kind == SensorKind::multiscale ? region_sizes.size() : 1; }

  void validate() const {
    if (glimpse_height == 0 || glimpse_width == 0) throw ConfigError("sensor: empty glimpse");
    if (kind == SensorKind::multiscale) {
      if (region_sizes.empty()) throw ConfigError("sensor: no scales");
      if (glimpse_height != glimpse_width || region_sizes.front() != glimpse_height) {
        throw ConfigError("sensor: multi-scale glimpses are square and scale 1 is the native crop");
      }
      for (std::size_t k = 1; k < region_sizes.size(); ++k) {
        if (region_sizes[k] <= region_sizes[k - 1]) {
          throw ConfigError("sensor: region sizes must strictly increase");
        }
      }
    } else if (!(logpolar_radius >= 2.0)) {
      throw ConfigError("sensor: log-polar radius must be >= 2");
    }
  }
};

/// Sensor output laid out as [scale][row][col][channel]. For the log-polar
/// sensor rows index angle and columns index log-radius.
struct GlimpseContent {
  std::size_t scales = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> values;
  GlimpseLocation source;

  double at(std::size_t s, std::size_t y, std::size_t x, std::size_t c = 0) const {
    return values[((s * height + y) * width + x) * channels + c];
  }
};

namespace detail {

inline double pixel_or_zero(const Image& img, long y, long x, std::size_t c) {
  return img.contains(y, x) ? img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) : 0.0;
}

/// Overlap lengths between `out` equal bins over [0, region) and unit source
/// cells: weights[o * region + i].
inline std::vector<double> area_weights(std::size_t region, std::size_t out) {
  std::vector<double> w(out * region, 0.0);
  const double step = static_cast<double>(region) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double lo = o * step, hi = (o + 1) * step;
    for (std::size_t i = static_cast<std::size_t>(lo); i < region && static_cast<double>(i) < hi; ++i) {
      w[o * region + i] = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
    }
  }
  return w;
}

}  // namespace detail

inline void check_location(const Image& img, GlimpseLocation loc) {
  if (loc.y >= img.height || loc.x >= img.width) {
    throw BoundsError("glimpse location (" + std::to_string(loc.x) + "," + std::to_string(loc.y) +
                      ") outside image");
  }
}

/// Square crops of increasing size centred on `loc`, each area-averaged down
/// to the glimpse size; pixels outside the image read as zero.
inline GlimpseContent multiscale_glimpse(const Image& img, GlimpseLocation loc, const SensorConfig& cfg) {
  check_location(img, loc);
  const std::size_t g = cfg.glimpse_height, ch = img.channels;
  GlimpseContent out{cfg.region_sizes.size(), g, g, ch, {}, loc};
  out.values.assign(out.scales * g * g * ch, 0.0);
  for (std::size_t s = 0; s < cfg.region_sizes.size(); ++s) {
    const std::size_t region = cfg.region_sizes[s];
    const long top = static_cast<long>(loc.y) - static_cast<long>(region / 2);
    const long left = static_cast<long>(loc.x) - static_cast<long>(region / 2);
    double* dst = out.values.data() + s * g * g * ch;
    if (region == g) {
      for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x)
          for (std::size_t c = 0; c < ch; ++c)
            dst[(y * g + x) * ch + c] =
                detail::pixel_or_zero(img, top + static_cast<long>(y), left + static_cast<long>(x), c);
      continue;
    }
    const auto w = detail::area_weights(region, g);
    const double cell = static_cast<double>(region) / static_cast<double>(g);
    const double inv_area = 1.0 / (cell * cell);
    // Separable box filter: rows first, then columns.
    std::vector<double> rows(g * region * ch, 0.0);
    for (std::size_t oy = 0; oy < g; ++oy)
      for (std::size_t iy = 0; iy < region; ++iy) {
        const double wy = w[oy * region + iy];
        if (wy == 0.0) continue;
        for (std::size_t ix = 0; ix < region; ++ix)
          for (std::size_t c = 0; c < ch; ++c)
            rows[(oy * region + ix) * ch + c] +=
                wy * detail::pixel_or_zero(img, top + static_cast<long>(iy), left + static_cast<long>(ix), c);
      }
    for (std::size_t oy = 0; oy < g; ++oy)
      for (std::size_t ox = 0; ox < g; ++ox)
        for (std::size_t c = 0; c < ch; ++c) {
          double acc = 0.0;
          for (std::size_t ix = 0; ix < region; ++ix) acc += w[ox * region + ix] * rows[(oy * region + ix) * ch + c];
          dst[(oy * g + ox) * ch + c] = acc * inv_area;
        }
  }
  return out;
}

/// Bilinear sample; points outside [0,w-1]x[0,h-1] read as zero.
inline double bilinear(const Image& img, double y, double x, std::size_t c) {
  const double maxy = static_cast<double>(img.height - 1);
  const double maxx = static_cast<double>(img.width - 1);
  if (!(y >= 0.0 && x >= 0.0 && y <= maxy && x <= maxx)) return 0.0;
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  return (1.0 - fy) * ((1.0 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
         fy * ((1.0 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
}

/// Radius sampled by log-polar column v: exp(v ln R / w_g).
inline double logpolar_rho(std::size_t v, const SensorConfig& cfg) {
  return std::exp(static_cast<double>(v) * std::log(cfg.logpolar_radius) /
                  static_cast<double>(cfg.glimpse_width));
}

/// Row u samples angle 2 pi u / h_g, column v samples radius logpolar_rho(v),
/// at loc + (rho cos theta, rho sin theta) in (x, y).
inline GlimpseContent logpolar_glimpse(const Image& img, GlimpseLocation loc, const SensorConfig& cfg) {
  check_location(img, loc);
  const std::size_t h = cfg.glimpse_height, w = cfg.glimpse_width, ch = img.channels;
  GlimpseContent out{1, h, w, ch, std::vector<double>(h * w * ch), loc};
  for (std::size_t u = 0; u < h; ++u) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(u) / static_cast<double>(h);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t v = 0; v < w; ++v) {
      const double rho = logpolar_rho(v, cfg);
      const double sx = static_cast<double>(loc.x) + rho * ct;
      const double sy = static_cast<double>(loc.y) + rho * st;
      for (std::size_t c = 0; c < ch; ++c) out.values[(u * w + v) * ch + c] = bilinear(img, sy, sx, c);
    }
  }
  return out;
}

inline GlimpseContent sense(const Image& img, GlimpseLocation loc, const SensorConfig& cfg) {
  return cfg.kind == SensorKind::multiscale ? multiscale_glimpse(img, loc, cfg) : logpolar_glimpse(img, loc, cfg);
}

}  // namespace gap
