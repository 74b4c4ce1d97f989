// SPDX-License-Identifier: Apache-2.0
//
// Error-neuron saliency: every location compares the flattened image patch
// centred on it with the patches centred on its 8-connected neighbours and
// aggregates the L2 distances (minimum by default).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "gap/errors.hpp"
#include "gap/image.hpp"

namespace gap {

enum class Aggregation { min, sum };
enum class BorderPolicy { zero, replicate };

struct ErrorNeuronConfig {
  std::size_t patch_height = 5;
  std::size_t patch_width = 5;
  Aggregation aggregation = Aggregation::min;
  BorderPolicy border = BorderPolicy::zero;

  void validate() const {
    if (patch_height == 0 || patch_width == 0 || patch_height % 2 == 0 || patch_width % 2 == 0) {
      throw ConfigError("error neurons: patch extents must be odd and positive");
    }
  }
};

struct SaliencyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  int iteration = 0;  // IoR step that produced this map

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
};

/// The 8-connected neighbour offsets (dy, dx) in row-major order.
inline constexpr std::array<std::array<int, 2>, 8> kNeighbourOffsets = {{
    {-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1},
}};

namespace detail {

inline double border_pixel(const Image& img, long y, long x, std::size_t c, BorderPolicy border) {
  if (img.contains(y, x)) return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
  if (border == BorderPolicy::zero) return 0.0;
  y = std::clamp<long>(y, 0, static_cast<long>(img.height) - 1);
  x = std::clamp<long>(x, 0, static_cast<long>(img.width) - 1);
  return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
}

}  // namespace detail

/// Flattened (row, column, channel) patch centred at (row, col).
inline std::vector<double> extract_patch(const Image& img, std::size_t row, std::size_t col,
                                         std::size_t patch_height, std::size_t patch_width,
                                         BorderPolicy border = BorderPolicy::zero) {
  if (row >= img.height || col >= img.width) {
    throw BoundsError("extract_patch: centre (" + std::to_string(row) + "," +
                      std::to_string(col) + ") outside image");
  }
  const long ry = static_cast<long>(patch_height / 2);
  const long rx = static_cast<long>(patch_width / 2);
  std::vector<double> out;
  out.reserve(patch_height * patch_width * img.channels);
  for (long dy = -ry; dy <= ry; ++dy)
    for (long dx = -rx; dx <= rx; ++dx)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.push_back(detail::border_pixel(img, static_cast<long>(row) + dy,
                                           static_cast<long>(col) + dx, c, border));
  return out;
}

/// Pluggable saliency source.
class SaliencyModel {
 public:
  virtual ~SaliencyModel() = default;
  virtual SaliencyMap compute(const Image& img) const = 0;
};

/// Error-neuron saliency map. Neighbours whose centre falls outside the image
/// are not part of the surround. Distances accumulate in patch-flattening
/// order, so results are bit-identical to a direct patch-by-patch evaluation.
inline SaliencyMap compute_saliency(const Image& img, const ErrorNeuronConfig& cfg) {
  cfg.validate();
  if (img.empty()) throw InputError("compute_saliency: empty image");
  const std::size_t h = img.height, w = img.width, ch = img.channels;
  const long ry = static_cast<long>(cfg.patch_height / 2);
  const long rx = static_cast<long>(cfg.patch_width / 2);
  // Padding covers a patch centred on any neighbour of any pixel.
  const long py = ry + 1, px = rx + 1;
  const std::size_t pw = w + 2 * static_cast<std::size_t>(px);
  const std::size_t ph = h + 2 * static_cast<std::size_t>(py);
  std::vector<double> pad(ph * pw * ch);
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x)
      for (std::size_t c = 0; c < ch; ++c)
        pad[(y * pw + x) * ch + c] = detail::border_pixel(
            img, static_cast<long>(y) - py, static_cast<long>(x) - px, c, cfg.border);

  const std::size_t row_len = cfg.patch_width * ch;
  SaliencyMap out{h, w, std::vector<double>(h * w, 0.0), 0};
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double agg = cfg.aggregation == Aggregation::min ? std::numeric_limits<double>::infinity() : 0.0;
      bool any = false;
      for (const auto& d : kNeighbourOffsets) {
        const long ni = static_cast<long>(i) + d[0];
        const long nj = static_cast<long>(j) + d[1];
        if (!img.contains(ni, nj)) continue;
        double acc = 0.0;
        for (long u = -ry; u <= ry; ++u) {
          const double* a = &pad[((i + py + u) * pw + (j + px - rx)) * ch];
          const double* b = &pad[((ni + py + u) * pw + (nj + px - rx)) * ch];
          for (std::size_t k = 0; k < row_len; ++k) {
            const double diff = a[k] - b[k];
            acc += diff * diff;
          }
        }
        const double dist = std::sqrt(acc);
        agg = cfg.aggregation == Aggregation::min ? std::min(agg, dist) : agg + dist;
        any = true;
      }
      out.at(i, j) = any ? agg : 0.0;
    }
  }
  return out;
}

class ErrorNeuronSaliency final : public SaliencyModel {
 public:
  explicit ErrorNeuronSaliency(ErrorNeuronConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }
  SaliencyMap compute(const Image& img) const override { return compute_saliency(img, cfg_); }
  const ErrorNeuronConfig& config() const { return cfg_; }

 private:
  ErrorNeuronConfig cfg_;
};

}  // namespace gap
