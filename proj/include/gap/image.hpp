// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "gap/errors.hpp"

namespace gap {

/// Pixel grid with values in [0,1], stored row-major with channels
/// interleaved (index = (y * width + x) * channels + c).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  static Image zeros(std::size_t h, std::size_t w, std::size_t c = 1) {
    return Image{h, w, c, std::vector<double>(h * w * c, 0.0)};
  }

  static Image filled(std::size_t h, std::size_t w, std::size_t c, double v) {
    return Image{h, w, c, std::vector<double>(h * w * c, v)};
  }

  bool empty() const { return pixels.empty(); }

  double& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }

  bool contains(long y, long x) const {
    return y >= 0 && x >= 0 && y < static_cast<long>(height) && x < static_cast<long>(width);
  }

  /// Throws unless the buffer size matches and every pixel lies in [0,1].
  void validate() const {
    if (height == 0 || width == 0 || channels == 0) throw InputError("image: empty extent");
    if (pixels.size() != height * width * channels) throw InputError("image: buffer size mismatch");
    for (double v : pixels) {
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("image: pixel outside [0,1]");
    }
  }
};

inline Image flip_horizontal(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

inline Image flip_vertical(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(y, x, c) = img.at(img.height - 1 - y, x, c);
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm (binary P5 / P6)

namespace detail {

inline std::string next_pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

inline std::uint8_t quantize(double v) {
  const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(q);
}

}  // namespace detail

/// Reads a binary PGM (P5, one channel) or PPM (P6, three channels); pixel
/// values are normalized by maxval into [0,1].
inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open image " + path);
  const std::string magic = detail::next_pnm_token(is);
  if (magic != "P5" && magic != "P6") throw InputError(path + ": unsupported netpbm type " + magic);
  Image img;
  try {
    img.width = std::stoul(detail::next_pnm_token(is));
    img.height = std::stoul(detail::next_pnm_token(is));
  } catch (const std::exception&) {
    throw InputError(path + ": malformed header");
  }
  const unsigned long maxval = std::stoul(detail::next_pnm_token(is));
  if (maxval == 0 || maxval > 65535) throw InputError(path + ": bad maxval");
  img.channels = magic == "P5" ? 1 : 3;
  const std::size_t n = img.width * img.height * img.channels;
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bytes_per);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw InputError(path + ": truncated pixel data");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = bytes_per == 1 ? raw[i] : (raw[2 * i] << 8u) | raw[2 * i + 1];
    img.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

/// Writes a one-channel image as P5 or a three-channel image as P6 (maxval 255).
inline void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw InputError("write_pnm: only 1- or 3-channel images are supported");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write image " + path);
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = detail::quantize(img.pixels[i]);
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw InputError("write failed for " + path);
}

}  // namespace gap
