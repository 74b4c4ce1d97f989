// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference check of every model parameter's gradient.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "gap/models.hpp"

namespace gap {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinked = 0;  // entries whose +-h window flips a ReLU; left out of the maximum
  std::size_t tensors = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Random glimpse batch shaped for `cfg`, with locations strictly inside [-1,1].
template <typename T>
GlimpseBatch<T> random_batch(const ModelConfig& cfg, std::size_t batch, std::size_t tokens, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pix(0.0, 1.0), loc(-0.95, 0.95);
  const auto& s = cfg.perception.sensor;
  const std::size_t n = batch * tokens;
  std::vector<T> contents(n * cfg.cnn_in_channels() * s.glimpse_height * s.glimpse_width);
  for (auto& v : contents) v = static_cast<T>(pix(rng));
  std::vector<T> locations(n * 2);
  for (auto& v : locations) v = static_cast<T>(loc(rng));
  GlimpseBatch<T> b;
  b.batch = batch;
  b.tokens = tokens;
  b.contents = Tensor<T>({n, cfg.cnn_in_channels(), s.glimpse_height, s.glimpse_width}, std::move(contents));
  b.locations = Tensor<T>({n, 2}, std::move(locations));
  for (std::size_t i = 0; i < batch; ++i) b.labels.push_back(static_cast<int>(i % 2));
  return b;
}

/// Checks `per_tensor` randomly chosen entries of every parameter tensor of a
/// freshly initialized 64-bit model. The zero output unit is re-drawn so that
/// gradients reach every layer.
inline GradcheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, std::size_t per_tensor = 2,
                                       double h = 1e-5, std::size_t batch = 2) {
  ParamStore<double> ps = init_params<double>(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(-0.5, 0.5);
  for (auto& v : ps.get_mutable("out.w").mutable_values()) v = unit(rng);
  for (auto& e : ps.entries()) {
    // Layer-norm gains and all biases leave their initial values. Zero
    // biases behind a dead ReLU region put units exactly on the kink, where
    // central differences see the average of both one-sided slopes.
    if (e.name.ends_with(".g") || e.name.ends_with(".b")) {
      for (auto& v : e.tensor.mutable_values()) v += 0.2 * unit(rng);
    }
  }
  const GlimpseBatch<double> b = random_batch<double>(cfg, batch, cfg.tokens(), seed + 1);
  auto loss_value = [&]() { return bce_with_logits(forward(ps, cfg, b), b.labels).item(); };

  ps.zero_grad();
  backward(bce_with_logits(forward(ps, cfg, b), b.labels));

  GradcheckReport report;
  for (auto& e : ps.entries()) {
    ++report.tensors;
    std::uniform_int_distribution<std::size_t> pick(0, e.tensor.numel() - 1);
    const auto grad = e.tensor.grad();
    for (std::size_t k = 0; k < std::min(per_tensor, e.tensor.numel()); ++k) {
      const std::size_t i = pick(rng);
      auto values = e.tensor.mutable_values();
      const double orig = values[i];
      std::vector<bool> signs_up, signs_down;
      values[i] = orig + h;
      detail::relu_sign_log = &signs_up;
      const double up = loss_value();
      values[i] = orig - h;
      detail::relu_sign_log = &signs_down;
      const double down = loss_value();
      detail::relu_sign_log = nullptr;
      values[i] = orig;
      ++report.checked;
      if (signs_up != signs_down) {
        ++report.kinked;
        continue;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad.empty() ? 0.0 : grad[i];
      const double err = relative_error(analytic, numeric);
      if (err > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_param = e.name;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace gap
