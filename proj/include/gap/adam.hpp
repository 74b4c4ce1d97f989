// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gap/errors.hpp"
#include "gap/param_store.hpp"

namespace gap {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created lazily, keyed by
/// parameter name; parameters without a gradient are treated as zero-grad.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) { validate(cfg_); }

  static void validate(const AdamConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw ConfigError("adam: learning rate must be > 0");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
      throw ConfigError("adam: betas must be in [0,1)");
    }
    if (!(cfg.eps > 0.0)) throw ConfigError("adam: eps must be > 0");
  }

  void step(ParamStore<T>& params) {
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto& e : params.entries()) {
      if (!e.trainable) continue;
      auto w = e.tensor.mutable_values();
      auto g = e.tensor.grad();
      auto& m = moments_[e.name];
      if (m.first.empty()) {
        m.first.assign(w.size(), 0.0);
        m.second.assign(w.size(), 0.0);
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
        m.first[i] = cfg_.beta1 * m.first[i] + (1.0 - cfg_.beta1) * gi;
        m.second[i] = cfg_.beta2 * m.second[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m.first[i] / c1;
        const double vhat = m.second[i] / c2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) -
                              cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::uint64_t steps_ = 0;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>>
      moments_;
};

}  // namespace gap
