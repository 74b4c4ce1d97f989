// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gap/errors.hpp"
#include "gap/tensor.hpp"

namespace gap {

/// Named, insertion-ordered collection of parameter tensors.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };

  const Tensor<T>& add(std::string name, Tensor<T> tensor, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    tensor.node()->requires_grad = trainable;
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor), trainable});
    return entries_.back().tensor;
  }

  bool contains(std::string_view name) const {
    return index_.count(std::string(name)) != 0;
  }

  const Tensor<T>& get(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
    return entries_[it->second].tensor;
  }

  Tensor<T>& get_mutable(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Leaves that share value buffers with this store but own fresh gradients.
  ParamStore replicate() const {
    ParamStore out;
    for (const auto& e : entries_) {
      out.index_.emplace(e.name, out.entries_.size());
      out.entries_.push_back({e.name, e.tensor.share(), e.trainable});
    }
    return out;
  }

  /// Independent copy: own value buffers, no gradients.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& e : entries_) {
      out.index_.emplace(e.name, out.entries_.size());
      out.entries_.push_back({e.name, e.tensor.clone(e.tensor.requires_grad()), e.trainable});
    }
    return out;
  }

  /// Adds the gradients held by `other` (same layout) into this store.
  void accumulate_grads(const ParamStore& other) {
    if (other.entries_.size() != entries_.size()) {
      throw ConfigError("accumulate_grads: parameter layouts differ");
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries_[i].tensor;
      if (!src.has_grad()) continue;
      auto dst = entries_[i].tensor.mutable_grad();
      auto g = src.grad();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[j];
    }
  }

  /// Deep copy of every value buffer.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_)
      out.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    if (values.size() != entries_.size()) throw ConfigError("restore: layout mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto dst = entries_[i].tensor.mutable_values();
      if (values[i].size() != dst.size()) throw ConfigError("restore: size mismatch");
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Uniform fan-in initialization: U(-b, b) with b = gain * sqrt(3 / fan_in).
/// gain = sqrt(2) gives the Kaiming bound for layers followed by ReLU.
template <typename T, typename Rng>
Tensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace gap
