// SPDX-License-Identifier: Apache-2.0
//
// JSON mapping for every configuration struct. Field names mirror the C++
// members. Reading merges into an existing value, so a file can override a
// preset and later command-line flags can override the file; unknown keys
// are rejected.
#pragma once

#include <array>
#include <string>
#include <unordered_set>
#include <utility>

#include "json.hpp"
#include "gap/errors.hpp"
#include "gap/models.hpp"
#include "gap/pipeline.hpp"
#include "gap/taskgen.hpp"

namespace gap {

using nlohmann::json;

namespace detail {

template <typename E, std::size_t N>
using EnumTable = std::array<std::pair<E, const char*>, N>;

template <typename E, std::size_t N>
const char* enum_name(const EnumTable<E, N>& table, E v) {
  for (const auto& [e, name] : table)
    if (e == v) return name;
  throw ConfigError("enum value without a name");
}

template <typename E, std::size_t N>
E enum_value(const EnumTable<E, N>& table, const json& j, const char* what) {
  if (!j.is_string()) throw ConfigError(std::string(what) + ": expected a string");
  const std::string s = j.get<std::string>();
  std::string options;
  for (const auto& [e, name] : table) {
    if (s == name) return e;
    options += options.empty() ? name : std::string("|") + name;
  }
  throw ConfigError(std::string(what) + ": unknown value '" + s + "' (expected " + options + ")");
}

/// Copies present keys into fields and rejects keys it was never asked for.
class FieldReader {
 public:
  FieldReader(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) throw ConfigError(what_ + ": expected an object");
  }
  ~FieldReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(what_ + ": unknown key '" + key + "'");
  }

  template <typename V>
  FieldReader& operator()(const char* key, V& field) {
    seen_.insert(key);
    if (const auto it = j_.find(key); it != j_.end()) {
      try {
        from_json(*it, field);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(what_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

 private:
  template <typename V>
  static void from_json(const json& j, V& field) {
    j.get_to(field);
  }

  const json& j_;
  std::string what_;
  std::unordered_set<std::string> seen_;
};

}  // namespace detail

#define GAP_JSON_ENUM(Type, ...)                                                                            \
  inline constexpr auto k##Type##Names = std::to_array<std::pair<Type, const char*>>({__VA_ARGS__});        \
  inline void to_json(json& j, Type v) { j = detail::enum_name(k##Type##Names, v); }                        \
  inline void from_json(const json& j, Type& v) { v = detail::enum_value(k##Type##Names, j, #Type); }

GAP_JSON_ENUM(Aggregation, {Aggregation::min, "min"}, {Aggregation::sum, "sum"})
GAP_JSON_ENUM(BorderPolicy, {BorderPolicy::zero, "zero"}, {BorderPolicy::replicate, "replicate"})
GAP_JSON_ENUM(MaskKind, {MaskKind::hard, "hard"}, {MaskKind::soft, "soft"})
GAP_JSON_ENUM(PolicyKind, {PolicyKind::standard, "standard"}, {PolicyKind::regular_grid, "regular_grid"},
              {PolicyKind::random, "random"})
GAP_JSON_ENUM(SensorKind, {SensorKind::multiscale, "multiscale"}, {SensorKind::logpolar, "logpolar"})
GAP_JSON_ENUM(PerceptionMode, {PerceptionMode::gap, "gap"}, {PerceptionMode::gap_regular, "gap_regular"},
              {PerceptionMode::vit_patches, "vit_patches"})
GAP_JSON_ENUM(HeadKind, {HeadKind::transformer, "transformer"}, {HeadKind::abstractor, "abstractor"})
GAP_JSON_ENUM(StreamMode, {StreamMode::both, "both"}, {StreamMode::what_only, "what_only"},
              {StreamMode::where_only, "where_only"})
GAP_JSON_ENUM(Fusion, {Fusion::add, "add"}, {Fusion::concat, "concat"})
GAP_JSON_ENUM(ShapeFamily, {ShapeFamily::polygon, "polygon"}, {ShapeFamily::blob, "blob"},
              {ShapeFamily::open_curve, "open_curve"})
GAP_JSON_ENUM(TaskKind, {TaskKind::same_different, "same_different"}, {TaskKind::rmts, "rmts"})

#undef GAP_JSON_ENUM

inline void to_json(json& j, const ErrorNeuronConfig& c) {
  j = {{"patch_height", c.patch_height}, {"patch_width", c.patch_width}, {"aggregation", c.aggregation},
       {"border", c.border}};
}
inline void from_json(const json& j, ErrorNeuronConfig& c) {
  detail::FieldReader(j, "saliency")("patch_height", c.patch_height)("patch_width", c.patch_width)(
      "aggregation", c.aggregation)("border", c.border);
}

inline void to_json(json& j, const MaskConfig& c) {
  j = {{"kind", c.kind}, {"radius", c.radius}, {"epsilon", c.epsilon}, {"soft_literal", c.soft_literal}};
}
inline void from_json(const json& j, MaskConfig& c) {
  detail::FieldReader(j, "mask")("kind", c.kind)("radius", c.radius)("epsilon", c.epsilon)("soft_literal",
                                                                                          c.soft_literal);
}

inline void to_json(json& j, const GapConfig& c) {
  j = {{"glimpses", c.glimpses},
       {"mask", c.mask},
       {"policy", c.policy},
       {"grid_stride", c.grid_stride},
       {"random_seed", c.random_seed}};
}
inline void from_json(const json& j, GapConfig& c) {
  detail::FieldReader(j, "gap")("glimpses", c.glimpses)("mask", c.mask)("policy", c.policy)(
      "grid_stride", c.grid_stride)("random_seed", c.random_seed);
}

inline void to_json(json& j, const SensorConfig& c) {
  j = {{"kind", c.kind},
       {"glimpse_height", c.glimpse_height},
       {"glimpse_width", c.glimpse_width},
       {"region_sizes", c.region_sizes},
       {"logpolar_radius", c.logpolar_radius}};
}
inline void from_json(const json& j, SensorConfig& c) {
  detail::FieldReader(j, "sensor")("kind", c.kind)("glimpse_height", c.glimpse_height)(
      "glimpse_width", c.glimpse_width)("region_sizes", c.region_sizes)("logpolar_radius", c.logpolar_radius);
}

inline void to_json(json& j, const PerceptionConfig& c) {
  j = {{"saliency", c.saliency}, {"gap", c.gap}, {"sensor", c.sensor}, {"mode", c.mode}};
}
inline void from_json(const json& j, PerceptionConfig& c) {
  detail::FieldReader(j, "perception")("saliency", c.saliency)("gap", c.gap)("sensor", c.sensor)("mode",
                                                                                                c.mode);
}

inline void to_json(json& j, const ModelConfig& c) {
  j = {{"head", c.head},
       {"layers", c.layers},
       {"heads", c.heads},
       {"head_dim", c.head_dim},
       {"mlp_hidden", c.mlp_hidden},
       {"dropout", c.dropout},
       {"cnn_channels", c.cnn_channels},
       {"streams", c.streams},
       {"fusion", c.fusion},
       {"tcn", c.tcn},
       {"image_height", c.image_height},
       {"image_width", c.image_width},
       {"image_channels", c.image_channels},
       {"perception", c.perception}};
}
inline void from_json(const json& j, ModelConfig& c) {
  detail::FieldReader(j, "model")("head", c.head)("layers", c.layers)("heads", c.heads)("head_dim", c.head_dim)(
      "mlp_hidden", c.mlp_hidden)("dropout", c.dropout)("cnn_channels", c.cnn_channels)("streams", c.streams)(
      "fusion", c.fusion)("tcn", c.tcn)("image_height", c.image_height)("image_width", c.image_width)(
      "image_channels", c.image_channels)("perception", c.perception);
}

inline void to_json(json& j, const TaskConfig& c) {
  j = {{"task", c.task},
       {"family", c.family},
       {"image_size", c.image_size},
       {"margin", c.margin},
       {"min_scale", c.min_scale},
       {"max_scale", c.max_scale},
       {"stroke", c.stroke},
       {"iou_threshold", c.iou_threshold},
       {"max_attempts", c.max_attempts}};
}
inline void from_json(const json& j, TaskConfig& c) {
  detail::FieldReader(j, "data")("task", c.task)("family", c.family)("image_size", c.image_size)(
      "margin", c.margin)("min_scale", c.min_scale)("max_scale", c.max_scale)("stroke", c.stroke)(
      "iou_threshold", c.iou_threshold)("max_attempts", c.max_attempts);
}

/// Parses "hard:R" or "soft:EPS" (a bare kind keeps the current parameter).
inline MaskConfig parse_mask(const std::string& spec, MaskConfig base = {}) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  if (kind == "hard") base.kind = MaskKind::hard;
  else if (kind == "soft") base.kind = MaskKind::soft;
  else throw ConfigError("mask: expected hard:<radius> or soft:<epsilon>, got '" + spec + "'");
  if (colon != std::string::npos) {
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(spec.substr(colon + 1), &used);
      if (used != spec.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("mask: bad number in '" + spec + "'");
    }
    (base.kind == MaskKind::hard ? base.radius : base.epsilon) = v;
  }
  return base;
}

/// Trace document: locations as [y, x] pixel pairs.
inline json trace_json(const GlimpseTrace& trace, const json& config) {
  json locs = json::array();
  for (const auto& l : trace.locations) locs.push_back({l.y, l.x});
  return {{"locations", locs}, {"exhausted", trace.exhausted}, {"config", config}};
}

/// FNV-1a over the compact dump: a stable identifier for a configuration.
inline std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace gap
