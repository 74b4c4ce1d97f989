// SPDX-License-Identifier: Apache-2.0
//
// Downstream networks: glimpse CNN ("what"), location MLP ("where"),
// temporal context normalization and the Transformer / Abstractor heads.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gap/attention.hpp"
#include "gap/errors.hpp"
#include "gap/ops.hpp"
#include "gap/param_store.hpp"
#include "gap/pipeline.hpp"
#include "gap/tensor.hpp"

namespace gap {

enum class HeadKind { transformer, abstractor };
enum class StreamMode { both, what_only, where_only };
enum class Fusion { add, concat };

struct ModelConfig {
  HeadKind head = HeadKind::abstractor;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t head_dim = 32;
  std::size_t mlp_hidden = 64;
  double dropout = 0.0;
  std::size_t cnn_channels = 8;
  StreamMode streams = StreamMode::both;
  Fusion fusion = Fusion::add;  // transformer only
  bool tcn = true;
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t image_channels = 1;
  PerceptionConfig perception;

  std::size_t d_model() const { return heads * head_dim; }
  std::size_t tokens() const { return perception.glimpse_count(image_height, image_width); }
  std::size_t cnn_in_channels() const { return perception.sensor.scales() * image_channels; }

  std::vector<std::size_t> cnn_kernels() const {
    if (perception.sensor.kind == SensorKind::logpolar) return {5, 5, 5, 5, 3, 3};
    return std::vector<std::size_t>(7, 3);
  }

  /// Spatial extent (height, width) after the valid-convolution stack.
  std::array<std::size_t, 2> cnn_output_extent() const {
    long h = static_cast<long>(perception.sensor.glimpse_height);
    long w = static_cast<long>(perception.sensor.glimpse_width);
    for (std::size_t k : cnn_kernels()) {
      h -= static_cast<long>(k) - 1;
      w -= static_cast<long>(k) - 1;
    }
    if (h < 1 || w < 1) {
      throw ConfigError("model: glimpse " + std::to_string(perception.sensor.glimpse_height) + "x" +
                        std::to_string(perception.sensor.glimpse_width) + " too small for the glimpse CNN");
    }
    return {static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  }

  void validate() const {
    perception.validate();
    if (layers < 1 || heads < 1 || head_dim < 1 || mlp_hidden < 1 || cnn_channels < 1) {
      throw ConfigError("model: layer, head and width counts must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must be in [0,1)");
    if (tcn && tokens() < 2) throw ConfigError("model: temporal context normalization needs T >= 2");
    cnn_output_extent();
  }

  /// Small dimensions for gradient checks.
  static ModelConfig toy() {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.head_dim = 16;
    c.mlp_hidden = 32;
    c.cnn_channels = 4;
    c.perception.gap.glimpses = 4;
    return c;
  }

  /// Desk-scale defaults used for the same/different experiments.
  static ModelConfig desk() {
    ModelConfig c;
    c.perception.gap.glimpses = 8;
    return c;
  }

  /// Published dimensions.
  static ModelConfig large() {
    ModelConfig c;
    c.layers = 24;
    c.heads = 8;
    c.head_dim = 64;
    c.mlp_hidden = 256;
    c.cnn_channels = 64;
    c.image_height = c.image_width = 128;
    c.perception.gap.glimpses = 15;
    return c;
  }
};

inline const char* to_string(HeadKind h) { return h == HeadKind::transformer ? "transformer" : "abstractor"; }

inline const char* to_string(StreamMode m) {
  switch (m) {
    case StreamMode::what_only: return "what-only";
    case StreamMode::where_only: return "where-only";
    default: return "both";
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

inline std::string head_prefix(const ModelConfig& cfg) { return to_string(cfg.head); }

template <typename T, typename Rng>
void add_linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, double gain,
                Rng& rng, bool bias = true) {
  ps.add(name + ".w", uniform_fan_in<T>({in, out}, in, gain, rng));
  if (bias) ps.add(name + ".b", Tensor<T>::zeros({out}));
}

template <typename T>
void add_layer_norm(ParamStore<T>& ps, const std::string& name, std::size_t width) {
  ps.add(name + ".g", Tensor<T>::full({width}, T(1)));
  ps.add(name + ".b", Tensor<T>::zeros({width}));
}

template <typename T, typename Rng>
void add_attention(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng) {
  const std::size_t D = cfg.d_model();
  for (const char* m : {"Wq", "Wk", "Wv"})
    for (std::size_t h = 0; h < cfg.heads; ++h)
      ps.add(name + "." + m + ".head" + std::to_string(h), uniform_fan_in<T>({D, cfg.head_dim}, D, 1.0, rng));
  ps.add(name + ".Wo", uniform_fan_in<T>({D, D}, D, 1.0, rng));
}

template <typename T, typename Rng>
void add_mlp(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng) {
  add_linear(ps, name + ".fc1", cfg.d_model(), cfg.mlp_hidden, std::sqrt(2.0), rng);
  add_linear(ps, name + ".fc2", cfg.mlp_hidden, cfg.d_model(), 1.0, rng);
}

}  // namespace detail

/// Fresh parameters: uniform fan-in scaling for weights (gain sqrt 2 ahead of
/// a ReLU), zero biases, unit layer-norm gains and a zero output unit.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> ps;
  const std::size_t D = cfg.d_model();
  const double relu_gain = std::sqrt(2.0);

  if (cfg.streams != StreamMode::where_only) {
    std::size_t cin = cfg.cnn_in_channels();
    const auto kernels = cfg.cnn_kernels();
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      const std::size_t k = kernels[i];
      const std::string name = "cnn.conv" + std::to_string(i);
      ps.add(name + ".w", uniform_fan_in<T>({cfg.cnn_channels, cin, k, k}, cin * k * k, relu_gain, rng));
      ps.add(name + ".b", Tensor<T>::zeros({cfg.cnn_channels}));
      cin = cfg.cnn_channels;
    }
    const auto ext = cfg.cnn_output_extent();
    detail::add_linear(ps, "cnn.proj", cfg.cnn_channels * ext[0] * ext[1], D, 1.0, rng);
  }
  if (cfg.streams != StreamMode::what_only) {
    detail::add_linear(ps, "loc.fc1", 2, 32, relu_gain, rng);
    detail::add_linear(ps, "loc.fc2", 32, 64, relu_gain, rng);
    detail::add_linear(ps, "loc.proj", 64, D, 1.0, rng);
  }

  const std::string prefix = detail::head_prefix(cfg);
  if (cfg.head == HeadKind::transformer) {
    if (cfg.fusion == Fusion::concat && cfg.streams == StreamMode::both) {
      detail::add_linear(ps, "transformer.fusion", 2 * D, D, 1.0, rng);
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string layer = prefix + ".layer" + std::to_string(l);
      detail::add_layer_norm(ps, layer + ".ln_attn", D);
      detail::add_attention(ps, layer + ".attn", cfg, rng);
      detail::add_layer_norm(ps, layer + ".ln_mlp", D);
      detail::add_mlp(ps, layer + ".mlp", cfg, rng);
    }
  } else {
    if (cfg.streams == StreamMode::what_only) {
      ps.add(prefix + ".symbols", uniform_fan_in<T>({cfg.tokens(), D}, D, 1.0, rng));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string layer = prefix + ".layer" + std::to_string(l);
      detail::add_layer_norm(ps, layer + ".ln_rca", D);
      detail::add_attention(ps, layer + ".rca", cfg, rng);
      detail::add_layer_norm(ps, layer + ".ln_attn", D);
      detail::add_attention(ps, layer + ".attn", cfg, rng);
      detail::add_layer_norm(ps, layer + ".ln_mlp", D);
      detail::add_mlp(ps, layer + ".mlp", cfg, rng);
    }
  }
  detail::add_layer_norm(ps, prefix + ".ln_out", D);
  ps.add("out.w", Tensor<T>::zeros({D, 1}));
  ps.add("out.b", Tensor<T>::zeros({1}));
  return ps;
}

// ---------------------------------------------------------------------------
// Batches

/// Glimpse traces of B images packed for a forward pass: contents are
/// [B*T x C x h_g x w_g] with scales folded into channels, locations [B*T x 2].
template <typename T>
struct GlimpseBatch {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  Tensor<T> contents;
  Tensor<T> locations;
  std::vector<int> labels;
};

/// Appends one glimpse content in [channel][row][col] order, channel = scale * c_I + c.
template <typename T>
void append_content(const GlimpseContent& g, std::vector<T>& out) {
  for (std::size_t s = 0; s < g.scales; ++s)
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x) out.push_back(static_cast<T>(g.at(s, y, x, c)));
}

template <typename T>
GlimpseBatch<T> make_batch(const std::vector<const GlimpseTrace*>& traces, std::vector<int> labels = {}) {
  if (traces.empty()) throw InputError("make_batch: no traces");
  const std::size_t tokens = traces.front()->contents.size();
  const GlimpseContent& first = traces.front()->contents.front();
  std::vector<T> contents, locations;
  for (const auto* tr : traces) {
    if (tr->contents.size() != tokens || tr->normalized.size() != tokens) {
      throw InputError("make_batch: traces differ in glimpse count");
    }
    for (std::size_t t = 0; t < tokens; ++t) {
      const auto& g = tr->contents[t];
      if (g.scales != first.scales || g.height != first.height || g.width != first.width ||
          g.channels != first.channels) {
        throw InputError("make_batch: glimpse content shape drifts across glimpses");
      }
      append_content(g, contents);
      for (double v : tr->normalized[t]) {
        if (!(v >= -1.0 && v <= 1.0)) throw InputError("make_batch: location not normalized to [-1,1]");
        locations.push_back(static_cast<T>(v));
      }
    }
  }
  const std::size_t n = traces.size() * tokens;
  GlimpseBatch<T> b;
  b.batch = traces.size();
  b.tokens = tokens;
  b.contents = Tensor<T>({n, first.scales * first.channels, first.height, first.width}, std::move(contents));
  b.locations = Tensor<T>({n, 2}, std::move(locations));
  b.labels = std::move(labels);
  return b;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
  // When set, every attention block appends its probabilities: [b][h] -> T x T.
  std::vector<std::vector<std::vector<std::vector<T>>>>* attention_log = nullptr;
};

namespace detail {

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const ModelConfig& cfg, ForwardContext<T>& ctx) {
  if (!ctx.training || cfg.dropout == 0.0) return x;
  if (ctx.rng == nullptr) throw UsageError("forward: training with dropout needs an rng");
  return dropout(x, cfg.dropout, *ctx.rng, true);
}

template <typename T>
Tensor<T> heads_matrix(const ParamStore<T>& ps, const std::string& name, std::size_t heads) {
  std::vector<Tensor<T>> parts;
  for (std::size_t h = 0; h < heads; ++h) parts.push_back(ps.get(name + ".head" + std::to_string(h)));
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

template <typename T>
Tensor<T> apply_layer_norm(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x) {
  return layer_norm(x, ps.get(name + ".g"), ps.get(name + ".b"));
}

template <typename T>
Tensor<T> apply_linear(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x) {
  return linear(x, ps.get(name + ".w"), ps.get(name + ".b"));
}

}  // namespace detail

/// Multi-head attention with queries and keys from `qk_source` and values
/// from `v_source`: concat_h(softmax(Q_h K_h^T / sqrt d) V_h) W_o. With the
/// same tensor for both this is ordinary self-attention; with glimpse
/// contents and relational states it is relational cross-attention.
template <typename T>
Tensor<T> cross_attention(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& qk_source,
                          const Tensor<T>& v_source, std::size_t batch, std::size_t tokens,
                          std::size_t heads, ForwardContext<T>* ctx = nullptr) {
  if (qk_source.dim(1) % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(qk_source.dim(1)) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const Tensor<T> q = matmul(qk_source, detail::heads_matrix(ps, name + ".Wq", heads));
  const Tensor<T> k = matmul(qk_source, detail::heads_matrix(ps, name + ".Wk", heads));
  const Tensor<T> v = matmul(v_source, detail::heads_matrix(ps, name + ".Wv", heads));
  if (ctx && ctx->attention_log) ctx->attention_log->push_back(attention_weights(q, k, batch, tokens, heads));
  return matmul(multihead_attention(q, k, v, batch, tokens, heads), ps.get(name + ".Wo"));
}

/// Relational cross-attention: queries and keys from the encoded contents,
/// values from the previous relational representation.
template <typename T>
Tensor<T> rca(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& g_enc,
              const Tensor<T>& r_prev, std::size_t batch, std::size_t tokens, std::size_t heads,
              ForwardContext<T>* ctx = nullptr) {
  if (g_enc.shape() != r_prev.shape()) {
    throw DimensionError("rca: contents " + to_string(g_enc.shape()) + " vs relations " +
                         to_string(r_prev.shape()));
  }
  return cross_attention(ps, name, g_enc, r_prev, batch, tokens, heads, ctx);
}

/// Glimpse CNN over [N x C x h_g x w_g] contents -> [N x d_model].
template <typename T>
Tensor<T> encode_contents(const ParamStore<T>& ps, const ModelConfig& cfg, const Tensor<T>& contents) {
  const std::size_t n = contents.dim(0);
  Tensor<T> x = contents;
  const auto kernels = cfg.cnn_kernels();
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const std::string name = "cnn.conv" + std::to_string(i);
    x = relu(conv2d_valid(x, ps.get(name + ".w"), ps.get(name + ".b")));
  }
  x = reshape(x, {n, x.numel() / n});
  return detail::apply_linear(ps, "cnn.proj", x);
}

/// Location MLP 2 -> 32 -> 64 (ReLU) followed by a projection to d_model.
template <typename T>
Tensor<T> encode_locations(const ParamStore<T>& ps, const Tensor<T>& locations) {
  if (locations.rank() != 2 || locations.dim(1) != 2) {
    throw DimensionError("encode_locations: expected [N x 2], got " + to_string(locations.shape()));
  }
  for (T v : locations.values()) {
    if (!(v >= T(-1) && v <= T(1))) throw InputError("encode_locations: coordinate outside [-1,1]");
  }
  Tensor<T> h = relu(detail::apply_linear(ps, "loc.fc1", locations));
  h = relu(detail::apply_linear(ps, "loc.fc2", h));
  return detail::apply_linear(ps, "loc.proj", h);
}

namespace detail {

template <typename T>
Tensor<T> mlp_block(const ParamStore<T>& ps, const std::string& name, const Tensor<T>& x,
                    const ModelConfig& cfg, ForwardContext<T>& ctx) {
  Tensor<T> h = relu(apply_linear(ps, name + ".fc1", x));
  h = maybe_dropout(h, cfg, ctx);
  return apply_linear(ps, name + ".fc2", h);
}

template <typename T>
Tensor<T> readout(const ParamStore<T>& ps, const ModelConfig& cfg, const Tensor<T>& x, std::size_t batch,
                  std::size_t tokens) {
  const Tensor<T> normed = apply_layer_norm(ps, head_prefix(cfg) + ".ln_out", x);
  const Tensor<T> pooled = mean_over_tokens(normed, batch, tokens);
  return reshape(linear(pooled, ps.get("out.w"), ps.get("out.b")), {batch});
}

}  // namespace detail

/// Encoder stack over fused tokens: pre-norm self-attention and MLP blocks,
/// mean pooling and a single linear unit.
template <typename T>
Tensor<T> transformer_head(const ParamStore<T>& ps, const ModelConfig& cfg, const Tensor<T>& tokens_in,
                           std::size_t batch, std::size_t tokens, ForwardContext<T>& ctx) {
  const std::string prefix = detail::head_prefix(cfg);
  Tensor<T> x = tokens_in;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string layer = prefix + ".layer" + std::to_string(l);
    const Tensor<T> a = detail::apply_layer_norm(ps, layer + ".ln_attn", x);
    x = add(x, detail::maybe_dropout(cross_attention(ps, layer + ".attn", a, a, batch, tokens, cfg.heads, &ctx),
                                     cfg, ctx));
    const Tensor<T> m = detail::apply_layer_norm(ps, layer + ".ln_mlp", x);
    x = add(x, detail::maybe_dropout(detail::mlp_block(ps, layer + ".mlp", m, cfg, ctx), cfg, ctx));
  }
  return detail::readout(ps, cfg, x, batch, tokens);
}

/// Abstractor: relational states start from `r0`; each layer applies
/// RCA(what, r), self-attention and an MLP, each with a residual connection.
template <typename T>
Tensor<T> abstractor_head(const ParamStore<T>& ps, const ModelConfig& cfg, const Tensor<T>& what,
                          const Tensor<T>& r0, std::size_t batch, std::size_t tokens, ForwardContext<T>& ctx) {
  const std::string prefix = detail::head_prefix(cfg);
  Tensor<T> r = r0;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string layer = prefix + ".layer" + std::to_string(l);
    const Tensor<T> v = detail::apply_layer_norm(ps, layer + ".ln_rca", r);
    r = add(r, detail::maybe_dropout(rca(ps, layer + ".rca", what, v, batch, tokens, cfg.heads, &ctx), cfg, ctx));
    const Tensor<T> a = detail::apply_layer_norm(ps, layer + ".ln_attn", r);
    r = add(r, detail::maybe_dropout(cross_attention(ps, layer + ".attn", a, a, batch, tokens, cfg.heads, &ctx),
                                     cfg, ctx));
    const Tensor<T> m = detail::apply_layer_norm(ps, layer + ".ln_mlp", r);
    r = add(r, detail::maybe_dropout(detail::mlp_block(ps, layer + ".mlp", m, cfg, ctx), cfg, ctx));
  }
  return detail::readout(ps, cfg, r, batch, tokens);
}

/// Encoded (and, if enabled, temporally normalized) what / where streams.
/// A stream not used by the configured mode is left empty.
template <typename T>
struct EncodedStreams {
  std::optional<Tensor<T>> what;
  std::optional<Tensor<T>> where;
};

template <typename T>
EncodedStreams<T> encode_streams(const ParamStore<T>& ps, const ModelConfig& cfg, const GlimpseBatch<T>& b) {
  EncodedStreams<T> s;
  auto norm = [&](const Tensor<T>& x) {
    return cfg.tcn ? temporal_context_norm(x, b.batch, b.tokens) : x;
  };
  if (cfg.streams != StreamMode::where_only) s.what = norm(encode_contents(ps, cfg, b.contents));
  if (cfg.streams != StreamMode::what_only) s.where = norm(encode_locations(ps, b.locations));
  return s;
}

/// Logits [B] for a batch of glimpse traces.
template <typename T>
Tensor<T> forward(const ParamStore<T>& ps, const ModelConfig& cfg, const GlimpseBatch<T>& b,
                  ForwardContext<T>& ctx) {
  if (b.tokens < 1 || b.batch < 1) throw InputError("forward: empty batch");
  const EncodedStreams<T> s = encode_streams(ps, cfg, b);
  const std::size_t D = cfg.d_model();

  if (cfg.head == HeadKind::transformer) {
    Tensor<T> tokens_in;
    if (!s.where) {
      tokens_in = *s.what;
    } else if (!s.what) {
      tokens_in = *s.where;
    } else if (cfg.fusion == Fusion::add) {
      tokens_in = add(*s.what, *s.where);
    } else {
      tokens_in = detail::apply_linear(ps, "transformer.fusion", concat(std::vector<Tensor<T>>{*s.what, *s.where}, 1));
    }
    return transformer_head(ps, cfg, tokens_in, b.batch, b.tokens, ctx);
  }

  switch (cfg.streams) {
    case StreamMode::what_only: {
      const Tensor<T>& sym = ps.get("abstractor.symbols");
      if (sym.dim(0) != b.tokens) {
        throw ConfigError("forward: symbol set has " + std::to_string(sym.dim(0)) + " rows for T=" +
                          std::to_string(b.tokens));
      }
      const Tensor<T> r0 = reshape(add(Tensor<T>::zeros({b.batch, b.tokens, D}), sym), {b.batch * b.tokens, D});
      return abstractor_head(ps, cfg, *s.what, r0, b.batch, b.tokens, ctx);
    }
    case StreamMode::where_only:
      return abstractor_head(ps, cfg, *s.where, *s.where, b.batch, b.tokens, ctx);
    default:
      return abstractor_head(ps, cfg, *s.what, *s.where, b.batch, b.tokens, ctx);
  }
}

template <typename T>
Tensor<T> forward(const ParamStore<T>& ps, const ModelConfig& cfg, const GlimpseBatch<T>& b) {
  ForwardContext<T> ctx;
  return forward(ps, cfg, b, ctx);
}

}  // namespace gap
