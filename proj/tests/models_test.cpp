// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "gap/checkpoint.hpp"
#include "gap/gradcheck.hpp"
#include "gap/models.hpp"
#include "support/finite_diff.hpp"
#include "support/reference_model.hpp"

namespace gap {
namespace {

using Mat = testing::Mat;

Tensor<double> rand_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return testing::random_tensor(std::move(s), rng, lo, hi);
}

void randomize_output(ParamStore<double>& ps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& v : ps.get_mutable("out.w").mutable_values()) v = u(rng);
}

/// Batch whose sequence rows are permuted by `perm` (applied jointly or to one stream).
GlimpseBatch<double> permuted(const GlimpseBatch<double>& b, const std::vector<std::size_t>& perm, bool contents,
                              bool locations) {
  const std::size_t per = b.contents.numel() / (b.batch * b.tokens);
  std::vector<double> c(b.contents.values().begin(), b.contents.values().end());
  std::vector<double> l(b.locations.values().begin(), b.locations.values().end());
  auto cv = b.contents.values();
  auto lv = b.locations.values();
  for (std::size_t s = 0; s < b.batch; ++s)
    for (std::size_t t = 0; t < b.tokens; ++t) {
      const std::size_t dst = s * b.tokens + t, src = s * b.tokens + perm[t];
      if (contents) std::copy_n(cv.begin() + src * per, per, c.begin() + dst * per);
      if (locations) std::copy_n(lv.begin() + src * 2, 2, l.begin() + dst * 2);
    }
  GlimpseBatch<double> out = b;
  out.contents = Tensor<double>(b.contents.shape(), std::move(c));
  out.locations = Tensor<double>(b.locations.shape(), std::move(l));
  return out;
}

// ---------------------------------------------------------------------------
// Encoders

TEST(EncodeContents, SharedWeightsAndPermutation) {
  const ModelConfig cfg = ModelConfig::toy();
  const auto ps = init_params<double>(cfg, 1);
  GlimpseBatch<double> b = random_batch<double>(cfg, 1, 4, 2);
  // Make glimpse 3 a copy of glimpse 0.
  auto vals = std::vector<double>(b.contents.values().begin(), b.contents.values().end());
  const std::size_t per = vals.size() / 4;
  std::copy_n(vals.begin(), per, vals.begin() + 3 * per);
  const Tensor<double> contents(b.contents.shape(), vals);
  const auto e = encode_contents(ps, cfg, contents);
  ASSERT_EQ(e.shape(), (Shape{4, cfg.d_model()}));
  for (std::size_t j = 0; j < cfg.d_model(); ++j) EXPECT_EQ(e.at(j), e.at(3 * cfg.d_model() + j));

  const auto p = permuted(b, {2, 0, 3, 1}, true, false);
  const auto e1 = encode_contents(ps, cfg, b.contents);
  const auto e2 = encode_contents(ps, cfg, p.contents);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < cfg.d_model(); ++j)
      EXPECT_EQ(e2.at(t * cfg.d_model() + j), e1.at(perm[t] * cfg.d_model() + j));
}

TEST(EncodeContents, ValidConvArithmetic) {
  ModelConfig cfg;
  cfg.perception.sensor.glimpse_height = cfg.perception.sensor.glimpse_width = 21;
  cfg.perception.sensor.region_sizes = {21, 42, 63};
  EXPECT_EQ(cfg.cnn_output_extent(), (std::array<std::size_t, 2>{7, 7}));
  cfg.perception.sensor.kind = SensorKind::logpolar;
  EXPECT_EQ(cfg.cnn_output_extent(), (std::array<std::size_t, 2>{1, 1}));
  cfg.perception.sensor.glimpse_height = cfg.perception.sensor.glimpse_width = 15;
  EXPECT_THROW(cfg.cnn_output_extent(), ConfigError);
}

TEST(EncodeLocations, DuplicatesZeroWeightsAndRange) {
  const ModelConfig cfg = ModelConfig::toy();
  auto ps = init_params<double>(cfg, 3);
  const Tensor<double> locs({3, 2}, {0.2, -0.4, 0.9, 0.1, 0.2, -0.4});
  const auto e = encode_locations(ps, locs);
  for (std::size_t j = 0; j < cfg.d_model(); ++j) EXPECT_EQ(e.at(j), e.at(2 * cfg.d_model() + j));

  for (auto& entry : ps.entries())
    if (entry.name.starts_with("loc.")) {
      for (auto& v : entry.tensor.mutable_values()) v = entry.name.ends_with(".b") ? 0.25 : 0.0;
    }
  const auto z = encode_locations(ps, locs);
  for (double v : z.values()) EXPECT_EQ(v, 0.25);

  EXPECT_THROW(encode_locations(ps, Tensor<double>({1, 2}, {1.5, 0.0})), InputError);
}

TEST(EncodeLocations, GradientMatchesFiniteDifferences) {
  const ModelConfig cfg = ModelConfig::toy();
  const auto ps = init_params<double>(cfg, 4);
  std::vector<Tensor<double>> inputs = {rand_tensor({5, 2}, 9, -0.9, 0.9)};
  for (const char* n : {"loc.fc1.w", "loc.fc2.w", "loc.proj.w", "loc.fc1.b"}) inputs.push_back(ps.get(n));
  const auto target = rand_tensor({5, cfg.d_model()}, 10);
  const double err =
      testing::max_gradient_error(inputs, [&] { return sum(mul(encode_locations(ps, inputs[0]), target)); });
  EXPECT_LT(err, 1e-4);
}

// ---------------------------------------------------------------------------
// Temporal context normalization

TEST(Tcn, MomentsPerSequenceAndFeature) {
  const auto x = rand_tensor({2 * 6, 5}, 11, -3.0, 7.0);
  const auto y = temporal_context_norm(x, 2, 6);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t f = 0; f < 5; ++f) {
      double m = 0, v = 0;
      for (std::size_t t = 0; t < 6; ++t) m += y.at((b * 6 + t) * 5 + f);
      m /= 6;
      for (std::size_t t = 0; t < 6; ++t) v += std::pow(y.at((b * 6 + t) * 5 + f) - m, 2);
      EXPECT_NEAR(m, 0.0, 1e-6);
      EXPECT_NEAR(std::sqrt(v / 6), 1.0, 1e-4);
    }
}

TEST(Tcn, AffineInvariance) {
  const auto x = rand_tensor({4, 3}, 12);
  std::vector<double> a(x.values().begin(), x.values().end());
  const double scale[3] = {2.5, 0.3, 7.0}, shift[3] = {-1.0, 4.0, 0.5};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t f = 0; f < 3; ++f) a[t * 3 + f] = scale[f] * a[t * 3 + f] + shift[f];
  const auto y1 = temporal_context_norm(x, 1, 4);
  const auto y2 = temporal_context_norm(Tensor<double>({4, 3}, a), 1, 4);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(y1.at(i), y2.at(i), 1e-4);
}

TEST(Tcn, SingleTokenIsConfigError) {
  EXPECT_THROW(temporal_context_norm(rand_tensor({1, 3}, 0), 1, 1), ConfigError);
  ModelConfig cfg = ModelConfig::toy();
  cfg.perception.gap.glimpses = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Tcn, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<Tensor<double>> in = {rand_tensor({2 * 5, 4}, seed)};
    const auto w = rand_tensor({10, 4}, seed + 100);
    const double err =
        testing::max_gradient_error(in, [&] { return sum(mul(temporal_context_norm(in[0], 2, 5), w)); });
    EXPECT_LT(err, 1e-4) << seed;
  }
}

// ---------------------------------------------------------------------------
// Attention

TEST(Attention, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<Tensor<double>> in = {rand_tensor({2 * 3, 4}, seed), rand_tensor({6, 4}, seed + 50),
                                      rand_tensor({6, 4}, seed + 90)};
    const auto w = rand_tensor({6, 4}, seed + 130);
    const double err = testing::max_gradient_error(
        in, [&] { return sum(mul(multihead_attention(in[0], in[1], in[2], 2, 3, 2), w)); });
    EXPECT_LT(err, 1e-4) << seed;
  }
}

TEST(Attention, RowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto q = rand_tensor({3 * 7, 8}, seed, -5, 5), k = rand_tensor({21, 8}, seed + 1, -5, 5);
    for (const auto& seq : attention_weights(q, k, 3, 7, 2))
      for (const auto& a : seq)
        for (std::size_t i = 0; i < 7; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < 7; ++j) {
            EXPECT_GE(a[i * 7 + j], 0.0);
            s += a[i * 7 + j];
          }
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
  }
}

TEST(Attention, IndivisibleWidthIsConfigError) {
  const auto x = rand_tensor({4, 6}, 0);
  EXPECT_THROW(multihead_attention(x, x, x, 1, 4, 4), ConfigError);
}

ParamStore<double> identity_rca(std::size_t D) {
  ParamStore<double> ps;
  std::vector<double> eye(D * D, 0.0);
  for (std::size_t i = 0; i < D; ++i) eye[i * D + i] = 1.0;
  for (const char* m : {"Wq", "Wk", "Wv"}) ps.add(std::string("rca.") + m + ".head0", Tensor<double>({D, D}, eye));
  ps.add("rca.Wo", Tensor<double>({D, D}, eye));
  return ps;
}

TEST(Rca, UniformAttentionAveragesRelations) {
  const auto ps = identity_rca(3);
  const Tensor<double> g = Tensor<double>::full({4, 3}, 0.7);
  const auto r = rand_tensor({4, 3}, 5);
  const auto out = rca(ps, "rca", g, r, 1, 4, 1);
  for (std::size_t f = 0; f < 3; ++f) {
    double mean = 0;
    for (std::size_t t = 0; t < 4; ++t) mean += r.at(t * 3 + f);
    mean /= 4;
    for (std::size_t t = 0; t < 4; ++t) EXPECT_NEAR(out.at(t * 3 + f), mean, 1e-12);
  }
}

TEST(Rca, HandComputedTwoTokenInstance) {
  // g = [[1,0],[0,1]], W = I, d = 2: scores are diag 1/sqrt2, off-diag 0.
  const auto ps = identity_rca(2);
  const Tensor<double> g({2, 2}, {1, 0, 0, 1});
  const Tensor<double> r({2, 2}, {2, -1, 0.5, 3});
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double hi = e / (e + 1), lo = 1 / (e + 1);
  const auto out = rca(ps, "rca", g, r, 1, 2, 1);
  EXPECT_NEAR(out.at(0), hi * 2 + lo * 0.5, 1e-10);
  EXPECT_NEAR(out.at(1), hi * -1 + lo * 3, 1e-10);
  EXPECT_NEAR(out.at(2), lo * 2 + hi * 0.5, 1e-10);
  EXPECT_NEAR(out.at(3), lo * -1 + hi * 3, 1e-10);
}

TEST(Rca, ValuesComeOnlyFromRelations) {
  // Queries and keys depend only on g: changing r along a direction leaves
  // attention unchanged, so the output is linear in r.
  ModelConfig cfg = ModelConfig::toy();
  const auto ps = init_params<double>(cfg, 6);
  const auto g = rand_tensor({4, cfg.d_model()}, 7);
  const auto r1 = rand_tensor({4, cfg.d_model()}, 8), r2 = rand_tensor({4, cfg.d_model()}, 9);
  const std::string name = "abstractor.layer0.rca";
  const auto o1 = rca(ps, name, g, r1, 1, 4, cfg.heads);
  const auto o2 = rca(ps, name, g, r2, 1, 4, cfg.heads);
  const auto o12 = rca(ps, name, g, add(r1, r2), 1, 4, cfg.heads);
  for (std::size_t i = 0; i < o1.numel(); ++i) EXPECT_NEAR(o12.at(i), o1.at(i) + o2.at(i), 1e-10);
}

// ---------------------------------------------------------------------------
// Full heads

class HeadTest : public ::testing::TestWithParam<HeadKind> {};

TEST_P(HeadTest, ZeroOutputUnitGivesZeroLogit) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.head = GetParam();
  const auto ps = init_params<double>(cfg, 1);
  const auto logits = forward(ps, cfg, random_batch<double>(cfg, 3, 4, 2));
  ASSERT_EQ(logits.shape(), (Shape{3}));
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
}

TEST_P(HeadTest, MatchesReferenceForward) {
  for (std::size_t variant = 0; variant < 3; ++variant) {
    ModelConfig cfg = ModelConfig::toy();
    cfg.head = GetParam();
    cfg.streams = static_cast<StreamMode>(variant);
    auto ps = init_params<double>(cfg, 10 + variant);
    randomize_output(ps, 20 + variant);
    const auto b = random_batch<double>(cfg, 2, 4, 30 + variant);
    const auto logits = forward(ps, cfg, b);
    const std::size_t per = b.contents.numel() / 8;
    for (std::size_t s = 0; s < 2; ++s) {
      std::vector<std::vector<double>> contents;
      Mat locs;
      for (std::size_t t = 0; t < 4; ++t) {
        const std::size_t row = s * 4 + t;
        contents.emplace_back(b.contents.values().begin() + row * per, b.contents.values().begin() + (row + 1) * per);
        locs.push_back({b.locations.at(row * 2), b.locations.at(row * 2 + 1)});
      }
      EXPECT_NEAR(logits.at(s), testing::reference_logit(ps, cfg, contents, locs), 1e-10)
          << to_string(cfg.streams);
    }
  }
}

TEST_P(HeadTest, SmallestInstanceMatchesReference) {
  // One layer, one head of width 2, two glimpses.
  ModelConfig cfg = ModelConfig::toy();
  cfg.head = GetParam();
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.head_dim = 2;
  cfg.mlp_hidden = 3;
  cfg.perception.gap.glimpses = 2;
  auto ps = init_params<double>(cfg, 40);
  randomize_output(ps, 41);
  const auto b = random_batch<double>(cfg, 1, 2, 42);
  const std::size_t per = b.contents.numel() / 2;
  std::vector<std::vector<double>> contents = {
      {b.contents.values().begin(), b.contents.values().begin() + per},
      {b.contents.values().begin() + per, b.contents.values().end()}};
  const Mat locs = {{b.locations.at(0), b.locations.at(1)}, {b.locations.at(2), b.locations.at(3)}};
  EXPECT_NEAR(forward(ps, cfg, b).at(0), testing::reference_logit(ps, cfg, contents, locs), 1e-10);
}

TEST_P(HeadTest, JointPermutationInvariance) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.head = GetParam();
  cfg.perception.gap.glimpses = 6;
  auto ps = init_params<double>(cfg, 50);
  randomize_output(ps, 51);
  const auto b = random_batch<double>(cfg, 2, 6, 52);
  const auto base = forward(ps, cfg, b);
  const auto perm = forward(ps, cfg, permuted(b, {4, 2, 0, 5, 1, 3}, true, true));
  for (std::size_t s = 0; s < 2; ++s) EXPECT_NEAR(perm.at(s), base.at(s), 1e-5);
}

TEST_P(HeadTest, ContentOnlyPermutationChangesLogit) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.head = GetParam();
  auto ps = init_params<double>(cfg, 60);
  randomize_output(ps, 61);
  const auto b = random_batch<double>(cfg, 2, 4, 62);
  const auto base = forward(ps, cfg, b);
  const auto perm = forward(ps, cfg, permuted(b, {1, 2, 3, 0}, true, false));
  for (std::size_t s = 0; s < 2; ++s) EXPECT_GT(std::abs(perm.at(s) - base.at(s)), 1e-6);
}

TEST_P(HeadTest, SingleStreamModesIgnoreTheOtherStream) {
  for (StreamMode mode : {StreamMode::what_only, StreamMode::where_only}) {
    ModelConfig cfg = ModelConfig::toy();
    cfg.head = GetParam();
    cfg.streams = mode;
    auto ps = init_params<double>(cfg, 70);
    randomize_output(ps, 71);
    const auto b = random_batch<double>(cfg, 2, 4, 72);
    const auto fuzz = random_batch<double>(cfg, 2, 4, 73);
    GlimpseBatch<double> mixed = b;
    if (mode == StreamMode::what_only) mixed.locations = fuzz.locations;
    else mixed.contents = fuzz.contents;
    const auto l1 = forward(ps, cfg, b), l2 = forward(ps, cfg, mixed);
    for (std::size_t s = 0; s < 2; ++s) EXPECT_EQ(l1.at(s), l2.at(s)) << to_string(mode);
    // The stream the mode uses does matter.
    GlimpseBatch<double> other = b;
    if (mode == StreamMode::what_only) other.contents = fuzz.contents;
    else other.locations = fuzz.locations;
    EXPECT_NE(forward(ps, cfg, other).at(0), l1.at(0)) << to_string(mode);
  }
}

TEST_P(HeadTest, FullModelGradientCheck) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.head = GetParam();
  const auto report = gradcheck_model(cfg, 80, 3);
  EXPECT_LT(report.max_rel_error, 1e-3) << report.worst_param << "[" << report.worst_index
                                        << "] analytic " << report.worst_analytic << " numeric "
                                        << report.worst_numeric;
  EXPECT_EQ(report.tensors, init_params<double>(cfg, 80).size());
}

TEST_P(HeadTest, InferenceIsDeterministicAndDropoutIsSeeded) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.head = GetParam();
  cfg.dropout = 0.3;
  auto ps = init_params<double>(cfg, 90);
  randomize_output(ps, 91);
  const auto b = random_batch<double>(cfg, 2, 4, 92);
  EXPECT_EQ(forward(ps, cfg, b).at(0), forward(ps, cfg, b).at(0));
  std::mt19937_64 r1(5), r2(5);
  ForwardContext<double> c1{true, &r1}, c2{true, &r2};
  EXPECT_EQ(forward(ps, cfg, b, c1).at(1), forward(ps, cfg, b, c2).at(1));
  ForwardContext<double> missing{true, nullptr};
  EXPECT_THROW(forward(ps, cfg, b, missing), UsageError);
}

INSTANTIATE_TEST_SUITE_P(Heads, HeadTest, ::testing::Values(HeadKind::transformer, HeadKind::abstractor),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Abstractor, RcaAttentionRowsSumToOne) {
  ModelConfig cfg = ModelConfig::toy();
  auto ps = init_params<double>(cfg, 100);
  std::vector<std::vector<std::vector<std::vector<double>>>> log;
  ForwardContext<double> ctx;
  ctx.attention_log = &log;
  forward(ps, cfg, random_batch<double>(cfg, 3, 4, 101), ctx);
  ASSERT_EQ(log.size(), 2 * cfg.layers);
  for (const auto& block : log)
    for (const auto& seq : block)
      for (const auto& a : seq)
        for (std::size_t i = 0; i < 4; ++i)
          EXPECT_NEAR(std::accumulate(a.begin() + i * 4, a.begin() + (i + 1) * 4, 0.0), 1.0, 1e-6);
}

TEST(Models, ParameterNamesFollowLayerAndHeadPaths) {
  const ModelConfig cfg = ModelConfig::desk();
  const auto ps = init_params<float>(cfg, 0);
  EXPECT_TRUE(ps.contains("abstractor.layer0.rca.Wq.head3"));
  EXPECT_TRUE(ps.contains("abstractor.layer3.mlp.fc2.w"));
  EXPECT_TRUE(ps.contains("cnn.conv6.w"));
  EXPECT_FALSE(ps.contains("abstractor.layer4.rca.Wo"));
  for (double v : ps.get("out.w").values()) EXPECT_EQ(v, 0.0);
}

TEST(Models, CheckpointRoundTripKeepsLogitsBitExact) {
  ModelConfig cfg = ModelConfig::toy();
  auto ps = init_params<float>(cfg, 110);
  std::mt19937_64 rng(111);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  for (auto& v : ps.get_mutable("out.w").mutable_values()) v = u(rng);
  const auto path = (std::filesystem::temp_directory_path() / "gap_model_rt.ckpt").string();
  save_checkpoint(path, ps, nlohmann::json{{"note", "roundtrip"}});
  const auto loaded = load_checkpoint<float>(path);
  std::filesystem::remove(path);
  const auto b = random_batch<float>(cfg, 3, 4, 112);
  const auto l1 = forward(ps, cfg, b), l2 = forward(loaded.params, cfg, b);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(l1.at(s), l2.at(s));
}

// ---------------------------------------------------------------------------
// Perception front end

Image noise_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img = Image::zeros(64, 64);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

TEST(Perceive, ModesProduceExpectedGlimpseCounts) {
  PerceptionConfig cfg;
  cfg.gap.glimpses = 8;
  const Image img = noise_image(1);
  EXPECT_EQ(perceive(img, cfg).contents.size(), 8u);
  EXPECT_EQ(cfg.glimpse_count(64, 64), 8u);

  cfg.mode = PerceptionMode::vit_patches;
  const auto vit = perceive(img, cfg);
  EXPECT_EQ(vit.locations.size(), 16u);
  EXPECT_EQ(cfg.glimpse_count(64, 64), 16u);
  EXPECT_EQ(vit.locations.front().x, 9u);
  EXPECT_EQ(vit.locations.back().y, 54u);

  cfg.mode = PerceptionMode::gap_regular;
  for (const auto& loc : perceive(img, cfg).locations) {
    EXPECT_EQ((loc.x + 6) % 15, 0u);
    EXPECT_EQ((loc.y + 6) % 15, 0u);
  }
}

TEST(Perceive, TraceIsConsistentWithSensorAndNormalization) {
  PerceptionConfig cfg;
  cfg.gap.glimpses = 5;
  const Image img = noise_image(2);
  const auto trace = perceive(img, cfg);
  for (std::size_t t = 0; t < 5; ++t) {
    const auto n = trace.locations[t].normalized(64, 64);
    EXPECT_EQ(trace.normalized[t], n);
    EXPECT_EQ(trace.contents[t].values, sense(img, trace.locations[t], cfg.sensor).values);
  }
  const auto batch = make_batch<double>({&trace, &trace}, {0, 1});
  EXPECT_EQ(batch.contents.shape(), (Shape{10, 3, 15, 15}));
}

TEST(Perceive, RejectsInvalidImages) {
  Image img = noise_image(3);
  img.pixels[5] = 1.5;
  EXPECT_THROW(perceive(img, PerceptionConfig{}), InputError);
}

}  // namespace
}  // namespace gap
