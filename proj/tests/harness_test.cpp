// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "gap/harness.hpp"

namespace gap {
namespace {

namespace fs = std::filesystem;

DatasetSplits small_data(std::size_t train, std::size_t val, std::size_t test, std::uint64_t seed = 3) {
  return gen_ood_split(ShapeFamily::polygon, ShapeFamily::blob, {train, val, test}, seed);
}

ModelConfig toy() { return ModelConfig::toy(); }

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.lr = -1e-3;
  EXPECT_THROW(t.validate(), ConfigError);
  t.lr = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesParametersBitIdentical) {
  const auto data = small_data(8, 4, 0);
  TrainConfig t;
  t.epochs = 1;
  t.lr = 0.0;
  t.batch_size = 4;
  t.seed = 11;
  const auto r = train(toy(), data, t);
  const auto fresh = init_params<float>(toy(), 11);
  EXPECT_EQ(r.best.snapshot(), fresh.snapshot());
}

TEST(Train, FirstBatchLossIsLn2) {
  const auto data = small_data(8, 4, 0);
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 8;
  for (HeadKind h : {HeadKind::transformer, HeadKind::abstractor}) {
    ModelConfig cfg = toy();
    cfg.head = h;
    EXPECT_NEAR(train(cfg, data, t).first_batch_loss, std::log(2.0), 1e-6);
  }
}

TEST(Train, FixedSeedGivesIdenticalCurves) {
  const auto data = small_data(16, 8, 0);
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 4;
  t.lr = 1e-3;
  t.hflip = t.vflip = true;
  ModelConfig cfg = toy();
  cfg.dropout = 0.2;
  const auto a = train(cfg, data, t), b = train(cfg, data, t);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].accuracy, b.history[i].accuracy);
  }
  EXPECT_EQ(a.best.snapshot(), b.best.snapshot());
  t.seed = 1;
  EXPECT_NE(train(cfg, data, t).history.front().loss, a.history.front().loss);
}

TEST(Train, OverfitProbeReachesFullTrainAccuracy) {
  const auto data = small_data(32, 8, 0, 21);
  TrainConfig t;
  t.epochs = 200;
  t.batch_size = 32;
  t.lr = 1e-3;
  t.patience = 0;
  // Model selection on the training set itself, so the kept parameters are
  // the best-fitting ones.
  const DatasetSplits probe{data.train, data.train, {}};
  const auto r = train(toy(), probe, t);
  EXPECT_EQ(r.report.accuracy("train"), 1.0);
  PerceivedSplit split(data.train, toy().perception);
  EXPECT_EQ(evaluate(r.best, toy(), split).accuracy(), 1.0);
}

TEST(Train, NonFiniteLossAbortsWithBatchSeed) {
  const auto data = small_data(8, 4, 0);
  auto init = init_params<float>(toy(), 0);
  init.get_mutable("out.b").mutable_values()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainOptions opts;
  opts.init = &init;
  TrainConfig t;
  t.epochs = 1;
  try {
    train(toy(), data, t, opts);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch seed " + std::to_string(mix_seed(0, (1ULL << 32) | 0))),
              std::string::npos)
        << e.what();
  }
}

TEST(Train, GeometryMismatchIsConfigError) {
  const auto big = gen_same_different(4, ShapeFamily::blob, 1, 128);
  DatasetSplits data{big, big, {}};
  TrainConfig t;
  t.epochs = 1;
  EXPECT_THROW(train(toy(), data, t), ConfigError);
}

TEST(Train, RunDirectoryAndCheckpointRoundTrip) {
  const auto dir = fresh_dir("gap_harness_run");
  const auto data = small_data(16, 8, 8);
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 8;
  t.lr = 1e-3;
  t.trace_samples = 2;
  TrainOptions opts;
  opts.run_dir = dir;
  const auto r = train(toy(), data, t, opts);

  for (const char* f : {"config.json", "metrics.csv", "best.ckpt", "report.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "trace-samples" / "val_1.json"));
  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,split,loss,acc");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4u);

  const auto val = evaluate_checkpoint((dir / "best.ckpt").string(), data.val);
  EXPECT_EQ(val.accuracy(), r.report.accuracy("val"));
  EXPECT_EQ(val.loss, r.report.splits.at("val").loss);
  const auto test = evaluate_checkpoint((dir / "best.ckpt").string(), data.test);
  EXPECT_EQ(test.tp, r.report.splits.at("test").tp);
  EXPECT_EQ(test.tn, r.report.splits.at("test").tn);

  const auto big = gen_same_different(2, ShapeFamily::blob, 1, 128);
  EXPECT_THROW(evaluate_checkpoint((dir / "best.ckpt").string(), big), ConfigError);
  fs::remove_all(dir);
}

TEST(Evaluate, ZeroFinalLayerPredictsPositiveEverywhere) {
  const auto samples = gen_same_different(9, ShapeFamily::polygon, 4);
  const auto ps = init_params<float>(toy(), 5);
  PerceivedSplit split(samples, toy().perception);
  std::vector<float> logits;
  const auto m = evaluate(ps, toy(), split, 4, &logits);
  ASSERT_EQ(logits.size(), 9u);
  for (float z : logits) EXPECT_EQ(z, 0.0f);
  EXPECT_DOUBLE_EQ(m.accuracy(), 5.0 / 9.0);  // label prevalence of positives
  EXPECT_NEAR(m.loss, std::log(2.0), 1e-6);
}

TEST(Evaluate, AccuracyMatchesConfusionRecount) {
  const auto samples = gen_same_different(12, ShapeFamily::blob, 6);
  auto ps = init_params<float>(toy(), 7);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : ps.get_mutable("out.w").mutable_values()) v = u(rng);
  PerceivedSplit split(samples, toy().perception);
  std::vector<float> logits;
  const auto m = evaluate(ps, toy(), split, 5, &logits);
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const bool pred = logits[i] >= 0.0f, pos = samples[i].label == 1;
    tp += pred && pos;
    tn += !pred && !pos;
    fp += pred && !pos;
    fn += !pred && pos;
  }
  EXPECT_EQ(m.tp, tp);
  EXPECT_EQ(m.tn, tn);
  EXPECT_EQ(m.fp, fp);
  EXPECT_EQ(m.fn, fn);
  EXPECT_EQ(m.accuracy(), static_cast<double>(tp + tn) / 12.0);
}

TEST(Ablation, ModeMapping) {
  const ModelConfig base = ModelConfig::desk();
  EXPECT_EQ(apply_ablation(base, AblationMode::what_only).streams, StreamMode::what_only);
  EXPECT_EQ(apply_ablation(base, AblationMode::where_only).streams, StreamMode::where_only);
  EXPECT_EQ(apply_ablation(base, AblationMode::gap_regular).perception.mode, PerceptionMode::gap_regular);
  const auto vit = apply_ablation(base, AblationMode::vit_patches);
  EXPECT_EQ(vit.perception.mode, PerceptionMode::vit_patches);
  EXPECT_EQ(vit.tokens(), 16u);
  EXPECT_EQ(parse_ablation("gap-regular"), AblationMode::gap_regular);
  EXPECT_THROW(parse_ablation("all"), ConfigError);
}

TEST(Ablation, SingleModeMatchesPlainTraining) {
  const auto data = small_data(8, 4, 4);
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 4;
  t.lr = 1e-3;
  const auto rows = ablation_suite(toy(), data, t, {AblationMode::both}, {t.seed});
  ASSERT_EQ(rows.size(), 1u);
  const auto plain = train(toy(), data, t);
  EXPECT_EQ(rows[0].report.accuracy("test"), plain.report.accuracy("test"));
  EXPECT_EQ(rows[0].report.splits.at("val").loss, plain.report.splits.at("val").loss);
  EXPECT_EQ(rows[0].report.config_hash, plain.report.config_hash);
  EXPECT_NE(ablation_table(rows).find("both"), std::string::npos);
  EXPECT_THROW(ablation_suite(toy(), data, t, {}, {0}), ConfigError);
}

TEST(Ablation, EveryModeTrains) {
  const auto data = small_data(8, 4, 4);
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 8;
  const auto rows = ablation_suite(toy(), data, t,
                                   {AblationMode::what_only, AblationMode::where_only, AblationMode::gap_regular,
                                    AblationMode::vit_patches},
                                   {0});
  EXPECT_EQ(rows.size(), 4u);
}

TEST(Config, JsonRoundTripAndOverrides) {
  TrainConfig t;
  t.epochs = 7;
  t.hflip = true;
  const json j = t;
  TrainConfig back;
  from_json(j, back);
  EXPECT_EQ(json(back), j);

  ModelConfig m = ModelConfig::desk();
  from_json(json::parse(R"({"head":"transformer","perception":{"gap":{"mask":{"kind":"soft"}}}})"), m);
  EXPECT_EQ(m.head, HeadKind::transformer);
  EXPECT_EQ(m.perception.gap.mask.kind, MaskKind::soft);
  EXPECT_EQ(m.perception.gap.glimpses, 8u);  // untouched preset value
  EXPECT_EQ(json(m).get<ModelConfig>().layers, m.layers);

  EXPECT_THROW(from_json(json::parse(R"({"epoch":3})"), back), ConfigError);
  EXPECT_THROW(from_json(json::parse(R"({"streams":"all"})"), m), ConfigError);
  EXPECT_THROW(from_json(json::parse(R"({"layers":"four"})"), m), ConfigError);
}

TEST(Config, MaskSpecAndHash) {
  EXPECT_EQ(parse_mask("hard:7").radius, 7.0);
  const auto soft = parse_mask("soft:300");
  EXPECT_EQ(soft.kind, MaskKind::soft);
  EXPECT_EQ(soft.epsilon, 300.0);
  EXPECT_THROW(parse_mask("disc:3"), ConfigError);
  EXPECT_THROW(parse_mask("hard:3x"), ConfigError);
  EXPECT_EQ(config_hash(json{{"a", 1}}), config_hash(json{{"a", 1}}));
  EXPECT_NE(config_hash(json{{"a", 1}}), config_hash(json{{"a", 2}}));
}

}  // namespace
}  // namespace gap
