// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "gap/taskgen.hpp"

namespace gap {
namespace {

// Oracle: 8-connected components of the inked pixels, each as a tight crop.
struct Component {
  long y0, x0, y1, x1;  // inclusive bounds
  std::set<std::pair<long, long>> pixels;

  std::vector<std::uint8_t> crop() const {
    std::vector<std::uint8_t> out((y1 - y0 + 1) * (x1 - x0 + 1), 0);
    for (auto [y, x] : pixels) out[(y - y0) * (x1 - x0 + 1) + (x - x0)] = 1;
    return out;
  }
  bool same_shape(const Component& o) const {
    return y1 - y0 == o.y1 - o.y0 && x1 - x0 == o.x1 - o.x0 && crop() == o.crop();
  }
};

std::vector<Component> components(const Image& img) {
  std::vector<int> seen(img.height * img.width, 0);
  std::vector<Component> out;
  for (long y = 0; y < static_cast<long>(img.height); ++y)
    for (long x = 0; x < static_cast<long>(img.width); ++x) {
      if (img.at(y, x) == 0.0 || seen[y * img.width + x]) continue;
      Component c{y, x, y, x, {}};
      std::vector<std::pair<long, long>> stack{{y, x}};
      seen[y * img.width + x] = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        c.pixels.insert({cy, cx});
        c.y0 = std::min(c.y0, cy);
        c.y1 = std::max(c.y1, cy);
        c.x0 = std::min(c.x0, cx);
        c.x1 = std::max(c.x1, cx);
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long ny = cy + dy, nx = cx + dx;
            if (!img.contains(ny, nx) || img.at(ny, nx) == 0.0 || seen[ny * img.width + nx]) continue;
            seen[ny * img.width + nx] = 1;
            stack.push_back({ny, nx});
          }
      }
      out.push_back(std::move(c));
    }
  return out;
}

// Oracle IoU: for every translation that maps some pixel of b onto some
// pixel of a, count coincidences with a hash lookup.
double oracle_aligned_iou(const Component& a, const Component& b) {
  std::map<std::pair<long, long>, long> votes;
  for (auto [ay, ax] : a.pixels)
    for (auto [by, bx] : b.pixels) ++votes[{ay - by, ax - bx}];
  long best = 0;
  for (const auto& [_, n] : votes) best = std::max(best, n);
  const double inter = static_cast<double>(best);
  return inter / (static_cast<double>(a.pixels.size() + b.pixels.size()) - inter);
}

void expect_margin(const Image& img, std::size_t margin) {
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      if (img.at(y, x) != 0.0) {
        ASSERT_GE(y, margin);
        ASSERT_GE(x, margin);
        ASSERT_LT(y, img.height - margin);
        ASSERT_LT(x, img.width - margin);
      }
}

const ShapeFamily kFamilies[] = {ShapeFamily::polygon, ShapeFamily::blob, ShapeFamily::open_curve};

TEST(RenderShape, DeterministicAndSized) {
  for (ShapeFamily f : kFamilies)
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const ShapeSpec spec{f, seed, 15.0, 1.0};
      const auto a = render_shape(spec), b = render_shape(spec);
      EXPECT_EQ(a.bits, b.bits);
      EXPECT_EQ(std::max(a.height, a.width), 15u) << to_string(f) << " " << seed;
      EXPECT_GT(a.area(), 10u);
    }
}

TEST(RenderShape, ShapeIsOneComponent) {
  for (ShapeFamily f : kFamilies)
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const auto m = render_shape({f, seed, 17.0, 1.0});
      Image img = Image::zeros(m.height + 2, m.width + 2);
      paste(img, m, 1, 1);
      EXPECT_EQ(components(img).size(), 1u) << to_string(f) << " " << seed;
    }
}

TEST(AlignedIou, MatchesOracleAndIdentity) {
  for (ShapeFamily f : kFamilies)
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const auto a = render_shape({f, seed, 13.0, 1.0});
      const auto b = render_shape({f, seed + 100, 11.0, 1.0});
      EXPECT_DOUBLE_EQ(aligned_iou(a, a), 1.0);
      Image ia = Image::zeros(a.height + 2, a.width + 2), ib = Image::zeros(b.height + 2, b.width + 2);
      paste(ia, a, 1, 1);
      paste(ib, b, 1, 1);
      EXPECT_NEAR(aligned_iou(a, b), oracle_aligned_iou(components(ia)[0], components(ib)[0]), 1e-12);
      EXPECT_DOUBLE_EQ(aligned_iou(a, b), aligned_iou(b, a));
    }
}

TEST(SameDifferent, SeedFixedCountFourIsBalancedAndBitIdentical) {
  const auto a = gen_same_different(4, ShapeFamily::polygon, 7);
  const auto b = gen_same_different(4, ShapeFamily::polygon, 7);
  ASSERT_EQ(a.size(), 4u);
  int pos = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    pos += a[i].label;
    EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
    EXPECT_EQ(a[i].seed, b[i].seed);
  }
  EXPECT_EQ(pos, 2);
  EXPECT_NE(gen_same_different(4, ShapeFamily::polygon, 8)[0].image.pixels, a[0].image.pixels);
}

TEST(SameDifferent, ComponentOracleOverFamiliesAndSeeds) {
  for (ShapeFamily f : kFamilies) {
    const auto samples = gen_same_different(40, f, 1234);
    for (const auto& s : samples) {
      SCOPED_TRACE(std::string(to_string(f)) + " seed " + std::to_string(s.seed));
      expect_margin(s.image, 8);
      for (double v : s.image.pixels) ASSERT_TRUE(v == 0.0 || v == 1.0);
      const auto comps = components(s.image);
      ASSERT_EQ(comps.size(), 2u);
      if (s.label == 1) {
        EXPECT_TRUE(comps[0].same_shape(comps[1]));
        EXPECT_EQ(s.shape_seeds[0], s.shape_seeds[1]);
      } else {
        EXPECT_LT(oracle_aligned_iou(comps[0], comps[1]), 0.8);
      }
    }
  }
}

TEST(SameDifferent, BalanceForOddAndEvenCounts) {
  for (std::size_t n : {2u, 3u, 9u, 20u}) {
    const auto s = gen_same_different(n, ShapeFamily::blob, n);
    long pos = 0;
    for (const auto& x : s) pos += x.label;
    EXPECT_LE(std::abs(2 * pos - static_cast<long>(n)), 1);
  }
  EXPECT_THROW(gen_same_different(1, ShapeFamily::blob, 0), ConfigError);
}

TEST(SameDifferent, LargeCanvasPreset) {
  const auto s = gen_same_different(4, ShapeFamily::open_curve, 3, 128);
  EXPECT_EQ(s[0].image.height, 128u);
  expect_margin(s[1].image, 8);
  EXPECT_EQ(components(s[0].image).size(), 2u);
}

TEST(SameDifferent, RejectionExhaustionIsGenerationError) {
  TaskConfig cfg = TaskConfig::make(TaskKind::same_different, ShapeFamily::blob);
  cfg.iou_threshold = 1e-9;  // every pair overlaps somewhere
  cfg.max_attempts = 5;
  EXPECT_THROW(generate(cfg, 2, 0), GenerationError);

  cfg = TaskConfig::make(TaskKind::same_different, ShapeFamily::polygon);
  cfg.min_scale = cfg.max_scale = 40.0;  // two such shapes cannot sit side by side
  EXPECT_THROW(generate(cfg, 2, 0), GenerationError);
}

TEST(Rmts, RuleHoldsUnderComponentOracle) {
  for (ShapeFamily f : kFamilies) {
    const auto samples = gen_rmts(30, f, 99);
    int pos = 0;
    for (const auto& s : samples) {
      SCOPED_TRACE(std::string(to_string(f)) + " seed " + std::to_string(s.seed));
      expect_margin(s.image, 8);
      auto comps = components(s.image);
      ASSERT_EQ(comps.size(), 4u);
      const long mid = 32;
      std::array<const Component*, 4> quad{};
      for (const auto& c : comps) quad[(c.y0 >= mid ? 2 : 0) + (c.x0 >= mid ? 1 : 0)] = &c;
      for (auto* q : quad) ASSERT_NE(q, nullptr);
      const bool top_same = quad[0]->same_shape(*quad[1]);
      const bool bottom_same = quad[2]->same_shape(*quad[3]);
      EXPECT_EQ(s.label, top_same == bottom_same ? 1 : 0);
      if (!top_same) {
        EXPECT_LT(oracle_aligned_iou(*quad[0], *quad[1]), 0.8);
      }
      if (!bottom_same) {
        EXPECT_LT(oracle_aligned_iou(*quad[2], *quad[3]), 0.8);
      }
      pos += s.label;
    }
    EXPECT_EQ(pos, 15);
  }
}

TEST(Rmts, AllFourRelationCombinationsOccur) {
  std::set<std::pair<bool, bool>> seen;
  for (const auto& s : gen_rmts(40, ShapeFamily::polygon, 5)) {
    seen.insert({s.shape_seeds[0] == s.shape_seeds[1], s.shape_seeds[2] == s.shape_seeds[3]});
    EXPECT_EQ(s.label, (s.shape_seeds[0] == s.shape_seeds[1]) == (s.shape_seeds[2] == s.shape_seeds[3]));
  }
  EXPECT_EQ(seen.size(), 4u);
}

bool contains_shape(const Image& img, const ShapeMask& m) {
  for (const auto& c : components(img)) {
    if (static_cast<std::size_t>(c.y1 - c.y0 + 1) == m.height && static_cast<std::size_t>(c.x1 - c.x0 + 1) == m.width &&
        c.crop() == m.bits)
      return true;
  }
  return false;
}

TEST(OodSplit, FamiliesSeedsAndErrors) {
  const SplitCounts counts{20, 10, 20};
  const auto d = gen_ood_split(ShapeFamily::polygon, ShapeFamily::blob, counts, 17);
  EXPECT_EQ(d.train.size(), 20u);
  EXPECT_EQ(d.val.size(), 10u);
  EXPECT_EQ(d.test.size(), 20u);

  std::set<std::uint64_t> train, val, test;
  for (const auto& s : d.train) train.insert(s.shape_seeds.begin(), s.shape_seeds.end());
  for (const auto& s : d.val) val.insert(s.shape_seeds.begin(), s.shape_seeds.end());
  for (const auto& s : d.test) test.insert(s.shape_seeds.begin(), s.shape_seeds.end());
  for (auto k : test) EXPECT_FALSE(train.count(k) || val.count(k));
  for (auto k : val) EXPECT_FALSE(train.count(k));

  // Re-rendering a recorded seed under the split's family reproduces a component.
  const auto scale_of = [](const TaskConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x5ca1e));
    return std::uniform_real_distribution<double>(cfg.min_scale, cfg.max_scale)(rng);
  };
  const TaskConfig cfg = TaskConfig::make(TaskKind::same_different, ShapeFamily::polygon);
  for (const auto* split : {&d.train, &d.test}) {
    const ShapeFamily fam = split == &d.train ? ShapeFamily::polygon : ShapeFamily::blob;
    const ShapeFamily other = split == &d.train ? ShapeFamily::blob : ShapeFamily::polygon;
    for (const auto& s : *split) {
      const std::uint64_t k = s.shape_seeds[0];
      EXPECT_TRUE(contains_shape(s.image, render_shape({fam, k, scale_of(cfg, k), cfg.stroke})));
      EXPECT_FALSE(contains_shape(s.image, render_shape({other, k, scale_of(cfg, k), cfg.stroke})));
    }
  }

  const auto swapped = gen_ood_split(ShapeFamily::blob, ShapeFamily::polygon, counts, 17);
  const std::uint64_t k = swapped.test[0].shape_seeds[0];
  EXPECT_TRUE(contains_shape(swapped.test[0].image, render_shape({ShapeFamily::polygon, k, scale_of(cfg, k), 1.0})));

  EXPECT_THROW(gen_ood_split(ShapeFamily::blob, ShapeFamily::blob, counts, 1), ConfigError);
}

TEST(Dataset, DiskRoundTrip) {
  const auto root = std::filesystem::temp_directory_path() / "gap_taskgen_rt";
  std::filesystem::remove_all(root);
  const SplitCounts counts{6, 4, 4};
  const auto d = gen_ood_split(ShapeFamily::open_curve, ShapeFamily::polygon, counts, 3);
  const TaskConfig cfg = TaskConfig::make(TaskKind::same_different, ShapeFamily::open_curve);
  write_dataset(root, d, manifest_json(cfg, ShapeFamily::polygon, counts, 3));
  const auto back = read_dataset(root);
  ASSERT_EQ(back.train.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(back.train[i].image.pixels, d.train[i].image.pixels);
    EXPECT_EQ(back.train[i].label, d.train[i].label);
    EXPECT_EQ(back.train[i].seed, d.train[i].seed);
  }
  std::ifstream mf(root / "manifest.json");
  const auto m = nlohmann::json::parse(mf);
  EXPECT_EQ(m.at("test_family"), "polygon");
  EXPECT_EQ(m.at("counts").at("train"), 6);
  std::ifstream csv(root / "val" / "labels.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "filename,label,seed");
  std::filesystem::remove_all(root);
}

TEST(Dataset, MalformedLabelsAreInputErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "gap_taskgen_bad";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "labels.csv") << "filename,label,seed\n000000.pgm,2,5\n";
  }
  EXPECT_THROW(read_split(dir), InputError);
  EXPECT_THROW(read_split(dir / "missing"), InputError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace gap
