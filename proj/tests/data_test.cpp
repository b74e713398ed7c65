// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "d2mlp/data.hpp"
#include "test_util.hpp"

namespace d2mlp {
namespace {

TEST(Synth, SameSeedIsBitwiseIdentical) {
  const auto a = synth_generate(7, 4, 64, 3), b = synth_generate(7, 4, 64, 3), c = synth_generate(8, 4, 64, 3);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.labels == c.labels);
}

TEST(Synth, LongerRunExtendsShorterRun) {
  const auto a = synth_generate(3, 2, 32, 2), b = synth_generate(3, 5, 32, 2);
  for (std::size_t i = 0; i < a.labels.size(); ++i) ASSERT_EQ(a.labels[i], b.labels[i]);
  for (std::size_t i = 0; i < a.images.size(); ++i) ASSERT_EQ(a.images[i], b.images[i]);
}

TEST(Synth, ForegroundAreaFractionAtSize64) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const auto b = synth_generate(seed, 8, 64, 2);
    for (std::size_t n = 0; n < 8; ++n) {
      std::size_t fg = 0;
      for (std::size_t i = 0; i < 64 * 64; ++i) fg += b.labels[n * 4096 + i] != 0;
      const double frac = double(fg) / 4096.0;
      EXPECT_GE(frac, 0.02) << "seed " << seed << " sample " << n;
      EXPECT_LE(frac, 0.5) << "seed " << seed << " sample " << n;
    }
  }
}

TEST(Synth, EveryClassPresentAndShapesSeparated) {
  for (std::size_t K : {2u, 3u, 5u}) {
    const auto b = synth_generate(11, 6, 64, K);
    for (std::size_t n = 0; n < 6; ++n) {
      std::vector<std::size_t> count(K, 0);
      const std::uint8_t* l = b.labels.raw() + n * 4096;
      for (std::size_t i = 0; i < 4096; ++i) ++count[l[i]];
      for (std::size_t k = 0; k < K; ++k) EXPECT_GT(count[k], 0u) << "K=" << K << " class " << k;
      // Distinct foreground classes never touch (4-neighbourhood) and never reach the border.
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          const auto v = l[y * 64 + x];
          if (!v) continue;
          EXPECT_TRUE(y > 0 && x > 0 && y < 63 && x < 63);
          if (x + 1 < 64) EXPECT_TRUE(l[y * 64 + x + 1] == 0 || l[y * 64 + x + 1] == v);
          if (y + 1 < 64) EXPECT_TRUE(l[(y + 1) * 64 + x] == 0 || l[(y + 1) * 64 + x] == v);
        }
    }
  }
}

TEST(Synth, IntensitiesFollowLabels) {
  const auto b = synth_generate(5, 4, 64, 3);
  std::vector<double> sum(3, 0), n(3, 0);
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    const float v = b.images[i];
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
    sum[b.labels[i]] += v;
    n[b.labels[i]] += 1;
  }
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(sum[k] / n[k], synth_intensity(k, 3), 0.01) << k;
  EXPECT_DOUBLE_EQ(synth_intensity(0, 2), 0.2);
  EXPECT_DOUBLE_EQ(synth_intensity(1, 2), 0.8);
}

TEST(Synth, RejectsBadArguments) {
  EXPECT_THROW(synth_generate(0, 1, 63, 2), ShapeError);
  EXPECT_THROW(synth_generate(0, 1, 0, 2), ShapeError);
  EXPECT_THROW(synth_generate(0, 0, 64, 2), ConfigError);
  EXPECT_THROW(synth_generate(0, 1, 64, 1), ConfigError);
}

TEST(Dataset, GatherAndLabelValidation) {
  const auto b = synth_generate(1, 4, 32, 2);
  const auto g = gather(b, {3, 1});
  ASSERT_EQ(g.count(), 2u);
  for (std::size_t i = 0; i < 1024; ++i) {
    ASSERT_EQ(g.labels[i], b.labels[3 * 1024 + i]);
    ASSERT_EQ(g.images[1024 + i], b.images[1024 + i]);
  }
  EXPECT_NO_THROW(validate_labels(b.labels, 2));
  LabelMap bad({1, 2, 2});
  bad[1] = 2;
  EXPECT_THROW(validate_labels(bad, 2), ConfigError);
}

TEST(Dataset, DiskRoundTrip) {
  testing::TempDir dir("dataset");
  const auto b = synth_generate(9, 3, 32, 3);
  write_dataset(dir.path(), b, DatasetMeta{3, 32, 3, 9});
  EXPECT_TRUE(std::filesystem::exists(dir / "img_0002.d2t"));
  EXPECT_TRUE(std::filesystem::exists(dir / "lbl_0000.d2t"));
  DatasetMeta meta;
  const auto r = read_dataset(dir.path(), &meta);
  EXPECT_EQ(r.images, b.images);
  EXPECT_EQ(r.labels, b.labels);
  EXPECT_EQ(meta.count, 3u);
  EXPECT_EQ(meta.num_classes, 3u);
  EXPECT_EQ(meta.seed, 9u);
  EXPECT_EQ(load_d2t_as<float>(dir / "img_0001.d2t").shape(), (Shape{1, 32, 32}));
  EXPECT_EQ(load_d2t_as<std::uint8_t>(dir / "lbl_0001.d2t").shape(), (Shape{32, 32}));
}

TEST(Dataset, ReadRejectsBrokenDirectories) {
  testing::TempDir dir("broken");
  EXPECT_THROW(read_dataset(dir.path()), FormatError);
  write_dataset(dir.path(), synth_generate(1, 2, 32, 2), DatasetMeta{2, 32, 2, 1});
  std::filesystem::remove(dir / "lbl_0001.d2t");
  EXPECT_THROW(read_dataset(dir.path()), FormatError);
  write_dataset(dir.path(), synth_generate(1, 2, 32, 3), DatasetMeta{2, 32, 2, 1});
  EXPECT_THROW(read_dataset(dir.path()), ConfigError);
}

}  // namespace
}  // namespace d2mlp
