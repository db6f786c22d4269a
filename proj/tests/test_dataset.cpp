#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fpg/dataset.hpp"

namespace fpg {
namespace {

TEST(Dataset, DeterministicPerSample) {
  const Dataset a = synth_dataset(3, "train", 6, 64, 64, 4);
  const Dataset b = synth_dataset(3, "train", 6, 64, 64, 4);
  EXPECT_EQ(dataset_hash(a), dataset_hash(b));
  EXPECT_NE(dataset_hash(a), dataset_hash(synth_dataset(4, "train", 6, 64, 64, 4)));
  EXPECT_NE(dataset_hash(a), dataset_hash(synth_dataset(3, "val", 6, 64, 64, 4)));
  // Sample i does not depend on how many samples were drawn.
  const HeatmapSample s = synth_sample(3, "train", 4, 64, 64, 4);
  EXPECT_EQ(s.image, a.samples[4].image);
  EXPECT_EQ(s.target, a.samples[4].target);
}

TEST(Dataset, SampleInvariants) {
  for (int k : {1, 3, 4, 6}) {
    const Dataset d = synth_dataset(1, "train", 20, 32, 64, k);
    const int th = d.target_h(), tw = d.target_w();
    EXPECT_EQ(th, 8);
    EXPECT_EQ(tw, 16);
    for (const auto& s : d.samples) {
      ASSERT_EQ(s.image.size(), 3u * 32 * 64);
      ASSERT_EQ(s.keypoints.size(), static_cast<std::size_t>(k));
      ASSERT_EQ(s.target.size(), static_cast<std::size_t>(k) * th * tw);
      for (int c = 0; c < k; ++c) {
        const auto& kp = s.keypoints[c];
        EXPECT_GE(kp.x, 0);
        EXPECT_LT(kp.x, 64);
        EXPECT_GE(kp.y, 0);
        EXPECT_LT(kp.y, 32);
        const auto begin = s.target.begin() + static_cast<long>(c) * th * tw;
        const auto peak = std::max_element(begin, begin + th * tw);
        EXPECT_EQ(*peak, 1.0);
        const long cell = peak - begin;
        const long cx = std::clamp<long>(std::lround(kp.x / 4), 0, tw - 1);
        const long cy = std::clamp<long>(std::lround(kp.y / 4), 0, th - 1);
        EXPECT_EQ(cell, cy * tw + cx);
      }
    }
  }
}

TEST(Dataset, HeatmapIsGaussian) {
  const auto hm = render_heatmap({16, 8}, 8, 8);
  EXPECT_EQ(hm[2 * 8 + 4], 1.0);
  EXPECT_NEAR(hm[2 * 8 + 5], std::exp(-1.0 / 8), 1e-15);
  EXPECT_NEAR(hm[4 * 8 + 6], std::exp(-8.0 / 8), 1e-15);
}

TEST(Dataset, BatchAndMerge) {
  const Dataset a = synth_dataset(0, "train", 5, 32, 32, 2);
  const Dataset b = synth_dataset(0, "val", 3, 32, 32, 2);
  const std::size_t idx[] = {4, 0};
  const Batch batch = make_batch(a, idx);
  EXPECT_EQ(batch.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(batch.targets.shape(), (Shape{2, 2, 8, 8}));
  EXPECT_EQ(batch.images.at(0, 1, 3, 5), a.samples[4].image[1 * 1024 + 3 * 32 + 5]);
  EXPECT_EQ(batch.keypoints[1].size(), 2u);
  const Dataset m = merge(a, b);
  EXPECT_EQ(m.size(), 8u);
  EXPECT_EQ(m.samples[6].image, b.samples[1].image);
  const std::size_t bad[] = {5};
  EXPECT_THROW(make_batch(a, bad), UsageError);
  EXPECT_THROW(make_batch(a, std::span<const std::size_t>()), UsageError);
  EXPECT_THROW(merge(a, synth_dataset(0, "x", 1, 64, 64, 2)), UsageError);
}

TEST(Dataset, RejectsBadGeometry) {
  EXPECT_THROW(synth_dataset(0, "train", 1, 48, 64, 2), ConfigError);
  EXPECT_THROW(synth_dataset(0, "train", 1, 64, 64, 0), ConfigError);
  EXPECT_THROW(synth_sample(0, "train", 0, 0, 64, 2), ConfigError);
}

}  // namespace
}  // namespace fpg
