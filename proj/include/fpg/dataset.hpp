#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpg/tensor.hpp"

namespace fpg {

inline constexpr int kHeatmapStride = 4;
inline constexpr double kHeatmapSigma = 2.0;  // in heatmap cells
inline constexpr int kKeypointMargin = 4;     // pixels kept clear of the border

struct Keypoint {
  double x = 0, y = 0;  // pixel coordinates
};

// One synthetic image: a flat-filled convex polygon over a noisy background.
// The polygon has max(K_kp, 3) vertices, ordered clockwise from the top-left
// one; the first K_kp are the keypoints.
struct HeatmapSample {
  std::vector<double> image;       // (3, H, W)
  std::vector<Keypoint> keypoints;  // K_kp entries
  std::vector<double> target;      // (K_kp, H/4, W/4), peak 1 per channel
};

struct Dataset {
  int h = 0, w = 0, keypoints = 0;
  std::vector<HeatmapSample> samples;

  std::size_t size() const { return samples.size(); }
  int target_h() const { return h / kHeatmapStride; }
  int target_w() const { return w / kHeatmapStride; }
};

// Sample i of `split` depends only on (seed, split, i). Throws ConfigError
// unless h and w are positive multiples of 32 and keypoints >= 1.
HeatmapSample synth_sample(std::uint64_t seed, std::string_view split,
                           std::uint64_t index, int h, int w, int keypoints);
Dataset synth_dataset(std::uint64_t seed, std::string_view split, int n, int h,
                      int w, int keypoints);

// Gaussian heatmap for one keypoint, centred on cell round(kp / 4).
std::vector<double> render_heatmap(const Keypoint& kp, int target_h,
                                   int target_w);

// Hex FNV-1a digest of every image, keypoint and target value.
std::string dataset_hash(const Dataset& d);

struct Batch {
  Tensor images;   // (B, 3, H, W)
  Tensor targets;  // (B, K_kp, H/4, W/4)
  std::vector<std::vector<Keypoint>> keypoints;
};

Batch make_batch(const Dataset& d, std::span<const std::size_t> indices);

// Concatenation of two datasets with equal geometry.
Dataset merge(const Dataset& a, const Dataset& b);

}  // namespace fpg
