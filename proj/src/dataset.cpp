#include "fpg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fpg/rng.hpp"

namespace fpg {

namespace {

constexpr int kMaxPlacementTries = 10000;
constexpr double kNoiseStd = 0.05;

void check_geometry(int h, int w, int keypoints) {
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0)
    throw ConfigError("dataset: image size " + std::to_string(h) + "x" +
                      std::to_string(w) + " must be positive multiples of 32");
  if (keypoints < 1) throw ConfigError("dataset: keypoints must be >= 1");
}

std::vector<Keypoint> place_polygon(Rng& rng, int vertices, int h, int w) {
  const double pi = std::numbers::pi;
  const double lo_x = kKeypointMargin, hi_x = w - 1 - kKeypointMargin;
  const double lo_y = kKeypointMargin, hi_y = h - 1 - kKeypointMargin;
  const double gap = 2 * pi / vertices;
  std::vector<Keypoint> v(vertices);
  for (int attempt = 0; attempt < kMaxPlacementTries; ++attempt) {
    // Points on an ellipse taken in parametric order form a convex polygon.
    const double size = rng.uniform(0.25, 0.45) * std::min(h, w);
    const double a = size * rng.uniform(0.6, 1.0);
    const double b = size * rng.uniform(0.6, 1.0);
    const double rot = rng.uniform(-pi / 6, pi / 6);
    const double cx = rng.uniform(0, w - 1);
    const double cy = rng.uniform(0, h - 1);
    bool inside = true;
    for (int i = 0; i < vertices; ++i) {
      const double phi = -0.75 * pi + gap * i + rng.uniform(-0.25, 0.25) * gap;
      const double ex = a * std::cos(phi), ey = b * std::sin(phi);
      v[i].x = cx + ex * std::cos(rot) - ey * std::sin(rot);
      v[i].y = cy + ex * std::sin(rot) + ey * std::cos(rot);
      inside = inside && v[i].x >= lo_x && v[i].x <= hi_x && v[i].y >= lo_y &&
               v[i].y <= hi_y;
    }
    if (inside) return v;
  }
  throw ConfigError("dataset: could not place a polygon inside " +
                    std::to_string(h) + "x" + std::to_string(w));
}

bool in_convex(const std::vector<Keypoint>& poly, double x, double y) {
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Keypoint& p = poly[i];
    const Keypoint& q = poly[(i + 1) % poly.size()];
    const double cross = (q.x - p.x) * (y - p.y) - (q.y - p.y) * (x - p.x);
    pos = pos || cross > 0;
    neg = neg || cross < 0;
  }
  return !(pos && neg);
}

class Fnv {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= c[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void real(double v) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      const unsigned char c = static_cast<unsigned char>(u >> (8 * i));
      bytes(&c, 1);
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace

std::vector<double> render_heatmap(const Keypoint& kp, int target_h,
                                   int target_w) {
  const auto cell = [](double px, int extent) {
    const long c = std::lround(px / kHeatmapStride);
    return static_cast<int>(std::clamp<long>(c, 0, extent - 1));
  };
  const int cx = cell(kp.x, target_w), cy = cell(kp.y, target_h);
  std::vector<double> out(static_cast<std::size_t>(target_h) * target_w);
  const double denom = 2 * kHeatmapSigma * kHeatmapSigma;
  for (int y = 0; y < target_h; ++y)
    for (int x = 0; x < target_w; ++x) {
      const double d2 = double(x - cx) * (x - cx) + double(y - cy) * (y - cy);
      out[static_cast<std::size_t>(y) * target_w + x] = std::exp(-d2 / denom);
    }
  return out;
}

HeatmapSample synth_sample(std::uint64_t seed, std::string_view split,
                           std::uint64_t index, int h, int w, int keypoints) {
  check_geometry(h, w, keypoints);
  Rng rng = Rng::substream(seed, "data." + std::string(split), index);
  const auto poly = place_polygon(rng, std::max(keypoints, 3), h, w);

  HeatmapSample s;
  s.keypoints.assign(poly.begin(), poly.begin() + keypoints);
  double bg[3], fg[3];
  for (int c = 0; c < 3; ++c) {
    bg[c] = rng.uniform(0.0, 0.4);
    fg[c] = rng.uniform(0.6, 1.0);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  s.image.resize(3 * plane);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool in = in_convex(poly, x, y);
      for (int c = 0; c < 3; ++c)
        s.image[c * plane + static_cast<std::size_t>(y) * w + x] =
            (in ? fg[c] : bg[c]) + kNoiseStd * rng.normal();
    }

  const int th = h / kHeatmapStride, tw = w / kHeatmapStride;
  s.target.reserve(static_cast<std::size_t>(keypoints) * th * tw);
  for (const auto& kp : s.keypoints) {
    const auto hm = render_heatmap(kp, th, tw);
    s.target.insert(s.target.end(), hm.begin(), hm.end());
  }
  return s;
}

Dataset synth_dataset(std::uint64_t seed, std::string_view split, int n, int h,
                      int w, int keypoints) {
  check_geometry(h, w, keypoints);
  if (n < 0) throw ConfigError("dataset: sample count must be >= 0");
  Dataset d{h, w, keypoints, {}};
  d.samples.reserve(n);
  for (int i = 0; i < n; ++i)
    d.samples.push_back(synth_sample(seed, split, i, h, w, keypoints));
  return d;
}

std::string dataset_hash(const Dataset& d) {
  Fnv f;
  for (int v : {d.h, d.w, d.keypoints}) f.real(v);
  for (const auto& s : d.samples) {
    for (double v : s.image) f.real(v);
    for (const auto& k : s.keypoints) {
      f.real(k.x);
      f.real(k.y);
    }
    for (double v : s.target) f.real(v);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(f.value()));
  return buf;
}

Batch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  if (indices.empty()) throw UsageError("make_batch: empty index list");
  const int b = static_cast<int>(indices.size());
  const std::size_t img = 3 * static_cast<std::size_t>(d.h) * d.w;
  const std::size_t tgt =
      static_cast<std::size_t>(d.keypoints) * d.target_h() * d.target_w();
  std::vector<double> images, targets;
  images.reserve(b * img);
  targets.reserve(b * tgt);
  Batch out;
  for (std::size_t i : indices) {
    if (i >= d.size())
      throw UsageError("make_batch: index " + std::to_string(i) +
                       " out of range for " + std::to_string(d.size()) +
                       " samples");
    const auto& s = d.samples[i];
    images.insert(images.end(), s.image.begin(), s.image.end());
    targets.insert(targets.end(), s.target.begin(), s.target.end());
    out.keypoints.push_back(s.keypoints);
  }
  out.images = Tensor({b, 3, d.h, d.w}, std::move(images));
  out.targets =
      Tensor({b, d.keypoints, d.target_h(), d.target_w()}, std::move(targets));
  return out;
}

Dataset merge(const Dataset& a, const Dataset& b) {
  if (a.h != b.h || a.w != b.w || a.keypoints != b.keypoints)
    throw UsageError("merge: datasets have different geometry");
  Dataset out = a;
  out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
  return out;
}

}  // namespace fpg
