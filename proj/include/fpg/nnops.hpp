#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fpg/rng.hpp"
#include "fpg/tensor.hpp"

namespace fpg {

using ParamId = std::size_t;

enum class ParamRole { weight, bn_gamma, bn_beta, bn_mean, bn_var };

inline bool is_trainable(ParamRole r) {
  return r == ParamRole::weight || r == ParamRole::bn_gamma ||
         r == ParamRole::bn_beta;
}

struct Param {
  std::string name;
  Shape shape;
  ParamRole role;
  std::shared_ptr<const std::vector<double>> value;
};

// Owns every weight and normalization buffer of a network, in creation order.
// Updates replace the stored buffer, so tensors bound earlier keep their values.
class ParamStore {
 public:
  ParamId add(std::string name, Shape shape, ParamRole role,
              std::vector<double> init);

  const Param& operator[](ParamId id) const { return params_.at(id); }
  std::size_t size() const { return params_.size(); }
  std::span<const Param> params() const { return params_; }

  Tensor tensor(ParamId id) const;
  void set(ParamId id, std::vector<double> values);
  std::optional<ParamId> find(const std::string& name) const;

  // Number of trainable scalars (conv weights and BN affine terms).
  std::size_t trainable_scalars() const;

 private:
  std::vector<Param> params_;
};

// Per-forward binding of parameters to tensors. With a tape and
// `track_params`, trainable parameters become differentiable leaves.
class ForwardContext {
 public:
  ForwardContext(ParamStore& store, BnMode mode, Tape* tape = nullptr,
                 bool track_params = false);

  Tensor param(ParamId id);
  BnMode mode() const { return mode_; }
  ParamStore& store() { return store_; }

  // Whether train-mode batch norm writes running statistics back.
  void set_update_running_stats(bool on) { update_stats_ = on; }
  bool update_running_stats() const { return update_stats_; }

  const std::vector<std::pair<ParamId, Tensor>>& tracked() const {
    return tracked_;
  }

 private:
  ParamStore& store_;
  BnMode mode_;
  Tape* tape_;
  bool track_;
  bool update_stats_ = true;
  std::vector<std::optional<Tensor>> bound_;
  std::vector<std::pair<ParamId, Tensor>> tracked_;
};

struct ConvUnit {
  ParamId weight = 0;
  ConvSpec spec;
};

struct BatchNormUnit {
  ParamId gamma = 0, beta = 0, mean = 0, var = 0;
  int channels = 0;
};

struct GhostModule {
  int c_in = 0, c_out = 0, k_ghost = 3;
  int primary_channels = 0;  // ceil(c_out / 2)
  int cheap_channels = 0;    // c_out - primary_channels
  bool activate = true;
  ConvUnit primary;
  BatchNormUnit primary_bn;
  ConvUnit cheap;
  BatchNormUnit cheap_bn;
};

struct SqueezeExcite {
  int channels = 0, reduced = 0;
  ConvUnit reduce, expand;
};

struct Block {
  int c_in = 0, c_out = 0, kernel = 3, expansion = 1, k_ghost = 3, stride = 1;
  GhostModule expand;
  ConvUnit dw;
  BatchNormUnit dw_bn;
  SqueezeExcite se;
  GhostModule project;
  bool residual() const { return stride == 1 && c_in == c_out; }
};

// Skip candidate: identity on shape-preserving layers, otherwise a strided
// pointwise projection followed by batch norm.
struct Skip {
  int c_in = 0, c_out = 0, stride = 1;
  bool identity() const { return stride == 1 && c_in == c_out; }
  ConvUnit proj;
  BatchNormUnit bn;
};

enum class FusionVariant { simple = 0, dilated = 1, se = 2, attention = 3 };
inline constexpr int kFusionVariants = 4;
const char* fusion_name(FusionVariant v);

struct Fusion {
  FusionVariant variant = FusionVariant::simple;
  int channels = 0, out_h = 0, out_w = 0;
  std::vector<int> tap_channels;
  std::vector<ConvUnit> proj;
  std::vector<BatchNormUnit> proj_bn;
  ConvUnit extra;  // dilated 3x3 or 7x7 attention mask conv
  BatchNormUnit extra_bn;
  SqueezeExcite se;
};

struct Stem {
  int c_out = 0;
  ConvUnit conv;
  BatchNormUnit bn;
};

struct Head {
  int c_in = 0, keypoints = 0;
  ConvUnit dw, pw;
};

inline constexpr int kSeReduction = 4;

int se_reduced_channels(int channels, int ratio = kSeReduction);

// Builders draw conv weights Kaiming-uniform (fan-in) from `rng` in a fixed
// order; batch norm starts at gamma=1, beta=0, running mean 0 / var 1.
ConvUnit make_conv(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
                   int c_out, int kernel, const ConvSpec& spec);
BatchNormUnit make_bn(ParamStore& ps, const std::string& name, int channels);
GhostModule make_ghost(ParamStore& ps, Rng& rng, const std::string& name,
                       int c_in, int c_out, int k_ghost, bool activate);
SqueezeExcite make_se(ParamStore& ps, Rng& rng, const std::string& name,
                      int channels, int ratio = kSeReduction);
Block make_block(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
                 int c_out, int kernel, int expansion, int k_ghost, int stride);
Skip make_skip(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
               int c_out, int stride);
Fusion make_fusion(ParamStore& ps, Rng& rng, const std::string& name,
                   FusionVariant variant, std::span<const int> tap_channels,
                   int channels, int out_h, int out_w);
Stem make_stem(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
               int c_out);
Head make_head(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
               int keypoints);

Tensor conv_forward(ForwardContext& ctx, const ConvUnit& u, const Tensor& x);
Tensor bn_forward(ForwardContext& ctx, const BatchNormUnit& u, const Tensor& x);

Tensor ghost_forward(ForwardContext& ctx, const GhostModule& m, const Tensor& x);
Tensor se_forward(ForwardContext& ctx, const SqueezeExcite& m, const Tensor& x);
Tensor block_forward(ForwardContext& ctx, const Block& b, const Tensor& x);
Tensor skip_forward(ForwardContext& ctx, const Skip& s, const Tensor& x);
Tensor fusion_forward(ForwardContext& ctx, const Fusion& f,
                      std::span<const Tensor> taps);
Tensor stem_forward(ForwardContext& ctx, const Stem& s, const Tensor& x);
Tensor head_forward(ForwardContext& ctx, const Head& h, const Tensor& x);

}  // namespace fpg
