#include "fpg/nnops.hpp"

#include <cmath>

namespace fpg {

ParamId ParamStore::add(std::string name, Shape shape, ParamRole role,
                        std::vector<double> init) {
  if (init.size() != shape.numel())
    throw ShapeError("param " + name + ": init length does not match " +
                     shape.str());
  params_.push_back(Param{std::move(name), shape, role,
                          std::make_shared<const std::vector<double>>(std::move(init))});
  return params_.size() - 1;
}

Tensor ParamStore::tensor(ParamId id) const {
  const Param& p = params_.at(id);
  return Tensor(p.shape, p.value);
}

void ParamStore::set(ParamId id, std::vector<double> values) {
  Param& p = params_.at(id);
  if (values.size() != p.shape.numel())
    throw ShapeError("param " + p.name + ": new value has wrong length");
  p.value = std::make_shared<const std::vector<double>>(std::move(values));
}

std::optional<ParamId> ParamStore::find(const std::string& name) const {
  for (ParamId i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return std::nullopt;
}

std::size_t ParamStore::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (is_trainable(p.role)) n += p.shape.numel();
  return n;
}

ForwardContext::ForwardContext(ParamStore& store, BnMode mode, Tape* tape,
                               bool track_params)
    : store_(store), mode_(mode), tape_(tape), track_(track_params && tape) {}

Tensor ForwardContext::param(ParamId id) {
  if (bound_.size() <= id) bound_.resize(store_.size());
  if (bound_[id]) return *bound_[id];
  Tensor t = store_.tensor(id);
  if (track_ && is_trainable(store_[id].role)) {
    t = tape_->leaf(t);
    tracked_.emplace_back(id, t);
  }
  bound_[id] = t;
  return t;
}

const char* fusion_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::simple:
      return "simple";
    case FusionVariant::dilated:
      return "dilated";
    case FusionVariant::se:
      return "se";
    case FusionVariant::attention:
      return "attention";
  }
  return "?";
}

int se_reduced_channels(int channels, int ratio) {
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(channels) / ratio)));
}

// ---------------------------------------------------------------------------
// Builders

ConvUnit make_conv(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
                   int c_out, int kernel, const ConvSpec& spec) {
  const Shape ws{c_out, c_in / spec.groups, kernel, kernel};
  const double fan_in = static_cast<double>(ws.c) * kernel * kernel;
  const double bound = std::sqrt(6.0 / fan_in);
  std::vector<double> w(ws.numel());
  for (double& v : w) v = rng.uniform(-bound, bound);
  return ConvUnit{ps.add(name + ".w", ws, ParamRole::weight, std::move(w)), spec};
}

BatchNormUnit make_bn(ParamStore& ps, const std::string& name, int channels) {
  const Shape s{1, channels, 1, 1};
  BatchNormUnit u;
  u.channels = channels;
  u.gamma = ps.add(name + ".gamma", s, ParamRole::bn_gamma,
                   std::vector<double>(channels, 1.0));
  u.beta = ps.add(name + ".beta", s, ParamRole::bn_beta,
                  std::vector<double>(channels, 0.0));
  u.mean = ps.add(name + ".mean", s, ParamRole::bn_mean,
                  std::vector<double>(channels, 0.0));
  u.var = ps.add(name + ".var", s, ParamRole::bn_var,
                 std::vector<double>(channels, 1.0));
  return u;
}

GhostModule make_ghost(ParamStore& ps, Rng& rng, const std::string& name,
                       int c_in, int c_out, int k_ghost, bool activate) {
  GhostModule m;
  m.c_in = c_in;
  m.c_out = c_out;
  m.k_ghost = k_ghost;
  m.activate = activate;
  m.primary_channels = (c_out + 1) / 2;
  m.cheap_channels = c_out - m.primary_channels;
  m.primary = make_conv(ps, rng, name + ".primary", c_in, m.primary_channels, 1, {});
  m.primary_bn = make_bn(ps, name + ".primary_bn", m.primary_channels);
  if (m.cheap_channels > 0) {
    const ConvSpec dw{1, (k_ghost - 1) / 2, 1, m.cheap_channels};
    m.cheap = make_conv(ps, rng, name + ".cheap", m.cheap_channels,
                        m.cheap_channels, k_ghost, dw);
    m.cheap_bn = make_bn(ps, name + ".cheap_bn", m.cheap_channels);
  }
  return m;
}

SqueezeExcite make_se(ParamStore& ps, Rng& rng, const std::string& name,
                      int channels, int ratio) {
  SqueezeExcite m;
  m.channels = channels;
  m.reduced = se_reduced_channels(channels, ratio);
  m.reduce = make_conv(ps, rng, name + ".reduce", channels, m.reduced, 1, {});
  m.expand = make_conv(ps, rng, name + ".expand", m.reduced, channels, 1, {});
  return m;
}

Block make_block(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
                 int c_out, int kernel, int expansion, int k_ghost, int stride) {
  Block b;
  b.c_in = c_in;
  b.c_out = c_out;
  b.kernel = kernel;
  b.expansion = expansion;
  b.k_ghost = k_ghost;
  b.stride = stride;
  const int hidden = expansion * c_in;
  b.expand = make_ghost(ps, rng, name + ".expand", c_in, hidden, k_ghost, true);
  const ConvSpec dw{stride, (kernel - 1) / 2, 1, hidden};
  b.dw = make_conv(ps, rng, name + ".dw", hidden, hidden, kernel, dw);
  b.dw_bn = make_bn(ps, name + ".dw_bn", hidden);
  b.se = make_se(ps, rng, name + ".se", hidden);
  b.project = make_ghost(ps, rng, name + ".project", hidden, c_out, k_ghost, false);
  return b;
}

Skip make_skip(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
               int c_out, int stride) {
  Skip s;
  s.c_in = c_in;
  s.c_out = c_out;
  s.stride = stride;
  if (!s.identity()) {
    s.proj = make_conv(ps, rng, name + ".proj", c_in, c_out, 1, {stride, 0, 1, 1});
    s.bn = make_bn(ps, name + ".bn", c_out);
  }
  return s;
}

Fusion make_fusion(ParamStore& ps, Rng& rng, const std::string& name,
                   FusionVariant variant, std::span<const int> tap_channels,
                   int channels, int out_h, int out_w) {
  Fusion f;
  f.variant = variant;
  f.channels = channels;
  f.out_h = out_h;
  f.out_w = out_w;
  f.tap_channels.assign(tap_channels.begin(), tap_channels.end());
  for (std::size_t k = 0; k < tap_channels.size(); ++k) {
    const std::string p = name + ".proj" + std::to_string(k);
    f.proj.push_back(make_conv(ps, rng, p, tap_channels[k], channels, 1, {}));
    f.proj_bn.push_back(make_bn(ps, p + "_bn", channels));
  }
  switch (variant) {
    case FusionVariant::simple:
      break;
    case FusionVariant::dilated:
      f.extra = make_conv(ps, rng, name + ".dilated", channels, channels, 3,
                          {1, 2, 2, 1});
      f.extra_bn = make_bn(ps, name + ".dilated_bn", channels);
      break;
    case FusionVariant::se:
      f.se = make_se(ps, rng, name + ".se", channels);
      break;
    case FusionVariant::attention:
      f.extra = make_conv(ps, rng, name + ".mask", 2, 1, 7, {1, 3, 1, 1});
      break;
  }
  return f;
}

Stem make_stem(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
               int c_out) {
  Stem s;
  s.c_out = c_out;
  s.conv = make_conv(ps, rng, name + ".conv", c_in, c_out, 3, {2, 1, 1, 1});
  s.bn = make_bn(ps, name + ".bn", c_out);
  return s;
}

Head make_head(ParamStore& ps, Rng& rng, const std::string& name, int c_in,
               int keypoints) {
  Head h;
  h.c_in = c_in;
  h.keypoints = keypoints;
  h.dw = make_conv(ps, rng, name + ".dw", c_in, c_in, 3, {1, 1, 1, c_in});
  h.pw = make_conv(ps, rng, name + ".pw", c_in, keypoints, 1, {});
  return h;
}

// ---------------------------------------------------------------------------
// Forwards

Tensor conv_forward(ForwardContext& ctx, const ConvUnit& u, const Tensor& x) {
  return conv2d(x, ctx.param(u.weight), u.spec);
}

Tensor bn_forward(ForwardContext& ctx, const BatchNormUnit& u, const Tensor& x) {
  if (x.shape().c != u.channels)
    throw ShapeError("batch norm over " + std::to_string(u.channels) +
                     " channels got input " + x.shape().str());
  ParamStore& ps = ctx.store();
  BatchNormStats running{*ps[u.mean].value, *ps[u.var].value};
  BatchNormStats updated;
  const bool write_back = ctx.mode() == BnMode::train && ctx.update_running_stats();
  Tensor y = batchnorm2d(x, ctx.param(u.gamma), ctx.param(u.beta), ctx.mode(),
                         &running, write_back ? &updated : nullptr);
  if (write_back) {
    ps.set(u.mean, std::move(updated.mean));
    ps.set(u.var, std::move(updated.var));
  }
  return y;
}

Tensor ghost_forward(ForwardContext& ctx, const GhostModule& m, const Tensor& x) {
  if (x.shape().c != m.c_in)
    throw ShapeError("ghost module expects " + std::to_string(m.c_in) +
                     " channels, got " + x.shape().str());
  Tensor primary = bn_forward(ctx, m.primary_bn, conv_forward(ctx, m.primary, x));
  if (m.activate) primary = silu(primary);
  if (m.cheap_channels == 0) return primary;
  const Tensor src = m.cheap_channels == m.primary_channels
                         ? primary
                         : slice_channels(primary, 0, m.cheap_channels);
  Tensor cheap = bn_forward(ctx, m.cheap_bn, conv_forward(ctx, m.cheap, src));
  if (m.activate) cheap = silu(cheap);
  const Tensor parts[] = {primary, cheap};
  return concat_channels(parts);
}

Tensor se_forward(ForwardContext& ctx, const SqueezeExcite& m, const Tensor& x) {
  if (x.shape().c != m.channels)
    throw ShapeError("squeeze-excite expects " + std::to_string(m.channels) +
                     " channels, got " + x.shape().str());
  Tensor s = global_avg_pool(x);
  s = silu(conv_forward(ctx, m.reduce, s));
  s = sigmoid(conv_forward(ctx, m.expand, s));
  return mul(x, s);
}

Tensor block_forward(ForwardContext& ctx, const Block& b, const Tensor& x) {
  if (x.shape().c != b.c_in)
    throw ShapeError("block expects " + std::to_string(b.c_in) +
                     " channels, got " + x.shape().str());
  Tensor h = ghost_forward(ctx, b.expand, x);
  h = silu(bn_forward(ctx, b.dw_bn, conv_forward(ctx, b.dw, h)));
  h = se_forward(ctx, b.se, h);
  h = ghost_forward(ctx, b.project, h);
  if (b.residual()) h = add(h, x);
  return h;
}

Tensor skip_forward(ForwardContext& ctx, const Skip& s, const Tensor& x) {
  if (x.shape().c != s.c_in)
    throw ShapeError("skip expects " + std::to_string(s.c_in) +
                     " channels, got " + x.shape().str());
  if (s.identity()) return x;
  return bn_forward(ctx, s.bn, conv_forward(ctx, s.proj, x));
}

Tensor fusion_forward(ForwardContext& ctx, const Fusion& f,
                      std::span<const Tensor> taps) {
  if (taps.size() != f.tap_channels.size())
    throw ShapeError("fusion expects " + std::to_string(f.tap_channels.size()) +
                     " feature maps, got " + std::to_string(taps.size()));
  std::vector<Tensor> aligned;
  aligned.reserve(taps.size());
  for (std::size_t k = 0; k < taps.size(); ++k) {
    if (taps[k].shape().c != f.tap_channels[k])
      throw ShapeError("fusion input " + std::to_string(k) + " expects " +
                       std::to_string(f.tap_channels[k]) + " channels, got " +
                       taps[k].shape().str());
    Tensor p = silu(bn_forward(ctx, f.proj_bn[k], conv_forward(ctx, f.proj[k], taps[k])));
    aligned.push_back(resize_bilinear(p, f.out_h, f.out_w));
  }
  const Tensor merged = sum_of(aligned);
  switch (f.variant) {
    case FusionVariant::simple:
      return merged;
    case FusionVariant::dilated:
      return silu(bn_forward(ctx, f.extra_bn, conv_forward(ctx, f.extra, merged)));
    case FusionVariant::se:
      return se_forward(ctx, f.se, merged);
    case FusionVariant::attention: {
      const Tensor stats[] = {reduce(merged, ReduceKind::mean, ReduceAxes::channel),
                              reduce(merged, ReduceKind::max, ReduceAxes::channel)};
      const Tensor mask = sigmoid(conv_forward(ctx, f.extra, concat_channels(stats)));
      return mul(merged, mask);
    }
  }
  return merged;
}

Tensor stem_forward(ForwardContext& ctx, const Stem& s, const Tensor& x) {
  if (x.shape().c != 3)
    throw ShapeError("stem expects a 3-channel image, got " + x.shape().str());
  return silu(bn_forward(ctx, s.bn, conv_forward(ctx, s.conv, x)));
}

Tensor head_forward(ForwardContext& ctx, const Head& h, const Tensor& x) {
  if (x.shape().c != h.c_in)
    throw ShapeError("head expects " + std::to_string(h.c_in) +
                     " channels, got " + x.shape().str());
  return conv_forward(ctx, h.pw, conv_forward(ctx, h.dw, x));
}

}  // namespace fpg
