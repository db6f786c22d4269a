#include "fpg/flops.hpp"

namespace fpg {

Flops conv_flops(int c_in, int c_out, int kernel, int h_out, int w_out,
                 int groups) {
  return Flops{2} * static_cast<Flops>(h_out) * static_cast<Flops>(w_out) *
         static_cast<Flops>(c_out) * static_cast<Flops>(kernel) *
         static_cast<Flops>(kernel) * static_cast<Flops>(c_in / groups);
}

namespace {

Flops ghost_flops(int c_in, int c_out, int k_ghost, int h, int w) {
  const int primary = (c_out + 1) / 2;
  const int cheap = c_out - primary;
  Flops f = conv_flops(c_in, primary, 1, h, w, 1);
  if (cheap > 0) f += conv_flops(cheap, cheap, k_ghost, h, w, cheap);
  return f;
}

Flops se_flops(int channels) {
  const int reduced = se_reduced_channels(channels);
  return conv_flops(channels, reduced, 1, 1, 1, 1) +
         conv_flops(reduced, channels, 1, 1, 1, 1);
}

}  // namespace

Flops block_flops(const CandidateSpec& spec, const LayerSpec& layer) {
  if (spec.is_skip()) {
    if (layer.shape_preserving()) return 0;
    return conv_flops(layer.c_in, layer.c_out, 1, layer.out_h, layer.out_w, 1);
  }
  const int hidden = spec.expansion * layer.c_in;
  return ghost_flops(layer.c_in, hidden, spec.k_ghost, layer.in_h, layer.in_w) +
         conv_flops(hidden, hidden, spec.kernel, layer.out_h, layer.out_w, hidden) +
         se_flops(hidden) +
         ghost_flops(hidden, layer.c_out, spec.k_ghost, layer.out_h, layer.out_w);
}

Flops fusion_flops(FusionVariant variant, const MacroArch& macro) {
  const int F = macro.fusion_channels;
  const int h = macro.fusion_h, w = macro.fusion_w;
  Flops f = 0;
  for (const auto& t : macro.taps) f += conv_flops(t.channels, F, 1, t.h, t.w, 1);
  switch (variant) {
    case FusionVariant::simple:
      break;
    case FusionVariant::dilated:
      f += conv_flops(F, F, 3, h, w, 1);
      break;
    case FusionVariant::se:
      f += se_flops(F);
      break;
    case FusionVariant::attention:
      f += conv_flops(2, 1, 7, h, w, 1);
      break;
  }
  return f;
}

Flops stem_flops(const MacroArch& macro) {
  return conv_flops(3, macro.stem_channels, 3, macro.stem_h, macro.stem_w, 1);
}

Flops head_flops(const MacroArch& macro) {
  const int F = macro.fusion_channels;
  return conv_flops(F, F, 3, macro.fusion_h, macro.fusion_w, F) +
         conv_flops(F, macro.keypoints, 1, macro.fusion_h, macro.fusion_w, 1);
}

Flops stem_head_flops(const MacroArch& macro) {
  return stem_flops(macro) + head_flops(macro);
}

FlopsTable build_flops_table(const MacroArch& macro) {
  FlopsTable t;
  t.in_h = macro.in_h;
  t.in_w = macro.in_w;
  const auto& specs = enumerate_candidates();
  for (const auto& layer : macro.layers) {
    std::vector<Flops> row;
    for (const auto& s : specs) row.push_back(block_flops(s, layer));
    t.backbone.push_back(std::move(row));
  }
  for (int v = 0; v < kFusionVariants; ++v)
    t.fusion.push_back(fusion_flops(static_cast<FusionVariant>(v), macro));
  t.stem_head = stem_head_flops(macro);
  return t;
}

double FlopsTable::all_active(std::span<const double> fusion_weights) const {
  std::vector<std::vector<double>> ones;
  for (const auto& row : backbone) ones.emplace_back(row.size(), 1.0);
  return total_expected_flops(*this, ones, fusion_weights);
}

double total_expected_flops(const FlopsTable& table,
                            const std::vector<std::vector<double>>& gates,
                            std::span<const double> fusion_weights) {
  if (static_cast<int>(gates.size()) != table.layers() ||
      fusion_weights.size() != table.fusion.size())
    throw UsageError("total_expected_flops: gate/fusion dimensions do not match table");
  double total = 0;
  for (std::size_t l = 0; l < gates.size(); ++l) {
    if (gates[l].size() != table.backbone[l].size())
      throw UsageError("total_expected_flops: gate row " + std::to_string(l) +
                       " has wrong length");
    for (std::size_t i = 0; i < gates[l].size(); ++i)
      total += gates[l][i] * static_cast<double>(table.backbone[l][i]);
  }
  for (std::size_t k = 0; k < fusion_weights.size(); ++k)
    total += fusion_weights[k] * static_cast<double>(table.fusion[k]);
  return total + static_cast<double>(table.stem_head);
}

Tensor total_expected_flops(const FlopsTable& table,
                            const std::vector<Tensor>& gate_rows,
                            const Tensor& fusion_weights) {
  if (static_cast<int>(gate_rows.size()) != table.layers())
    throw UsageError("total_expected_flops: expected " +
                     std::to_string(table.layers()) + " gate rows");
  if (fusion_weights.numel() != table.fusion.size())
    throw UsageError("total_expected_flops: fusion weight count mismatch");
  std::vector<Tensor> terms;
  for (std::size_t l = 0; l < gate_rows.size(); ++l) {
    const auto& row = table.backbone[l];
    if (gate_rows[l].numel() != row.size())
      throw UsageError("total_expected_flops: gate row " + std::to_string(l) +
                       " has wrong length");
    std::vector<double> cost(row.begin(), row.end());
    terms.push_back(sum_all(mul(gate_rows[l], Tensor(gate_rows[l].shape(), cost))));
  }
  std::vector<double> fcost(table.fusion.begin(), table.fusion.end());
  terms.push_back(sum_all(mul(fusion_weights, Tensor(fusion_weights.shape(), fcost))));
  return affine(sum_of(terms), 1.0, static_cast<double>(table.stem_head));
}

void Budget::validate() const {
  if (!(flops > 0)) throw ConfigError("FLOPs budget must be > 0");
  if (!(unit > 0)) throw ConfigError("FLOPs unit must be > 0");
}

double budget_penalty(double total_flops, const Budget& budget, double lambda) {
  if (lambda < 0) throw ConfigError("budget_penalty: lambda must be >= 0");
  const double excess = (total_flops - budget.flops) / budget.unit;
  return lambda * (excess > 0 ? excess : 0.0);
}

Tensor budget_penalty(const Tensor& total_flops, const Budget& budget,
                      double lambda) {
  if (lambda < 0) throw ConfigError("budget_penalty: lambda must be >= 0");
  const Tensor excess =
      affine(total_flops, 1.0 / budget.unit, -budget.flops / budget.unit);
  return affine(relu(excess), lambda, 0.0);
}

double lambda_schedule(const Schedules& s, long t) {
  if (t <= 0) return s.lambda_start;
  if (t >= s.total_steps) return s.lambda_end;
  return s.lambda_start + (s.lambda_end - s.lambda_start) *
                              static_cast<double>(t) / s.total_steps;
}

Flops instrumented_count(const std::function<void(const Tensor&)>& fragment,
                         const Tensor& input) {
  MacCounterScope scope;
  fragment(input);
  return 2 * scope.macs() / static_cast<Flops>(input.shape().n);
}

}  // namespace fpg
