#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fpg/gating.hpp"
#include "fpg/searchspace.hpp"

namespace fpg {

// FLOPs are counted as 2 per multiply-accumulate inside convolutions only;
// batch norm, activations, pooling, resampling and elementwise ops are free.
using Flops = std::uint64_t;

Flops conv_flops(int c_in, int c_out, int kernel, int h_out, int w_out,
                 int groups);

Flops block_flops(const CandidateSpec& spec, const LayerSpec& layer);
Flops fusion_flops(FusionVariant variant, const MacroArch& macro);
Flops stem_flops(const MacroArch& macro);
Flops head_flops(const MacroArch& macro);
Flops stem_head_flops(const MacroArch& macro);

struct FlopsTable {
  std::vector<std::vector<Flops>> backbone;  // [layer][candidate]
  std::vector<Flops> fusion;                 // [variant]
  Flops stem_head = 0;
  int in_h = 0, in_w = 0;

  int layers() const { return static_cast<int>(backbone.size()); }
  // Every candidate active, fusion weighted by `fusion_weights`.
  double all_active(std::span<const double> fusion_weights) const;
};

FlopsTable build_flops_table(const MacroArch& macro);

// Σ_{l,i} g_{l,i} F_{l,i} + Σ_k w_k F_k + F_stem+head.
double total_expected_flops(const FlopsTable& table,
                            const std::vector<std::vector<double>>& gates,
                            std::span<const double> fusion_weights);
// Differentiable form over gate rows (1,19,1,1) and fusion weights (1,4,1,1).
Tensor total_expected_flops(const FlopsTable& table,
                            const std::vector<Tensor>& gate_rows,
                            const Tensor& fusion_weights);

struct Budget {
  double flops = 0;   // target cost, in FLOPs
  double unit = 1e9;  // penalty is measured in multiples of this many FLOPs
  void validate() const;
};

// λ · max(0, total − budget), both sides expressed in budget.unit.
double budget_penalty(double total_flops, const Budget& budget, double lambda);
Tensor budget_penalty(const Tensor& total_flops, const Budget& budget,
                      double lambda);

// Linear ramp λ_start → λ_end over the schedule.
double lambda_schedule(const Schedules& s, long t);

// Runs `fragment` with the counting conv kernel and returns 2 × executed
// MACs per sample of `input`.
Flops instrumented_count(const std::function<void(const Tensor&)>& fragment,
                         const Tensor& input);

}  // namespace fpg
