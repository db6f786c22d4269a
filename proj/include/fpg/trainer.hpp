#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fpg/config.hpp"
#include "fpg/dataset.hpp"
#include "fpg/derive.hpp"
#include "fpg/flops.hpp"

namespace fpg {

// Mean of squared differences over every entry.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

// Per keypoint channel: p = spatial softmax(logits), q = (t + 1e-12) / Σ(t +
// 1e-12); returns the mean over channels of Σ q log(q/p). Throws DomainError
// for negative targets or an all-zero target channel.
Tensor kl_loss(const Tensor& logits, const Tensor& target);

Tensor task_loss(TaskLoss kind, const Tensor& pred, const Tensor& target);

// lr_min + (lr_max - lr_min)(1 + cos(πt/T))/2, for 0 <= t <= T.
double cosine_lr(long t, long total, double lr_max = 1e-2, double lr_min = 1e-4);

// Scales all gradients jointly so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm);

// AdamW with bias correction and decoupled weight decay. Moments live in
// slots that are sized on first use.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Call once per optimizer step, before the per-slot updates.
  void begin_step() { ++step_; }
  void update(std::size_t slot, std::span<double> param,
              std::span<const double> grad, double lr, double weight_decay);

  long steps() const { return step_; }
  void set_steps(long s) { step_ = s; }
  std::size_t slots() const { return m_.size(); }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  double beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Fraction of keypoints whose predicted location (argmax cell scaled back to
// pixels, ties broken uniformly at random) lies within radius_px of the truth.
double pck_metric(const Tensor& heatmaps,
                  const std::vector<std::vector<Keypoint>>& keypoints,
                  double radius_px, Rng& tie_break);

struct EpochRecord {
  int epoch = 0;
  long step = 0;
  double expected_flops = 0;
  double budget = 0;
  std::vector<int> active_gates;  // per layer, weights >= 0.5
  double train_loss = 0;
  double val_loss = 0;
  double penalty = 0;
  double epsilon = 0, tau = 0, lambda = 0, alpha_lr = 0;
};

std::string history_line(const EpochRecord& r);

// Losses of one search step.
struct StepMetrics {
  double train_loss = 0;
  double val_loss = 0;
  double penalty = 0;
  double expected_flops = 0;
};

// Supernet search state. Every random draw comes from counter-based
// substreams of the config seed, so (config, step) fixes all randomness.
class Searcher {
 public:
  explicit Searcher(const SearchConfig& config);

  const SearchConfig& config() const { return config_; }
  const MacroArch& macro() const { return net_.macro; }
  const FlopsTable& table() const { return table_; }
  const Budget& budget() const { return budget_; }
  const Schedules& schedules() const { return sched_; }
  const Network& network() const { return net_; }
  Network& network() { return net_; }
  const GateParams& gates() const { return gates_; }
  GateParams& gates() { return gates_; }
  long step() const { return step_; }
  long total_steps() const { return sched_.total_steps; }
  bool finished() const { return step_ >= sched_.total_steps; }
  const std::vector<EpochRecord>& history() const { return history_; }

  // One search step; the step that completes an epoch also appends its
  // history record.
  StepMetrics search_step();
  // Runs steps until the end of the current epoch and records it.
  EpochRecord run_epoch();
  // Runs to completion; `on_epoch` sees every new history record.
  void run(const std::function<void(const EpochRecord&)>& on_epoch = {});

  // Expected FLOPs at step t with noise-free fusion weights softmax(logits/τ).
  double expected_flops() const;
  std::vector<std::vector<double>> layer_weights() const;
  std::vector<double> fusion_weights() const;
  ArchGenome derive() const;

  // Running sums over the steps of the unfinished epoch.
  struct EpochAccumulator {
    double train = 0, val = 0, penalty = 0;
    long count = 0;
  };

  // Checkpoint plumbing.
  AdamW& weight_optimizer() { return w_opt_; }
  AdamW& alpha_optimizer() { return a_opt_; }
  const AdamW& weight_optimizer() const { return w_opt_; }
  const AdamW& alpha_optimizer() const { return a_opt_; }
  const EpochAccumulator& accumulator() const { return acc_; }
  void restore(long step, std::vector<EpochRecord> history,
               const EpochAccumulator& acc);

 private:
  Batch train_batch(long t) const;
  Batch val_batch(long t) const;
  std::vector<double> gumbel(long t) const;
  double gamma_at(long t) const;
  void weight_step(long t, const Batch& b, StepMetrics& m);
  void arch_step(long t, const Batch& b, StepMetrics& m);
  void joint_step(long t, const Batch& b, StepMetrics& m);
  void close_epoch();

  SearchConfig config_;
  Network net_;
  FlopsTable table_;
  Budget budget_;
  Schedules sched_;
  Dataset train_, val_;
  GateParams gates_;
  AdamW w_opt_, a_opt_;
  long step_ = 0;
  std::vector<EpochRecord> history_;
  EpochAccumulator acc_;
};

struct RetrainResult {
  double final_loss = 0;  // task loss on the test split
  double pck = 0;         // PCK@radius on the test split
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

// Trains the genome's standalone network from scratch on train + val with
// AdamW at the weight learning rate, then evaluates on the test split.
RetrainResult retrain_derived(const ArchGenome& genome, const SearchConfig& config);

}  // namespace fpg
