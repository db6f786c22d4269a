#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "fpg/gating.hpp"
#include "fpg/searchspace.hpp"

namespace fpg {

inline constexpr int kConfigVersion = 1;

enum class Bilevel { alternating, joint };
enum class TaskLoss { kl, mse };

const char* bilevel_name(Bilevel b);
Bilevel parse_bilevel(const std::string& s);
const char* task_loss_name(TaskLoss l);
TaskLoss parse_task_loss(const std::string& s);

struct OptimizerConfig {
  double weight_lr = 1e-3;
  double weight_decay = 1e-2;
  double alpha_lr_max = 1e-2;
  double alpha_lr_min = 1e-4;
  double alpha_weight_decay = 0.0;
  double clip_norm = 1.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct SearchConfig {
  Profile profile = Profile::desk;
  int input = 64;  // square input side
  int keypoints = 4;
  int epochs = 20;
  int batch_size = 8;
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::fpg;
  Bilevel bilevel = Bilevel::alternating;
  TaskLoss task_loss = TaskLoss::kl;
  bool freeze_alpha = false;

  int train_samples = 512;
  int val_samples = 512;
  int test_samples = 128;
  double proxy_fraction = 1.0;  // share of the train split used by search

  // Budget: absolute FLOPs if set, else a fraction of the all-active cost.
  std::optional<double> budget_flops;
  double budget_fraction = 0.6;
  double flops_unit = 1e9;

  OptimizerConfig optimizer;
  Schedules schedules;  // total_steps is derived from epochs and data size
  double theta = 0.5;
  double pck_radius = 4.0;

  std::string output_dir = "run";

  // Throws ConfigError naming the first invalid field.
  void validate() const;
  int search_train_samples() const;
  long steps_per_epoch() const;
  long total_steps() const { return steps_per_epoch() * epochs; }
};

// Versioned JSON; unknown keys are rejected with their path.
SearchConfig parse_config(const std::string& text);
SearchConfig load_config(const std::string& path);
std::string dump_config(const SearchConfig& c);

}  // namespace fpg
