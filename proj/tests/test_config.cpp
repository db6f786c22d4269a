#include <gtest/gtest.h>

#include "fpg/config.hpp"

namespace fpg {
namespace {

TEST(Config, DefaultsFromMinimalText) {
  const SearchConfig c = parse_config(R"({"version": 1})");
  EXPECT_EQ(c.profile, Profile::desk);
  EXPECT_EQ(c.input, 64);
  EXPECT_EQ(c.epochs, 20);
  EXPECT_EQ(c.batch_size, 8);
  EXPECT_EQ(c.strategy, Strategy::fpg);
  EXPECT_EQ(c.bilevel, Bilevel::alternating);
  EXPECT_EQ(c.task_loss, TaskLoss::kl);
  EXPECT_EQ(c.optimizer.weight_lr, 1e-3);
  EXPECT_EQ(c.optimizer.weight_decay, 1e-2);
  EXPECT_EQ(c.optimizer.alpha_lr_max, 1e-2);
  EXPECT_EQ(c.optimizer.alpha_lr_min, 1e-4);
  EXPECT_EQ(c.optimizer.alpha_weight_decay, 0.0);
  EXPECT_EQ(c.optimizer.clip_norm, 1.0);
  EXPECT_EQ(c.flops_unit, 1e9);
  EXPECT_EQ(c.budget_fraction, 0.6);
  EXPECT_FALSE(c.budget_flops.has_value());
  EXPECT_EQ(c.steps_per_epoch(), 64);
  EXPECT_EQ(c.total_steps(), 1280);
}

TEST(Config, DumpParsesBackToTheSameConfig) {
  SearchConfig c = parse_config(R"({"version": 1, "strategy": "dnal", "bilevel": "joint",
    "task_loss": "mse", "budget": {"flops": 5e7}, "schedules": {"tau_end": 0.25},
    "optimizer": {"clip_norm": 2.0}, "seed": 12, "proxy_fraction": 0.5})");
  EXPECT_EQ(c.strategy, Strategy::dnal);
  EXPECT_EQ(*c.budget_flops, 5e7);
  EXPECT_EQ(c.schedules.tau_end, 0.25);
  EXPECT_EQ(c.search_train_samples(), 256);
  EXPECT_EQ(dump_config(parse_config(dump_config(c))), dump_config(c));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("{"), ConfigError);
  EXPECT_THROW(parse_config("{}"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 2})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "epoch": 3})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "optimizer": {"lr": 3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "epochs": "3"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "epochs": 2.5})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "seed": -1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "epochs": 0})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "input": 48})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "strategy": "enas"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "theta": 1.0})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "budget": {"flops": 0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "schedules": {"eps_end": -1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"version": 1, "train_samples": 4})"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
  try {
    parse_config(R"({"version": 1, "optimizer": {"lr": 3}})");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/optimizer/lr"), std::string::npos);
  }
}

TEST(Config, ShippedConfigsLoad) {
  const SearchConfig ref = load_config(std::string(FPG_SOURCE_DIR) + "/configs/reference.json");
  EXPECT_EQ(ref.epochs, 20);
  EXPECT_EQ(ref.input, 64);
  EXPECT_EQ(ref.profile, Profile::desk);
  EXPECT_NO_THROW(load_config(std::string(FPG_SOURCE_DIR) + "/configs/smoke.json"));
}

}  // namespace
}  // namespace fpg
