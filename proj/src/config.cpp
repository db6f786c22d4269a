#include "fpg/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fpg {

using nlohmann::json;

const char* bilevel_name(Bilevel b) {
  return b == Bilevel::alternating ? "alternating" : "joint";
}

Bilevel parse_bilevel(const std::string& s) {
  if (s == "alternating") return Bilevel::alternating;
  if (s == "joint") return Bilevel::joint;
  throw ConfigError("unknown bilevel mode '" + s + "' (expected alternating|joint)");
}

const char* task_loss_name(TaskLoss l) { return l == TaskLoss::kl ? "kl" : "mse"; }

TaskLoss parse_task_loss(const std::string& s) {
  if (s == "kl") return TaskLoss::kl;
  if (s == "mse") return TaskLoss::mse;
  throw ConfigError("unknown task loss '" + s + "' (expected kl|mse)");
}

int SearchConfig::search_train_samples() const {
  return static_cast<int>(std::ceil(proxy_fraction * train_samples));
}

long SearchConfig::steps_per_epoch() const {
  return std::max(1, search_train_samples() / batch_size);
}

void SearchConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  need(input > 0 && input % 32 == 0, "input must be a positive multiple of 32");
  need(keypoints >= 1, "keypoints must be >= 1");
  need(epochs >= 1, "epochs must be >= 1");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(proxy_fraction > 0 && proxy_fraction <= 1, "proxy_fraction must lie in (0, 1]");
  need(search_train_samples() >= batch_size,
       "train split smaller than one batch");
  need(val_samples >= 1, "val_samples must be >= 1");
  need(test_samples >= 1, "test_samples must be >= 1");
  need(!budget_flops || *budget_flops > 0, "budget.flops must be > 0");
  need(budget_fraction > 0, "budget.fraction must be > 0");
  need(flops_unit > 0, "flops_unit must be > 0");
  const auto& o = optimizer;
  need(o.weight_lr > 0 && o.alpha_lr_max > 0 && o.alpha_lr_min > 0,
       "learning rates must be > 0");
  need(o.alpha_lr_min <= o.alpha_lr_max, "alpha_lr_min must not exceed alpha_lr_max");
  need(o.weight_decay >= 0 && o.alpha_weight_decay >= 0, "weight decay must be >= 0");
  need(o.clip_norm > 0, "clip_norm must be > 0");
  need(o.beta1 >= 0 && o.beta1 < 1 && o.beta2 >= 0 && o.beta2 < 1,
       "betas must lie in [0, 1)");
  need(o.eps > 0, "optimizer eps must be > 0");
  need(theta > 0 && theta < 1, "theta must lie in (0, 1)");
  need(pck_radius > 0, "pck_radius must be > 0");
  Schedules s = schedules;
  s.total_steps = 1;
  s.validate();
}

namespace {

// Reads typed fields from one JSON object and remembers which keys were seen.
class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config " + at() + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    seen_.insert(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>)
          if (it->get<long long>() < 0 && !it->is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config " + at(key) + ": wrong type");
    }
  }

  template <typename E>
  void get_enum(const std::string& key, E& out, E (*parse)(const std::string&)) {
    std::string s;
    if (!obj_.contains(key)) return;
    get(key, s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError("config " + at(key) + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  std::optional<Reader> child(const std::string& key) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return std::nullopt;
    seen_.insert(key);
    return Reader(*it, at(key));
  }

  // Rejects any key that no get/child call asked for.
  void finish() const {
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) throw ConfigError("config " + at(k) + ": unknown key");
  }

 private:
  std::string at(const std::string& key = "") const {
    return path_ + (key.empty() ? "" : "/" + key);
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

SearchConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error at byte " + std::to_string(e.byte) +
                      ": " + e.what());
  }
  SearchConfig c;
  Reader r(j, "");
  int version = -1;
  r.get("version", version);
  if (version != kConfigVersion)
    throw ConfigError("config /version: expected " + std::to_string(kConfigVersion));
  r.get_enum("profile", c.profile, &parse_profile);
  r.get("input", c.input);
  r.get("keypoints", c.keypoints);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get_enum("strategy", c.strategy, &parse_strategy);
  r.get_enum("bilevel", c.bilevel, &parse_bilevel);
  r.get_enum("task_loss", c.task_loss, &parse_task_loss);
  r.get("freeze_alpha", c.freeze_alpha);
  r.get("train_samples", c.train_samples);
  r.get("val_samples", c.val_samples);
  r.get("test_samples", c.test_samples);
  r.get("proxy_fraction", c.proxy_fraction);
  r.get("flops_unit", c.flops_unit);
  r.get("theta", c.theta);
  r.get("pck_radius", c.pck_radius);
  r.get("output_dir", c.output_dir);
  if (auto b = r.child("budget")) {
    if (b->has("flops")) {
      double flops = 0;
      b->get("flops", flops);
      c.budget_flops = flops;
    }
    b->get("fraction", c.budget_fraction);
    b->finish();
  }
  if (auto o = r.child("optimizer")) {
    auto& op = c.optimizer;
    o->get("weight_lr", op.weight_lr);
    o->get("weight_decay", op.weight_decay);
    o->get("alpha_lr_max", op.alpha_lr_max);
    o->get("alpha_lr_min", op.alpha_lr_min);
    o->get("alpha_weight_decay", op.alpha_weight_decay);
    o->get("clip_norm", op.clip_norm);
    o->get("beta1", op.beta1);
    o->get("beta2", op.beta2);
    o->get("eps", op.eps);
    o->finish();
  }
  if (auto s = r.child("schedules")) {
    auto& sc = c.schedules;
    s->get("eps_start", sc.eps_start);
    s->get("eps_end", sc.eps_end);
    s->get("tau_start", sc.tau_start);
    s->get("tau_end", sc.tau_end);
    s->get("lambda_start", sc.lambda_start);
    s->get("lambda_end", sc.lambda_end);
    s->get("gamma_start", sc.gamma_start);
    s->get("gamma_end", sc.gamma_end);
    s->finish();
  }
  r.finish();
  c.validate();
  return c;
}

SearchConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const SearchConfig& c) {
  json j;
  j["version"] = kConfigVersion;
  j["profile"] = profile_name(c.profile);
  j["input"] = c.input;
  j["keypoints"] = c.keypoints;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["strategy"] = strategy_name(c.strategy);
  j["bilevel"] = bilevel_name(c.bilevel);
  j["task_loss"] = task_loss_name(c.task_loss);
  j["freeze_alpha"] = c.freeze_alpha;
  j["train_samples"] = c.train_samples;
  j["val_samples"] = c.val_samples;
  j["test_samples"] = c.test_samples;
  j["proxy_fraction"] = c.proxy_fraction;
  j["flops_unit"] = c.flops_unit;
  j["theta"] = c.theta;
  j["pck_radius"] = c.pck_radius;
  j["output_dir"] = c.output_dir;
  j["budget"] = {{"fraction", c.budget_fraction}};
  if (c.budget_flops) j["budget"]["flops"] = *c.budget_flops;
  const auto& o = c.optimizer;
  j["optimizer"] = {{"weight_lr", o.weight_lr},
                    {"weight_decay", o.weight_decay},
                    {"alpha_lr_max", o.alpha_lr_max},
                    {"alpha_lr_min", o.alpha_lr_min},
                    {"alpha_weight_decay", o.alpha_weight_decay},
                    {"clip_norm", o.clip_norm},
                    {"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"eps", o.eps}};
  const auto& s = c.schedules;
  j["schedules"] = {{"eps_start", s.eps_start},     {"eps_end", s.eps_end},
                    {"tau_start", s.tau_start},     {"tau_end", s.tau_end},
                    {"lambda_start", s.lambda_start}, {"lambda_end", s.lambda_end},
                    {"gamma_start", s.gamma_start}, {"gamma_end", s.gamma_end}};
  return j.dump(2);
}

}  // namespace fpg
