#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fpg/checkpoint.hpp"
#include "fpg/derive.hpp"
#include "fpg/gradcheck.hpp"
#include "fpg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw fpg::DataError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw fpg::DataError("cannot write '" + path.string() + "'");
  out << text;
}

fpg::ArchGenome load_genome(const std::string& path) {
  return fpg::import_genome(read_file(path));
}

// Genome with its macro rebuilt at another square resolution.
fpg::MacroArch macro_at(const fpg::ArchGenome& g, int resolution) {
  return resolution > 0 ? fpg::build_macro(g.profile, resolution, resolution, g.keypoints)
                        : fpg::genome_macro(g);
}

json flops_report(const fpg::MacroArch& macro, const fpg::FlopsTable& table,
                  const std::vector<std::vector<double>>& gates,
                  const std::vector<double>& fusion_weights) {
  json r;
  r["profile"] = fpg::profile_name(macro.profile);
  r["resolution"] = {macro.in_h, macro.in_w};
  r["convention"] = "2 FLOPs per conv multiply-accumulate, per sample";
  r["stem_head"] = table.stem_head;
  json fusion = json::object();
  for (int v = 0; v < fpg::kFusionVariants; ++v)
    fusion[fpg::fusion_name(static_cast<fpg::FusionVariant>(v))] = table.fusion[v];
  r["fusion"] = fusion;
  const auto& specs = fpg::enumerate_candidates();
  json layers = json::array();
  for (const auto& l : macro.layers) {
    json cands = json::array();
    for (int i = 0; i < fpg::kCandidates; ++i)
      cands.push_back({{"index", i},
                       {"label", specs[i].label()},
                       {"flops", table.backbone[l.index][i]},
                       {"gate", gates[l.index][i]}});
    layers.push_back({{"index", l.index},
                      {"c_in", l.c_in},
                      {"c_out", l.c_out},
                      {"stride", l.stride},
                      {"input", {l.in_h, l.in_w}},
                      {"candidates", cands}});
  }
  r["layers"] = layers;
  r["fusion_weights"] = fusion_weights;
  r["expected_total"] = fpg::total_expected_flops(table, gates, fusion_weights);
  const std::vector<double> uniform(fpg::kFusionVariants, 1.0 / fpg::kFusionVariants);
  r["all_active_uniform_fusion"] = table.all_active(uniform);
  return r;
}

int cmd_search(const std::string& config_path, const std::string& strategy,
               const std::string& output, const std::string& resume, int epochs,
               long long seed, bool quiet) {
  fpg::SearchConfig cfg;
  std::unique_ptr<fpg::Searcher> s;
  if (!resume.empty()) {
    s = std::make_unique<fpg::Searcher>(fpg::resume_search(resume));
    cfg = s->config();
  } else {
    cfg = fpg::load_config(config_path);
    if (!strategy.empty()) cfg.strategy = fpg::parse_strategy(strategy);
    if (epochs > 0) cfg.epochs = epochs;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (!output.empty()) cfg.output_dir = output;
    s = std::make_unique<fpg::Searcher>(cfg);
  }
  const fs::path out = output.empty() ? fs::path(cfg.output_dir) : fs::path(output);
  fs::create_directories(out);
  const fs::path ckpt = out / "checkpoint";
  const fs::path history = out / "history.jsonl";
  auto write_history = [&] {
    std::string text;
    for (const auto& e : s->history()) text += fpg::history_line(e) + "\n";
    write_file(history, text);
  };
  if (!quiet)
    std::printf("search: %s, %ld steps, budget %.6g FLOPs\n",
                fpg::strategy_name(cfg.strategy), s->total_steps(), s->budget().flops);
  try {
    s->run([&](const fpg::EpochRecord& e) {
      write_history();
      fpg::save_checkpoint(*s, ckpt.string());
      if (!quiet)
        std::printf("epoch %d: expected %.6g FLOPs, train %.5f, val %.5f, penalty %.3g\n",
                    e.epoch, e.expected_flops, e.train_loss, e.val_loss, e.penalty);
      std::fflush(stdout);
    });
  } catch (const fpg::NumericError&) {
    fpg::save_checkpoint(*s, (out / "nan_snapshot").string());
    throw;
  }
  write_history();
  fpg::save_checkpoint(*s, ckpt.string());
  const fpg::ArchGenome g = s->derive();
  write_file(out / "genome.json", fpg::export_genome(g) + "\n");
  const auto flops = fpg::genome_flops_exact(g, s->table());
  std::printf("genome %s: %d candidates kept, %llu FLOPs (budget %.6g)\n",
              fpg::genome_hash(g).c_str(), g.kept(),
              static_cast<unsigned long long>(flops), s->budget().flops);
  return kOk;
}

int cmd_derive(const std::string& checkpoint, double theta, const std::string& output) {
  const fpg::CheckpointGates cg = fpg::load_checkpoint_gates(checkpoint);
  const fpg::MacroArch macro = fpg::build_macro(cg.config.profile, cg.config.input,
                                                cg.config.input, cg.config.keypoints);
  if (cg.gates.layers() != macro.num_layers())
    throw fpg::DataError("checkpoint gate rows do not match the configured macro");
  fpg::DiscretizeOptions o;
  o.strategy = cg.config.strategy;
  o.theta = theta;
  o.gamma = cg.gamma;
  fpg::ArchGenome g = fpg::discretize(cg.gates, macro, o);
  g.meta.seed = cg.config.seed;
  const auto flops = fpg::genome_flops_exact(g, fpg::build_flops_table(macro));
  const std::string text = fpg::export_genome(g);
  const fs::path out = output.empty() ? fs::path(checkpoint) / "genome.json" : fs::path(output);
  write_file(out, text + "\n");
  std::printf("%s\nexact_flops: %llu\n", text.c_str(), static_cast<unsigned long long>(flops));
  return kOk;
}

int cmd_retrain(const std::string& genome_path, const std::string& config_path,
                const std::string& output, int epochs) {
  fpg::SearchConfig cfg = fpg::load_config(config_path);
  if (epochs > 0) cfg.epochs = epochs;
  const fpg::ArchGenome g = load_genome(genome_path);
  try {
    fpg::validate_genome(g, fpg::genome_macro(g).num_layers());
  } catch (const fpg::UsageError& e) {
    throw fpg::DataError(std::string("invalid genome: ") + e.what());
  }
  const fpg::RetrainResult r = fpg::retrain_derived(g, cfg);
  json j;
  j["genome_hash"] = fpg::genome_hash(g);
  j["exact_flops"] = fpg::genome_flops_exact(g, fpg::build_flops_table(fpg::genome_macro(g)));
  j["final_loss"] = r.final_loss;
  j["pck"] = r.pck;
  j["pck_radius"] = cfg.pck_radius;
  j["epoch_losses"] = r.epoch_losses;
  const std::string text = j.dump(2);
  write_file(output.empty() ? fs::path(cfg.output_dir) / "metrics.json" : fs::path(output),
             text + "\n");
  std::printf("%s\n", text.c_str());
  return kOk;
}

int cmd_flops(const std::string& genome_path, const std::string& checkpoint, int resolution,
              const std::string& output) {
  if (genome_path.empty() == checkpoint.empty())
    throw fpg::ConfigError("flops: give exactly one of --genome or --checkpoint");
  if (resolution < 0) throw fpg::ConfigError("flops: resolution must be positive");
  json report;
  if (!genome_path.empty()) {
    const fpg::ArchGenome g = load_genome(genome_path);
    const fpg::MacroArch macro = macro_at(g, resolution);
    const fpg::FlopsTable table = fpg::build_flops_table(macro);
    std::vector<std::vector<double>> gates(macro.num_layers(),
                                           std::vector<double>(fpg::kCandidates, 0.0));
    if (g.layer_count() != macro.num_layers())
      throw fpg::DataError("genome layer count does not match its profile");
    for (int l = 0; l < g.layer_count(); ++l)
      for (int i : g.layers[l]) gates[l][i] = 1.0;
    std::vector<double> fw(fpg::kFusionVariants, 0.0);
    fw[g.fusion] = 1.0;
    report = flops_report(macro, table, gates, fw);
    report["source"] = "genome";
    report["exact_total"] = fpg::genome_flops_exact(g, table);
  } else {
    const fpg::CheckpointGates cg = fpg::load_checkpoint_gates(checkpoint);
    const int res = resolution > 0 ? resolution : cg.config.input;
    const fpg::MacroArch macro =
        fpg::build_macro(cg.config.profile, res, res, cg.config.keypoints);
    if (cg.gates.layers() != macro.num_layers())
      throw fpg::DataError("checkpoint gate rows do not match the configured macro");
    std::vector<std::vector<double>> gates;
    for (const auto& row : cg.gates.alpha)
      gates.push_back(
          fpg::candidate_weights(cg.config.strategy, row, cg.gates.epsilon, cg.gamma));
    const std::vector<double> zero(fpg::kFusionVariants, 0.0);
    const auto fw = fpg::gumbel_softmax(cg.gates.fusion_logits, cg.tau, zero);
    report = flops_report(macro, fpg::build_flops_table(macro), gates, fw);
    report["source"] = "checkpoint";
    report["step"] = cg.gates.step;
  }
  const std::string text = report.dump(2);
  if (!output.empty()) write_file(output, text + "\n");
  std::printf("%s\n", text.c_str());
  return kOk;
}

int cmd_gradcheck(const std::string& scope, long long seed) {
  std::vector<fpg::GradScope> scopes;
  if (scope == "all")
    scopes = {fpg::GradScope::gate, fpg::GradScope::ops, fpg::GradScope::block,
              fpg::GradScope::fusion, fpg::GradScope::supernet};
  else
    scopes = {fpg::parse_grad_scope(scope)};
  double worst = 0;
  bool ok = true;
  for (fpg::GradScope s : scopes)
    for (const auto& r : fpg::run_gradcheck(s, static_cast<std::uint64_t>(seed))) {
      std::printf("%-48s %.3e  (tol %.0e) %s\n", r.name.c_str(), r.max_rel_error,
                  r.tolerance, r.passed() ? "ok" : "FAIL");
      worst = std::max(worst, r.max_rel_error);
      ok = ok && r.passed();
    }
  std::printf("max relative error: %.3e\n", worst);
  return ok ? kOk : kNumeric;
}

int cmd_space(int layers, int candidates, int fusions) {
  if (layers < 1 || candidates < 1 || fusions < 1)
    throw fpg::ConfigError("space: layers, candidates and fusion must be >= 1");
  const std::string n = fpg::space_cardinality(layers, candidates, fusions).str();
  std::printf("cardinality: %s\ndigits: %zu\n", n.c_str(), n.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Polarized-gate architecture search for keypoint heatmap networks"};
  app.require_subcommand(1);

  std::string config, strategy, output, resume, genome, checkpoint, scope = "all";
  int epochs = 0, resolution = 0, layers = 16, candidates = 19, fusions = 4;
  long long seed = -1;
  double theta = 0.5;
  bool quiet = false;

  auto* search = app.add_subcommand("search", "Run a supernet search");
  search->add_option("--config", config, "Config JSON");
  search->add_option("--strategy", strategy, "fpg|darts|dnal (overrides the config)");
  search->add_option("--epochs", epochs, "Override the epoch count");
  search->add_option("--seed", seed, "Override the seed");
  search->add_option("--output", output, "Output directory");
  search->add_option("--resume", resume, "Resume from a checkpoint directory");
  search->add_flag("--quiet", quiet, "Only print the final genome line");

  auto* derive = app.add_subcommand("derive", "Discretize a checkpoint into a genome");
  derive->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  derive->add_option("--theta", theta, "Keep threshold on gate values");
  derive->add_option("--output", output, "Genome file (default: <checkpoint>/genome.json)");

  auto* retrain = app.add_subcommand("retrain", "Retrain a genome from scratch");
  retrain->add_option("--genome", genome, "Genome JSON")->required();
  retrain->add_option("--config", config, "Config JSON")->required();
  retrain->add_option("--epochs", epochs, "Override the epoch count");
  retrain->add_option("--output", output, "Metrics file (default: <output_dir>/metrics.json)");

  auto* flops = app.add_subcommand("flops", "FLOPs report for a genome or checkpoint");
  flops->add_option("--genome", genome, "Genome JSON");
  flops->add_option("--checkpoint", checkpoint, "Checkpoint directory");
  flops->add_option("--resolution", resolution, "Square input side (multiple of 32)");
  flops->add_option("--output", output, "Report file");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--scope", scope, "gate|ops|block|fusion|supernet|all");
  grad->add_option("--seed", seed, "Seed for the random probes");

  auto* space = app.add_subcommand("space", "Exact search-space cardinality");
  space->add_option("--layers", layers, "Searchable layers");
  space->add_option("--candidates", candidates, "Candidates per layer");
  space->add_option("--fusion", fusions, "Fusion variants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*search) {
      if (config.empty() && resume.empty())
        throw fpg::ConfigError("search: --config or --resume is required");
      return cmd_search(config, strategy, output, resume, epochs, seed, quiet);
    }
    if (*derive) return cmd_derive(checkpoint, theta, output);
    if (*retrain) return cmd_retrain(genome, config, output, epochs);
    if (*flops) return cmd_flops(genome, checkpoint, resolution, output);
    if (*grad) return cmd_gradcheck(scope, seed < 0 ? 0 : seed);
    if (*space) return cmd_space(layers, candidates, fusions);
  } catch (const fpg::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const fpg::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const fpg::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const fpg::UsageError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
