#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "mtlgen/harness.hpp"

namespace {

// Exit codes: 0 success, 1 validation error, 2 runtime failure.
constexpr int kValidationError = 1;
constexpr int kRuntimeError = 2;

struct Options {
  std::string config_path;
  std::string out_dir;
  std::string topology;
  std::string mode;
  std::optional<std::uint64_t> seed;
  bool skip_ablation = false;
};

mtlgen::ExperimentConfig load_config(const Options& o) {
  auto c = o.config_path.empty() ? mtlgen::ExperimentConfig{} : mtlgen::ExperimentConfig::load(o.config_path);
  if (!o.out_dir.empty()) c.out_dir = o.out_dir;
  c.validate();
  return c;
}

std::string require_topology(const Options& o, const char* cmd) {
  if (o.topology.empty()) throw mtlgen::ConfigError(std::string(cmd) + ": --topology is required");
  if (o.topology != mtlgen::kHybrid) mtlgen::parse_topology(o.topology);
  return o.topology;
}

std::optional<mtlgen::GenerationMode> requested_mode(const Options& o) {
  if (o.mode.empty()) return std::nullopt;
  return mtlgen::parse_mode(o.mode);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mtlgen: multitask hierarchical listing generation on a synthetic garment catalog"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON experiment config (defaults apply when omitted)");
    sub->add_option("--out", o.out_dir, "output directory (overrides the config)");
  };
  auto add_run = [&](CLI::App* sub) {
    sub->add_option("--topology", o.topology, "mtl_hier, siloed_attr, siloed_price, direct_cross_attn, "
                                              "direct_unified, no_mtl or hybrid");
    sub->add_option("--seed", o.seed, "run seed (default: the first configured seed)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the catalog splits, schema and vocabulary");
  add_common(gen);
  auto* train = app.add_subcommand("train", "train one topology preset");
  add_common(train);
  add_run(train);
  auto* eval = app.add_subcommand("eval", "evaluate a trained run on the test split");
  add_common(eval);
  add_run(eval);
  eval->add_option("--mode", o.mode, "hierarchical, non-hierarchical or direct");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate mtl_hier over the loss-weight grid");
  add_common(ablate);
  auto* bench = app.add_subcommand("bench", "single-sample latency of trained runs");
  add_common(bench);
  add_run(bench);
  auto* report = app.add_subcommand("report", "render markdown and CSV tables");
  add_common(report);
  auto* pipeline = app.add_subcommand("pipeline", "gen-data, train + eval every preset and seed, ablate, bench, report");
  add_common(pipeline);
  pipeline->add_flag("--skip-ablation", o.skip_ablation, "leave out the loss-weight grid");
  auto* config = app.add_subcommand("config", "print the effective configuration as JSON");
  add_common(config);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kValidationError;
  }

  try {
    const auto cfg = load_config(o);
    const std::uint64_t seed = o.seed.value_or(cfg.seeds.front());
    if (*gen) {
      mtlgen::cmd_gen_data(cfg, std::cout);
    } else if (*train) {
      mtlgen::cmd_train(cfg, require_topology(o, "train"), seed, std::cout);
    } else if (*eval) {
      mtlgen::cmd_eval(cfg, require_topology(o, "eval"), seed, requested_mode(o), std::cout);
    } else if (*ablate) {
      mtlgen::cmd_ablate(cfg, std::cout);
    } else if (*bench) {
      const auto presets = o.topology.empty() ? cfg.topologies : std::vector<std::string>{require_topology(o, "bench")};
      mtlgen::cmd_bench(cfg, presets, seed, std::cout);
    } else if (*report) {
      mtlgen::cmd_report(cfg, std::cout);
    } else if (*pipeline) {
      mtlgen::run_pipeline(cfg, std::cout, !o.skip_ablation);
    } else if (*config) {
      std::cout << cfg.to_json() << "\n";
    }
  } catch (const mtlgen::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const mtlgen::UnsupportedTopology& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
