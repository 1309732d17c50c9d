#pragma once

// Experiment orchestration behind the mtlgen CLI: configuration, data
// generation, training/evaluation of every topology preset, the loss-weight
// ablation grid, latency benchmarking and report tables.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mtlgen/catalog.hpp"
#include "mtlgen/inference.hpp"
#include "mtlgen/metrics.hpp"
#include "mtlgen/model.hpp"
#include "mtlgen/training.hpp"
#include "mtlgen/trees.hpp"
#include "mtlgen/vocab.hpp"

namespace mtlgen {

/// Name used for the attribute classifier + tree ensemble baseline.
inline constexpr std::string_view kHybrid = "hybrid";

/// The loss-weight grid of the ablation study, in listing order.
std::vector<LossWeights> default_weight_grid();
/// mtl_hier, siloed_attr, siloed_price, direct_cross_attn, direct_unified, no_mtl, hybrid.
std::vector<std::string> all_presets();

struct ExperimentConfig {
  CatalogConfig catalog;
  TrainConfig train{.weights = LossWeights::ablation_preset()};
  EncoderConfig encoder;
  DecoderConfig decoder;  // vocab_size is taken from the generated vocabulary
  GenerationOptions generation;
  BoostingParams boosting;
  std::vector<std::string> topologies = all_presets();
  std::vector<LossWeights> weight_grid = default_weight_grid();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::filesystem::path out_dir = "out";
  std::size_t eval_limit = 0;  // 0: the whole test split
  std::size_t bench_samples = 20;
  std::size_t bench_warmup = 3;

  void validate() const;
  /// Sorted-key JSON; the basis of hash().
  std::string to_json() const;
  std::string hash() const;
  /// Strict parse: unknown keys and wrong types are ConfigErrors.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
};

struct DataBundle {
  AttributeSchema schema;
  Splits splits;
  Vocab vocab;
};

/// Vocabulary over the training streams, training prompts and the
/// hierarchical prompt template words.
Vocab build_vocab(const std::vector<Listing>& train, const AttributeSchema& schema);
DataBundle make_data(const ExperimentConfig& config);
DataBundle load_data(const ExperimentConfig& config);

struct RunSpec {
  std::string preset;  // a topology name or "hybrid"
  std::uint64_t seed = 1;
  LossWeights weights;  // effective training weights
};

/// Default weights for a preset given the configured mtl weighting.
RunSpec preset_spec(const ExperimentConfig& config, const std::string& preset, std::uint64_t seed);
std::string run_id(const RunSpec& spec, bool with_weights);

struct TrainedRun {
  RunSpec spec;
  ModelBundle bundle;
  std::optional<TreeEnsemble> trees;
  TrainResult result;
};

TrainedRun train_run(const ExperimentConfig& config, const DataBundle& data, const RunSpec& spec);

struct EvalReport {
  std::string run_id;
  std::string topology;
  std::optional<std::string> mode;
  std::size_t n_samples = 0;
  std::size_t parameter_count = 0;
  std::optional<F1Report> f1;
  std::optional<double> chance_f1;
  std::optional<RegressionReport> price;
  std::optional<double> bleu4;
  std::optional<RougeScores> rouge;
  /// nullopt: "NA" (no attribute predictions, or the text task was knocked out).
  std::optional<double> hallucination_rate;
  std::optional<double> mean_generated_tokens;
  std::optional<double> mean_description_words;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

struct PredictionRecord {
  std::string id;
  std::optional<GenerationResult> generation;
  std::optional<AttributeLabels> attributes;
  std::optional<double> price;
  double wall_time_ms = 0.0;
};

struct EvalOutput {
  EvalReport report;
  std::vector<PredictionRecord> predictions;
};

/// Runs inference over the (possibly limited) test split and scores it.
EvalOutput evaluate_run(const ExperimentConfig& config, const DataBundle& data, const TrainedRun& run,
                        std::optional<GenerationMode> mode);

/// Single end-to-end inference, as timed by the benchmark.
PredictionRecord infer_one(const ExperimentConfig& config, const DataBundle& data, const TrainedRun& run,
                           const Listing& listing, std::optional<GenerationMode> mode);

struct BenchRow {
  std::string run_id;
  std::string topology;
  std::optional<std::string> mode;
  std::size_t parameter_count = 0;
  LatencyStats latency;
  double mean_generated_tokens = 0.0;
};

BenchRow bench_run(const ExperimentConfig& config, const DataBundle& data, const TrainedRun& run,
                   std::optional<GenerationMode> mode);

struct RunRecord {
  std::string run_id;
  std::string preset;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::string config_hash;
  std::string checkpoint;
  std::string provenance;
  std::size_t parameter_count = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

// On-disk layout under config.out_dir.
std::filesystem::path data_dir(const ExperimentConfig& config);
std::filesystem::path run_dir(const ExperimentConfig& config, const std::string& id);
std::filesystem::path eval_dir(const ExperimentConfig& config, const std::string& id,
                               std::optional<GenerationMode> mode);

void save_run(const ExperimentConfig& config, const TrainedRun& run, const std::string& id);
TrainedRun load_run(const ExperimentConfig& config, const std::string& id);
void save_eval(const ExperimentConfig& config, const EvalOutput& out, std::optional<GenerationMode> mode);

// CLI subcommands. Each writes its artifacts under config.out_dir and
// progress lines to `log`.
void cmd_gen_data(const ExperimentConfig& config, std::ostream& log);
RunRecord cmd_train(const ExperimentConfig& config, const std::string& preset, std::uint64_t seed, std::ostream& log);
EvalReport cmd_eval(const ExperimentConfig& config, const std::string& preset, std::uint64_t seed,
                    std::optional<GenerationMode> mode, std::ostream& log);
void cmd_ablate(const ExperimentConfig& config, std::ostream& log);
std::vector<BenchRow> cmd_bench(const ExperimentConfig& config, const std::vector<std::string>& presets,
                                std::uint64_t seed, std::ostream& log);
/// Renders every table it has inputs for; returns the names of skipped tables.
std::vector<std::string> cmd_report(const ExperimentConfig& config, std::ostream& log);

/// gen-data, then train + eval every configured preset and seed, the
/// ablation grid, bench and report.
void run_pipeline(const ExperimentConfig& config, std::ostream& log, bool with_ablation = true);

}  // namespace mtlgen
