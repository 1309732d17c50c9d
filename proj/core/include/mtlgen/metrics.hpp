#pragma once

// Evaluation metrics: macro-F1, price regression scores, BLEU-4, ROUGE,
// internal-consistency hallucination rate and latency statistics.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtlgen/inference.hpp"
#include "mtlgen/schema.hpp"

namespace mtlgen {

struct F1Report {
  std::vector<std::string> categories;
  std::vector<double> per_category;
  double average = 0.0;
};

/// Per category: mean F1 over classes present in gold or predictions;
/// average: unweighted mean over categories.
F1Report macro_f1(std::span<const AttributeLabels> preds, std::span<const AttributeLabels> golds,
                  const AttributeSchema& schema);

/// Expected macro-F1 of a predictor that draws every class uniformly at random.
double chance_macro_f1(std::span<const AttributeLabels> golds, const AttributeSchema& schema);

struct RegressionReport {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> r2;  // absent when the gold values have zero variance
};

RegressionReport regression_metrics(std::span<const double> preds, std::span<const double> golds);

/// Corpus BLEU-4 with add-one smoothing of zero higher-order matches.
double bleu4(std::span<const std::string> candidates, std::span<const std::string> references);

struct RougeScores {
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
};

/// Per-pair F-measures averaged over the corpus.
RougeScores rouge_scores(std::span<const std::string> candidates, std::span<const std::string> references);

/// phrases[category][class] -> tokenized surface phrases; Unknown has none.
class AttributeLexicon {
 public:
  using Phrase = std::vector<std::string>;

  explicit AttributeLexicon(const AttributeSchema& schema);  // lowercased labels
  AttributeLexicon(const AttributeSchema& schema, std::vector<std::vector<std::vector<std::string>>> phrases);

  const AttributeSchema& schema() const { return schema_; }
  const std::vector<Phrase>& phrases(std::size_t category, std::size_t cls) const {
    return phrases_.at(category).at(cls);
  }

 private:
  void validate() const;
  AttributeSchema schema_;
  std::vector<std::vector<std::vector<Phrase>>> phrases_;
};

/// True when `text` mentions a non-Unknown class of some category whose
/// predicted class is known and different.
bool contradicts(const AttributeLabels& predicted, std::string_view text, const AttributeLexicon& lexicon);

/// Fraction of results (with predicted attributes) whose description
/// contradicts them; nullopt when no result carries predictions.
std::optional<double> hallucination_rate(std::span<const GenerationResult> results, const AttributeLexicon& lexicon);

struct LatencyStats {
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
};

inline constexpr std::size_t kMinLatencySamples = 5;

/// Nearest-rank p95; requires at least kMinLatencySamples timings.
LatencyStats latency_stats(std::span<const double> wall_ms);

}  // namespace mtlgen
