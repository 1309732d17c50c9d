#pragma once

// Predict-then-generate pipeline, the prompt-free ablation path and beam
// search.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtlgen/model.hpp"
#include "mtlgen/vocab.hpp"

namespace mtlgen {

struct AttributePrediction {
  AttributeLabels classes;
  std::vector<double> confidence;  // softmax max per category

  const AttributeLabels& labels() const { return classes; }
};

/// Per-category argmax; exact ties resolve to the lowest class index.
AttributePrediction predict_attributes(const Image& image, const ModelBundle& bundle);
AttributePrediction predict_attributes_from_pooled(const Tensor& pooled, const ModelBundle& bundle);

/// "generate a product listing. attributes: colour: black; ..." over the
/// categories not predicted Unknown, capped at kMaxPromptTokens words.
std::string build_hierarchical_prompt(const AttributePrediction& prediction, const AttributeSchema& schema);
/// Number of build_hierarchical_prompt calls made on this thread.
std::size_t hierarchical_prompt_calls();

/// Next-token logits for a prefix that starts with BOS.
using StepFunction = std::function<std::vector<double>(std::span<const int>)>;

struct BeamResult {
  std::vector<int> tokens;  // generated ids, without BOS; ends in EOS if finished
  double log_prob = 0.0;
  bool finished = false;
};

/// Sum-of-log-probability beam search without length normalization. At most
/// `max_len` tokens are generated. Candidates are ranked by score, then token
/// id, then source beam.
BeamResult beam_search(const StepFunction& step, std::size_t beams, std::size_t max_len);

enum class GenerationMode { kHierarchical, kNonHierarchical, kDirect };

std::string_view mode_name(GenerationMode mode);
GenerationMode parse_mode(std::string_view name);
bool mode_supported(Topology topology, GenerationMode mode);
/// The mode a topology is evaluated with by default.
std::optional<GenerationMode> default_mode(Topology topology);

struct GenerationOptions {
  std::size_t beams = 4;
  std::size_t max_len = 128;
};

struct GenerationResult {
  std::string name;
  std::string description;
  std::optional<AttributePrediction> predicted_attributes;
  std::optional<double> predicted_price;
  GenerationMode mode = GenerationMode::kHierarchical;
  std::size_t token_count = 0;
  double log_prob = 0.0;
  double wall_time_ms = 0.0;
};

/// Splits a decoded stream at its first "." token into name and description.
std::pair<std::string, std::string> split_listing_text(const std::vector<std::string>& tokens);

GenerationResult generate_listing(const Image& image, const ModelBundle& bundle, const Vocab& vocab,
                                  GenerationMode mode, const GenerationOptions& options = {});

}  // namespace mtlgen
