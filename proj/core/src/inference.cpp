#include "mtlgen/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mtlgen {

namespace {

thread_local std::size_t g_prompt_calls = 0;

std::vector<double> log_softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (double& v : z) v -= lse;
  return z;
}

}  // namespace

AttributePrediction predict_attributes_from_pooled(const Tensor& pooled, const ModelBundle& bundle) {
  NoGradGuard guard;
  const auto logits = attribute_logits(pooled, bundle);
  AttributePrediction out;
  for (const auto& row : logits) {
    const std::span<const double> z = row.data();
    // max_element returns the first maximum, which is the lowest index.
    const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - z[best]);
    out.classes.push_back(best);
    out.confidence.push_back(1.0 / denom);
  }
  return out;
}

AttributePrediction predict_attributes(const Image& image, const ModelBundle& bundle) {
  if (!bundle.has_attribute_heads())
    throw UnsupportedTopology(std::string(topology_name(bundle.topology)) + " has no attribute heads");
  NoGradGuard guard;
  return predict_attributes_from_pooled(encode_image(image, bundle).pooled, bundle);
}

std::string build_hierarchical_prompt(const AttributePrediction& prediction, const AttributeSchema& schema) {
  ++g_prompt_calls;
  if (prediction.classes.size() != schema.size())
    throw DimensionError("build_hierarchical_prompt: prediction does not match schema");
  std::string prompt = "generate a product listing. attributes:";
  bool any = false;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (schema.is_unknown(c, prediction.classes[c])) continue;
    prompt += " " + to_lower(schema[c].name) + ": " + to_lower(schema[c].classes.at(prediction.classes[c])) + ";";
    any = true;
  }
  if (!any) return "generate a product listing for an item of type 'garment', suitable for 'everyday wear'";

  std::istringstream words(prompt);
  std::string word, out;
  std::size_t n = 0;
  while (words >> word && n < kMaxPromptTokens) {
    out += (n++ ? " " : "") + word;
  }
  return out;
}

std::size_t hierarchical_prompt_calls() { return g_prompt_calls; }

BeamResult beam_search(const StepFunction& step, std::size_t beams, std::size_t max_len) {
  if (beams < 1) throw std::invalid_argument("beam_search: beams must be at least 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be at least 1");

  struct Hyp {
    std::vector<int> prefix;  // BOS + generated
    double score;
  };
  struct Candidate {
    double score;
    int token;
    std::size_t beam;
  };

  std::vector<Hyp> live{{{Vocab::kBos}, 0.0}};
  std::vector<BeamResult> finished;
  const auto better = [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token != b.token) return a.token < b.token;
    return a.beam < b.beam;
  };

  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = log_softmax(step(live[b].prefix));
      for (std::size_t v = 0; v < lp.size(); ++v)
        cands.push_back({live[b].score + lp[v], static_cast<int>(v), b});
    }
    const std::size_t k = std::min(beams, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k), cands.end(), better);

    std::vector<Hyp> next;
    for (std::size_t i = 0; i < k; ++i) {
      const auto& c = cands[i];
      std::vector<int> prefix = live[c.beam].prefix;
      prefix.push_back(c.token);
      if (c.token == Vocab::kEos) {
        finished.push_back({std::vector<int>(prefix.begin() + 1, prefix.end()), c.score, true});
      } else {
        next.push_back({std::move(prefix), c.score});
      }
    }
    live = std::move(next);

    // Scores only decrease, so no live beam can overtake a better finished one.
    if (!finished.empty() && !live.empty()) {
      double best_finished = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_finished = std::max(best_finished, f.log_prob);
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& h : live) best_live = std::max(best_live, h.score);
      if (best_finished >= best_live) break;
    }
  }
  for (const auto& h : live) finished.push_back({std::vector<int>(h.prefix.begin() + 1, h.prefix.end()), h.score, false});

  const BeamResult* best = &finished.front();
  for (const auto& f : finished)
    if (f.log_prob > best->log_prob) best = &f;
  return *best;
}

std::string_view mode_name(GenerationMode mode) {
  switch (mode) {
    case GenerationMode::kHierarchical: return "hierarchical";
    case GenerationMode::kNonHierarchical: return "non-hierarchical";
    case GenerationMode::kDirect: return "direct";
  }
  return "?";
}

GenerationMode parse_mode(std::string_view name) {
  if (name == "hierarchical") return GenerationMode::kHierarchical;
  if (name == "non-hierarchical" || name == "non_hierarchical") return GenerationMode::kNonHierarchical;
  if (name == "direct") return GenerationMode::kDirect;
  throw ConfigError("unknown mode '" + std::string(name) + "' (expected hierarchical, non-hierarchical or direct)");
}

bool mode_supported(Topology topology, GenerationMode mode) {
  switch (mode) {
    case GenerationMode::kHierarchical:
    case GenerationMode::kNonHierarchical:
      return topology == Topology::kMtlHier || topology == Topology::kNoMtl;
    case GenerationMode::kDirect:
      return topology == Topology::kDirectCrossAttn || topology == Topology::kDirectUnified;
  }
  return false;
}

std::optional<GenerationMode> default_mode(Topology topology) {
  switch (topology) {
    case Topology::kMtlHier:
    case Topology::kNoMtl: return GenerationMode::kHierarchical;
    case Topology::kDirectCrossAttn:
    case Topology::kDirectUnified: return GenerationMode::kDirect;
    default: return std::nullopt;
  }
}

std::pair<std::string, std::string> split_listing_text(const std::vector<std::string>& tokens) {
  std::string name, description;
  bool in_description = false;
  for (const auto& tok : tokens) {
    if (!in_description && tok == ".") {
      in_description = true;
      continue;
    }
    std::string& dst = in_description ? description : name;
    dst += (dst.empty() ? "" : " ") + tok;
  }
  return {name, description};
}

GenerationResult generate_listing(const Image& image, const ModelBundle& bundle, const Vocab& vocab,
                                  GenerationMode mode, const GenerationOptions& options) {
  if (!mode_supported(bundle.topology, mode))
    throw UnsupportedTopology("mode '" + std::string(mode_name(mode)) + "' is not available for topology '" +
                              std::string(topology_name(bundle.topology)) + "'");
  const auto start = std::chrono::steady_clock::now();
  NoGradGuard guard;
  GenerationResult result;
  result.mode = mode;

  const EncoderOutput enc = encode_image(image, bundle);
  if (bundle.has_attribute_heads()) result.predicted_attributes = predict_attributes_from_pooled(enc.pooled, bundle);
  if (bundle.has_price_head())
    result.predicted_price = bundle.price_scaler.destandardize(price_estimate(enc.pooled, bundle).item());

  DecodeState root;
  if (bundle.unified) {
    root = begin_decode_unified(enc.patch_states, bundle);
  } else {
    std::vector<int> prompt_ids;
    if (mode == GenerationMode::kHierarchical)
      prompt_ids = vocab.encode(build_hierarchical_prompt(*result.predicted_attributes, bundle.schema), false,
                                kMaxPromptTokens);
    root = begin_decode(fuse_context(enc.pooled, prompt_ids, bundle), bundle);
  }

  // Every live beam extends a prefix scored on the previous step, so its
  // cached state is looked up and advanced by the newest token only.
  std::map<std::vector<int>, DecodeState> states;
  const StepFunction step = [&](std::span<const int> prefix) {
    const std::vector<int> parent(prefix.begin(), prefix.end() - 1);
    DecodeState st = root;
    if (const auto it = states.find(parent); it != states.end()) {
      st = it->second;
    } else {
      for (int tok : parent) decode_next(st, tok, bundle);
    }
    const Tensor logits = decode_next(st, prefix.back(), bundle);
    std::erase_if(states, [&](const auto& kv) { return kv.first.size() + 1 < prefix.size(); });
    states.emplace(std::vector<int>(prefix.begin(), prefix.end()), std::move(st));
    return std::vector<double>(logits.data().begin(), logits.data().end());
  };

  const std::size_t max_len = std::min(options.max_len, bundle.decoder_config.max_len);
  const BeamResult beam = beam_search(step, options.beams, max_len);
  std::vector<int> ids = beam.tokens;
  if (beam.finished && !ids.empty()) ids.pop_back();
  result.token_count = ids.size();
  result.log_prob = beam.log_prob;

  std::vector<std::string> tokens;
  std::istringstream decoded(vocab.decode(ids));
  for (std::string tok; decoded >> tok;) tokens.push_back(tok);
  std::tie(result.name, result.description) = split_listing_text(tokens);

  result.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace mtlgen
