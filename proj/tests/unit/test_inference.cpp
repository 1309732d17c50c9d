#include <doctest.h>

#include <cmath>
#include <functional>

#include "fixtures.hpp"
#include "mtlgen/inference.hpp"
#include "mtlgen/metrics.hpp"

using namespace mtlgen;

namespace {

// Toy decoder over {PAD, BOS, EOS, W}: a Markov chain on the last token.
// Greedy takes W first; the best sequence starts with PAD.
std::vector<double> toy_probs(int last) {
  switch (last) {
    case Vocab::kBos: return {0.35, 0.05, 0.20, 0.40};
    case Vocab::kPad: return {0.05, 0.02, 0.90, 0.03};
    case 3: return {0.30, 0.10, 0.30, 0.30};
    default: return {0.25, 0.25, 0.25, 0.25};
  }
}

StepFunction toy_step() {
  return [](std::span<const int> prefix) {
    auto p = toy_probs(prefix.back());
    for (double& v : p) v = std::log(v);
    return p;
  };
}

// Best (log_prob, tokens) over every sequence of at most max_len tokens that
// either ends in EOS or runs to max_len.
std::pair<double, std::vector<int>> exhaustive(std::size_t max_len) {
  std::pair<double, std::vector<int>> best{-INFINITY, {}};
  std::function<void(std::vector<int>&, double)> walk = [&](std::vector<int>& seq, double lp) {
    const int last = seq.empty() ? Vocab::kBos : seq.back();
    const auto p = toy_probs(last);
    for (int tok = 0; tok < 4; ++tok) {
      const double s = lp + std::log(p[tok]);
      seq.push_back(tok);
      if (tok == Vocab::kEos || seq.size() == max_len) {
        if (s > best.first) best = {s, seq};
      } else {
        walk(seq, s);
      }
      seq.pop_back();
    }
  };
  std::vector<int> seq;
  walk(seq, 0.0);
  return best;
}

std::vector<int> greedy(const StepFunction& step, std::size_t max_len) {
  std::vector<int> prefix{Vocab::kBos};
  while (prefix.size() - 1 < max_len) {
    const auto z = step(prefix);
    const int tok = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    prefix.push_back(tok);
    if (tok == Vocab::kEos) break;
  }
  return {prefix.begin() + 1, prefix.end()};
}

}  // namespace

TEST_CASE("beam search on the toy decoder") {
  const auto [best_lp, best_seq] = exhaustive(3);
  CHECK(best_seq == std::vector<int>{Vocab::kPad, Vocab::kEos});
  const auto r = beam_search(toy_step(), 2, 3);
  CHECK(r.tokens == best_seq);
  CHECK(r.log_prob == doctest::Approx(best_lp).epsilon(1e-12));
  CHECK(r.finished);

  const auto g = beam_search(toy_step(), 1, 3);
  CHECK(g.tokens == greedy(toy_step(), 3));
  CHECK(g.tokens.front() == 3);
  CHECK(g.log_prob < r.log_prob);
  for (std::size_t len = 1; len <= 5; ++len) CHECK(beam_search(toy_step(), 3, len).tokens.size() <= len);
  CHECK_THROWS(beam_search(toy_step(), 0, 3));
}

TEST_CASE("beam search ties resolve to the lowest token id") {
  const StepFunction flat = [](std::span<const int>) { return std::vector<double>{0.0, 0.0, 0.0, 0.0}; };
  CHECK(beam_search(flat, 1, 2).tokens == std::vector<int>{0, 0});
  CHECK(beam_search(flat, 3, 2).tokens == std::vector<int>{Vocab::kEos});
}

TEST_CASE("attribute prediction argmax and ties") {
  const fixtures::World w(20);
  auto b = w.bundle(Topology::kSiloedAttr);
  // Zero weights and hand-set biases make the logits exact.
  for (std::size_t c = 0; c < b.attribute_heads.size(); ++c) {
    auto wt = b.attribute_heads[c].weight.mutable_data();
    std::fill(wt.begin(), wt.end(), 0.0);
    auto bias = b.attribute_heads[c].bias.mutable_data();
    std::fill(bias.begin(), bias.end(), 0.0);
    if (c % 2 == 0) bias[1] = 5.0;
  }
  const auto p = predict_attributes(w.splits.train[0].image, b);
  for (std::size_t c = 0; c < p.classes.size(); ++c) {
    CHECK(p.classes[c] == (c % 2 == 0 ? 1u : 0u));
    const double k = static_cast<double>(w.schema[c].size());
    const double conf = c % 2 == 0 ? std::exp(5.0) / (std::exp(5.0) + k - 1.0) : 1.0 / k;
    CHECK(p.confidence[c] == doctest::Approx(conf).epsilon(1e-12));
  }
  CHECK(predict_attributes(w.splits.train[0].image, b).classes == p.classes);
  CHECK_THROWS_AS(predict_attributes(w.splits.train[0].image, w.bundle(Topology::kDirectUnified)),
                  UnsupportedTopology);
}

TEST_CASE("hierarchical prompt construction") {
  const auto s = default_schema();
  AttributePrediction p{s.all_unknown(), std::vector<double>(6, 0.9)};
  CHECK(build_hierarchical_prompt(p, s) ==
        "generate a product listing for an item of type 'garment', suitable for 'everyday wear'");
  p.classes[attr::kPattern] = s.class_index(attr::kPattern, "Geometric");
  p.classes[attr::kColour] = s.class_index(attr::kColour, "Pink");
  p.classes[attr::kOccasion] = s.class_index(attr::kOccasion, "Daily");
  const auto prompt = build_hierarchical_prompt(p, s);
  for (const char* want : {"geometric", "pink", "daily"}) CHECK(prompt.find(want) != std::string::npos);
  CHECK(prompt.find("unknown") == std::string::npos);
  CHECK(prompt.find("sleeve") == std::string::npos);
}

TEST_CASE("hierarchical prompts are faithful to the prediction") {
  const auto s = default_schema();
  const AttributeLexicon lex(s);
  CatalogConfig cfg;
  for (std::uint64_t i = 0; i < 200; ++i) {
    AttributePrediction p{sample_attributes(s, cfg, i), std::vector<double>(6, 1.0)};
    if (i % 3 == 0) p.classes[i % 6] = s[i % 6].unknown_index();
    const auto prompt = build_hierarchical_prompt(p, s);
    CHECK(tokenize(prompt).size() <= kMaxPromptTokens);
    CHECK_FALSE(contradicts(p.classes, prompt, lex));
    for (std::size_t c = 0; c < s.size(); ++c)
      if (!s.is_unknown(c, p.classes[c])) CHECK(prompt.find(to_lower(s[c].classes[p.classes[c]])) != std::string::npos);
  }
}

TEST_CASE("listing text splits at the first sentence break") {
  const auto [name, desc] = split_listing_text({"black", "garment", ".", "it", "is", ".", "nice"});
  CHECK(name == "black garment");
  CHECK(desc == "it is . nice");
  CHECK(split_listing_text({"only", "name"}).second.empty());
}

TEST_CASE("generation modes and their contracts") {
  const fixtures::World w(20);
  const auto mtl = w.bundle(Topology::kMtlHier);
  const GenerationOptions opt{2, 10};
  const Image& img = w.splits.test[0].image;

  const auto calls = hierarchical_prompt_calls();
  const auto non = generate_listing(img, mtl, w.vocab, GenerationMode::kNonHierarchical, opt);
  CHECK(hierarchical_prompt_calls() == calls);
  const auto hier = generate_listing(img, mtl, w.vocab, GenerationMode::kHierarchical, opt);
  CHECK(hierarchical_prompt_calls() == calls + 1);

  CHECK(hier.predicted_attributes.has_value());
  CHECK(hier.predicted_price.has_value());
  CHECK(hier.token_count <= 10);
  CHECK(hier.wall_time_ms > 0.0);
  CHECK(non.mode == GenerationMode::kNonHierarchical);

  const auto again = generate_listing(img, mtl, w.vocab, GenerationMode::kHierarchical, opt);
  CHECK(again.name == hier.name);
  CHECK(again.description == hier.description);
  CHECK(again.log_prob == hier.log_prob);

  for (Topology t : {Topology::kDirectCrossAttn, Topology::kDirectUnified}) {
    const auto r = generate_listing(img, w.bundle(t), w.vocab, GenerationMode::kDirect, opt);
    CHECK_FALSE(r.predicted_attributes.has_value());
    CHECK_FALSE(r.predicted_price.has_value());
    CHECK_THROWS_AS(generate_listing(img, w.bundle(t), w.vocab, GenerationMode::kHierarchical, opt),
                    UnsupportedTopology);
  }
  CHECK_THROWS_AS(generate_listing(img, mtl, w.vocab, GenerationMode::kDirect, opt), UnsupportedTopology);
  CHECK(parse_mode(mode_name(GenerationMode::kNonHierarchical)) == GenerationMode::kNonHierarchical);
  CHECK_THROWS_AS(parse_mode("sampled"), ConfigError);
}

TEST_CASE("beam search with cached states equals recomputing every prefix") {
  const fixtures::World w(40);
  const auto b = w.bundle(Topology::kMtlHier, 6);
  const GenerationOptions opt{3, 12};
  REQUIRE(w.splits.test.size() >= 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const Image& img = w.splits.test[i].image;
    const auto cached = generate_listing(img, b, w.vocab, GenerationMode::kHierarchical, opt);
    NoGradGuard guard;
    const auto enc = encode_image(img, b);
    const auto prompt = w.vocab.encode(build_hierarchical_prompt(predict_attributes_from_pooled(enc.pooled, b), w.schema),
                                       false, kMaxPromptTokens);
    const Tensor ctx = fuse_context(enc.pooled, prompt, b);
    const StepFunction full = [&](std::span<const int> prefix) {
      const Tensor z = decoder_step(ctx, prefix, b);
      return std::vector<double>(z.data().begin(), z.data().end());
    };
    const auto r = beam_search(full, opt.beams, opt.max_len);
    CHECK(r.log_prob == doctest::Approx(cached.log_prob).epsilon(1e-9));
  }
}

TEST_CASE("wider beams never find a worse sequence on the toy decoder") {
  double prev = -INFINITY;
  for (std::size_t beams = 1; beams <= 4; ++beams) {
    const double lp = beam_search(toy_step(), beams, 3).log_prob;
    CHECK(lp >= prev);
    prev = lp;
  }
}
