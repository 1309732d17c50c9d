#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "mtlgen/catalog.hpp"
#include "mtlgen/metrics.hpp"
#include "mtlgen/rng.hpp"

using namespace mtlgen;

namespace {

AttributeSchema binary_schema() { return AttributeSchema({{"Kind", {"A", "B", "Unknown"}}}); }

GenerationResult with_prediction(const AttributeLabels& pred, std::string description) {
  GenerationResult g;
  g.description = std::move(description);
  g.predicted_attributes = AttributePrediction{pred, std::vector<double>(pred.size(), 1.0)};
  return g;
}

}  // namespace

TEST_CASE("macro F1 hand oracle") {
  const auto s = binary_schema();
  const std::vector<AttributeLabels> golds{{0}, {0}, {1}}, preds{{0}, {1}, {1}};
  const auto r = macro_f1(preds, golds, s);
  CHECK(r.per_category.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(r.average == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(macro_f1(golds, golds, s).average == 1.0);
}

TEST_CASE("macro F1 is invariant to sample order") {
  const auto s = default_schema();
  CatalogConfig cfg;
  Rng rng(3);
  std::vector<AttributeLabels> golds, preds;
  for (std::uint64_t i = 0; i < 200; ++i) {
    golds.push_back(sample_attributes(s, cfg, i));
    preds.push_back(sample_attributes(s, cfg, i + 1000));
  }
  const double base = macro_f1(preds, golds, s).average;
  std::vector<std::size_t> order(200);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<AttributeLabels> g2, p2;
  for (auto i : order) {
    g2.push_back(golds[i]);
    p2.push_back(preds[i]);
  }
  CHECK(macro_f1(p2, g2, s).average == doctest::Approx(base).epsilon(1e-12));
  CHECK(chance_macro_f1(golds, s) > 0.0);
  CHECK(chance_macro_f1(golds, s) < 1.0);
}

TEST_CASE("regression metrics hand oracle") {
  const std::vector<double> preds{2, 4}, golds{1, 5};
  const auto r = regression_metrics(preds, golds);
  CHECK(r.mae == 1.0);
  CHECK(r.rmse == 1.0);
  REQUIRE(r.r2.has_value());
  CHECK(*r.r2 == 0.75);
  const auto perfect = regression_metrics(golds, golds);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);
  CHECK(*perfect.r2 == 1.0);
  const std::vector<double> mean_pred{3, 3};
  CHECK(*regression_metrics(mean_pred, golds).r2 == 0.0);
  const std::vector<double> flat{7, 7};
  CHECK_FALSE(regression_metrics(preds, flat).r2.has_value());
  CHECK_THROWS(regression_metrics(std::vector<double>{}, std::vector<double>{}));
}

TEST_CASE("rmse is never below mae") {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(1 + rng.below(30)), g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = rng.normal(0, 100);
      g[i] = rng.normal(0, 100);
    }
    const auto r = regression_metrics(p, g);
    CHECK(r.rmse >= r.mae);
    CHECK(r.mae >= 0.0);
  }
}

TEST_CASE("BLEU-4 hand-stepped oracle") {
  const std::vector<std::string> cands{"the cat sat on the mat", "a dog runs"};
  const std::vector<std::string> refs{"the cat is on the mat", "a dog runs fast"};
  // Clipped matches / candidate n-grams, pooled over both pairs:
  //   1-grams 8/9, 2-grams 5/7, 3-grams 2/5, 4-grams 0/3 -> smoothed 1/(3+1).
  // Brevity: candidate 9 tokens, reference 10 -> exp(1 - 10/9).
  const double expected = std::exp(1.0 - 10.0 / 9.0) * std::pow((8.0 / 9) * (5.0 / 7) * (2.0 / 5) * (1.0 / 4), 0.25);
  CHECK(std::abs(bleu4(cands, refs) - expected) < 1e-9);
  CHECK(bleu4(refs, refs) == doctest::Approx(1.0).epsilon(1e-12));
  const std::vector<std::string> other{"zz yy xx ww vv uu", "qq pp oo"};
  CHECK(bleu4(other, refs) < 0.01);
}

TEST_CASE("BLEU and ROUGE ignore consistent case changes") {
  const std::vector<std::string> cands{"The Black Dress is Elegant"}, refs{"the black dress looks elegant"};
  const std::vector<std::string> lc{"the black dress is elegant"}, uc{"THE BLACK DRESS LOOKS ELEGANT"};
  CHECK(bleu4(cands, refs) == bleu4(lc, uc));
  CHECK(rouge_scores(cands, refs).rougeL == rouge_scores(lc, uc).rougeL);
}

TEST_CASE("ROUGE hand oracles") {
  const std::vector<std::string> c{"the black dress"}, r{"the black gown"};
  const auto s = rouge_scores(c, r);
  CHECK(s.rougeL == 2.0 / 3.0);
  CHECK(s.rouge1 == 2.0 / 3.0);
  CHECK(s.rouge2 == 0.5);
  const auto same = rouge_scores(r, r);
  CHECK(same.rouge1 == 1.0);
  CHECK(same.rouge2 == 1.0);
  CHECK(same.rougeL == 1.0);
  const std::vector<std::string> empty{""};
  const auto z = rouge_scores(empty, r);
  CHECK(z.rouge1 == 0.0);
  CHECK(z.rouge2 == 0.0);
  CHECK(z.rougeL == 0.0);
}

TEST_CASE("hallucination flags contradictions only") {
  const auto s = default_schema();
  const AttributeLexicon lex(s);
  AttributeLabels pred = s.all_unknown();
  pred[attr::kColour] = s.class_index(attr::kColour, "Black");
  CHECK_FALSE(contradicts(pred, "elegant black dress", lex));
  CHECK(contradicts(pred, "vibrant red dress", lex));
  // Unknown categories make no claim to contradict.
  CHECK_FALSE(contradicts(pred, "a striped flared dress", lex));

  const std::vector<GenerationResult> results{with_prediction(pred, "elegant black dress"),
                                              with_prediction(pred, "vibrant red dress")};
  CHECK(*hallucination_rate(results, lex) == 0.5);
  const std::vector<GenerationResult> direct(2);
  CHECK_FALSE(hallucination_rate(direct, lex).has_value());
}

TEST_CASE("descriptions composed from the predictions never hallucinate") {
  const auto s = default_schema();
  const AttributeLexicon lex(s);
  CatalogConfig cfg;
  std::vector<GenerationResult> results;
  for (std::uint64_t i = 0; i < 300; ++i) {
    AttributeLabels pred = sample_attributes(s, cfg, i);
    if (i % 4 == 0) pred[i % 6] = s[i % 6].unknown_index();
    const auto text = compose_reference_text(s, pred, 2000.0 + 50.0 * static_cast<double>(i));
    results.push_back(with_prediction(pred, text.name + " " + text.description));
  }
  CHECK(*hallucination_rate(results, lex) == 0.0);
}

TEST_CASE("lexicon phrases must not nest within a category") {
  const auto s = binary_schema();
  CHECK_THROWS_AS(AttributeLexicon(s, {{{{"red"}}, {{"dark", "red"}}, {}}}), ConfigError);
  CHECK_NOTHROW(AttributeLexicon(s, {{{{"red"}}, {{"blue"}}, {}}}));
}

TEST_CASE("latency statistics") {
  const std::vector<double> equal(7, 12.5);
  const auto st = latency_stats(equal);
  CHECK(st.mean == 12.5);
  CHECK(st.median == 12.5);
  CHECK(st.p95 == 12.5);
  CHECK_THROWS(latency_stats(std::vector<double>{1, 2}));

  std::vector<double> sleeps;
  for (int i = 0; i < 5; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    sleeps.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  const auto sl = latency_stats(sleeps);
  CHECK(sl.median >= 45.0);
  CHECK(sl.median <= 80.0);
}
