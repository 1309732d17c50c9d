#include "mtlgen/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "mtlgen/vocab.hpp"

namespace mtlgen {

namespace {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

std::size_t overlap(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t m = 0;
  for (const auto& [g, c] : cand)
    if (auto it = ref.find(g); it != ref.end()) m += std::min(c, it->second);
  return m;
}

std::size_t total(const NgramCounts& c) {
  std::size_t n = 0;
  for (const auto& [g, k] : c) n += k;
  return n;
}

double f_measure(double overlap, double cand_total, double ref_total) {
  if (overlap == 0.0 || cand_total == 0.0 || ref_total == 0.0) return 0.0;
  const double p = overlap / cand_total, r = overlap / ref_total;
  return 2.0 * p * r / (p + r);
}

std::size_t lcs(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(a) + " predictions vs " +
                                std::to_string(b) + " references");
  if (a == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}

bool contains_phrase(const Tokens& text, const Tokens& phrase) {
  if (phrase.empty() || phrase.size() > text.size()) return false;
  return std::search(text.begin(), text.end(), phrase.begin(), phrase.end()) != text.end();
}

}  // namespace

F1Report macro_f1(std::span<const AttributeLabels> preds, std::span<const AttributeLabels> golds,
                  const AttributeSchema& schema) {
  check_aligned(preds.size(), golds.size(), "macro_f1");
  F1Report out;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const std::size_t k = schema[c].size();
    std::vector<double> tp(k, 0.0), fp(k, 0.0), fn(k, 0.0);
    std::vector<bool> seen(k, false);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const std::size_t p = preds[i].at(c), g = golds[i].at(c);
      if (p >= k || g >= k) throw std::out_of_range("macro_f1: class index outside '" + schema[c].name + "'");
      seen[p] = seen[g] = true;
      if (p == g) {
        tp[p] += 1.0;
      } else {
        fp[p] += 1.0;
        fn[g] += 1.0;
      }
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (!seen[j]) continue;
      sum += 2.0 * tp[j] / (2.0 * tp[j] + fp[j] + fn[j]);
      ++n;
    }
    out.categories.push_back(schema[c].name);
    out.per_category.push_back(sum / static_cast<double>(n));
  }
  out.average = std::accumulate(out.per_category.begin(), out.per_category.end(), 0.0) /
                static_cast<double>(out.per_category.size());
  return out;
}

double chance_macro_f1(std::span<const AttributeLabels> golds, const AttributeSchema& schema) {
  if (golds.empty()) throw std::invalid_argument("chance_macro_f1: empty input");
  double avg = 0.0;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const std::size_t k = schema[c].size();
    std::vector<double> freq(k, 0.0);
    for (const auto& g : golds) freq.at(g.at(c)) += 1.0 / static_cast<double>(golds.size());
    // Uniform guessing: precision_j = freq_j, recall_j = 1/k. Every class is
    // eventually predicted, so all k classes enter the macro average.
    const double q = 1.0 / static_cast<double>(k);
    double sum = 0.0;
    for (double p : freq) sum += p > 0.0 ? 2.0 * p * q / (p + q) : 0.0;
    avg += sum / static_cast<double>(k);
  }
  return avg / static_cast<double>(schema.size());
}

RegressionReport regression_metrics(std::span<const double> preds, std::span<const double> golds) {
  check_aligned(preds.size(), golds.size(), "regression_metrics");
  const double n = static_cast<double>(golds.size());
  const double mean = std::accumulate(golds.begin(), golds.end(), 0.0) / n;
  double abs_sum = 0.0, sq_sum = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const double d = preds[i] - golds[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
    tot += (golds[i] - mean) * (golds[i] - mean);
  }
  RegressionReport r{abs_sum / n, std::sqrt(sq_sum / n), std::nullopt};
  if (tot > 0.0) r.r2 = 1.0 - sq_sum / tot;
  return r;
}

double bleu4(std::span<const std::string> candidates, std::span<const std::string> references) {
  check_aligned(candidates.size(), references.size(), "bleu4");
  std::array<double, 4> matched{}, possible{};
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens c = tokenize(candidates[i]), r = tokenize(references[i]);
    cand_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cn = ngrams(c, n);
      matched[n - 1] += static_cast<double>(overlap(cn, ngrams(r, n)));
      possible[n - 1] += static_cast<double>(total(cn));
    }
  }
  if (cand_len == 0.0 || matched[0] == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double p = (n > 0 && matched[n] == 0.0) ? 1.0 / (possible[n] + 1.0) : matched[n] / possible[n];
    log_sum += 0.25 * std::log(p);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum);
}

RougeScores rouge_scores(std::span<const std::string> candidates, std::span<const std::string> references) {
  check_aligned(candidates.size(), references.size(), "rouge_scores");
  RougeScores s;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens c = tokenize(candidates[i]), r = tokenize(references[i]);
    for (std::size_t n = 1; n <= 2; ++n) {
      const auto cn = ngrams(c, n), rn = ngrams(r, n);
      const double f = f_measure(static_cast<double>(overlap(cn, rn)), static_cast<double>(total(cn)),
                                 static_cast<double>(total(rn)));
      (n == 1 ? s.rouge1 : s.rouge2) += f;
    }
    s.rougeL += f_measure(static_cast<double>(lcs(c, r)), static_cast<double>(c.size()), static_cast<double>(r.size()));
  }
  const double n = static_cast<double>(candidates.size());
  s.rouge1 /= n;
  s.rouge2 /= n;
  s.rougeL /= n;
  return s;
}

AttributeLexicon::AttributeLexicon(const AttributeSchema& schema) : schema_(schema) {
  for (const auto& cat : schema.categories()) {
    std::vector<std::vector<Phrase>> per_class;
    for (const auto& cls : cat.classes)
      per_class.push_back(cls == kUnknownLabel ? std::vector<Phrase>{} : std::vector<Phrase>{tokenize(cls)});
    phrases_.push_back(std::move(per_class));
  }
  validate();
}

AttributeLexicon::AttributeLexicon(const AttributeSchema& schema,
                                   std::vector<std::vector<std::vector<std::string>>> phrases)
    : schema_(schema) {
  if (phrases.size() != schema.size()) throw ConfigError("lexicon: category count does not match schema");
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (phrases[c].size() != schema[c].size())
      throw ConfigError("lexicon: class count for '" + schema[c].name + "' does not match schema");
    std::vector<std::vector<Phrase>> per_class;
    for (const auto& list : phrases[c]) {
      std::vector<Phrase> ps;
      for (const auto& p : list) ps.push_back(tokenize(p));
      per_class.push_back(std::move(ps));
    }
    phrases_.push_back(std::move(per_class));
  }
  validate();
}

void AttributeLexicon::validate() const {
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    if (!phrases_[c][schema_[c].unknown_index()].empty())
      throw ConfigError("lexicon: 'Unknown' in '" + schema_[c].name + "' must have no phrases");
    std::vector<Phrase> all;
    for (const auto& list : phrases_[c])
      for (const auto& p : list) {
        if (p.empty()) throw ConfigError("lexicon: empty phrase in '" + schema_[c].name + "'");
        all.push_back(p);
      }
    for (std::size_t i = 0; i < all.size(); ++i)
      for (std::size_t j = 0; j < all.size(); ++j)
        if (i != j && contains_phrase(all[j], all[i]))
          throw ConfigError("lexicon: phrases in '" + schema_[c].name + "' overlap");
  }
}

bool contradicts(const AttributeLabels& predicted, std::string_view text, const AttributeLexicon& lexicon) {
  const auto& schema = lexicon.schema();
  if (predicted.size() != schema.size()) throw ConfigError("hallucination: prediction does not match lexicon schema");
  const Tokens words = tokenize(text);
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (schema.is_unknown(c, predicted[c])) continue;
    for (std::size_t k = 0; k < schema[c].size(); ++k) {
      if (k == predicted[c]) continue;
      for (const auto& phrase : lexicon.phrases(c, k))
        if (contains_phrase(words, phrase)) return true;
    }
  }
  return false;
}

std::optional<double> hallucination_rate(std::span<const GenerationResult> results, const AttributeLexicon& lexicon) {
  std::size_t flagged = 0, counted = 0;
  for (const auto& r : results) {
    if (!r.predicted_attributes) continue;
    ++counted;
    if (contradicts(r.predicted_attributes->classes, r.description, lexicon)) ++flagged;
  }
  if (counted == 0) return std::nullopt;
  return static_cast<double>(flagged) / static_cast<double>(counted);
}

LatencyStats latency_stats(std::span<const double> wall_ms) {
  if (wall_ms.size() < kMinLatencySamples)
    throw std::invalid_argument("latency_stats: need at least " + std::to_string(kMinLatencySamples) +
                                " timings, got " + std::to_string(wall_ms.size()));
  std::vector<double> v(wall_ms.begin(), wall_ms.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  LatencyStats s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
  s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  s.p95 = v[static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1];
  return s;
}

}  // namespace mtlgen
