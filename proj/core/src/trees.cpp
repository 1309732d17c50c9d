#include "mtlgen/trees.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace mtlgen {

double RegressionTree::predict(std::span<const double> x) const {
  int i = 0;
  while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].value;
}

std::size_t RegressionTree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.feature < 0; }));
}

double TreeEnsemble::predict(std::span<const double> x) const {
  if (x.size() != n_features)
    throw std::invalid_argument("tree ensemble: expected " + std::to_string(n_features) + " features, got " +
                                std::to_string(x.size()));
  double y = base;
  for (const auto& t : trees) y += shrinkage * t.predict(x);
  return y;
}

namespace {

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<double>>& x, std::span<const double> residual, const BoostingParams& p)
      : x_(x), r_(residual), p_(p) {}

  RegressionTree build() {
    std::vector<std::size_t> rows(x_.size());
    std::iota(rows.begin(), rows.end(), 0);
    grow(rows, 0);
    return std::move(tree_);
  }

 private:
  int grow(const std::vector<std::size_t>& rows, std::size_t depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    double s = 0.0;
    for (auto r : rows) s += r_[r];
    tree_.nodes[id].value = s / static_cast<double>(rows.size());
    if (depth >= p_.depth || rows.size() < 2 * p_.min_leaf) return id;

    const Split best = find_split(rows);
    if (best.feature < 0) return id;
    std::vector<std::size_t> left, right;
    for (auto r : rows) (x_[r][best.feature] <= best.threshold ? left : right).push_back(r);
    tree_.nodes[id].feature = best.feature;
    tree_.nodes[id].threshold = best.threshold;
    const int l = grow(left, depth + 1);
    const int rr = grow(right, depth + 1);
    tree_.nodes[id].left = l;
    tree_.nodes[id].right = rr;
    return id;
  }

  Split find_split(const std::vector<std::size_t>& rows) const {
    const std::size_t n = rows.size();
    double total = 0.0;
    for (auto r : rows) total += r_[r];
    const double base_term = total * total / static_cast<double>(n);
    Split best;
    const std::size_t n_features = x_.front().size();
    std::vector<std::pair<double, double>> col(n);
    for (std::size_t f = 0; f < n_features; ++f) {
      for (std::size_t i = 0; i < n; ++i) col[i] = {x_[rows[i]][f], r_[rows[i]]};
      std::stable_sort(col.begin(), col.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      double left_sum = 0.0;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        left_sum += col[i].second;
        if (col[i].first == col[i + 1].first) continue;
        const std::size_t nl = i + 1, nr = n - nl;
        if (nl < p_.min_leaf || nr < p_.min_leaf) continue;
        const double right_sum = total - left_sum;
        // SSE reduction = Σ_children sum²/n - sum²/n
        const double gain = left_sum * left_sum / static_cast<double>(nl) +
                            right_sum * right_sum / static_cast<double>(nr) - base_term;
        if (gain > best.gain * (1.0 + 1e-12) + 1e-12) {
          best = {static_cast<int>(f), 0.5 * (col[i].first + col[i + 1].first), gain};
        }
      }
    }
    return best;
  }

  const std::vector<std::vector<double>>& x_;
  std::span<const double> r_;
  const BoostingParams& p_;
  RegressionTree tree_;
};

}  // namespace

TreeEnsemble fit_tree_price_regressor(const std::vector<std::vector<double>>& features, std::span<const double> targets,
                                      const BoostingParams& params) {
  if (features.empty() || targets.empty()) throw std::invalid_argument("tree regressor: empty input");
  if (features.size() != targets.size())
    throw std::invalid_argument("tree regressor: feature/target count mismatch");
  if (features.size() < 2) throw std::invalid_argument("tree regressor: need at least 2 samples");
  const std::size_t nf = features.front().size();
  for (const auto& row : features)
    if (row.size() != nf) throw std::invalid_argument("tree regressor: ragged feature rows");

  TreeEnsemble model;
  model.n_features = nf;
  model.shrinkage = params.shrinkage;
  model.base = std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(targets.size());

  std::vector<double> pred(targets.size(), model.base);
  std::vector<double> residual(targets.size());
  for (std::size_t round = 0; round < params.rounds; ++round) {
    for (std::size_t i = 0; i < targets.size(); ++i) residual[i] = targets[i] - pred[i];
    RegressionTree tree = TreeBuilder(features, residual, params).build();
    const bool single_leaf = tree.nodes.size() == 1;
    for (std::size_t i = 0; i < targets.size(); ++i) pred[i] += params.shrinkage * tree.predict(features[i]);
    model.trees.push_back(std::move(tree));
    // Nothing left to fit: further rounds would repeat this leaf.
    if (single_leaf && std::abs(model.trees.back().nodes[0].value) < 1e-12) break;
  }
  return model;
}

std::string TreeEnsemble::to_json() const {
  nlohmann::json j;
  j["base"] = base;
  j["shrinkage"] = shrinkage;
  j["n_features"] = n_features;
  j["trees"] = nlohmann::json::array();
  for (const auto& t : trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
    j["trees"].push_back(std::move(nodes));
  }
  return j.dump();
}

TreeEnsemble TreeEnsemble::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  TreeEnsemble m;
  m.base = j.at("base");
  m.shrinkage = j.at("shrinkage");
  m.n_features = j.at("n_features");
  for (const auto& jt : j.at("trees")) {
    RegressionTree t;
    for (const auto& jn : jt) t.nodes.push_back({jn[0], jn[1], jn[2], jn[3], jn[4]});
    m.trees.push_back(std::move(t));
  }
  return m;
}

}  // namespace mtlgen
