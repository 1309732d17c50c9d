#pragma once

// Least-squares gradient boosting over depth-limited regression trees.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mtlgen {

struct RegressionTree {
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };
  std::vector<Node> nodes;

  double predict(std::span<const double> x) const;
  std::size_t leaf_count() const;
};

struct TreeEnsemble {
  double base = 0.0;
  double shrinkage = 0.1;
  std::size_t n_features = 0;
  std::vector<RegressionTree> trees;

  double predict(std::span<const double> x) const;
  std::string to_json() const;
  static TreeEnsemble from_json(const std::string& text);
};

struct BoostingParams {
  std::size_t rounds = 200;
  std::size_t depth = 3;
  double shrinkage = 0.1;
  std::size_t min_leaf = 1;
};

/// Stagewise boosting on squared loss. Splits maximize the reduction in
/// squared error; ties go to the lowest feature index, then lowest threshold.
TreeEnsemble fit_tree_price_regressor(const std::vector<std::vector<double>>& features, std::span<const double> targets,
                                      const BoostingParams& params);

}  // namespace mtlgen
