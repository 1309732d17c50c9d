#pragma once

#include <vector>

#include "mtlgen/catalog.hpp"

namespace catalog_util {

/// Intercept plus reference-coded one-hots (the first class of each category
/// is the baseline), which keeps the design full rank. Unknown gets no
/// column: meant for ground-truth labels.
inline std::vector<double> design_row(const mtlgen::AttributeSchema& schema, const mtlgen::AttributeLabels& labels) {
  std::vector<double> row{1.0};
  for (std::size_t c = 0; c < schema.size(); ++c)
    for (std::size_t k = 1; k < schema[c].size(); ++k)
      if (k != schema[c].unknown_index()) row.push_back(labels[c] == k ? 1.0 : 0.0);
  return row;
}

/// Listings in generation order (train, val, test).
inline std::vector<mtlgen::Listing> all_listings(const mtlgen::Splits& s) {
  std::vector<mtlgen::Listing> out = s.train;
  out.insert(out.end(), s.val.begin(), s.val.end());
  out.insert(out.end(), s.test.begin(), s.test.end());
  return out;
}

}  // namespace catalog_util
