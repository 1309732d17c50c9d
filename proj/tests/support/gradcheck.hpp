#pragma once

// Central finite-difference checks against reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtlgen/rng.hpp"
#include "mtlgen/tensor.hpp"

namespace gradcheck {

// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
// turning round-off into large relative errors.
inline double rel_err(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct Result {
  std::size_t probes = 0;
  double worst = 0.0;
  std::string worst_where;
};

using LossFn = std::function<mtlgen::Tensor()>;

namespace detail {

inline void probe(mtlgen::Tensor& p, std::size_t e, double analytic, const LossFn& loss, double h,
                  const std::string& where, Result& r) {
  auto d = p.mutable_data();
  const double x = d[e];
  double fp = 0.0, fm = 0.0;
  {
    mtlgen::NoGradGuard guard;
    d[e] = x + h;
    fp = loss().item();
    d[e] = x - h;
    fm = loss().item();
    d[e] = x;
  }
  const double err = rel_err(analytic, (fp - fm) / (2.0 * h));
  ++r.probes;
  if (err > r.worst) {
    r.worst = err;
    r.worst_where = where + "[" + std::to_string(e) + "]";
  }
}

}  // namespace detail

/// `random_probes` elements drawn uniformly over all parameters, plus
/// `per_tensor` elements from every parameter tensor.
inline Result check(std::vector<mtlgen::Tensor> params, const LossFn& loss, std::size_t random_probes,
                    std::uint64_t seed, std::size_t per_tensor = 0, const std::vector<std::string>& names = {},
                    double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  std::size_t total = 0;
  for (const auto& p : params) {
    analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                       : std::vector<double>(p.size(), 0.0));
    total += p.size();
  }
  auto name = [&](std::size_t i) { return i < names.size() ? names[i] : "param" + std::to_string(i); };

  Result r;
  mtlgen::Rng rng(seed);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < per_tensor; ++k) {
      const std::size_t e = rng.below(params[i].size());
      detail::probe(params[i], e, analytic[i][e], loss, h, name(i), r);
    }
  for (std::size_t k = 0; k < random_probes; ++k) {
    std::size_t flat = rng.below(total), i = 0;
    while (flat >= params[i].size()) flat -= params[i++].size();
    detail::probe(params[i], flat, analytic[i][flat], loss, h, name(i), r);
  }
  return r;
}

}  // namespace gradcheck
