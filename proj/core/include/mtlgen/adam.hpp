#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtlgen/tensor.hpp"

namespace mtlgen {

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(std::span<const Tensor> params, double lr);

/// One bias-corrected Adam update over `params`, reading each parameter's
/// accumulated gradient (a missing gradient counts as zero).
void adam_step(std::span<Tensor> params, AdamState& state);

void zero_grads(std::span<Tensor> params);

}  // namespace mtlgen
