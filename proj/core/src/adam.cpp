#include "mtlgen/adam.hpp"

#include <cmath>

namespace mtlgen {

AdamState make_adam_state(std::span<const Tensor> params, double lr) {
  AdamState state;
  state.lr = lr;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const auto& p : params) {
    state.m.emplace_back(p.size(), 0.0);
    state.v.emplace_back(p.size(), 0.0);
  }
  return state;
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size() || state.v[i].size() != params[i].size()) {
      throw DimensionError("adam_step: moment size mismatch for parameter " + std::to_string(i) + " of shape " +
                           shape_str(params[i].shape()));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_data();
    auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = !grad.empty();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has ? grad[j] : 0.0;
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      values[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace mtlgen
