#pragma once

// One randomized scalar objective per differentiable op. Outputs are reduced
// with a fixed random weighting so that no gradient is trivially constant.

#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mtlgen/rng.hpp"
#include "mtlgen/tensor.hpp"

namespace opcases {

using mtlgen::Shape;
using mtlgen::Tensor;

struct OpCase {
  std::string name;
  std::vector<Tensor> params;
  gradcheck::LossFn loss;
};

inline Tensor random(mtlgen::Rng& rng, Shape shape, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(mtlgen::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// sum(w ⊙ y) for a fixed random w shaped like y.
inline gradcheck::LossFn weighted(mtlgen::Rng& rng, std::function<Tensor()> f) {
  Shape s;
  {
    mtlgen::NoGradGuard g;
    s = f().shape();
  }
  Tensor w = random(rng, s, false);
  return [f, w] { return mtlgen::sum(mtlgen::mul(f(), w)); };
}

inline std::vector<OpCase> all_cases(std::uint64_t seed) {
  using namespace mtlgen;
  Rng rng(seed);
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> params, std::function<Tensor()> f) {
    cases.push_back({std::move(name), params, weighted(rng, std::move(f))});
  };

  {
    Tensor a = random(rng, {3, 4}), b = random(rng, {3, 4});
    add_case("add", {a, b}, [=] { return add(a, b); });
    add_case("sub", {a, b}, [=] { return sub(a, b); });
    add_case("mul", {a, b}, [=] { return mul(a, b); });
    add_case("scale", {a}, [=] { return scale(a, -1.7); });
    add_case("fan_out", {a}, [=] { return add(mul(a, a), a); });
  }
  {
    Tensor a = random(rng, {4, 5}), b = random(rng, {5});
    add_case("add_row", {a, b}, [=] { return add_row(a, b); });
  }
  {
    Tensor a = random(rng, {3, 5}, true, -3.0, 3.0);
    add_case("gelu", {a}, [=] { return gelu(a); });
    add_case("relu", {a}, [=] { return relu(a); });
    add_case("transpose", {a}, [=] { return transpose(a); });
    add_case("reshape", {a}, [=] { return reshape(a, {5, 3}); });
    add_case("mean_rows", {a}, [=] { return mean_rows(a); });
    add_case("slice_rows", {a}, [=] { return slice_rows(a, 1, 3); });
  }
  {
    Tensor a = random(rng, {2, 3}), b = random(rng, {3, 3});
    add_case("concat_rows", {a, b}, [=] { return concat_rows({a, b}); });
  }
  {
    Tensor table = random(rng, {6, 4});
    const std::vector<int> ids{2, 0, 2, 5};
    add_case("gather_rows", {table}, [=] { return gather_rows(table, ids); });
  }
  {
    Tensor a = random(rng, {3, 4});
    Tensor w = random(rng, {1}, false);
    cases.push_back({"sum", {a}, [=] { return scale(sum(a), w[0]); }});
    cases.push_back({"mean", {a}, [=] { return scale(mean(a), w[0]); }});
  }
  {
    Tensor a = random(rng, {3, 4}), b = random(rng, {4, 5});
    add_case("matmul", {a, b}, [=] { return matmul(a, b); });
  }
  {
    Tensor x = random(rng, {3, 6}, true, -2.0, 2.0);
    add_case("softmax_rows", {x}, [=] { return softmax_rows(x); });
    Tensor g = random(rng, {6}, true, 0.5, 1.5), b = random(rng, {6});
    add_case("layer_norm", {x, g, b}, [=] { return layer_norm(x, g, b); });
  }
  {
    Tensor q = random(rng, {2, 4, 3}), k = random(rng, {2, 5, 3}), v = random(rng, {2, 5, 3});
    add_case("attention", {q, k, v}, [=] { return scaled_dot_attention(q, k, v, false); });
    Tensor qs = random(rng, {2, 5, 3});
    add_case("attention_causal", {qs, k, v}, [=] { return scaled_dot_attention(qs, k, v, true); });
    add_case("attention_prefix", {qs, k, v},
             [=] { return scaled_dot_attention(qs, k, v, AttentionMask::prefix_lm(2)); });
  }
  {
    Tensor x = random(rng, {4, 6});
    add_case("split_heads", {x}, [=] { return split_heads(x, 3); });
    Tensor h = random(rng, {3, 4, 2});
    add_case("merge_heads", {h}, [=] { return merge_heads(h); });
  }
  {
    Tensor logits = random(rng, {1, 5}, true, -2.0, 2.0);
    cases.push_back({"cross_entropy_logits", {logits}, [=] { return cross_entropy_logits(logits, 3); }});
    Tensor rows = random(rng, {4, 5}, true, -2.0, 2.0);
    const std::vector<int> targets{0, 4, 2, 2};
    cases.push_back({"cross_entropy_rows_sum", {rows}, [=] { return cross_entropy_rows_sum(rows, targets); }});
    Tensor p = random(rng, {3, 2}), t = random(rng, {3, 2}, false);
    cases.push_back({"mse", {p}, [=] { return mse(p, t); }});
  }
  {
    // Three-layer MLP with a shared input feeding two branches.
    Tensor x = random(rng, {4, 3}, false);
    Tensor w1 = random(rng, {3, 5}), b1 = random(rng, {5}), w2 = random(rng, {5, 5}), w3 = random(rng, {5, 2});
    add_case("mlp3", {w1, b1, w2, w3}, [=] {
      Tensor h = gelu(add_row(matmul(x, w1), b1));
      return matmul(add(relu(matmul(h, w2)), h), w3);
    });
  }
  return cases;
}

}  // namespace opcases
