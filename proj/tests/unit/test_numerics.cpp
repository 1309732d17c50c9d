#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "mtlgen/adam.hpp"
#include "mtlgen/tensor.hpp"
#include "op_cases.hpp"

using namespace mtlgen;

namespace {

void check_values(const Tensor& t, const std::vector<double>& want, double tol = 1e-12) {
  REQUIRE(t.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (tol == 0.0)
      CHECK(t[i] == want[i]);
    else
      CHECK(t[i] == doctest::Approx(want[i]).epsilon(tol));
  }
}

}  // namespace

TEST_CASE("matmul hand cases") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  check_values(matmul(a, b), {19, 22, 43, 50});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  check_values(matmul(eye, a), {1, 2, 3, 4});
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("dimension errors name both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("softmax closed forms and stability") {
  check_values(softmax_rows(Tensor::from({1, 2}, {0, 0})), {0.5, 0.5});
  check_values(softmax_rows(Tensor::from({1, 2}, {std::numbers::ln2, 0})), {2.0 / 3.0, 1.0 / 3.0});
  check_values(softmax_rows(Tensor::from({1, 2}, {1000, 1000})), {0.5, 0.5});
}

TEST_CASE("softmax rows sum to one and ignore a per-row shift") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = opcases::random(rng, {4, 7}, false, -20.0, 20.0);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 7; ++c) shifted[r * 7 + c] += static_cast<double>(r) * 13.5 - 9.0;
    Tensor p = softmax_rows(x), q = softmax_rows(Tensor::from({4, 7}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        s += p[r * 7 + c];
        CHECK(std::abs(p[r * 7 + c] - q[r * 7 + c]) < 1e-9);
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm hand cases") {
  Tensor g = Tensor::full({2}, 1.0), b = Tensor::zeros({2});
  check_values(layer_norm(Tensor::from({1, 2}, {1, 3}), g, b, 0.0), {-1, 1});
  const Tensor y = layer_norm(Tensor::from({1, 2}, {1, 3}), g, b);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-5));
  check_values(layer_norm(Tensor::from({1, 2}, {4, 4}), g, b), {0, 0});
}

TEST_CASE("attention with one key returns its value") {
  Rng rng(3);
  Tensor q = opcases::random(rng, {1, 3, 4}, false);
  Tensor k = opcases::random(rng, {1, 1, 4}, false), v = Tensor::from({1, 1, 4}, {1, -2, 3, 0.5});
  Tensor o = scaled_dot_attention(q, k, v, false);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t d = 0; d < 4; ++d) CHECK(o[s * 4 + d] == doctest::Approx(v[d]).epsilon(1e-12));
}

TEST_CASE("attention over identical values with orthogonal query returns that value") {
  Tensor q = Tensor::from({1, 1, 2}, {1, 0});
  Tensor k = Tensor::from({1, 2, 2}, {0, 1, 0, -1});
  Tensor v = Tensor::from({1, 2, 2}, {2, 5, 2, 5});
  check_values(scaled_dot_attention(q, k, v, false), {2, 5});
}

TEST_CASE("causal attention at position 0 ignores later keys") {
  Rng rng(5);
  Tensor q = opcases::random(rng, {2, 4, 3}, false);
  Tensor k = opcases::random(rng, {2, 4, 3}, false), v = opcases::random(rng, {2, 4, 3}, false);
  std::vector<double> k2(k.data().begin(), k.data().end()), v2(v.data().begin(), v.data().end());
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 3; i < 12; ++i) {
      k2[h * 12 + i] += 5.0;
      v2[h * 12 + i] -= 3.0;
    }
  Tensor a = scaled_dot_attention(q, k, v, true);
  Tensor b = scaled_dot_attention(q, Tensor::from({2, 4, 3}, k2), Tensor::from({2, 4, 3}, v2), true);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t d = 0; d < 3; ++d) CHECK(a[h * 12 + d] == b[h * 12 + d]);
  CHECK(a[3] != b[3]);
}

TEST_CASE("cross entropy closed forms") {
  CHECK(cross_entropy_logits(Tensor::from({2}, {0.3, 0.3}), 0).item() ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  for (std::size_t k : {3u, 7u, 50u}) {
    Tensor logits = Tensor::full({k}, -1.25);
    CHECK(cross_entropy_logits(logits, k - 1).item() ==
          doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-12));
  }
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
  Tensor logits = Tensor::from({1, 4}, {0.2, -1.0, 2.5, 0.0}, true);
  cross_entropy_logits(logits, 1).backward();
  Tensor p = softmax_rows(Tensor::from({1, 4}, {0.2, -1.0, 2.5, 0.0}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(logits.grad()[i] == doctest::Approx(p[i] - (i == 1 ? 1.0 : 0.0)));
}

TEST_CASE("mse hand cases") {
  CHECK(mse(Tensor::from({2}, {1, 2}), Tensor::from({2}, {1, 2})).item() == 0.0);
  CHECK(mse(Tensor::scalar(2), Tensor::scalar(0)).item() == 4.0);
  CHECK(mse(Tensor::from({2}, {0, 2}), Tensor::from({2}, {0, 0})).item() == 2.0);
}

TEST_CASE("backward on tiny graphs") {
  Tensor x = Tensor::scalar(3.0, true);
  mul(x, x).backward();
  CHECK(x.grad()[0] == 6.0);
  Tensor y = Tensor::scalar(1.0, true);
  add(y, y).backward();
  CHECK(y.grad()[0] == 2.0);
}

TEST_CASE("graph invariants: shapes, grad shapes and unique node ids") {
  Rng rng(9);
  Tensor a = opcases::random(rng, {3, 4}), b = opcases::random(rng, {4, 2});
  Tensor h = matmul(a, b), s = sum(gelu(h));
  CHECK(shape_numel(h.shape()) == h.size());
  s.backward();
  CHECK(a.grad().size() == a.size());
  CHECK(b.grad().size() == b.size());
  std::set<std::uint64_t> ids{a.node_id(), b.node_id(), h.node_id(), s.node_id()};
  CHECK(ids.size() == 4);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  CHECK_FALSE(grad_enabled());
  CHECK_FALSE(mul(a, a).requires_grad());
}

TEST_CASE("argmax is invariant under a constant logit shift") {
  Rng rng(21);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(9), w(9);
    for (auto& x : v) x = rng.uniform(-3, 3);
    const double c = rng.uniform(-100, 100);
    for (std::size_t i = 0; i < 9; ++i) w[i] = v[i] + c;
    CHECK(std::max_element(v.begin(), v.end()) - v.begin() == std::max_element(w.begin(), w.end()) - w.begin());
  }
}

TEST_CASE("every op matches central finite differences") {
  for (auto& c : opcases::all_cases(2024)) {
    CAPTURE(c.name);
    const auto r = gradcheck::check(c.params, c.loss, 50, 77);
    CHECK(r.probes == 50);
    CHECK(r.worst < 1e-4);
  }
}

TEST_CASE("adam: zero gradient leaves parameters and bumps the step") {
  std::vector<Tensor> params{Tensor::from({3}, {1, 2, 3}, true)};
  AdamState st = make_adam_state(params, 0.1);
  adam_step(params, st);
  CHECK(st.step == 1);
  check_values(params[0], {1, 2, 3}, 0.0);
  REQUIRE(st.m.size() == 1);
  CHECK(st.m[0].size() == 3);
  CHECK(st.v[0].size() == 3);
}

TEST_CASE("adam: first step moves each coordinate by about lr against the gradient sign") {
  std::vector<Tensor> params{Tensor::from({3}, {0, 0, 0}, true)};
  const auto g = params[0].mutable_grad();
  g[0] = 0.5;
  g[1] = -3.0;
  g[2] = 1e-3;
  AdamState st = make_adam_state(params, 0.01);
  adam_step(params, st);
  CHECK(params[0][0] == doctest::Approx(-0.01).epsilon(1e-4));
  CHECK(params[0][1] == doctest::Approx(0.01).epsilon(1e-4));
  CHECK(params[0][2] == doctest::Approx(-0.01).epsilon(1e-4));
}

TEST_CASE("adam: lr 0 is the identity and identical runs are bitwise equal") {
  Rng rng(4);
  auto run = [](double lr) {
    Rng r(8);
    std::vector<Tensor> params{opcases::random(r, {5, 3}), opcases::random(r, {3})};
    AdamState st = make_adam_state(params, lr);
    const auto before = std::vector<double>(params[0].data().begin(), params[0].data().end());
    for (int step = 0; step < 5; ++step) {
      zero_grads(params);
      sum(mul(params[0], params[0])).backward();
      sum(params[1]).backward();
      adam_step(params, st);
    }
    return std::make_pair(before, std::vector<double>(params[0].data().begin(), params[0].data().end()));
  };
  const auto [before0, after0] = run(0.0);
  CHECK(before0 == after0);
  CHECK(run(0.05).second == run(0.05).second);
  CHECK(run(0.05).second != before0);
}
