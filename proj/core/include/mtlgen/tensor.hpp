#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a fresh Tensor that owns its values. When any input
// requires a gradient (and grad mode is on) the result records its parents
// and a backward closure; calling backward() on a scalar walks the graph in
// reverse topological order and accumulates into each node's grad buffer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtlgen {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this->grad into parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Direct access to values; only meaningful for leaves (parameters).
  std::span<double> mutable_data() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t node_id() const { return node_->id; }

  double item() const;
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const;

  /// Reverse-mode accumulation from this scalar into every ancestor that
  /// requires a gradient. Leaf gradients accumulate across calls.
  void backward() const;

  /// Internal constructor used by ops.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::initializer_list<const Tensor*> inputs,
                            std::function<void(detail::Node&)> backward_fn);

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// ---- elementwise and shape ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// a [n,m] + b broadcast over rows; b has m elements.
Tensor add_row(const Tensor& a, const Tensor& b);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Row lookup into a [V,d] table, giving [ids.size(), d].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// [n,m] -> [1,m]
Tensor mean_rows(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- linear algebra and normalization ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x);
/// Normalizes over the last dimension with population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- attention ----

struct AttentionMask {
  enum class Kind { kNone, kCausal, kPrefix };
  Kind kind = Kind::kNone;
  /// For kPrefix: the first `prefix` positions attend only among themselves
  /// (bidirectionally); later positions see the whole prefix plus earlier
  /// and current non-prefix positions.
  std::size_t prefix = 0;

  static AttentionMask none() { return {}; }
  static AttentionMask causal() { return {Kind::kCausal, 0}; }
  static AttentionMask prefix_lm(std::size_t n) { return {Kind::kPrefix, n}; }
  bool allowed(std::size_t query, std::size_t key) const;
};

/// softmax(q kᵀ / sqrt(dim)) v for every leading slice. q is [h, s, d],
/// k and v are [h, t, d].
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            bool causal_mask);
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionMask& mask);
/// [s, h*d] -> [h, s, d]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [h, s, d] -> [s, h*d]
Tensor merge_heads(const Tensor& x);

// ---- losses ----

Tensor cross_entropy_logits(const Tensor& logits, std::size_t target);
/// Sum over rows of -log softmax(row)[target]; divide outside as needed.
Tensor cross_entropy_rows_sum(const Tensor& logits, std::span<const int> targets);
Tensor mse(const Tensor& pred, const Tensor& target);

}  // namespace mtlgen
