#include "mtlgen/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <mutex>
#include <unordered_set>

#include <cblas.h>

namespace mtlgen {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values,
                                       bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  n->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(r) + ", got shape " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Results must not depend on the thread count, and timings are single-worker.
void blas_single_thread() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

constexpr double kSqrt2OverPi = 0.7978845608028654;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node({1}, {value}, requires_grad));
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data[r * node_->shape.back() + c];
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values,
                           std::initializer_list<const Tensor*> inputs,
                           std::function<void(detail::Node&)> backward_fn) {
  bool track = false;
  if (t_grad_enabled) {
    for (const Tensor* t : inputs) track = track || t->requires_grad();
  }
  auto n = new_node(std::move(shape), std::move(values), track);
  if (track) {
    for (const Tensor* t : inputs) n->parents.push_back(t->node_);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

void Tensor::backward() const {
  if (size() != 1) {
    throw DimensionError("backward: loss must be scalar, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; leaves keep accumulating.
  for (auto* n : order) {
    if (n->backward_fn) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents) {
        if (p->requires_grad) p->ensure_grad();
      }
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tensor::make_result(a.shape(), std::move(out), {&a}, [s](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "add_row");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (b.size() != cols) {
    throw DimensionError("add_row: bias of shape " + shape_str(b.shape()) +
                         " does not match columns of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a[r * cols + c] + b[c];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [rows, cols](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) pb.grad[c] += self.grad[r * cols + c];
  });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + 0.044715 * x * x * x)));
  }
  return Tensor::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = p.data[i];
      const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = kSqrt2OverPi * (1.0 + 3.0 * 0.044715 * x * x);
      const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      p.grad[i] += self.grad[i] * d;
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return Tensor::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  return Tensor::make_result({cols, rows}, std::move(out), {&a}, [rows, cols](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) p.grad[r * cols + c] += self.grad[c * rows + r];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {&a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts.front().shape().back();
  std::size_t rows = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    track = track || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor result = Tensor::make_result({rows, cols}, std::move(out), {}, nullptr);
  if (track && grad_enabled()) {
    auto& n = *result.node();
    n.requires_grad = true;
    for (const auto& p : parts) n.parents.push_back(p.node());
    n.backward_fn = [](detail::Node& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const std::size_t len = p->data.size();
        if (p->requires_grad)
          for (std::size_t i = 0; i < len; ++i) p->grad[i] += self.grad[offset + i];
        offset += len;
      }
    };
  }
  return result;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin >= end || end > a.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t cols = a.dim(1);
  std::vector<double> out(a.data().begin() + begin * cols, a.data().begin() + end * cols);
  return Tensor::make_result({end - begin, cols}, std::move(out), {&a}, [begin, cols](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[begin * cols + i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t vocab = table.dim(0), cols = table.dim(1);
  std::vector<double> out(ids.size() * cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[r]) + " out of range for table " +
                           shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + ids[r] * cols, cols, out.begin() + r * cols);
  }
  std::vector<int> idcopy(ids.begin(), ids.end());
  return Tensor::make_result({ids.size(), cols}, std::move(out), {&table},
                             [idcopy = std::move(idcopy), cols](detail::Node& self) {
                               auto& p = *self.parents[0];
                               for (std::size_t r = 0; r < idcopy.size(); ++r)
                                 for (std::size_t c = 0; c < cols; ++c)
                                   p.grad[idcopy[r] * cols + c] += self.grad[r * cols + c];
                             });
}

Tensor mean_rows(const Tensor& a) {
  require_rank(a, 2, "mean_rows");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += a[r * cols + c];
  for (auto& v : out) v /= static_cast<double>(rows);
  return Tensor::make_result({1, cols}, std::move(out), {&a}, [rows, cols](detail::Node& self) {
    auto& p = *self.parents[0];
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) p.grad[r * cols + c] += self.grad[c] * inv;
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({1}, {s}, {&a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  blas_single_thread();
  const int N = static_cast<int>(n), K = static_cast<int>(k), M = static_cast<int>(m);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, N, M, K, 1.0, a.data().data(), K, b.data().data(), M, 0.0,
              out.data(), M);
  return Tensor::make_result({n, m}, std::move(out), {&a, &b}, [N, K, M](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    // dA += dC · Bᵀ, dB += Aᵀ · dC
    if (pa.requires_grad)
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, N, K, M, 1.0, self.grad.data(), M, pb.data.data(), M, 1.0,
                  pa.grad.data(), K);
    if (pb.requires_grad)
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, M, N, 1.0, pa.data.data(), K, self.grad.data(), M, 1.0,
                  pb.grad.data(), M);
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [rows, cols](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) p.grad[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t cols = x.shape().back();
  if (gain.size() != cols || bias.size() != cols) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match last dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / cols;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (in[c] - mu) * inv_std[r];
      out[r * cols + c] = xhat[r * cols + c] * gain[c] + bias[c];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * cols;
          const double* xh = xhat.data() + r * cols;
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double dxh = g[c] * pg.data[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[c];
            if (pg.requires_grad) pg.grad[c] += g[c] * xh[c];
            if (pb.requires_grad) pb.grad[c] += g[c];
          }
          if (px.requires_grad) {
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxh = g[c] * pg.data[c];
              px.grad[r * cols + c] += inv_std[r] / n * (n * dxh - sum_dxh - xh[c] * sum_dxh_xh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------

bool AttentionMask::allowed(std::size_t query, std::size_t key) const {
  switch (kind) {
    case Kind::kNone:
      return true;
    case Kind::kCausal:
      return key <= query;
    case Kind::kPrefix:
      if (query < prefix) return key < prefix;
      return key < prefix || key <= query;
  }
  return true;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal_mask) {
  return scaled_dot_attention(q, k, v, causal_mask ? AttentionMask::causal() : AttentionMask::none());
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask) {
  require_rank(q, 3, "scaled_dot_attention");
  require_rank(k, 3, "scaled_dot_attention");
  require_rank(v, 3, "scaled_dot_attention");
  const std::size_t h = q.dim(0), s = q.dim(1), d = q.dim(2), t = k.dim(1);
  if (k.dim(0) != h || v.dim(0) != h || k.dim(2) != d || v.dim(2) != d || v.dim(1) != t) {
    throw DimensionError("scaled_dot_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " are incompatible");
  }
  if (mask.kind == AttentionMask::Kind::kCausal && s != t) {
    throw DimensionError("scaled_dot_attention: causal mask needs equal query/key lengths");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  const int S = static_cast<int>(s), T = static_cast<int>(t), D = static_cast<int>(d);
  blas_single_thread();
  std::vector<double> probs(h * s * t, 0.0);
  std::vector<double> out(h * s * d, 0.0);
  for (std::size_t hh = 0; hh < h; ++hh) {
    const double* Q = q.data().data() + hh * s * d;
    const double* K = k.data().data() + hh * t * d;
    const double* V = v.data().data() + hh * t * d;
    double* P = probs.data() + hh * s * t;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, S, T, D, inv_sqrt, Q, D, K, D, 0.0, P, T);
    for (std::size_t i = 0; i < s; ++i) {
      double* row = P + i * t;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < t; ++j)
        if (mask.allowed(i, j)) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        row[j] = mask.allowed(i, j) ? std::exp(row[j] - mx) : 0.0;
        z += row[j];
      }
      for (std::size_t j = 0; j < t; ++j) row[j] /= z;
    }
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, S, D, T, 1.0, P, T, V, D, 0.0, out.data() + hh * s * d, D);
  }
  return Tensor::make_result(
      {h, s, d}, std::move(out), {&q, &k, &v},
      [h, S, D, T, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        const std::size_t s = static_cast<std::size_t>(S), t = static_cast<std::size_t>(T),
                          d = static_cast<std::size_t>(D);
        std::vector<double> dscore(s * t);
        for (std::size_t hh = 0; hh < h; ++hh) {
          const double* Q = pq.data.data() + hh * s * d;
          const double* K = pk.data.data() + hh * t * d;
          const double* V = pv.data.data() + hh * t * d;
          const double* P = probs.data() + hh * s * t;
          const double* G = self.grad.data() + hh * s * d;
          if (pv.requires_grad)
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, T, D, S, 1.0, P, T, G, D, 1.0,
                        pv.grad.data() + hh * t * d, D);
          if (!pq.requires_grad && !pk.requires_grad) continue;
          // dP = G Vᵀ, then the softmax Jacobian row by row (masked entries have P = 0).
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, S, T, D, 1.0, G, D, V, D, 0.0, dscore.data(), T);
          for (std::size_t i = 0; i < s; ++i) {
            double* ds = dscore.data() + i * t;
            const double* row = P + i * t;
            double dot = 0.0;
            for (std::size_t j = 0; j < t; ++j) dot += ds[j] * row[j];
            for (std::size_t j = 0; j < t; ++j) ds[j] = row[j] * (ds[j] - dot) * inv_sqrt;
          }
          if (pq.requires_grad)
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, S, D, T, 1.0, dscore.data(), T, K, D, 1.0,
                        pq.grad.data() + hh * s * d, D);
          if (pk.requires_grad)
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, T, D, S, 1.0, dscore.data(), T, Q, D, 1.0,
                        pk.grad.data() + hh * t * d, D);
        }
      });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 2, "split_heads");
  const std::size_t s = x.dim(0), width = x.dim(1);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t d = width / heads;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t c = 0; c < d; ++c) out[(hh * s + i) * d + c] = x[i * width + hh * d + c];
  return Tensor::make_result({heads, s, d}, std::move(out), {&x}, [s, heads, d, width](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t hh = 0; hh < heads; ++hh)
        for (std::size_t c = 0; c < d; ++c) p.grad[i * width + hh * d + c] += self.grad[(hh * s + i) * d + c];
  });
}

Tensor merge_heads(const Tensor& x) {
  require_rank(x, 3, "merge_heads");
  const std::size_t heads = x.dim(0), s = x.dim(1), d = x.dim(2), width = heads * d;
  std::vector<double> out(x.size());
  for (std::size_t hh = 0; hh < heads; ++hh)
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t c = 0; c < d; ++c) out[i * width + hh * d + c] = x[(hh * s + i) * d + c];
  return Tensor::make_result({s, width}, std::move(out), {&x}, [s, heads, d, width](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t c = 0; c < d; ++c) p.grad[(hh * s + i) * d + c] += self.grad[i * width + hh * d + c];
  });
}

// ---------------------------------------------------------------------------

Tensor cross_entropy_logits(const Tensor& logits, std::size_t target) {
  const std::size_t k = logits.size();
  if (logits.rank() != 1 && !(logits.rank() == 2 && logits.dim(0) == 1)) {
    throw DimensionError("cross_entropy_logits: expected a logit vector, got " + shape_str(logits.shape()));
  }
  if (target >= k) {
    throw std::out_of_range("cross_entropy_logits: target " + std::to_string(target) + " outside [0," +
                            std::to_string(k) + ")");
  }
  const int t = static_cast<int>(target);
  return cross_entropy_rows_sum(reshape(logits, {1, k}), std::span<const int>(&t, 1));
}

Tensor cross_entropy_rows_sum(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy_rows_sum");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_rows_sum: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  }
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw std::out_of_range("cross_entropy_rows_sum: target " + std::to_string(targets[r]) + " outside [0," +
                              std::to_string(cols) + ")");
    }
    const double* in = logits.data().data() + r * cols;
    double* pr = probs.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (pr[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) pr[c] /= z;
    total += -(in[targets[r]] - mx - std::log(z));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return Tensor::make_result({1}, {total}, {&logits},
                             [rows, cols, probs = std::move(probs), tg = std::move(tg)](detail::Node& self) {
                               auto& p = *self.parents[0];
                               const double g = self.grad[0];
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < cols; ++c)
                                   p.grad[r * cols + c] += g * probs[r * cols + c];
                                 p.grad[r * cols + tg[r]] -= g;
                               }
                             });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size()) {
    throw DimensionError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t n = pred.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return Tensor::make_result({1}, {s / static_cast<double>(n)}, {&pred, &target}, [n](detail::Node& self) {
    auto& pp = *self.parents[0];
    auto& pt = *self.parents[1];
    const double g = self.grad[0] * 2.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = pp.data[i] - pt.data[i];
      if (pp.requires_grad) pp.grad[i] += g * diff;
      if (pt.requires_grad) pt.grad[i] -= g * diff;
    }
  });
}

}  // namespace mtlgen
