#include "patch/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "patch/error.hpp"
#include "patch/kernels.hpp"

namespace patch::ad {
namespace {

std::atomic<std::uint64_t> g_seq{0};

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<float> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor data has " + std::to_string(values.size()) +
                         " values but shape " + to_string(shape) + " needs " +
                         std::to_string(numel(shape)));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Builds an op result. Parents and the backward closure are kept only when
// some input participates in differentiation.
Tensor make_result(Shape shape, std::vector<float> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(values), false);
  for (const Tensor* t : inputs) node->requires_grad = node->requires_grad || t->requires_grad();
  if (node->requires_grad) {
    for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<float> values, const std::vector<Tensor>& inputs,
                     std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(values), false);
  for (const Tensor& t : inputs) node->requires_grad = node->requires_grad || t.requires_grad();
  if (node->requires_grad) {
    for (const Tensor& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(a.shape()));
  }
}

std::vector<float> transposed(std::span<const float> src, std::size_t rows, std::size_t cols) {
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

// Unary elementwise op whose local derivative is computed from (x, y).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<float> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {&a}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<float>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor Tensor::constant(Shape shape, std::vector<float> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<float>(n, value));
}

Tensor Tensor::scalar(float value) { return constant({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), true));
}

float Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + ad::to_string(shape()));
  return node_->data[0];
}

std::vector<float> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<float>(node_->data.size(), 0.0f);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tape::Tape(const Tensor& root) : root_(root.node_ptr()) {
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root_.get()};
  seen.insert(root_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order_.push_back(n);
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order_.begin(), order_.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
}

void Tape::backward() {
  if (root_->data.size() != 1) {
    throw DimensionError("backward() needs a scalar root, got shape " + to_string(root_->shape));
  }
  for (Node* n : order_) {
    if (n->backward) n->grad.clear();
  }
  if (!root_->requires_grad) return;
  root_->ensure_grad()[0] += 1.0f;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

void Tape::zero_grad() {
  for (Node* n : order_) std::fill(n->grad.begin(), n->grad.end(), 0.0f);
}

void backward(const Tensor& root) { Tape(root).backward(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      const auto bt = transposed(pb.data, k, n);
      kernels::gemm(self.grad.data(), bt.data(), pa.ensure_grad().data(), m, n, k, true);
    }
    if (pb.requires_grad) {
      const auto at = transposed(pa.data, m, k);
      kernels::gemm(at.data(), self.grad.data(), pb.ensure_grad().data(), k, m, n, true);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  return make_result({c, r}, transposed(a.data(), r, c), {&a}, [r, c](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  return unary(a, [s](float x) { return s * x; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary(a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](float x) { return std::fabs(x); },
      [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](float x) { return x / (1.0f + std::exp(-x)); },
      [](float x, float) {
        const float s = 1.0f / (1.0f + std::exp(-x));
        return s * (1.0f + x * (1.0f - s));
      });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(a.shape()));
  }
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto x = a.data();
  std::vector<float> out(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, x[base + l * inner]);
      float total = 0.0f;
      for (std::size_t l = 0; l < len; ++l) {
        const float e = std::exp(x[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
    }
  }
  return make_result(s, std::move(out), {&a}, [outer, inner, len](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        float dot = 0.0f;
        for (std::size_t l = 0; l < len; ++l) dot += gy[base + l * inner] * y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          g[idx] += y[idx] * (gy[idx] - dot);
        }
      }
    }
  });
}

Tensor rms_norm(const Tensor& a, float eps) {
  require_rank("rms_norm", a, 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const auto x = a.data();
  std::vector<float> out(a.size());
  std::vector<float> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    float ss = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) ss += x[r * cols + c] * x[r * cols + c];
    inv[r] = 1.0f / std::sqrt(ss / static_cast<float>(cols) + eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * inv[r];
  }
  return make_result(a.shape(), std::move(out), {&a},
                     [rows, cols, inv = std::move(inv)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const float* y = self.data.data() + r * cols;
                         const float* gy = self.grad.data() + r * cols;
                         float dot = 0.0f;
                         for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                         const float mean = dot / static_cast<float>(cols);
                         for (std::size_t c = 0; c < cols; ++c)
                           g[r * cols + c] += inv[r] * (gy[c] - y[c] * mean);
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " +
                         to_string(shape));
  }
  std::vector<float> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {&a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  require_rank("broadcast_rows", v, 1);
  const std::size_t n = v.dim(0);
  std::vector<float> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::ptrdiff_t>(r * n));
  return make_result({rows, n}, std::move(out), {&v}, [rows, n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
  });
}

Tensor kron_expand(const Tensor& a, std::size_t b1, std::size_t b2) {
  require_rank("kron_expand", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  const std::size_t rows = r * b1, cols = c * b2;
  std::vector<float> out(rows * cols);
  const auto x = a.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x[(i / b1) * c + j / b2];
  return make_result({rows, cols}, std::move(out), {&a}, [c, b1, b2, rows, cols](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) g[(i / b1) * c + j / b2] += self.grad[i * cols + j];
  });
}

Tensor stack_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("stack_last: no inputs");
  for (const auto& p : parts) require_same_shape("stack_last", parts.front(), p);
  const std::size_t k = parts.size();
  const std::size_t e = parts.front().size();
  Shape shape = parts.front().shape();
  shape.push_back(k);
  std::vector<float> out(e * k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto x = parts[j].data();
    for (std::size_t i = 0; i < e; ++i) out[i * k + j] = x[i];
  }
  return make_result_n(std::move(shape), std::move(out), parts, [k, e](Node& self) {
    for (std::size_t j = 0; j < k; ++j) {
      Node& p = *self.parents[j];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < e; ++i) g[i] += self.grad[i * k + j];
    }
  });
}

Tensor select_last(const Tensor& a, std::size_t k) {
  if (a.rank() == 0 || k >= a.shape().back()) {
    throw IndexError("select_last: index " + std::to_string(k) + " out of range for shape " +
                     to_string(a.shape()));
  }
  const std::size_t kk = a.shape().back();
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  const std::size_t e = a.size() / kk;
  std::vector<float> out(e);
  for (std::size_t i = 0; i < e; ++i) out[i] = a.data()[i * kk + k];
  return make_result(std::move(shape), std::move(out), {&a}, [k, kk, e](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < e; ++i) g[i * kk + k] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_rank("slice_rows", a, 2);
  if (begin + count > a.dim(0)) {
    throw IndexError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for shape " +
                     to_string(a.shape()));
  }
  const std::size_t cols = a.dim(1);
  std::vector<float> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                         a.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  return make_result({count, cols}, std::move(out), {&a}, [begin, cols](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) {
      throw DimensionError("concat_rows: shape mismatch " + to_string(parts.front().shape()) +
                           " vs " + to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result_n({rows, cols}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->data.size();
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (float v : a.data()) total += v;
  return make_result({1}, {static_cast<float>(total)}, {&a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor sq_norm(const Tensor& a) {
  double total = 0.0;
  for (float v : a.data()) total += static_cast<double>(v) * v;
  return make_result({1}, {static_cast<float>(total)}, {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * p.data[i] * self.grad[0];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + to_string(logits.shape()));
  }
  std::vector<float> probs(logits.size());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  const auto x = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(tgt[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    const float* row = x.data() + r * vocab;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, row[v]);
    float se = 0.0f;
    for (std::size_t v = 0; v < vocab; ++v) {
      const float e = std::exp(row[v] - mx);
      probs[r * vocab + v] = e;
      se += e;
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] /= se;
    total += (mx + std::log(se)) - row[tgt[r]];
  }
  const auto mean = static_cast<float>(total / static_cast<double>(rows));
  return make_result({1}, {mean}, {&logits},
                     [rows, vocab, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       const float s = self.grad[0] / static_cast<float>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t v = 0; v < vocab; ++v) {
                           const float onehot = static_cast<std::size_t>(tgt[r]) == v ? 1.0f : 0.0f;
                           g[r * vocab + v] += s * (probs[r * vocab + v] - onehot);
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank("embedding", table, 2);
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<float> out(idx.size() * cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
      throw IndexError("embedding: id " + std::to_string(idx[i]) + " outside [0, " +
                       std::to_string(rows) + ")");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  const std::size_t n = idx.size();
  return make_result({n, cols}, std::move(out), {&table},
                     [cols, idx = std::move(idx)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t c = 0; c < cols; ++c)
                           g[static_cast<std::size_t>(idx[i]) * cols + c] += self.grad[i * cols + c];
                     });
}

}  // namespace patch::ad
