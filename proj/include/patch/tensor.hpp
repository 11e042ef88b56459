#pragma once

// Minimal reverse-mode automatic differentiation over dense float32 arrays.
//
// A Tensor is a shared handle to a graph node. Operations build new nodes that
// remember their parents; Tape collects every node reachable from a scalar
// root in construction order and runs the backward pass in reverse. Only the
// operations the pruning pipeline needs are provided, and there is no implicit
// broadcasting: shapes must match exactly unless an op says otherwise.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace patch::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first written
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  std::vector<float>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<float> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);
  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<float> values);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const float> data() const { return node_->data; }
  // Leaf values may be updated in place (optimizer steps); never call this on
  // an op result that is still referenced by a live graph.
  std::span<float> mutable_data() { return node_->data; }
  float item() const;
  float at(std::size_t flat) const { return node_->data.at(flat); }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; zeros when nothing has been accumulated yet.
  std::vector<float> grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of the graph that produced `root`. Records are sorted by
// construction sequence, which is a valid topological order.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  // Seeds d(root)/d(root) = 1 and propagates to every recorded node that
  // requires gradients. Interior gradients are reset first; leaf gradients
  // accumulate across calls until zeroed.
  void backward();
  // Resets every tracked gradient buffer to exactly 0.0.
  void zero_grad();

  std::size_t size() const { return order_.size(); }
  std::span<Node* const> records() const { return order_; }

 private:
  std::shared_ptr<Node> root_;
  std::vector<Node*> order_;
};

// Convenience: Tape(root).backward().
void backward(const Tensor& root);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise on identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);

// Numerically stable softmax along `axis`.
Tensor softmax(const Tensor& a, std::size_t axis);
// Row-wise x / sqrt(mean(x^2) + eps) over the last axis of a 2-D tensor.
Tensor rms_norm(const Tensor& a, float eps = 1e-5f);

// Shape manipulation.
Tensor reshape(const Tensor& a, Shape shape);
// [n] -> [rows x n], repeating the vector on every row.
Tensor broadcast_rows(const Tensor& v, std::size_t rows);
// [r x c] -> [r*b1 x c*b2]: Kronecker product with the all-ones b1 x b2 block.
Tensor kron_expand(const Tensor& a, std::size_t b1, std::size_t b2);
// Stacks tensors of identical shape along a new trailing axis.
Tensor stack_last(const std::vector<Tensor>& parts);
// Picks index k of the trailing axis, dropping that axis.
Tensor select_last(const Tensor& a, std::size_t k);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);

// Reductions to a scalar (shape {1}).
Tensor sum(const Tensor& a);
Tensor sq_norm(const Tensor& a);

// Mean negative log-likelihood of integer targets under row-wise softmax.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);
// Row gather: out[i] = table[ids[i]].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

}  // namespace patch::ad
