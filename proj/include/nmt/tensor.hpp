// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with a recording tape for reverse-mode differentiation.
//
// Every op is a free function. When a Graph is active on the calling thread
// (see GraphScope) and at least one input requires a gradient, the op appends
// a node to the graph; backward() then replays the nodes in reverse order.
// Outside a GraphScope the same functions are plain numeric kernels.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
};
}  // namespace detail

/// Reference-semantics handle over shared storage. Copying a Tensor aliases
/// the same buffer; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Allocates a zero gradient buffer on first use. Tensors are handles, so
  /// the buffer is writable through a const handle.
  std::span<double> grad() const;
  void zero_grad() const;

  /// Independent copy of the values; the copy does not require a gradient.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Storage> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::Storage> impl_;
};

/// Recording tape. Nodes are appended in evaluation order, which is therefore
/// a topological order of the computation.
class Graph {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  void record(const char* op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

/// Makes a graph the active recording target for the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

/// Suspends recording on the current thread (nothing is taped while alive).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

/// Accumulates dLoss/dLeaf into every leaf that requires a gradient.
/// Intermediate gradients are reset first, so calling twice doubles leaf
/// gradients exactly.
void backward(Graph& graph, const Tensor& loss);

/// Global L2 norm over all gradient buffers; rescales them in place when the
/// norm exceeds max_norm. A non-finite norm is returned as is, with no scaling.
double clip_global_norm(std::span<const std::span<double>> grads, double max_norm);
/// clip_global_norm over the gradient buffers of `params`.
double clip_gradients(std::span<Tensor> params, double max_norm);

// ---------------------------------------------------------------------------
// Primitive ops.
//
// matmul(a, b): a is [..., k], b is [k, n]; leading dims of a are flattened.
// add(a, b): same shape, or b is a vector matching a's trailing dim (bias).
// Elementwise ops require identical shapes. Row-wise ops act on the last dim.
// ---------------------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor maximum_pairwise(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
/// Softmax over entries with mask 1; masked entries are exactly 0.
Tensor masked_softmax_rows(const Tensor& a, const Tensor& mask);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Concatenation along the last dim; leading dims must agree.
Tensor concat(std::span<const Tensor> parts);
Tensor concat(std::initializer_list<Tensor> parts);
/// Columns [begin, end) of the last dim.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);
/// Rows of a [V, d] table gathered by id -> [n, d].
Tensor lookup_rows(const Tensor& table, std::span<const int> ids);
/// out[i] = a[i, ids[i]] for a [B, V] -> [B].
Tensor pick(const Tensor& a, std::span<const int> ids);
/// Per row i of [B, d] inputs: mask[i] == 1 selects a's row, 0 selects b's.
Tensor blend_rows(const Tensor& a, const Tensor& b, const Tensor& mask);
/// Stacks L tensors of shape [B, d] into [B, L, d].
Tensor stack_positions(std::span<const Tensor> parts);
/// a [B, L, d] plus b [B, d] broadcast over L.
Tensor add_over_positions(const Tensor& a, const Tensor& b);
/// out[b, :] = sum_j w[b, j] * x[b, j, :] for w [B, L], x [B, L, d].
Tensor weighted_sum_positions(const Tensor& w, const Tensor& x);

}  // namespace nmt
