// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// Ops are free functions that take the Tape they record onto. A node is
// appended only when the tape is recording and at least one input requires a
// gradient, so inference runs through the same code with a non-recording tape.
// Tape::backward walks the node list in exact reverse append order.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cllmfs::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

// Shared handle; copies alias the same storage. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) const { impl_->requires_grad = value; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient storage belongs to the shared record, so these are usable on
  // const handles. grad() allocates a zero gradient on first use.
  std::span<double> grad() const;
  std::span<const double> grad_view() const { return impl_->grad; }
  void zero_grad() const;
  void drop_grad() const { impl_->grad.clear(); }

  Tensor clone() const;
  const TensorData* id() const noexcept { return impl_.get(); }

 private:
  std::shared_ptr<TensorData> impl_;
};

enum class OpKind {
  matmul,
  matmul_nt,
  add,
  sub,
  mul,
  scale,
  sum,
  mean,
  reshape,
  rms_norm,
  silu_mul,
  rope,
  causal_attention,
  softmax,
  softmax_cross_entropy,
  cosine_similarity,
  gather_rows,
  gather_cols,
  mean_rows,
  stack,
  select,
  logsumexp,
};

const char* to_string(OpKind kind);

struct Node {
  OpKind kind;
  std::vector<const TensorData*> inputs;
  Tensor output;
  std::function<void()> backward;
};

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)=1 and propagates. Intermediate gradients are reset first;
  // leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  // Internal: called by ops.
  bool wants(std::initializer_list<const Tensor*> inputs) const;
  void record(OpKind kind, std::vector<const TensorData*> inputs, Tensor output,
              std::function<void()> backward);

 private:
  bool recording_;
  std::vector<Node> nodes_;
};

// Test hook for mutation sanity checks: negates the gradient flowing through
// every node of the given kind. Process-global; not thread-safe.
void set_gradient_fault(std::optional<OpKind> kind);

// --- ops -------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);  // [m×k]·[n×k]ᵀ
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);

// y = gain ⊙ x / sqrt(mean(x²) + eps), per trailing-dimension row.
Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& gain, double eps);
// silu(gate) ⊙ up, elementwise.
Tensor silu_mul(Tape& tape, const Tensor& gate, const Tensor& up);
// silu(x·w_gate) ⊙ (x·w_up) with w_gate, w_up of shape [d×f].
Tensor swiglu(Tape& tape, const Tensor& x, const Tensor& w_gate, const Tensor& w_up);
// x: [seq×heads×head_dim]; pair (2i, 2i+1) rotated by pos·base^(−2i/head_dim).
Tensor rope_rotate(Tape& tape, const Tensor& x, std::span<const double> positions, double base);
// Causal scaled-dot-product attention with grouped K/V.
// q: [seq×(n_heads·hd)], k and v: [seq×(n_groups·hd)]. Query head h reads
// group h / (n_heads / n_groups).
Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t n_heads, std::size_t n_groups);
Tensor softmax(Tape& tape, const Tensor& x);  // over the trailing dimension
// Mean over rows of −log softmax(logits)[target].
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> targets);
Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b);
// rows of table[V×d] at ids -> [n×d]
Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> ids);
// columns of a[r×V] at ids -> [n×r]
Tensor gather_cols(Tape& tape, const Tensor& a, std::span<const std::size_t> ids);
// mean of rows [start, end) of x[seq×d] -> [d]
Tensor mean_rows(Tape& tape, const Tensor& x, std::size_t start, std::size_t end);
Tensor stack(Tape& tape, std::span<const Tensor> scalars);
Tensor select(Tape& tape, const Tensor& x, std::size_t index);
Tensor logsumexp(Tape& tape, const Tensor& x);

// Row-wise softmax on raw values, max-shifted; used by decoding and tests.
std::vector<double> softmax_values(std::span<const double> logits);

}  // namespace cllmfs::ad
