// SPDX-License-Identifier: Apache-2.0

#include "cllmfs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cllmfs/error.hpp"

namespace cllmfs {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::config: return "configuration";
    case ErrorKind::index: return "index";
    case ErrorKind::length: return "length";
    case ErrorKind::degenerate: return "degenerate-input";
    case ErrorKind::contract: return "contract";
    case ErrorKind::io: return "I/O";
    case ErrorKind::data: return "data";
    case ErrorKind::parse: return "parse";
    case ErrorKind::oracle: return "oracle";
    case ErrorKind::sampling: return "sampling";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return 2;
    case ErrorKind::data:
    case ErrorKind::parse:
    case ErrorKind::sampling: return 3;
    case ErrorKind::config: return 4;
    default: return 1;
  }
}

}  // namespace cllmfs

namespace cllmfs::ad {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "×";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<TensorData>();
  t.impl_->data.assign(shape_numel(shape), 0.0);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw Error(ErrorKind::dimension, "shape " + shape_str(shape) + " does not hold " +
                                          std::to_string(values.size()) + " values");
  }
  Tensor t;
  t.impl_ = std::make_shared<TensorData>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw Error(ErrorKind::contract, "item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return from(impl_->shape, impl_->data, impl_->requires_grad);
}

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_nt: return "matmul_nt";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::rms_norm: return "rms_norm";
    case OpKind::silu_mul: return "silu_mul";
    case OpKind::rope: return "rope_rotate";
    case OpKind::causal_attention: return "causal_attention";
    case OpKind::softmax: return "softmax";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::cosine_similarity: return "cosine_similarity";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::gather_cols: return "gather_cols";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::stack: return "stack";
    case OpKind::select: return "select";
    case OpKind::logsumexp: return "logsumexp";
  }
  return "unknown";
}

namespace {
std::optional<OpKind> g_fault;
}

void set_gradient_fault(std::optional<OpKind> kind) { g_fault = kind; }

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(OpKind kind, std::vector<const TensorData*> inputs, Tensor output,
                  std::function<void()> backward) {
#ifndef NDEBUG
  for (double v : output.data()) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::numeric, std::string("non-finite output from ") + to_string(kind));
    }
  }
#endif
  output.set_requires_grad(true);
  nodes_.push_back(Node{kind, std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorKind::contract, "backward requires a scalar loss, got " +
                                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  const bool in_graph = std::any_of(nodes_.begin(), nodes_.end(),
                                    [&](const Node& n) { return n.output.id() == loss.id(); });
  if (!in_graph) throw Error(ErrorKind::contract, "backward loss is not a node of this tape");

  for (auto& node : nodes_) node.output.zero_grad();
  Tensor seed = loss;
  seed.grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (!node.output.has_grad()) continue;
    if (g_fault && *g_fault == node.kind) {
      for (auto& g : node.output.grad()) g = -g;
      node.backward();
      for (auto& g : node.output.grad()) g = -g;
    } else {
      node.backward();
    }
  }
}

std::vector<double> softmax_values(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  if (!std::isfinite(mx)) {
    throw Error(ErrorKind::degenerate, "softmax over a row with no finite logits");
  }
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

}  // namespace cllmfs::ad
