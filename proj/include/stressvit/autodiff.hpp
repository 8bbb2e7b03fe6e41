#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "stressvit/rng.hpp"
#include "stressvit/tensor.hpp"

namespace stressvit {

// First/second moment estimates kept per parameter by Adam and AdamW.
struct MomentState {
  Tensor first;
  Tensor second;
  std::int64_t step = 0;
};

struct Parameter {
  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  Tensor value;
  Tensor grad;
  bool trainable = true;
  MomentState moments;

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

namespace detail {

struct Node {
  Tensor value;
  const Tensor* borrowed = nullptr;
  Tensor grad;
  Tape* tape = nullptr;  // non-null iff gradients flow through this node
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  const Tensor& val() const { return borrowed ? *borrowed : value; }
  bool requires_grad() const { return tape != nullptr; }
  Tensor& grad_buffer();
};

}  // namespace detail

// Handle to a value produced by a differentiable operation.
class Var {
 public:
  Var() = default;

  const Tensor& value() const { return node_->val(); }
  const Shape& shape() const { return node_->val().shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad(); }
  // Accumulated gradient after Tape::backward, or nullptr.
  const Tensor* grad() const { return node_->grad.empty() ? nullptr : &node_->grad; }
  bool valid() const { return static_cast<bool>(node_); }

 private:
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend class Tape;
  friend struct OpBuilder;
};

// Records differentiable operations in execution order. Nodes are appended only
// when at least one input requires a gradient, so frozen sub-graphs cost nothing.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound to a parameter. Frozen parameters become constants.
  Var param(const Parameter& p);

  // Reverse sweep from a scalar loss.
  void backward(const Var& loss);

  // Gradient accumulated for a parameter leaf, or nullptr when none reached it.
  const Tensor* grad_of(const Parameter& p) const;

  std::size_t size() const { return ops_.size(); }
  void clear();

 private:
  friend struct OpBuilder;
  void record(const std::shared_ptr<detail::Node>& n) { ops_.push_back(n); }

  std::vector<std::shared_ptr<detail::Node>> ops_;
  std::unordered_map<const Parameter*, std::shared_ptr<detail::Node>> params_;
};

// Parameter leaf; with no tape the parameter is read as a constant.
Var leaf(const Parameter& p, Tape* tape);
Var constant(Tensor t);

// Runs tape.backward(loss) and writes gradients into `params`: trainable ones
// receive the exact reverse-mode derivative, frozen ones a zero tensor.
void backward(const Var& loss, Tape& tape, std::span<Parameter* const> params);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var gelu(const Var& x);
Var dropout(const Var& x, double p, bool training, Rng* rng);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var reshape(const Var& x, Shape shape);
Var sum(const Var& x);
// Mean over rows of softplus-stable binary cross-entropy; logits [B x 1].
Var bce_with_logits(const Var& logits, std::span<const int> labels);

}  // namespace stressvit
