#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mic/tensor.hpp"

/// Tape-based reverse-mode differentiation over dense tensors.
///
/// Every op appends a node holding its forward value and a backward closure.
/// Nodes are created in topological order, so `Tape::backward` is a single
/// reverse sweep that visits each reachable node once and accumulates
/// gradients additively at fan-out.
namespace mic::ag {

struct BackwardContext {
  const Tensor& grad_out;
  const Tensor& out;
  std::span<const Tensor* const> in;
  /// Null for inputs that do not require a gradient.
  std::span<Tensor* const> in_grad;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  /// Gradient after Tape::backward; zeros if the node was not reached.
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value, std::string name = "leaf");
  /// Input excluded from differentiation.
  Var constant(Tensor value);
  /// Appends an op node. An empty `backward` marks the op as having no
  /// registered gradient; reaching it during backward() throws UnregisteredOp.
  Var record(std::string op, Tensor value, const std::vector<Var>& inputs,
             BackwardFn backward);

  /// Reverse sweep from a scalar root; resets previous gradients first.
  void backward(const Var& root);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Test hook: scales the incoming gradient of every `op` node by `scale`
  /// during backward, producing a deliberately wrong derivative.
  void inject_fault(std::string op, double scale = 1.5);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  void ensure_grad(Node& node);

  std::deque<Node> nodes_;
  std::string fault_op_;
  double fault_scale_ = 1.0;
};

// Elementwise binary ops with right-aligned broadcasting (size-1 axes expand).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

/// a * x + b elementwise.
Var affine(const Var& x, double a, double b);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& x);
Var operator+(const Var& x, double s);
Var operator+(double s, const Var& x);
Var operator-(const Var& x, double s);
Var operator-(double s, const Var& x);
Var operator*(const Var& x, double s);
Var operator*(double s, const Var& x);
Var operator/(const Var& x, double s);

Var exp(const Var& x);
Var log(const Var& x);
/// Gradient is taken as 0 where the output is 0.
Var sqrt(const Var& x);
Var square(const Var& x);
/// max(0, x) with subgradient 0 at 0.
Var relu(const Var& x);
/// tanh approximation of GELU.
Var gelu(const Var& x);
/// max(0, |x| - tau)^2, gradient 0 on the deadzone boundary and at 0.
Var hinge_sq(const Var& x, double tau);

Var sum(const Var& x);
Var mean(const Var& x);
Var sum_axis(const Var& x, std::size_t axis, bool keepdim);
Var mean_axis(const Var& x, std::size_t axis, bool keepdim);

Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<std::size_t>& axes);
/// Columns [begin, end) of the last axis.
Var slice_last(const Var& x, std::size_t begin, std::size_t end);
/// Rows [begin, end) of the first axis.
Var slice_first(const Var& x, std::size_t begin, std::size_t end);
/// Diagonal of a square matrix as a vector.
Var diag(const Var& x);

Var matmul(const Var& a, const Var& b);
/// Batched (n, p, q) x (n, q, r) -> (n, p, r).
Var bmm(const Var& a, const Var& b);

/// Numerically stable log-sum-exp over the last axis.
Var logsumexp_last(const Var& x);
Var softmax_last(const Var& x);

/// Rows of `table` (V, D) indexed by `ids`; output shape is `ids_shape` + (D).
Var gather_rows(const Var& table, const std::vector<std::int32_t>& ids,
                const Shape& ids_shape);

// Masked statistics over the token axis of (B, L, D) tensors.
Var masked_mean_pool(const Var& h, const SequenceMask& m);
Var masked_std(const Var& h, const SequenceMask& m);
Var masked_standardize(const Var& h, const SequenceMask& m, EpsilonPolicy eps);
/// (1/B) sum_i (1/N_i) sum_{active l} a[i,l] b[i,l]^T, shape (Da, Db).
Var token_cross_correlation(const Var& a, const Var& b, const SequenceMask& m);

/// Rows scaled to unit norm with an eps-floored norm.
Var row_normalize(const Var& z, EpsilonPolicy eps);

}  // namespace mic::ag
