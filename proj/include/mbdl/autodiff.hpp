#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "mbdl/tensor.hpp"

namespace mbdl::ad {

/// Primitive kinds recorded on a tape.
enum class Op {
  leaf,
  matmul,
  add,
  subtract,
  scale,
  multiply,
  soft_threshold,
  tanh,
  sigmoid,
  relu,
  sum,
  squared_norm,
  l1_norm,
  reshape,
  concatenate,
  spd_solve,
  // extensions used by the trainers
  transpose,
  softplus,
  reciprocal,
  add_column,
  batched_matvec,
  map_columns,
};

std::string_view op_name(Op op);

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor::Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Result of a backward pass: adjoints keyed by node id.
class Gradients {
 public:
  /// Gradient of the root w.r.t. v; zeros when v does not influence the root.
  Tensor operator[](const Var& v) const;
  bool has(std::size_t id) const { return id < present_.size() && present_[id]; }
  /// Adjoints of all leaves that influence the root.
  std::map<std::size_t, Tensor> leaves() const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

/// Passed to a node's local backward rule.
class BackwardContext {
 public:
  BackwardContext(const std::vector<bool>& needs, std::vector<Tensor>& out) : needs_(needs), out_(out) {}
  bool needs(std::size_t parent) const { return needs_[parent]; }
  void accumulate(std::size_t parent, Tensor grad) { out_[parent] = std::move(grad); }

 private:
  const std::vector<bool>& needs_;
  std::vector<Tensor>& out_;
};

/// Append-only record of eager operations. Not copyable or movable: Vars
/// point back into it. One tape per worker thread.
class Tape {
 public:
  using Backward = std::function<void(const Tensor& grad_out, BackwardContext& ctx)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  /// Generic entry point; `target` is the new shape for reshape and ignored otherwise.
  Var record(Op op, std::span<const Var> inputs, const Tensor::Shape& target = {});

  /// Reverse sweep from a scalar root in strict reverse append order.
  Gradients backward(const Var& root) const;

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  Op op(std::size_t id) const { return nodes_.at(id).op; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_leaf(std::size_t id) const { return nodes_.at(id).op == Op::leaf; }

  Var push(Op op, Tensor value, std::vector<std::size_t> parents, Backward backward);
  void check_owned(const Var& v) const;

 private:
  struct Node {
    Op op;
    Tensor value;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad;
  };
  std::deque<Node> nodes_;
};

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Multiply x by a single-element Var.
Var scale(const Var& factor, const Var& x);
Var scale(double factor, const Var& x);
Var multiply(const Var& a, const Var& b);
/// Elementwise shrinkage with a single-element threshold. The derivative is
/// taken as zero on |x| <= beta, including the kink.
Var soft_threshold(const Var& x, const Var& beta);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var relu(const Var& x);
Var sum(const Var& x);
Var squared_norm(const Var& x);
Var l1_norm(const Var& x);
Var reshape(const Var& x, Tensor::Shape shape);
Var concatenate(std::span<const Var> items);
/// a^{-1} b for symmetric positive definite a. The adjoint reuses the forward factor.
Var spd_solve(const Var& a, const Var& b);
Var transpose(const Var& x);
Var softplus(const Var& x);
Var reciprocal(const Var& x);
/// matrix [r x c] plus column [r] or [r x 1] broadcast over columns.
Var add_column(const Var& matrix, const Var& column);
/// Per-column matrix-vector product: column b of `gains` [rows*k x B] is a
/// row-major rows x k matrix applied to column b of `vecs` [k x B].
Var batched_matvec(const Var& gains, const Var& vecs, std::size_t rows);

using ColumnMap = std::function<Tensor(const Tensor& column, std::size_t b)>;
/// Column b of the [d x B] result is f(x_b, b); the adjoint applies the
/// caller's Jacobian J(x_b, b)^T. Not reachable through Tape::record.
Var map_columns(const Var& x, ColumnMap f, ColumnMap jacobian);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double f, const Var& x) { return scale(f, x); }

/// Scalar helpers.
double softplus(double x);
double softplus_inverse(double y);

}  // namespace mbdl::ad
