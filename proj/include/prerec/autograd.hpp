#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape records operations in creation order; backward() replays them in
// reverse. Parameters live outside the tape (Param) and accumulate gradients
// across tapes until the optimizer consumes them. A tape constructed with
// record = false only evaluates values, which is how inference runs.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prerec/tensor.hpp"

namespace prerec::ag {

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  // Latent tables regularized by an explicit prior term are excluded from
  // optimizer weight decay.
  bool decay = true;

  Param() = default;
  Param(std::string n, Matrix v, bool with_decay = true)
      : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols), decay(with_decay) {}

  void zero_grad();
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  double scalar() const { return value().data.at(0); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix m);
  Var param(Param& p);
  // Rows of a parameter table; gradients scatter straight into p.grad.
  Var gather_param_rows(Param& p, std::span<const std::size_t> rows);

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and propagates to all inputs.
  void backward(Var loss);

  // Internal interface used by the op implementations.
  using Backward = std::function<void(Tape&, std::size_t self)>;
  // `requires_grad` is false for nodes that no parameter flows into.
  Var push(Matrix value, Backward back, bool requires_grad);
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  Matrix& grad(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward back;
    bool requires_grad = false;
  };
  bool record_;
  std::deque<Node> nodes_;
};

// Shape-checked operations. All operands must belong to the same tape.
Var matmul(Var a, Var b);       // (n x k) * (k x m)
Var matmul_bt(Var a, Var b);    // (n x k) * (m x k)^T
Var add(Var a, Var b);          // same shape
Var sub(Var a, Var b);          // same shape
Var mul(Var a, Var b);          // elementwise
Var add_row(Var a, Var row);    // broadcast 1 x m over rows of n x m
Var add_scalar(Var a, Var s);   // broadcast 1 x 1
Var affine(Var a, double alpha, double beta);  // alpha * a + beta
Var tanh(Var a);
Var sigmoid(Var a);
Var gelu(Var a);
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
// Row-wise softmax of scale * s over columns j <= i (lower-triangular mask).
Var causal_softmax(Var s, double scale);
// Multi-head causal self-attention run independently on each row segment
// [starts[s], starts[s + 1]). q, k, v are R x B with B divisible by heads;
// starts begins at 0 and ends at R.
Var segmented_causal_attention(Var q, Var k, Var v, std::span<const std::size_t> starts, std::size_t heads);
Var col_slice(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var row_slice(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var reshape(Var a, std::size_t rows, std::size_t cols);
// out(p, c) = u.row(p) . v.row(p * C + c), with C = v.rows / u.rows.
Var grouped_rowdot(Var u, Var v);
// Sum over rows of -log softmax(logits.row(r))[target[r]].
Var cross_entropy(Var logits, std::span<const std::size_t> targets);
Var sum_squares(Var a);
Var sum(Var a);

}  // namespace prerec::ag
