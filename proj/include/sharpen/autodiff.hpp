#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "sharpen/array.hpp"

namespace sharpen {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  bool valid() const { return tape != nullptr; }
};

enum class OpKind {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  matmul,
  tanh,
  silu,
  exp,
  log,
  softplus,
  sum,
  mean,
  sq_norm,
  row_sum,
  concat_cols,
  log_softmax,
};

const char* op_name(OpKind op);

/// Gradients produced by one backward pass, indexed by node id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Array>> grads) : grads_(std::move(grads)) {}

  /// Gradient with respect to `v`; zeros if the output does not depend on it.
  Array of(Var v) const;

 private:
  std::vector<std::optional<Array>> grads_;
};

/// Records primitive operations as they are evaluated (eager forward) so a
/// reverse sweep can produce gradients. Node ids are assigned in evaluation
/// order, so inputs always precede their consumers.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Array value);
  Var constant(Array value);

  const Array& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from `output` seeded with `seed` (same shape as output).
  /// Does not modify the tape; repeated calls return identical results.
  Gradients backward(Var output, const Array& seed) const;
  /// Reverse sweep from a single-element output with seed 1.
  Gradients backward(Var output) const;

  // Used by the primitive implementations.
  Var record(OpKind op, std::vector<std::size_t> inputs, Array value, double scalar = 0.0);

 private:
  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Array value;
    double scalar = 0.0;  // scale factor for OpKind::scale
    bool needs_grad = false;
  };

  void accumulate(std::vector<std::optional<Array>>& grads, std::size_t id, const Array& g) const;
  void propagate(const Node& node, const Array& g, std::vector<std::optional<Array>>& grads) const;

  std::vector<Node> nodes_;
};

// Elementwise binary ops broadcast 2-D operands along size-1 dimensions.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator-(Var a);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);
Var tanh(Var a);
Var silu(Var a);
Var exp(Var a);
Var log(Var a);
/// log(1 + exp(x)), evaluated stably.
Var softplus(Var a);
Var sum(Var a);
Var mean(Var a);
Var sq_norm(Var a);
/// (n x k) -> (n x 1) sums over columns.
Var row_sum(Var a);
Var concat_cols(std::span<const Var> parts);
Var log_softmax(Var a);

}  // namespace sharpen
