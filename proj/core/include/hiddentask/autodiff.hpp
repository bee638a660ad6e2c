#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records every primitive applied to its Vars. backward() replays the
// record in reverse and returns the gradient of a scalar output with respect
// to each recorded node. One tape belongs to one thread of execution.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "hiddentask/tensor.hpp"

namespace hiddentask {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_;
  std::size_t id_;
};

class Gradients {
 public:
  /// Gradient for v; a zero tensor of v's shape when nothing reached it.
  Tensor operator[](Var v) const;
  bool reached(Var v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  /// Accumulates into the gradients of a node's inputs. A null slot means the
  /// input does not need a gradient.
  using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor* const> in_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Gradients of a single-element output. Consumes the tape: values stay
  /// readable, but no further nodes or backward passes are accepted.
  Gradients backward(Var output);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owner(Var v) const;

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
/// a[N,M] + b[M], bias broadcast over rows.
Var add_row_vector(Var a, Var b);
/// [N,K] x [K,M] -> [N,M].
Var matmul(Var a, Var b);
/// x[N,C,H,W] * w[O,C,k,k] + b[O], stride 1, zero padding k/2 ("same" output).
Var conv2d(Var x, Var w, Var b);
/// Non-overlapping window x window average pooling on [N,C,H,W].
Var avg_pool2d(Var x, std::size_t window);
Var reshape(Var a, Shape shape);
/// [N, ...] -> [N, prod(rest)].
Var flatten_rows(Var a);

/// Subgradient at exactly 0 is 0.
Var relu(Var a);
/// Over the last axis; rank 1 or 2.
Var softmax(Var a);
Var log(Var a);
Var square(Var a);
/// Gradient at 0 is taken as 0.
Var sqrt(Var a);

Var sum(Var a);
Var mean(Var a);
/// Population standard deviation over all elements; gradient 0 when constant.
Var std_all(Var a);
/// Euclidean norm of all elements; gradient 0 at the origin.
Var l2_norm(Var a);

/// Per-row reductions of [N, ...] to [N].
Var row_sum(Var a);
Var row_l2_norm(Var a);
Var row_std(Var a);

/// Stable softmax cross-entropy, logits[N,C] with one label per row -> [N].
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace ops

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h = 1e-5);

}  // namespace hiddentask
