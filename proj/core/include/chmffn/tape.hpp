#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "chmffn/tensor.hpp"

namespace chmffn {

/// Ordered record of differentiable operations.
///
/// Operations record themselves on the tape installed by the innermost
/// TapeScope of the calling thread, and only when at least one operand
/// requires a gradient. Recording order is a topological order, so
/// backward() replays the nodes in reverse. Leaf gradients accumulate
/// across calls; intermediate gradients are reset at the start of every
/// backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Tape of the innermost live TapeScope on this thread, or nullptr.
Tape* active_tape();

// Suspends recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

void backward(Tape& tape, const Tensor& loss);

}  // namespace chmffn
