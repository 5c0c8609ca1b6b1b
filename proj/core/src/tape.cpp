#include "chmffn/tape.hpp"

#include <algorithm>

#include "chmffn/error.hpp"

namespace chmffn {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  // Intermediate gradients are per-pass scratch; only leaves accumulate.
  for (auto& node : nodes_) {
    auto g = node.output.grad_buffer();
    std::fill(g.begin(), g.end(), 0.0);
  }
  Tensor seed = loss;
  if (!seed.requires_grad()) {
    throw Error("backward: loss does not depend on any tensor requiring a gradient");
  }
  seed.grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

}  // namespace chmffn
