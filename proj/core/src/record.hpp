#pragma once

#include <utility>
#include <vector>

#include "chmffn/tape.hpp"
#include "chmffn/tensor.hpp"

namespace chmffn::detail {

inline bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

// Attaches `out` to the active tape when any input needs a gradient. The
// backward factory receives the (shared) output handle and must return the
// closure that propagates out.grad() into the inputs.
template <typename MakeBackward>
Tensor finish(Tensor out, std::vector<Tensor> inputs, MakeBackward&& make_backward) {
  Tape* tape = active_tape();
  if (tape == nullptr || !any_requires_grad(inputs)) return out;
  out.mark_nonleaf();
  auto fn = make_backward(out);
  tape->record(std::move(inputs), out, std::move(fn));
  return out;
}

inline bool wants_grad(const Tensor& t) { return t.requires_grad(); }

}  // namespace chmffn::detail
