#pragma once

#include <cstddef>
#include <vector>

#include "chmffn/tensor.hpp"

// Differentiable tensor primitives. Each records itself on the active tape
// when an operand requires a gradient.
namespace chmffn {

// Element-wise binary ops. The output has a's shape; b must equal it or be
// broadcastable by the trailing-dimension rule (b right-aligned against a,
// each b dimension equal to a's or 1). Broadcast gradients are summed.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// Subgradient 0 at the origin.
Tensor abs(const Tensor& a);

// (m,k)x(k,n); (B,m,k)x(B,k,n); (B,m,k)x(k,n) with b shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swaps the last two dimensions.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
// Copies; no storage is shared with the input.
Tensor reshape(const Tensor& a, Shape shape);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// True when b can be broadcast onto a under the trailing-dimension rule.
bool broadcastable(const Shape& a, const Shape& b);

}  // namespace chmffn
