#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "chmffn/tensor.hpp"

namespace chmffn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  // Location of the worst entry, for diagnostics.
  std::string worst;
  bool passed = false;
};

/// Compares reverse-mode gradients against central differences.
///
/// `f` must be scalar-valued and deterministic; it is evaluated twice at the
/// unperturbed point and a bitwise mismatch raises NumericError. The
/// relative error of an entry is |analytic - numeric| / max(|analytic|,
/// |numeric|, floor), so entries whose true gradient is zero are judged on
/// an absolute scale of `floor`.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double step, double tol, double floor = 1e-4);

// Single-input form: f(x).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double step, double tol, double floor = 1e-4);

}  // namespace chmffn
