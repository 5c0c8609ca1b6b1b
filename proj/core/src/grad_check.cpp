#include "chmffn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "chmffn/error.hpp"
#include "chmffn/tape.hpp"

namespace chmffn {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  Tensor y = f();
  if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  return y.item();
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double step, double tol, double floor) {
  const double y0 = eval_scalar(f);
  const double y1 = eval_scalar(f);
  if (std::memcmp(&y0, &y1, sizeof(double)) != 0) {
    throw NumericError("grad_check: f is not deterministic");
  }

  std::vector<bool> saved_flags;
  for (auto& x : inputs) {
    saved_flags.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.grad_buffer();
    x.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f();
    if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    if (y.requires_grad()) tape.backward(y);
  }

  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor& x = inputs[t];
    auto data = x.data();
    auto analytic = x.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double fp = eval_scalar(f);
      data[i] = orig - step;
      const double fm = eval_scalar(f);
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double rel = abs_err / denom;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) {
          report.worst = "input " + std::to_string(t) + " index " + std::to_string(i) +
                         " analytic " + std::to_string(analytic[i]) + " numeric " +
                         std::to_string(numeric);
        }
      }
      ++report.checked;
    }
  }
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    inputs[t].zero_grad();
    inputs[t].set_requires_grad(saved_flags[t]);
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double step, double tol, double floor) {
  return grad_check([&f, x]() { return f(x); }, {x}, step, tol, floor);
}

}  // namespace chmffn
