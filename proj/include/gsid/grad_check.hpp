#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gsid/autodiff.hpp"
#include "gsid/errors.hpp"

namespace gsid {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

struct GradCheckAborted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  // 0 checks every element; otherwise an evenly strided subset per parameter.
  std::size_t max_per_parameter = 0;
};

// Compares reverse-mode gradients of `loss_fn` against central finite
// differences for every (or a strided subset of) element of `params`.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                                  std::span<Parameter* const> params, GradCheckOptions opt = {}) {
  if (!(opt.eps >= 1e-6 && opt.eps <= 1e-3)) throw InvalidInput("grad_check: eps must lie in [1e-6, 1e-3]");
  auto evaluate = [&] {
    Tape t(false);
    return loss_fn(t).item();
  };

  const double base_a = evaluate();
  const double base_b = evaluate();
  if (base_a != base_b) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "grad_check: loss is not deterministic (" << base_a << " vs " << base_b << ")";
    throw GradCheckAborted(msg.str());
  }

  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    Var loss = loss_fn(t);
    t.backward(loss);
  }

  GradCheckReport report;
  for (Parameter* p : params) {
    const std::vector<double> analytic = p->grad;
    const std::size_t n = p->value.size();
    std::size_t stride = 1;
    if (opt.max_per_parameter > 0 && n > opt.max_per_parameter) {
      stride = (n + opt.max_per_parameter - 1) / opt.max_per_parameter;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p->value.values[i];
      p->value.values[i] = orig + opt.eps;
      const double up = evaluate();
      p->value.values[i] = orig - opt.eps;
      const double down = evaluate();
      p->value.values[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error || !std::isfinite(rel)) {
        report.max_relative_error = rel;
        report.worst_parameter = p->name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = std::isfinite(report.max_relative_error) && report.max_relative_error < opt.tol;
  return report;
}

}  // namespace gsid
