#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "hitl/autograd.hpp"

namespace hitl {

/// Compares the reverse-mode gradient of scalar-valued `f` at `point` against
/// central differences with step `eps`. Returns the largest
/// |analytic - numeric| / max(1, |analytic|) over coordinates, or +inf if
/// either side is NaN.
template <class T, class F>
double grad_check(F&& f, const BasicTensor<T>& point, double eps) {
  Var<T> leaf(point, true);
  Var<T> out = f(leaf);
  if (out.value().numel() != 1) throw ContractError("grad_check needs a scalar-valued function");
  backward(out);
  const BasicTensor<T> analytic = leaf.has_grad() ? leaf.grad() : BasicTensor<T>::zeros(point.shape());

  NoGradGuard no_grad;
  double worst = 0.0;
  BasicTensor<T> probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(orig + eps);
    const double fp = static_cast<double>(f(Var<T>(probe)).item());
    probe[i] = static_cast<T>(orig - eps);
    const double fm = static_cast<double>(f(Var<T>(probe)).item());
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    if (std::isnan(numeric) || std::isnan(a)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace hitl
