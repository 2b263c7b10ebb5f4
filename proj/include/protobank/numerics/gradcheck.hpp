#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "protobank/error.hpp"
#include "protobank/numerics/autograd.hpp"

namespace protobank {

// A scalar-valued function of one tensor, expressed on a tape.
using ScalarFn = std::function<ag::Var(ag::Tape&, ag::Var)>;

// Relative error between two gradient entries. Entries below `floor` in
// magnitude are compared on an absolute scale of `floor`.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Max relative error between the tape gradient of f at x and central
// differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
inline double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw NumericError("grad_check: eps must lie in [1e-6, 1e-3]");
  if (!x.all_finite()) throw NumericError("grad_check: non-finite input");

  Tensor analytic;
  {
    ag::Tape tape;
    ag::Var xv = tape.variable(x);
    ag::Var y = f(tape, xv);
    tape.backward(y);
    analytic = tape.grad(xv);
  }

  auto eval = [&](const Tensor& at) {
    ag::Tape tape;
    const double v = f(tape, tape.constant(at)).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + eps;
    const double up = eval(probe);
    probe.data[i] = orig - eps;
    const double down = eval(probe);
    probe.data[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, relative_error(analytic.data[i], numeric));
  }
  return worst;
}

}  // namespace protobank
