#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "kvlab/tensor/array.hpp"
#include "kvlab/tensor/tape.hpp"

namespace kvlab {

/// Builds a scalar loss from a single input on the given tape.
using ScalarFunction = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |autodiff - central difference| / max(1, |central difference|).
inline double finite_diff_check(const ScalarFunction& fn, const Array& point, double step = 1e-5) {
  Tape tape;
  const Var x = tape.leaf(point, true);
  const Var loss = fn(tape, x);
  const Gradients grads = tape.backward(loss);
  const Array analytic = grads.has(x) ? grads.of(x) : Array(point.shape(), 0.0);

  auto eval = [&](const Array& at) {
    Tape probe(false);
    return fn(probe, probe.leaf(at)).value().item();
  };

  double worst = 0.0;
  Array shifted = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    shifted[i] = point[i] + step;
    const double up = eval(shifted);
    shifted[i] = point[i] - step;
    const double down = eval(shifted);
    shifted[i] = point[i];
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace kvlab
