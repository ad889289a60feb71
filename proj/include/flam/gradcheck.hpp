#pragma once

#include <functional>

#include "flam/tensor.hpp"

namespace flam::ag {

// Compares the analytic gradient of fn at point against central finite
// differences. Returns the max over coordinates of
//   |analytic_i - (fn(x + h e_i) - fn(x - h e_i)) / 2h| / (|analytic_i| + 1e-8).
// fn must be deterministic and return a scalar.
double fd_check(const std::function<Tensor(const Tensor&)>& fn,
                const Tensor& point, double h = 1e-5);

}  // namespace flam::ag
