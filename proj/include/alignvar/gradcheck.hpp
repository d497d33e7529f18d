#pragma once

#include <functional>
#include <string>

#include "alignvar/params.hpp"

namespace avar::nd {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

using ScalarFn = std::function<Tensor<double>(ParamStore<double>&)>;

// Compares backward() against central differences for every coordinate of
// every parameter: max |analytic - numeric| / (|numeric| + floor). Raise
// the floor for objectives whose rounding noise exceeds 1e-8 / h.
// Throws std::invalid_argument for h <= 0 and std::runtime_error naming the
// coordinate when f evaluates to a non-finite value.
GradCheckResult finite_diff_check(const ScalarFn& f, ParamStore<double>& params, double h = 1e-5,
                                  double floor = 1e-8);

}  // namespace avar::nd
