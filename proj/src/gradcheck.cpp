#include "alignvar/gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace avar::nd {

namespace {

double eval(const ScalarFn& f, ParamStore<double>& params, const std::string& name, std::size_t index) {
  const double v = f(params).item();
  if (!std::isfinite(v)) {
    throw std::runtime_error("finite_diff_check: non-finite objective at " + name + "[" +
                             std::to_string(index) + "]");
  }
  return v;
}

}  // namespace

GradCheckResult finite_diff_check(const ScalarFn& f, ParamStore<double>& params, double h, double floor) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step h must be positive");
  if (!(floor > 0.0)) throw std::invalid_argument("finite_diff_check: floor must be positive");

  params.zero_grad();
  const Tensor<double> loss = f(params);
  if (!std::isfinite(loss.item())) throw std::runtime_error("finite_diff_check: non-finite objective");
  loss.backward();

  GradCheckResult result;
  for (auto& [name, p] : params) {
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end()) : std::vector<double>(p.numel(), 0.0);
    auto value = p.mutable_data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = eval(f, params, name, i);
      value[i] = saved - h;
      const double down = eval(f, params, name, i);
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + floor);
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_param = name;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace avar::nd
