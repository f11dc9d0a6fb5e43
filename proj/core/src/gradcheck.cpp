#include "switchbert/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace switchbert {

std::vector<GradEstimate> finite_diff_grad(const ScalarObjective& f, ParamStore& params,
                                           double step) {
  if (!(step > 0)) throw ContractError("finite_diff_grad: step must be positive");

  const double base = f(params);
  if (f(params) != base)
    throw OracleError("finite_diff_grad: objective is not deterministic (repeat evaluation differs)");

  std::vector<GradEstimate> out;
  out.reserve(params.size());
  for (auto& [name, tensor] : params) {
    GradEstimate est{name, std::vector<double>(tensor.numel())};
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      const double original = tensor.at(i);
      tensor.set(i, original + step);
      const double plus = f(params);
      tensor.set(i, original - step);
      const double minus = f(params);
      tensor.set(i, original);
      est.values[i] = (plus - minus) / (2.0 * step);
    }
    out.push_back(std::move(est));
  }

  if (f(params) != base)
    throw OracleError("finite_diff_grad: objective changed after the sweep (non-deterministic f)");
  return out;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradComparison compare_gradients(const ParamStore& params,
                                 const std::vector<GradEstimate>& estimates, double floor) {
  GradComparison cmp;
  for (const auto& est : estimates) {
    const auto analytic = params.get(est.name).grad_values();
    if (analytic.size() != est.values.size())
      throw DimensionError("compare_gradients: size mismatch for '" + est.name + "'");
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double rel = relative_error(analytic[i], est.values[i], floor);
      cmp.max_abs_err = std::max(cmp.max_abs_err, std::abs(analytic[i] - est.values[i]));
      ++cmp.coordinates;
      if (rel > cmp.max_rel_err || cmp.worst_param.empty()) {
        if (rel >= cmp.max_rel_err) {
          cmp.max_rel_err = rel;
          cmp.worst_param = est.name;
          cmp.worst_index = i;
          cmp.worst_analytic = analytic[i];
          cmp.worst_numeric = est.values[i];
        }
      }
    }
  }
  return cmp;
}

}  // namespace switchbert
