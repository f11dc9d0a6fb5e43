#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "switchbert/param_store.hpp"

namespace switchbert {

/// Central-difference estimate of d f / d θ for one parameter tensor.
struct GradEstimate {
  std::string name;
  std::vector<double> values;
};

using ScalarObjective = std::function<double(const ParamStore&)>;

/// Perturbs every coordinate of every parameter by ±step (in place, restored
/// afterwards) and evaluates (f(θ+h) − f(θ−h)) / 2h.
///
/// f must be deterministic: it is evaluated twice at the unperturbed point
/// first, and again at the end, and any mismatch raises OracleError.
std::vector<GradEstimate> finite_diff_grad(const ScalarObjective& f, ParamStore& params,
                                           double step);

/// |a − b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor);

struct GradComparison {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares the gradients currently held by params against the estimates.
GradComparison compare_gradients(const ParamStore& params,
                                 const std::vector<GradEstimate>& estimates, double floor);

}  // namespace switchbert
