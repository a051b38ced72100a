#pragma once

#include <functional>
#include <string>
#include <vector>

#include "agglo/tensor.hpp"

namespace agglo {

/// Central-difference gradient estimate of a scalar function:
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element i of x.
/// `f` receives a perturbed copy of x; no tape is active while it runs.
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double step);

/// max|a - b| / max(max|a|, max|b|), with a floor of 1e-12 on the denominator.
double relative_error(std::span<const double> a, std::span<const double> b);

struct NamedParam {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckResult {
  std::string name;
  double rel_error = 0;
};

/// Compares tape gradients of `loss` with finite differences for each
/// parameter. `loss` must rebuild its graph from the current parameter values
/// on every call. Parameters are restored after probing.
std::vector<GradCheckResult> check_gradients(const std::function<Tensor<double>()>& loss,
                                             std::vector<NamedParam> params, double step = 1e-5);

}  // namespace agglo
