#include "agglo/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "agglo/errors.hpp"

namespace agglo {

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double step) {
  NoGradScope<double> no_grad;
  Tensor<double> probe = x.detach();
  Tensor<double> grad(x.shape());
  auto pv = probe.mutable_values();
  auto gv = grad.mutable_values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double original = pv[i];
    pv[i] = original + step;
    const double up = f(probe);
    pv[i] = original - step;
    const double down = f(probe);
    pv[i] = original;
    gv[i] = (up - down) / (2 * step);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0;
  double scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / std::max(scale, 1e-12);
}

std::vector<GradCheckResult> check_gradients(const std::function<Tensor<double>()>& loss,
                                             std::vector<NamedParam> params, double step) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> l = loss();
    tape.backward(l);
  }
  std::vector<GradCheckResult> results;
  for (auto& p : params) {
    std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto values = p.tensor.mutable_values();
    const std::vector<double> saved(values.begin(), values.end());
    Tensor<double> numeric = finite_diff_grad(
        [&](const Tensor<double>& probe) {
          std::copy(probe.values().begin(), probe.values().end(), values.begin());
          return loss().item();
        },
        p.tensor, step);
    std::copy(saved.begin(), saved.end(), values.begin());
    results.push_back({p.name, relative_error(analytic, numeric.values())});
  }
  return results;
}

}  // namespace agglo
