#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <type_traits>
#include <vector>

#include "weam/errors.hpp"
#include "weam/tensor.hpp"

namespace weam {

/// Compares backward-pass gradients against central finite differences.
///
/// `f(true)` must run a full forward+backward over the current parameter
/// values and leave gradients in each tensor's `grad`; `f(false)` must
/// return the loss value only. Any randomness inside f has to be frozen:
/// the checker evaluates f(false) twice up front and raises
/// determinism_error if the values differ.
///
/// Returns the maximum relative error |a-n| / (|a|+|n|) over coordinates
/// with |a|+|n| > 1e-10. `coord_stride` subsamples coordinates (every k-th)
/// to bound cost on large parameter sets; the gradient itself is always
/// computed in full. Finite differences are only trustworthy in double
/// precision, which the signature enforces.
template <typename F>
double grad_check(F&& f, const std::vector<Tensor<double>*>& params,
                  double eps = 1e-5, std::size_t coord_stride = 1) {
  double v1 = f(false);
  double v2 = f(false);
  if (v1 != v2)
    throw determinism_error("grad_check: two forward passes disagree (" +
                            std::to_string(v1) + " vs " + std::to_string(v2) +
                            "); freeze the randomness");
  for (auto* p : params) p->grad.clear();
  f(true);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
  }

  double max_rel = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& t = *params[pi];
    for (std::size_t i = 0; i < t.numel(); i += coord_stride) {
      const double orig = t.values[i];
      t.values[i] = orig + eps;
      double up = f(false);
      t.values[i] = orig - eps;
      double down = f(false);
      t.values[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[pi][i];
      if (std::abs(a) + std::abs(numeric) > 1e-10) {
        double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric));
        max_rel = std::max(max_rel, rel);
      }
    }
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    params[pi]->grad = analytic[pi];
  return max_rel;
}

}  // namespace weam
