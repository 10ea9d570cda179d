// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "rcfusion/tensor.hpp"

namespace rcf {

struct GradientCheckStats {
  std::size_t coordinates = 0;
  std::size_t refined = 0;     // needed a smaller step to stay on one smooth piece
  std::size_t straddling = 0;  // still crossed a kink at the smallest step
};

/// Largest |analytic - central difference| / max(1, |analytic|) over every
/// coordinate of `param`.
///
/// `loss` must rebuild the scalar from scratch on each call and read
/// `param` by handle, since the check perturbs its values in place.
///
/// Central differences are only meaningful when x - h and x + h take the
/// same ReLU / max-pool branches as x. When they do not, the step is cut by
/// 10 for that coordinate (down to step * 1e-4) until they do.
template <Scalar T>
T gradient_check(const std::function<Tensor<T>()>& loss, Tensor<T> param, T step,
                 GradientCheckStats* stats = nullptr) {
  if (!param.is_leaf() || !param.requires_grad()) {
    throw ValueError("gradient_check needs a leaf tensor with requires_grad");
  }
  param.zero_grad();
  backward(loss());
  std::vector<T> analytic(param.size(), T(0));
  if (param.has_grad()) std::copy(param.grad_data().begin(), param.grad_data().end(), analytic.begin());
  param.zero_grad();

  NoGradGuard no_grad;
  auto traced = [&](std::uint64_t& fp) {
    BranchTrace trace;
    const T v = loss().item();
    fp = trace.fingerprint();
    return v;
  };
  std::uint64_t base = 0;
  traced(base);

  auto values = param.mutable_data();
  GradientCheckStats local;
  T worst = T(0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    T h = step, numeric = T(0);
    for (int attempt = 0;; ++attempt) {
      std::uint64_t fp_plus = 0, fp_minus = 0;
      values[i] = saved + h;
      const T plus = traced(fp_plus);
      values[i] = saved - h;
      const T minus = traced(fp_minus);
      values[i] = saved;
      numeric = (plus - minus) / (T(2) * h);
      if (fp_plus == base && fp_minus == base) {
        if (attempt > 0) ++local.refined;
        break;
      }
      if (attempt == 4) {
        ++local.straddling;
        break;
      }
      h /= T(10);
    }
    const T err = std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  local.coordinates = values.size();
  if (stats) {
    stats->coordinates += local.coordinates;
    stats->refined += local.refined;
    stats->straddling += local.straddling;
  }
  return worst;
}

/// Same check for a function of a single tensor argument.
template <Scalar T>
T finite_difference_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                          T step, GradientCheckStats* stats = nullptr) {
  Tensor<T> leaf(x.shape(), x.values(), true);
  return gradient_check<T>([&] { return f(leaf); }, leaf, step, stats);
}

}  // namespace rcf
