#pragma once

// Central finite-difference checker (five-point stencil) for scalar-valued graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "transferattn/tensor.hpp"

namespace transferattn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<input>[<index>]"

  bool passed(double tol) const { return max_rel_error <= tol; }
};

/// Compares autodiff gradients of `loss()` against five-point central differences with
/// respect to every element of `inputs`. `loss` must rebuild the graph from
/// the current input values on each call.
///
/// Relative error uses max(|analytic|, |numeric|, abs_floor) as denominator so
/// entries whose true gradient is ~0 are judged on absolute error.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                  double h = 1e-4, double abs_floor = 1e-5) {
  std::vector<bool> flags;
  for (auto& t : inputs) {
    flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.size(), 0.0);
  }

  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      auto at = [&](double offset) {
        data[i] = orig + offset;
        return loss().item();
      };
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
      data[i] = orig;
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      const double rel = abs_err / denom;
      ++res.checked;
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = "input" + std::to_string(k) + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    inputs[k].zero_grad();
    inputs[k].set_requires_grad(flags[k]);
  }
  return res;
}

}  // namespace transferattn
