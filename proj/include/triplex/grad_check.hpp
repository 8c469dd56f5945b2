#pragma once

#include <cmath>
#include <functional>

#include "triplex/nn.hpp"

namespace triplex {

// Max over elements of |analytic - central difference| / max(1, |central|).
// f must be deterministic and return a scalar Var built from its argument.
template <typename T>
double grad_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x,
                  double eps = 1e-4) {
  if (eps <= 0) throw ValueError("grad_check: eps must be positive");
  Var<T> leaf = Var<T>::leaf(x.clone(), true);
  Var<T> loss = f(leaf);
  if (!std::isfinite(static_cast<double>(loss.value().item())))
    throw ValueError("grad_check: non-finite function output");
  backward(loss);
  Tensor<T> analytic = leaf.grad();

  double max_err = 0.0;
  const int64_t n = x.numel();
  NoGradGuard ng;
  for (int64_t i = 0; i < n; ++i) {
    Tensor<T> xp = x.clone();
    Tensor<T> xm = x.clone();
    xp.data()[i] += static_cast<T>(eps);
    xm.data()[i] -= static_cast<T>(eps);
    const double fp = static_cast<double>(f(Var<T>::constant(xp)).value().item());
    const double fm = static_cast<double>(f(Var<T>::constant(xm)).value().item());
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw ValueError("grad_check: non-finite function output under perturbation");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(static_cast<double>(analytic.data()[i]) - numeric) /
                       std::max(1.0, std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

// Same check over every tensor in a parameter store. loss_fn must rebuild the
// graph from the store's current values on each call and return a scalar.
template <typename T>
double grad_check_params(ParamStore<T>& ps, const std::function<Var<T>()>& loss_fn,
                         double eps = 1e-4) {
  if (eps <= 0) throw ValueError("grad_check: eps must be positive");
  ps.zero_grad();
  Var<T> loss = loss_fn();
  if (!std::isfinite(static_cast<double>(loss.value().item())))
    throw ValueError("grad_check: non-finite function output");
  backward(loss);
  std::vector<Tensor<T>> analytic;
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto& var = ps.at(i).second;
    analytic.push_back(var.has_grad() ? var.grad().clone()
                                      : Tensor<T>::zeros(var.value().shape()));
  }

  double max_err = 0.0;
  NoGradGuard ng;
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto& var = ps.at(i).second;
    Tensor<T> original = var.value().clone();
    for (int64_t j = 0; j < original.numel(); ++j) {
      Tensor<T> perturbed = original.clone();
      perturbed.data()[j] = original.data()[j] + static_cast<T>(eps);
      var.set_value(perturbed.clone());
      const double fp = static_cast<double>(loss_fn().value().item());
      perturbed.data()[j] = original.data()[j] - static_cast<T>(eps);
      var.set_value(std::move(perturbed));
      const double fm = static_cast<double>(loss_fn().value().item());
      var.set_value(original.clone());
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw ValueError("grad_check: non-finite function output under perturbation");
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = std::abs(static_cast<double>(analytic[i].data()[j]) - numeric) /
                         std::max(1.0, std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace triplex
