#ifndef PHPAV_ORACLE_FINITE_DIFF_HPP
#define PHPAV_ORACLE_FINITE_DIFF_HPP

// Central-difference gradient oracle. Independent of the autodiff tape: it
// only needs a loss callable over parameter values and the primitive tensor
// type. Used to certify every analytic gradient in the test suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "phpav/tensor.hpp"

namespace phpav::oracle {

// f: (const std::vector<Tensor<T>>&) -> T, evaluated 2*numel times.
template <typename T, typename F>
std::vector<Tensor<T>> finite_diff_grad(F&& f, std::vector<Tensor<T>> params, T h) {
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.emplace_back(p.shape);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (long i = 0; i < params[pi].numel(); ++i) {
      const T orig = params[pi].data[static_cast<size_t>(i)];
      params[pi].data[static_cast<size_t>(i)] = orig + h;
      const T hi = f(static_cast<const std::vector<Tensor<T>>&>(params));
      params[pi].data[static_cast<size_t>(i)] = orig - h;
      const T lo = f(static_cast<const std::vector<Tensor<T>>&>(params));
      params[pi].data[static_cast<size_t>(i)] = orig;
      grads[pi].data[static_cast<size_t>(i)] = (hi - lo) / (T(2) * h);
    }
  }
  return grads;
}

template <typename T>
T rel_err(T a, T n) {
  T denom = std::max({std::abs(a), std::abs(n), T(1e-8)});
  return std::abs(a - n) / denom;
}

// max relative error between analytic and numeric gradient sets; an empty
// analytic tensor counts as exact zero.
template <typename T>
T max_rel_err(const std::vector<Tensor<T>>& analytic, const std::vector<Tensor<T>>& numeric) {
  T worst = T(0);
  for (size_t pi = 0; pi < numeric.size(); ++pi) {
    for (long i = 0; i < numeric[pi].numel(); ++i) {
      T a = analytic[pi].data.empty() ? T(0) : analytic[pi].data[static_cast<size_t>(i)];
      worst = std::max(worst, rel_err(a, numeric[pi].data[static_cast<size_t>(i)]));
    }
  }
  return worst;
}

}  // namespace phpav::oracle

#endif
