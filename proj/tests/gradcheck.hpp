#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "strada/autograd.hpp"

namespace strada::testing {

// Central differences of a scalar loss built on a fresh tape per evaluation.
template <typename Fn>
std::vector<Tensor<double>> numeric_gradient(Fn&& loss_fn, std::vector<Tensor<double>> params,
                                             double h) {
  auto eval = [&]() {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& p : params) vars.push_back(tape.bind(p, false));
    return loss_fn(tape, std::span<const Var<double>>(vars)).value()[0];
  };
  std::vector<Tensor<double>> grads;
  for (auto& p : params) {
    Tensor<double> g(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double x = p[i];
      p[i] = x + h;
      const double up = eval();
      p[i] = x - h;
      const double down = eval();
      p[i] = x;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// max over entries of |a − n| / max(|a|, |n|, floor). The floor keeps
// entries whose true gradient is ~0 from dividing round-off by round-off.
inline double max_relative_error(const std::vector<Tensor<double>>& analytic,
                                 const std::vector<Tensor<double>>& numeric,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t t = 0; t < analytic.size(); ++t) {
    for (std::size_t i = 0; i < analytic[t].size(); ++i) {
      const double a = analytic[t][i];
      const double n = numeric[t][i];
      const double denom = std::max({std::abs(a), std::abs(n), floor});
      worst = std::max(worst, std::abs(a - n) / denom);
    }
  }
  return worst;
}

// Per tensor: max |a − n| / max |n|; the worst tensor is returned.
inline double max_tensor_relative_error(const std::vector<Tensor<double>>& analytic,
                                        const std::vector<Tensor<double>>& numeric) {
  double worst = 0.0;
  for (std::size_t t = 0; t < analytic.size(); ++t) {
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < analytic[t].size(); ++i) {
      scale = std::max(scale, std::abs(numeric[t][i]));
      err = std::max(err, std::abs(analytic[t][i] - numeric[t][i]));
    }
    if (err > 0.0) worst = std::max(worst, scale > 0.0 ? err / scale : INFINITY);
  }
  return worst;
}

}  // namespace strada::testing
