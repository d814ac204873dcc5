#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mass/jet.hpp"
#include "mass/model.hpp"
#include "mass/tape.hpp"

// Shared test fixtures. The quadratic scalar builder routes an exactly
// quadratic S through the same jet machinery as the production network, which
// is the only way to get a *bit-exact* polynomial through a softplus MLP.

namespace mass::testing {

// S = 0.5 * u^T A u + b^T u + c over u = (x..., y...), built from jet ops.
inline JetNodes quadratic_scalar_jet(Tape& t, std::span<const double> a,
                                     std::span<const double> b, double c,
                                     std::span<const NodeId> x_ids,
                                     std::span<const NodeId> y_ids) {
  const int d = static_cast<int>(x_ids.size());
  const int m = 2 * d;
  NodeId one = t.leaf(1.0);
  std::vector<JetNodes> u(m);
  for (int i = 0; i < d; ++i) u[i] = jet_var(t, m, i, x_ids[i], one);
  for (int i = 0; i < d; ++i) u[d + i] = jet_var(t, m, d + i, y_ids[i], one);

  JetNodes s = jet_const(t, m, t.leaf(c));
  for (int i = 0; i < m; ++i) {
    if (b[i] != 0.0) s = jet_add(t, s, jet_scale(t, u[i], b[i]));
    for (int j = 0; j < m; ++j) {
      double w = 0.5 * a[i * m + j];
      if (w != 0.0) s = jet_add(t, s, jet_scale(t, jet_mul(t, u[i], u[j]), w));
    }
  }
  return s;
}

// central finite difference of f over coordinate idx
inline double central_diff(const std::function<double(std::span<const double>)>& f,
                           std::vector<double> p, int idx, double h) {
  p[idx] += h;
  double up = f(p);
  p[idx] -= 2 * h;
  double dn = f(p);
  return (up - dn) / (2 * h);
}

inline double rel_err(double got, double want) {
  double denom = std::max({std::fabs(got), std::fabs(want), 1.0});
  return std::fabs(got - want) / denom;
}

}  // namespace mass::testing
