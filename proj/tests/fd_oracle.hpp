#pragma once

// Central finite-difference oracle used by the gradient tests. Independent of
// the reverse pass: it only evaluates forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "xmf/autodiff.hpp"

namespace xmf::testing {

/// Relative error with an absolute floor for gradients that are ~0.
inline double rel_err(double a, double b, double floor = 1e-6) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

struct GradCheck {
  double max_rel_err = 0.0;
  int probes = 0;
};

/// Compares reverse-mode grads of `f` wrt `leaf` against central differences
/// on `probes` randomly chosen coordinates (all of them when probes <= 0).
inline GradCheck check_gradient(const std::function<Tensor(const Tensor&)>& f, Matrix at,
                                int probes, std::uint64_t seed, double h = 1e-5) {
  Tensor leaf(at, true);
  Tensor loss = f(leaf);
  ad::backward(loss);
  const Matrix analytic = leaf.grad();

  std::vector<Index> coords;
  std::mt19937_64 rng(seed);
  if (probes <= 0) {
    for (Index k = 0; k < at.size(); ++k) coords.push_back(k);
  } else {
    std::uniform_int_distribution<Index> pick(0, at.size() - 1);
    for (int p = 0; p < probes; ++p) coords.push_back(pick(rng));
  }

  GradCheck out;
  for (Index k : coords) {
    Matrix plus = at, minus = at;
    plus.data()[k] += h;
    minus.data()[k] -= h;
    const double fp = f(Tensor(plus)).item();
    const double fm = f(Tensor(minus)).item();
    const double numeric = (fp - fm) / (2.0 * h);
    out.max_rel_err = std::max(out.max_rel_err, rel_err(numeric, analytic.data()[k]));
    ++out.probes;
  }
  return out;
}

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
  return m;
}

}  // namespace xmf::testing
