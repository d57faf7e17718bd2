// Statistical audits of the potential: exponential moments of unit-box sups and
// linear growth of |F| in space. Both produce reports only.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "elab/environment.hpp"

namespace elab {

/// sup of |F| over the unit box [t0, t0+1] x [x0, x0+1]^d on a density^{d+1} lattice.
template <std::size_t D>
double box_sup_abs(const PoissonCloud<D>& cloud, double t0, const Vec<D>& x0, int density) {
  const int n = std::max(2, density);
  double best = 0.0;
  std::array<int, D + 1> idx{};
  while (true) {
    Vec<D> x;
    for (std::size_t a = 0; a < D; ++a) x[a] = x0[a] + static_cast<double>(idx[a + 1]) / (n - 1);
    best = std::max(best, std::abs(cloud.eval_F(t0 + static_cast<double>(idx[0]) / (n - 1), x)));
    std::size_t a = D + 1;
    while (a-- > 0) {
      if (++idx[a] < n) break;
      idx[a] = 0;
      if (a == 0) return best;
    }
  }
}

struct MomentAudit {
  std::vector<double> lambdas;
  std::vector<std::size_t> sample_sizes;
  std::vector<std::vector<double>> mgf;  // [lambda][sample size] empirical E exp(lambda * sup|F|)
  double largest_stable_lambda = 0.0;    // largest lambda whose estimate moves < 10% across sizes
};

/// Unit boxes are taken one per independent environment (seed = base_seed + i).
template <std::size_t D>
MomentAudit moment_audit(const EnvironmentSpec& spec, const std::vector<double>& lambdas,
                         const std::vector<std::size_t>& sample_sizes, int density = 5) {
  validate(spec);
  MomentAudit rep;
  rep.lambdas = lambdas;
  rep.sample_sizes = sample_sizes;
  const std::size_t n_max = sample_sizes.empty() ? 0 : *std::max_element(sample_sizes.begin(), sample_sizes.end());
  std::vector<double> sups;
  const auto w = make_window<D>(0.0, 1.0, 0.0, 1.0);
  for (std::size_t i = 0; i < n_max; ++i) {
    EnvironmentSpec s = spec;
    s.seed = spec.seed + i;
    sups.push_back(box_sup_abs(sample_environment<D>(s, w), 0.0, zero_vec<D>(), density));
  }
  for (double lam : lambdas) {
    std::vector<double> row;
    for (std::size_t n : sample_sizes) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += std::exp(lam * sups[i]);
      row.push_back(acc / static_cast<double>(n));
    }
    bool stable = std::all_of(row.begin(), row.end(), [](double x) { return std::isfinite(x); });
    for (std::size_t j = 1; j < row.size() && stable; ++j)
      if (std::abs(row[j] - row[j - 1]) > 0.1 * row[j - 1]) stable = false;
    if (stable) rep.largest_stable_lambda = std::max(rep.largest_stable_lambda, lam);
    rep.mgf.push_back(row);
  }
  return rep;
}

struct GrowthAudit {
  std::vector<double> ranges;
  std::vector<double> ratio;  // max over |x| <= R of sup_{s in [0,T]} |F(s,x)| / (|x| + 1)
  bool stabilised = false;    // last two ratios agree within 10%
};

/// One environment on [0, T] x [-R_max, R_max]^d, probed on a lattice of spacing h.
template <std::size_t D>
GrowthAudit linear_growth_audit(const EnvironmentSpec& spec, double T, const std::vector<double>& ranges,
                                double h = 0.25) {
  validate(spec);
  GrowthAudit rep;
  rep.ranges = ranges;
  const double R = *std::max_element(ranges.begin(), ranges.end());
  const auto cloud = sample_environment<D>(spec, make_window<D>(0.0, T, -R, R));
  const auto nx = static_cast<std::int64_t>(std::floor(R / h));
  const auto nt = static_cast<std::int64_t>(std::floor(T / h));
  NodeBox<D> box;
  box.lo.fill(-nx);
  box.hi.fill(nx);
  std::vector<double> best(ranges.size(), 0.0);
  for (std::size_t i = 0; i < box.size(); ++i) {
    const Node<D> n = box.node(i);
    Vec<D> x;
    for (std::size_t a = 0; a < D; ++a) x[a] = static_cast<double>(n[a]) * h;
    double sup = 0.0;
    for (std::int64_t k = 0; k <= nt; ++k) sup = std::max(sup, std::abs(cloud.eval_F(static_cast<double>(k) * h, x)));
    const double r = norm2(x);
    for (std::size_t j = 0; j < ranges.size(); ++j)
      if (r <= ranges[j]) best[j] = std::max(best[j], sup / (r + 1.0));
  }
  rep.ratio = best;
  if (best.size() >= 2) {
    const double a = best[best.size() - 2], b = best.back();
    rep.stabilised = std::abs(b - a) <= 0.1 * std::max(a, 1e-300);
  }
  return rep;
}

}  // namespace elab
