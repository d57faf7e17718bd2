// Monte Carlo estimators built on the action solver: the shape function and its
// gradient, the (alpha, beta) panel, homogenisation curves, the effective
// Hamiltonian and second-order error series.
//
// Every per-seed job is independent and writes into its own slot, so results do
// not depend on the number of workers.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>
#include <tuple>
#include <vector>

#include "elab/action_solver.hpp"
#include "elab/environment.hpp"
#include "elab/kinetics.hpp"

namespace elab {

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the exception
/// of the lowest failing index.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  bool flagged = false;  // fewer than two samples
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
  MeanStderr r;
  if (xs.empty()) {
    r.flagged = true;
    return r;
  }
  double s = 0.0;
  for (double x : xs) s += x;
  r.mean = s / static_cast<double>(xs.size());
  if (xs.size() < 2) {
    r.flagged = true;
    return r;
  }
  double q = 0.0;
  for (double x : xs) q += (x - r.mean) * (x - r.mean);
  r.stderr_ = std::sqrt(q / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  return r;
}

/// Slice count for a horizon, refusing horizons that are not multiples of dt.
inline std::int64_t slices_for(double T, double dt, const char* field = "T_checkpoints") {
  const double r = T / dt;
  const auto k = std::llround(r);
  if (!(T > 0.0) || std::abs(r - static_cast<double>(k)) > 1e-9)
    throw ValidationError(field, "horizon " + std::to_string(T) + " is not a positive multiple of dt");
  return k;
}

template <std::size_t D>
Node<D> nearest_node(const Vec<D>& x, double dx) {
  Node<D> n;
  for (std::size_t a = 0; a < D; ++a) n[a] = std::llround(x[a] / dx);
  return n;
}

template <std::size_t D>
double snap_distance(const Vec<D>& x, const Node<D>& n, double dx) {
  double m = 0.0;
  for (std::size_t a = 0; a < D; ++a) m = std::max(m, std::abs(x[a] - node_coord(n[a], dx)));
  return m;
}

inline EnvironmentSpec with_seed(EnvironmentSpec s, std::uint64_t seed) {
  s.seed = seed;
  return s;
}

/// Runs a per-seed job, tagging boundary hits with the seed.
template <class Fn>
auto for_seed(std::uint64_t seed, Fn&& fn) {
  try {
    return fn();
  } catch (const BoundaryHitError& e) {
    throw BoundaryHitError(e.slice(), "seed " + std::to_string(seed) + ", " + e.detail());
  }
}

// ---------------------------------------------------------------------------
// Shape function
// ---------------------------------------------------------------------------

template <std::size_t D>
struct SeedShape {
  std::uint64_t seed = 0;
  std::vector<double> lambda;  // A_*^T(v) / T per checkpoint
  Vec<D> grad{};
  std::vector<GridPath<D>> paths;  // minimiser per checkpoint, when recorded
};

template <std::size_t D>
struct ShapeEstimate {
  Vec<D> v{};
  std::vector<double> T_checkpoints;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> lambda_series;  // [seed][checkpoint]
  std::vector<Vec<D>> grad_per_seed;
  double lambda_hat = 0.0;
  double stderr_ = 0.0;
  bool stderr_flagged = false;
  Vec<D> grad_hat{};
  Vec<D> grad_stderr{};
  double snap_error = 0.0;  // largest |target node - T v| over checkpoints
  std::vector<SeedShape<D>> runs;
};

struct ShapeOptions {
  bool gradient = true;
  bool keep_paths = false;
  std::size_t workers = 1;
};

/// Targets T v (nearest node) at each checkpoint slice.
template <std::size_t D>
SolveRequest<D> shape_request(const GridSpec& g, const Vec<D>& v, const std::vector<std::int64_t>& ks) {
  SolveRequest<D> req;
  for (auto k : ks) req.targets.push_back({k, nearest_node(static_cast<double>(k) * g.dt * v, g.dx)});
  return req;
}

/// (1/T) sum dt [grad L(u_k) + Theta(t_k + dt/2, midpoint_k)] along a frame-0 path.
template <std::size_t D, class Field>
  requires FieldSource<Field, D>
Vec<D> gradient_along(const Field& field, const KineticEnergy& L, const GridPath<D>& path) {
  Vec<D> acc = zero_vec<D>();
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const Vec<D> u = step_velocity(path.displacement(k), path.dx, path.dt);
    acc = acc + path.dt * (L.grad(u) + field.eval_Theta(path.mid_t(k), path.midpoint(k)));
  }
  return (1.0 / path.duration()) * acc;
}

/// One point-to-point solve on a given field, read at every checkpoint slice.
template <std::size_t D, class Field>
  requires FieldSource<Field, D>
SeedShape<D> shape_on_field(const Field& field, const KineticEnergy& L, const GridSpec& grid, const Vec<D>& v,
                            const std::vector<std::int64_t>& ks, bool gradient, bool keep_paths) {
  GridSpec g = grid;
  g.steps = *std::max_element(ks.begin(), ks.end());
  const auto req = shape_request<D>(g, v, ks);
  const auto st = solve(field, L, g, Frame<D>{}, req);

  SeedShape<D> out;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const auto& [k, n] = req.targets[i];
    const double val = st.value(k, n);
    if (val == kInf) throw UnreachableError("checkpoint target outside the reachable cone");
    out.lambda.push_back(val / (static_cast<double>(k) * g.dt));
    if (keep_paths) out.paths.push_back(extract_minimizer(st, k, n));
  }
  if (gradient) {
    const auto& [k, n] = req.targets.back();
    out.grad = gradient_along(field, L, extract_minimizer(st, k, n));
  }
  return out;
}

template <std::size_t D>
SeedShape<D> shape_for_seed(const EnvironmentSpec& spec, const KineticEnergy& L, const GridSpec& grid,
                            const Vec<D>& v, const std::vector<std::int64_t>& ks, bool gradient, bool keep_paths) {
  GridSpec g = grid;
  g.steps = *std::max_element(ks.begin(), ks.end());
  const auto cloud =
      sample_environment<D>(spec, required_window(g, Frame<D>{}, shape_request<D>(g, v, ks), spec.r_t_max));
  auto out = shape_on_field(cloud, L, grid, v, ks, gradient, keep_paths);
  out.seed = spec.seed;
  return out;
}

template <std::size_t D>
ShapeEstimate<D> estimate_shape(const EnvironmentSpec& spec, const KineticEnergy& L, const GridSpec& grid,
                                const Vec<D>& v, std::vector<double> T_checkpoints,
                                const std::vector<std::uint64_t>& seeds, const ShapeOptions& opt = {}) {
  validate(spec);
  grid.validate();
  if (T_checkpoints.empty()) throw ValidationError("T_checkpoints", "at least one horizon is required");
  if (seeds.empty()) throw ValidationError("seeds", "at least one seed is required");
  std::sort(T_checkpoints.begin(), T_checkpoints.end());
  std::vector<std::int64_t> ks;
  for (double T : T_checkpoints) ks.push_back(slices_for(T, grid.dt));

  ShapeEstimate<D> est;
  est.v = v;
  est.T_checkpoints = T_checkpoints;
  est.seeds = seeds;
  for (auto k : ks) {
    const Vec<D> target = static_cast<double>(k) * grid.dt * v;
    est.snap_error = std::max(est.snap_error, snap_distance(target, nearest_node(target, grid.dx), grid.dx));
  }
  est.runs.resize(seeds.size());
  parallel_for(seeds.size(), opt.workers, [&](std::size_t i) {
    est.runs[i] = for_seed(seeds[i], [&] {
      return shape_for_seed<D>(with_seed(spec, seeds[i]), L, grid, v, ks, opt.gradient, opt.keep_paths);
    });
  });

  std::vector<double> last;
  std::vector<std::vector<double>> grads(D);
  for (const auto& r : est.runs) {
    est.lambda_series.push_back(r.lambda);
    est.grad_per_seed.push_back(r.grad);
    last.push_back(r.lambda.back());
    for (std::size_t a = 0; a < D; ++a) grads[a].push_back(r.grad[a]);
  }
  const auto ms = mean_stderr(last);
  est.lambda_hat = ms.mean;
  est.stderr_ = ms.stderr_;
  est.stderr_flagged = ms.flagged;
  if (opt.gradient) {
    for (std::size_t a = 0; a < D; ++a) {
      const auto g = mean_stderr(grads[a]);
      est.grad_hat[a] = g.mean;
      est.grad_stderr[a] = g.stderr_;
    }
  }
  return est;
}

template <std::size_t D>
std::pair<Vec<D>, Vec<D>> estimate_gradient(const EnvironmentSpec& spec, const KineticEnergy& L,
                                            const GridSpec& grid, const Vec<D>& v, double T,
                                            const std::vector<std::uint64_t>& seeds, std::size_t workers = 1) {
  ShapeOptions opt;
  opt.workers = workers;
  const auto est = estimate_shape<D>(spec, L, grid, v, {T}, seeds, opt);
  return {est.grad_hat, est.grad_stderr};
}

/// Per-seed central difference (Lambda(v + h e) - Lambda(v - h e)) / 2h with common seeds.
template <std::size_t D>
MeanStderr finite_difference(const ShapeEstimate<D>& plus, const ShapeEstimate<D>& minus, double h) {
  if (plus.seeds != minus.seeds) throw ValidationError("seeds", "finite differences need common random numbers");
  std::vector<double> d;
  for (std::size_t i = 0; i < plus.seeds.size(); ++i)
    d.push_back((plus.lambda_series[i].back() - minus.lambda_series[i].back()) / (2.0 * h));
  return mean_stderr(d);
}

/// Mean over seeds of |A_*^T / T - A_*^{2T} / (2T)| for consecutive doubling checkpoints.
template <std::size_t D>
std::vector<double> doubling_gaps(const ShapeEstimate<D>& est) {
  std::vector<double> out;
  for (std::size_t c = 0; c + 1 < est.T_checkpoints.size(); ++c) {
    if (std::abs(est.T_checkpoints[c + 1] - 2.0 * est.T_checkpoints[c]) > 1e-9) continue;
    double s = 0.0;
    for (const auto& series : est.lambda_series) s += std::abs(series[c] - series[c + 1]);
    out.push_back(s / static_cast<double>(est.lambda_series.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// (alpha, beta) panel
// ---------------------------------------------------------------------------

struct PanelCell {
  double alpha = 1.0, beta = 1.0;
  double b_over_T = 0.0;
  double l_bar = 0.0;  // (1/T) sum dt L(u_k + v) along the loop minimiser
  double f_bar = 0.0;  // (1/T) sum dt F_v along the loop minimiser
};

struct PanelSeed {
  std::uint64_t seed = 0;
  std::vector<PanelCell> cells;  // alpha-major over the lattice
};

template <std::size_t D>
struct PanelEstimate {
  Vec<D> v{};
  double T = 0.0;
  std::vector<double> alphas, betas;
  std::vector<PanelSeed> seeds;
  std::vector<MeanStderr> b_over_T;  // per cell across seeds

  [[nodiscard]] std::size_t cell(std::size_t ia, std::size_t ib) const { return ia * betas.size() + ib; }
};

template <std::size_t D>
PanelEstimate<D> panel_alpha_beta(const EnvironmentSpec& spec, const KineticEnergy& L, const GridSpec& grid,
                                  const Vec<D>& v, double T, const std::vector<double>& alphas,
                                  const std::vector<double>& betas, const std::vector<std::uint64_t>& seeds,
                                  std::size_t workers = 1) {
  validate(spec);
  for (double a : alphas)
    if (!(a > 0.0)) throw ValidationError("alpha_grid", "weights must be positive");
  for (double b : betas)
    if (!(b > 0.0)) throw ValidationError("beta_grid", "weights must be positive");
  GridSpec g = grid;
  g.steps = slices_for(T, grid.dt);
  SolveRequest<D> req;
  req.targets.push_back({g.steps, Node<D>{}});

  PanelEstimate<D> out;
  out.v = v;
  out.T = T;
  out.alphas = alphas;
  out.betas = betas;
  out.seeds.resize(seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t i) {
    for_seed(seeds[i], [&] {
      const auto s = with_seed(spec, seeds[i]);
      const auto cloud = sample_environment<D>(s, required_window(g, Frame<D>{v, 1.0, 1.0}, req, s.r_t_max));
      PanelSeed ps;
      ps.seed = seeds[i];
      for (double a : alphas) {
        for (double b : betas) {
          const Frame<D> fr{v, a, b};
          const auto st = solve(cloud, L, g, fr, req);
          const auto path = extract_minimizer(st, g.steps, Node<D>{});
          const auto [lb, fb] = path_averages(cloud, L, g, fr, path);
          ps.cells.push_back({a, b, st.value(g.steps, Node<D>{}) / T, lb, fb});
        }
      }
      out.seeds[i] = std::move(ps);
    });
  });
  for (std::size_t c = 0; c < alphas.size() * betas.size(); ++c) {
    std::vector<double> xs;
    for (const auto& ps : out.seeds) xs.push_back(ps.cells[c].b_over_T);
    out.b_over_T.push_back(mean_stderr(xs));
  }
  return out;
}

struct ConcavityReport {
  std::size_t midpoint_checks = 0;
  std::size_t midpoint_violations = 0;
  std::size_t envelope_checks = 0;
  std::size_t envelope_violations = 0;
  double worst_midpoint = 0.0;  // largest (average of ends) - middle
  double worst_envelope = 0.0;  // largest lhs - rhs
};

/// Midpoint concavity along every lattice line (alpha, beta and both diagonals)
/// and both envelope inequalities, for one environment. Requires evenly spaced
/// weight grids. `tol` absorbs floating-point reassociation only.
inline ConcavityReport check_panel_concavity(const std::vector<double>& alphas, const std::vector<double>& betas,
                                             const PanelSeed& ps, double tol = 1e-9) {
  ConcavityReport rep;
  const std::size_t na = alphas.size(), nb = betas.size();
  auto at = [&](std::size_t i, std::size_t j) -> const PanelCell& { return ps.cells[i * nb + j]; };
  const int dirs[4][2] = {{1, 0}, {0, 1}, {1, 1}, {1, -1}};
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      for (const auto& d : dirs) {
        const auto i0 = static_cast<std::int64_t>(i) - d[0], i1 = static_cast<std::int64_t>(i) + d[0];
        const auto j0 = static_cast<std::int64_t>(j) - d[1], j1 = static_cast<std::int64_t>(j) + d[1];
        if (i0 < 0 || j0 < 0 || i1 >= static_cast<std::int64_t>(na) || j1 >= static_cast<std::int64_t>(nb) ||
            j1 < 0 || j0 >= static_cast<std::int64_t>(nb))
          continue;
        const double ends = 0.5 * (at(static_cast<std::size_t>(i0), static_cast<std::size_t>(j0)).b_over_T +
                                   at(static_cast<std::size_t>(i1), static_cast<std::size_t>(j1)).b_over_T);
        const double gap = ends - at(i, j).b_over_T;
        ++rep.midpoint_checks;
        rep.worst_midpoint = std::max(rep.worst_midpoint, gap);
        if (gap > tol * (1.0 + std::abs(ends))) ++rep.midpoint_violations;
      }
      for (std::size_t i2 = 0; i2 < na; ++i2) {
        const double rhs = at(i, j).b_over_T + (alphas[i2] - alphas[i]) * at(i, j).l_bar;
        const double lhs = at(i2, j).b_over_T;
        ++rep.envelope_checks;
        rep.worst_envelope = std::max(rep.worst_envelope, lhs - rhs);
        if (lhs - rhs > tol * (1.0 + std::abs(rhs))) ++rep.envelope_violations;
      }
      for (std::size_t j2 = 0; j2 < nb; ++j2) {
        const double rhs = at(i, j).b_over_T + (betas[j2] - betas[j]) * at(i, j).f_bar;
        const double lhs = at(i, j2).b_over_T;
        ++rep.envelope_checks;
        rep.worst_envelope = std::max(rep.worst_envelope, lhs - rhs);
        if (lhs - rhs > tol * (1.0 + std::abs(rhs))) ++rep.envelope_violations;
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Homogenisation
// ---------------------------------------------------------------------------

template <std::size_t D>
struct HomogenizationCurve {
  double t = 1.0;
  Vec<D> x{};
  std::vector<double> epsilons;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> scaled;  // [seed][eps] eps * A(t/eps, x/eps)
  double reference = 0.0;                   // t * Lambda_hat(x / t)
  std::vector<double> mean_abs_gap;         // mean over seeds of |scaled - reference|
  std::vector<double> gap_of_mean;          // |mean over seeds of scaled - reference|
  double snap_error = 0.0;
};

/// Per-epsilon (mean over seeds of |scaled - reference|, |mean of scaled - reference|).
inline std::pair<std::vector<double>, std::vector<double>> homogenization_gaps(
    const std::vector<std::vector<double>>& scaled, double reference) {
  std::vector<double> mean_abs, of_mean;
  if (scaled.empty()) return {mean_abs, of_mean};
  const auto n = static_cast<double>(scaled.size());
  for (std::size_t e = 0; e < scaled.front().size(); ++e) {
    double sa = 0.0, sm = 0.0;
    for (const auto& row : scaled) {
      sa += std::abs(row[e] - reference);
      sm += row[e];
    }
    mean_abs.push_back(sa / n);
    of_mean.push_back(std::abs(sm / n - reference));
  }
  return {mean_abs, of_mean};
}

/// One solve per seed serves every epsilon (all problems start at the origin).
template <std::size_t D>
HomogenizationCurve<D> homogenization_curve(const EnvironmentSpec& spec, const KineticEnergy& L,
                                            const GridSpec& grid, double t, const Vec<D>& x,
                                            const std::vector<double>& epsilons,
                                            const std::vector<std::uint64_t>& seeds, double reference,
                                            std::size_t workers = 1) {
  validate(spec);
  if (epsilons.empty()) throw ValidationError("epsilons", "at least one scale is required");
  HomogenizationCurve<D> out;
  out.t = t;
  out.x = x;
  out.epsilons = epsilons;
  out.seeds = seeds;
  out.reference = reference;
  SolveRequest<D> req;
  for (double e : epsilons) {
    if (!(e > 0.0)) throw ValidationError("epsilons", "scales must be positive");
    const auto k = slices_for(t / e, grid.dt, "epsilons");
    const Vec<D> target = (1.0 / e) * x;
    const auto n = nearest_node(target, grid.dx);
    out.snap_error = std::max(out.snap_error, snap_distance(target, n, grid.dx));
    req.targets.push_back({k, n});
  }
  GridSpec g = grid;
  g.steps = 0;
  for (const auto& tg : req.targets) g.steps = std::max(g.steps, tg.first);
  out.scaled.resize(seeds.size());
  parallel_for(seeds.size(), workers, [&](std::size_t i) {
    for_seed(seeds[i], [&] {
      const auto s = with_seed(spec, seeds[i]);
      const auto cloud = sample_environment<D>(s, required_window(g, Frame<D>{}, req, s.r_t_max));
      const auto st = solve(cloud, L, g, Frame<D>{}, req);
      for (std::size_t e = 0; e < epsilons.size(); ++e) {
        const auto& [k, n] = req.targets[e];
        out.scaled[i].push_back(epsilons[e] * st.value(k, n));
      }
    });
  });
  std::tie(out.mean_abs_gap, out.gap_of_mean) = homogenization_gaps(out.scaled, reference);
  return out;
}

// ---------------------------------------------------------------------------
// Effective Hamiltonian
// ---------------------------------------------------------------------------

template <std::size_t D>
struct ShapePoint {
  Vec<D> v{};
  double lambda = 0.0;
  Vec<D> grad{};
};

template <std::size_t D>
struct HamiltonianTable {
  std::vector<Vec<D>> p;
  std::vector<double> h_bar;
  double monotonicity_min = kInf;  // min over pairs <g1 - g2, v1 - v2> / |v1 - v2|^2
  std::size_t convexity_checks = 0;
  std::size_t convexity_violations = 0;
};

template <std::size_t D>
HamiltonianTable<D> effective_hamiltonian(const std::vector<ShapePoint<D>>& shape, const std::vector<Vec<D>>& p_grid) {
  for (std::size_t a = 0; a < D; ++a) {
    std::vector<double> coords;
    for (const auto& s : shape) coords.push_back(s.v[a]);
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    if (coords.size() < 3) throw ValidationError("v_grid", "need at least three distinct samples per axis");
  }
  HamiltonianTable<D> out;
  std::vector<ShapeSample<D>> samples;
  for (const auto& s : shape) samples.push_back({s.v, s.lambda});
  for (const auto& p : p_grid) {
    out.p.push_back(p);
    out.h_bar.push_back(discrete_legendre(samples, p));
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    for (std::size_t j = i + 1; j < shape.size(); ++j) {
      const Vec<D> dv = shape[i].v - shape[j].v;
      const double n2 = dot(dv, dv);
      if (n2 == 0.0) continue;
      out.monotonicity_min = std::min(out.monotonicity_min, dot(shape[i].grad - shape[j].grad, dv) / n2);
    }
  }
  // Midpoint convexity wherever the p-grid contains an exact midpoint.
  for (std::size_t i = 0; i < p_grid.size(); ++i) {
    for (std::size_t j = i + 1; j < p_grid.size(); ++j) {
      const Vec<D> mid = 0.5 * (p_grid[i] + p_grid[j]);
      for (std::size_t m = 0; m < p_grid.size(); ++m) {
        if (p_grid[m] != mid) continue;
        ++out.convexity_checks;
        if (out.h_bar[m] > 0.5 * (out.h_bar[i] + out.h_bar[j]) + 1e-12) ++out.convexity_violations;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Second-order error series
// ---------------------------------------------------------------------------

struct SecondOrderSeries {
  std::vector<double> T;
  std::vector<double> M;  // mean over seeds
  std::vector<double> N;
  std::vector<std::vector<double>> M_per_seed, N_per_seed;  // [seed][checkpoint]
  bool bounded = true;
};

/// Boundedness heuristic for a series over increasing horizons: the last value
/// stays within 1.5 times the maximum over the first half of the series.
inline bool series_bounded(const std::vector<double>& xs) {
  if (xs.size() < 2) return true;
  double head = 0.0;
  for (std::size_t i = 0; i < (xs.size() + 1) / 2; ++i) head = std::max(head, std::abs(xs[i]));
  if (head == 0.0) return std::abs(xs.back()) == 0.0;
  return std::abs(xs.back()) <= 1.5 * head;
}

/// M_T and N_T along the loop minimiser of one environment at horizon T.
template <std::size_t D>
std::pair<double, double> second_order_terms(const PoissonCloud<D>& cloud, const KineticEnergy& L,
                                             const GridSpec& g, const Vec<D>& v, const GridPath<D>& loop,
                                             double delta0) {
  double m = 0.0, n = 0.0;
  const double rt = cloud.spec().r_t_max;
  for (std::size_t k = 0; k < loop.steps(); ++k) {
    const Vec<D> u = step_velocity(loop.displacement(k), g.dx, g.dt);
    m += g.dt * L.hess_sup_ball(u + v, delta0);
    const double t = loop.mid_t(k);
    const Vec<D> x = loop.midpoint(k);
    Vec<D> lo = x, hi = x;
    for (std::size_t a = 0; a < D; ++a) {
      lo[a] -= rt;
      hi[a] += rt;
    }
    // Every |r| <= 1 perturbation of the frame keeps the bump within r_x + |s| of its centre.
    double acc = 0.0;
    for (std::uint32_t i : cloud.candidates(v, t, lo, hi)) {
      const auto& p = cloud.points()[i];
      const double s = t - p.t;
      if (std::abs(s) >= p.mark.r_t) continue;
      if (norm2(detail::sheared_offset(x, s, v, p.x)) >= p.mark.r_x + std::abs(s)) continue;
      acc += s * s * std::abs(p.mark.amplitude) * profile::kHessSup / (p.mark.r_x * p.mark.r_x);
    }
    n += g.dt * acc;
  }
  const double T = loop.duration();
  return {m / T, n / T};
}

template <std::size_t D>
SecondOrderSeries second_order_audit(const EnvironmentSpec& spec, const KineticEnergy& L, const GridSpec& grid,
                                     const Vec<D>& v, const std::vector<double>& T_checkpoints,
                                     const std::vector<std::uint64_t>& seeds, double delta0,
                                     std::size_t workers = 1) {
  validate(spec);
  if (!(delta0 > 0.0 && delta0 < 1.0)) throw ValidationError("delta0", "must lie in (0, 1)");
  SecondOrderSeries out;
  out.T = T_checkpoints;
  out.M_per_seed.assign(seeds.size(), {});
  out.N_per_seed.assign(seeds.size(), {});
  parallel_for(seeds.size(), workers, [&](std::size_t i) {
    for_seed(seeds[i], [&] {
      const auto s = with_seed(spec, seeds[i]);
      GridSpec g = grid;
      g.steps = slices_for(*std::max_element(T_checkpoints.begin(), T_checkpoints.end()), grid.dt);
      SolveRequest<D> req;
      req.targets.push_back({g.steps, Node<D>{}});
      const Frame<D> fr{v, 1.0, 1.0};
      const auto cloud = sample_environment<D>(s, required_window(g, fr, req, s.r_t_max));
      for (double T : T_checkpoints) {
        GridSpec gT = grid;
        gT.steps = slices_for(T, grid.dt);
        SolveRequest<D> rT;
        rT.targets.push_back({gT.steps, Node<D>{}});
        const auto st = solve(cloud, L, gT, fr, rT);
        const auto loop = extract_minimizer(st, gT.steps, Node<D>{});
        const auto [m, n] = second_order_terms(cloud, L, gT, v, loop, delta0);
        out.M_per_seed[i].push_back(m);
        out.N_per_seed[i].push_back(n);
      }
    });
  });
  for (std::size_t c = 0; c < T_checkpoints.size(); ++c) {
    double sm = 0.0, sn = 0.0;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      sm += out.M_per_seed[i][c];
      sn += out.N_per_seed[i][c];
    }
    out.M.push_back(sm / static_cast<double>(seeds.size()));
    out.N.push_back(sn / static_cast<double>(seeds.size()));
  }
  out.bounded = series_bounded(out.M) && series_bounded(out.N);
  return out;
}

}  // namespace elab
