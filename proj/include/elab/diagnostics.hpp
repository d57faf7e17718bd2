// Box discretisation of space-time paths and the audits built on it.
//
// A path is the polyline through (t_k, x_k). Its discretisation is the set of
// integer points k with I_k = k + [0, 1)^{d+1} meeting {(t, gamma_t) : 0 <= t < T}
// in units of `scale`; the end point t = T itself is not included.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "elab/action_solver.hpp"
#include "elab/asymptotics.hpp"
#include "elab/environment.hpp"
#include "elab/kinetics.hpp"

namespace elab {

template <std::size_t D>
using Box = std::array<std::int64_t, D + 1>;

template <std::size_t D>
struct Discretization {
  std::vector<Box<D>> boxes;  // sorted, unique
  [[nodiscard]] std::size_t m() const { return boxes.size(); }
};

template <std::size_t D>
Vec<D + 1> space_time_point(const GridPath<D>& path, std::size_t k, double scale) {
  Vec<D + 1> p;
  p[0] = slice_time(path.start_slice + static_cast<std::int64_t>(k), path.dt) / scale;
  for (std::size_t a = 0; a < D; ++a) p[a + 1] = node_coord(path.nodes[k][a], path.dx) / scale;
  return p;
}

/// Exact segment walk: between consecutive integer crossings the box is
/// constant, and each crossing point is assigned to its own half-open box.
template <std::size_t D>
Discretization<D> discretize_path(const GridPath<D>& path, double scale = 1.0) {
  constexpr std::size_t E = D + 1;
  std::set<Box<D>> seen;
  auto floor_box = [](const Vec<E>& p) {
    Box<D> b;
    for (std::size_t a = 0; a < E; ++a) b[a] = static_cast<std::int64_t>(std::floor(p[a]));
    return b;
  };
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const Vec<E> p0 = space_time_point(path, k, scale);
    const Vec<E> p1 = space_time_point(path, k + 1, scale);
    // (lambda, axis, integer) for every crossing strictly inside the segment.
    struct Cross {
      double lambda;
      std::size_t axis;
      std::int64_t level;
    };
    std::vector<Cross> cs;
    for (std::size_t a = 0; a < E; ++a) {
      const double d = p1[a] - p0[a];
      if (d == 0.0) continue;
      const double lo = std::min(p0[a], p1[a]), hi = std::max(p0[a], p1[a]);
      for (auto n = static_cast<std::int64_t>(std::floor(lo)) + 1; static_cast<double>(n) < hi; ++n)
        cs.push_back({(static_cast<double>(n) - p0[a]) / d, a, n});
    }
    std::sort(cs.begin(), cs.end(), [](const Cross& x, const Cross& y) { return x.lambda < y.lambda; });

    seen.insert(floor_box(p0));
    std::size_t i = 0;
    double prev = 0.0;
    while (i < cs.size()) {
      std::size_t j = i;
      Vec<E> at;
      const double lam = cs[i].lambda;
      for (std::size_t a = 0; a < E; ++a) at[a] = p0[a] + lam * (p1[a] - p0[a]);
      while (j < cs.size() && cs[j].lambda - lam <= 1e-12) {
        at[cs[j].axis] = static_cast<double>(cs[j].level);
        ++j;
      }
      Vec<E> mid;
      const double lm = 0.5 * (prev + lam);
      for (std::size_t a = 0; a < E; ++a) mid[a] = p0[a] + lm * (p1[a] - p0[a]);
      seen.insert(floor_box(mid));
      seen.insert(floor_box(at));
      prev = lam;
      i = j;
    }
    Vec<E> mid;
    const double lm = 0.5 * (prev + 1.0);
    for (std::size_t a = 0; a < E; ++a) mid[a] = p0[a] + lm * (p1[a] - p0[a]);
    seen.insert(floor_box(mid));
  }
  Discretization<D> out;
  out.boxes.assign(seen.begin(), seen.end());
  return out;
}

template <std::size_t D>
std::int64_t linf_distance(const Box<D>& a, const Box<D>& b) {
  std::int64_t m = 0;
  for (std::size_t i = 0; i <= D; ++i) m = std::max<std::int64_t>(m, std::abs(a[i] - b[i]));
  return m;
}

/// True when every pair of boxes is joined by a chain of nearest l-infinity neighbours.
template <std::size_t D>
bool is_connected(const std::vector<Box<D>>& boxes) {
  if (boxes.empty()) return true;
  std::vector<bool> reached(boxes.size(), false);
  std::vector<std::size_t> stack{0};
  reached[0] = true;
  std::size_t count = 1;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (reached[j] || linf_distance<D>(boxes[i], boxes[j]) > 1) continue;
      reached[j] = true;
      ++count;
      stack.push_back(j);
    }
  }
  return count == boxes.size();
}

/// Residue classes modulo w = ceil(r) + 1; distinct members of a class are more than r apart.
template <std::size_t D>
std::vector<std::vector<Box<D>>> partition_boxes(const std::vector<Box<D>>& boxes, double r) {
  if (!(r > 0.0)) throw ValidationError("r", "separation must be positive");
  const auto w = static_cast<std::int64_t>(std::ceil(r)) + 1;
  std::map<Box<D>, std::vector<Box<D>>> parts;
  for (const auto& b : boxes) {
    Box<D> res;
    for (std::size_t i = 0; i <= D; ++i) res[i] = ((b[i] % w) + w) % w;
    parts[res].push_back(b);
  }
  std::vector<std::vector<Box<D>>> out;
  for (auto& [res, members] : parts) out.push_back(std::move(members));
  return out;
}

struct PartitionCheck {
  bool union_ok = false;
  bool disjoint = false;
  bool separated = false;
  bool count_ok = false;
  [[nodiscard]] bool ok() const { return union_ok && disjoint && separated && count_ok; }
};

template <std::size_t D>
PartitionCheck verify_partition(const std::vector<Box<D>>& input, const std::vector<std::vector<Box<D>>>& parts,
                                double r) {
  PartitionCheck c;
  std::multiset<Box<D>> all;
  for (const auto& p : parts) all.insert(p.begin(), p.end());
  const std::set<Box<D>> in(input.begin(), input.end());
  c.disjoint = std::set<Box<D>>(all.begin(), all.end()).size() == all.size();
  c.union_ok = std::set<Box<D>>(all.begin(), all.end()) == in;
  c.separated = true;
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = i + 1; j < p.size(); ++j)
        if (static_cast<double>(linf_distance<D>(p[i], p[j])) <= r) c.separated = false;
  const auto w = static_cast<std::int64_t>(std::ceil(r)) + 1;
  std::int64_t cap = 1;
  for (std::size_t i = 0; i <= D; ++i) cap *= w;
  c.count_ok = static_cast<std::int64_t>(parts.size()) <= cap;
  return c;
}

// ---------------------------------------------------------------------------
// Length audit
// ---------------------------------------------------------------------------

/// Euclidean length of t -> (t, gamma_t), in box units.
template <std::size_t D>
double space_time_length(const GridPath<D>& path, double scale = 1.0) {
  double len = 0.0;
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const auto p0 = space_time_point(path, k, scale), p1 = space_time_point(path, k + 1, scale);
    len += norm2(p1 - p0);
  }
  return len;
}

struct LengthAudit {
  std::vector<double> lengths;
  std::vector<std::size_t> m;
  double floor_c = 0.0;  // 1 / 2^{d+1}
  double floor_C = 2.0;
  double fitted_c = kInf;  // largest c with length >= c m - floor_C on the whole corpus
  double min_margin = kInf;  // min over paths of length - (floor_c m - floor_C)
  [[nodiscard]] bool holds() const { return min_margin >= 0.0 && fitted_c >= floor_c; }
};

/// Checks length >= c m - C with the constants of the residue-class argument
/// (c = 1/2^{d+1}, C = 2) and reports the best c for the given corpus.
template <std::size_t D>
LengthAudit length_bound_audit(const std::vector<GridPath<D>>& corpus, double scale = 1.0) {
  LengthAudit rep;
  rep.floor_c = 1.0 / std::pow(2.0, static_cast<double>(D + 1));
  for (const auto& p : corpus) {
    const double len = space_time_length(p, scale);
    const std::size_t m = discretize_path(p, scale).m();
    rep.lengths.push_back(len);
    rep.m.push_back(m);
    if (m > 0) rep.fitted_c = std::min(rep.fitted_c, (len + rep.floor_C) / static_cast<double>(m));
    rep.min_margin = std::min(rep.min_margin, len - (rep.floor_c * static_cast<double>(m) - rep.floor_C));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Environment lower bound
// ---------------------------------------------------------------------------

struct LowerBoundReport {
  double T = 0.0;
  std::size_t m = 0;
  double mean_potential = 0.0;  // (1/T) sum dt F at step midpoints
  double box_inf_sum = 0.0;     // sum over touched boxes of the sampled infimum
  double q_path = 0.0;          // smallest q >= 0 with mean_potential >= -q m / T
  double q_boxes = 0.0;         // smallest q >= 0 with box_inf_sum >= -q m
  double action_over_T = 0.0;
  std::size_t samples_per_box = 0;
};

/// Infimum of F over the closed box k + [0,1]^{d+1} (in units of scale),
/// approximated on a density^{d+1} sub-lattice.
template <std::size_t D>
double box_infimum(const PoissonCloud<D>& cloud, const Box<D>& b, int density, double scale) {
  double best = kInf;
  const int n = std::max(2, density);
  std::array<int, D + 1> idx{};
  while (true) {
    const double t = (static_cast<double>(b[0]) + static_cast<double>(idx[0]) / (n - 1)) * scale;
    Vec<D> x;
    for (std::size_t a = 0; a < D; ++a)
      x[a] = (static_cast<double>(b[a + 1]) + static_cast<double>(idx[a + 1]) / (n - 1)) * scale;
    best = std::min(best, cloud.eval_F(t, x));
    std::size_t a = D + 1;
    while (a-- > 0) {
      if (++idx[a] < n) break;
      idx[a] = 0;
      if (a == 0) return best;
    }
  }
}

template <std::size_t D>
LowerBoundReport lower_bound_audit(const PoissonCloud<D>& cloud, const KineticEnergy& L, const GridSpec& g,
                                   const GridPath<D>& path, int density = 5, double scale = 1.0) {
  LowerBoundReport rep;
  rep.T = path.duration();
  const auto disc = discretize_path(path, scale);
  rep.m = disc.m();
  rep.samples_per_box = static_cast<std::size_t>(std::pow(std::max(2, density), static_cast<double>(D + 1)));
  double fsum = 0.0;
  for (std::size_t k = 0; k < path.steps(); ++k) fsum += g.dt * cloud.eval_F(path.mid_t(k), path.midpoint(k));
  rep.mean_potential = fsum / rep.T;
  for (const auto& b : disc.boxes) rep.box_inf_sum += box_infimum(cloud, b, density, scale);
  const double m = static_cast<double>(rep.m);
  rep.q_path = std::max(0.0, -rep.mean_potential * rep.T / m);
  rep.q_boxes = std::max(0.0, -rep.box_inf_sum / m);
  rep.action_over_T = action_of_path(cloud, L, g, Frame<D>{}, path) / rep.T;
  return rep;
}

/// Running maximum of per-seed q values: the smallest q that works for the first n seeds.
inline std::vector<double> running_q(const std::vector<double>& qs) {
  std::vector<double> out;
  double m = 0.0;
  for (double q : qs) out.push_back(m = std::max(m, q));
  return out;
}

// ---------------------------------------------------------------------------
// Growth of the discretised length
// ---------------------------------------------------------------------------

struct MGrowthReport {
  std::vector<double> T;
  std::vector<double> mean_m_over_T;
  std::vector<std::vector<double>> per_seed;  // [seed][checkpoint]
  bool bounded = true;
  bool above_floor = true;  // m >= floor(T) everywhere
};

/// Uses the minimisers recorded by estimate_shape with keep_paths.
template <std::size_t D>
MGrowthReport m_growth_audit(const ShapeEstimate<D>& est, double scale = 1.0) {
  MGrowthReport rep;
  rep.T = est.T_checkpoints;
  for (const auto& run : est.runs) {
    if (run.paths.size() != est.T_checkpoints.size())
      throw ValidationError("keep_paths", "shape runs must record their minimisers");
    std::vector<double> row;
    for (std::size_t c = 0; c < run.paths.size(); ++c) {
      const double T = est.T_checkpoints[c];
      const auto m = static_cast<double>(discretize_path(run.paths[c], scale).m());
      if (m < std::floor(T / scale)) rep.above_floor = false;
      row.push_back(m / T);
    }
    rep.per_seed.push_back(row);
  }
  for (std::size_t c = 0; c < rep.T.size(); ++c) {
    double s = 0.0;
    for (const auto& row : rep.per_seed) s += row[c];
    rep.mean_m_over_T.push_back(s / static_cast<double>(rep.per_seed.size()));
  }
  rep.bounded = series_bounded(rep.mean_m_over_T);
  return rep;
}

// ---------------------------------------------------------------------------
// HJB residual
// ---------------------------------------------------------------------------

struct HjbOptions {
  double skip_fraction = 0.1;  // initial fraction of slices left out
  double smoothness = 1.0;     // expected |D+ A - D- A| is about smoothness * dx
  double kink_factor = 10.0;
};

template <std::size_t D>
struct HjbResidual {
  struct Cell {
    std::int64_t slice;
    Node<D> node;
    double residual;
  };
  std::vector<Cell> cells;
  std::size_t kinks = 0;
  double median = 0.0;
  double q90 = 0.0;
};

/// d_t A + H(grad A) - F by centred differences on an unsheared stack.
template <std::size_t D, class Field>
  requires FieldSource<Field, D>
HjbResidual<D> hjb_residual(const ActionStack<D>& st, const Field& field, const KineticEnergy& L,
                            const HjbOptions& opt = {}) {
  for (double c : st.frame.v)
    if (c != 0.0) throw ValidationError("frame", "residual needs an unsheared stack");
  HjbResidual<D> out;
  const double dt = st.grid.dt, dx = st.grid.dx;
  const double kink = opt.kink_factor * opt.smoothness * dx;
  const auto first = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(opt.skip_fraction * static_cast<double>(st.slices() - 1))));
  for (std::int64_t k = first; k + 1 < st.slices(); ++k) {
    const auto& box = st.boxes[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < box.size(); ++i) {
      const Node<D> n = box.node(i);
      const double a0 = st.value(k, n);
      const double am = st.value(k - 1, n), ap = st.value(k + 1, n);
      if (a0 == kInf || am == kInf || ap == kInf) continue;
      Vec<D> grad;
      bool ok = true, smooth = true;
      for (std::size_t a = 0; a < D && ok; ++a) {
        Node<D> np = n, nm = n;
        ++np[a];
        --nm[a];
        const double vp = st.value(k, np), vm = st.value(k, nm);
        if (vp == kInf || vm == kInf) {
          ok = false;
          break;
        }
        grad[a] = (vp - vm) / (2.0 * dx);
        if (std::abs((vp - a0) / dx - (a0 - vm) / dx) > kink) smooth = false;
      }
      if (!ok) continue;
      if (!smooth) {
        ++out.kinks;
        continue;
      }
      Vec<D> x;
      for (std::size_t a = 0; a < D; ++a) x[a] = node_coord(n[a], dx);
      const double r = (ap - am) / (2.0 * dt) + L.legendre(grad) -
                       field.eval_F_sheared(zero_vec<D>(), st.time(k), x);
      out.cells.push_back({k, n, r});
    }
  }
  std::vector<double> mags;
  for (const auto& c : out.cells) mags.push_back(std::abs(c.residual));
  if (!mags.empty()) {
    std::sort(mags.begin(), mags.end());
    out.median = mags[mags.size() / 2];
    out.q90 = mags[std::min(mags.size() - 1, static_cast<std::size_t>(0.9 * static_cast<double>(mags.size())))];
  }
  return out;
}

}  // namespace elab
