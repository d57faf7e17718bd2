// Dynamic programming for discretized minimal actions on a space-time grid.
//
//   A_{k+1}(x) = min_y  A_k(y) + dt * alpha * L((x - y) dx / dt + v)
//                              + dt * beta  * F_v(t_k + dt/2, (x + y) dx / 2)
//
// With v = 0 and alpha = beta = 1 the recursion computes point-to-point actions
// from the start node; with a nonzero frame v and the origin as the target it
// computes the sheared loop action B. The per-step displacement j = x - y is
// restricted to a window of half-width W centred on -round(v dt / dx), i.e. the
// physical velocity j dx/dt + v stays within about W dx / dt.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "elab/core.hpp"
#include "elab/environment.hpp"
#include "elab/kinetics.hpp"

namespace elab {

struct GridSpec {
  double dt = 0.1;
  double dx = 0.05;
  std::int64_t steps = 10;        // K; horizon T = K dt
  std::int64_t window = 4;        // W, per-axis displacement half-width in nodes
  std::int64_t half_extent = 0;   // clip nodes to [-N, N] per axis; 0 keeps the full cone

  [[nodiscard]] double horizon() const { return static_cast<double>(steps) * dt; }
  [[nodiscard]] double max_speed() const { return static_cast<double>(window) * dx / dt; }

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("grid.dt", "must be positive");
    if (!(dx > 0.0) || !std::isfinite(dx)) throw ValidationError("grid.dx", "must be positive");
    if (steps < 1) throw ValidationError("grid.steps", "must be at least 1");
    if (window < 1) throw ValidationError("grid.window", "must be at least 1");
    if (half_extent < 0) throw ValidationError("grid.half_extent", "must be non-negative");
  }
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

template <std::size_t D>
struct Frame {
  Vec<D> v = zero_vec<D>();
  double alpha = 1.0;
  double beta = 1.0;
};

template <std::size_t D>
struct SolveRequest {
  std::int64_t start_slice = 0;  // global slice index of the initial condition
  Node<D> start_node{};
  /// (local slice, node) pairs the caller will read; cells that cannot reach any
  /// of them are skipped. Empty keeps the whole forward cone.
  std::vector<std::pair<std::int64_t, Node<D>>> targets;
};

// ---------------------------------------------------------------------------
// Shared quadrature helpers: the solver, path re-evaluation and the test oracles
// must all go through these so that sums agree bit for bit.
// ---------------------------------------------------------------------------

inline double mid_time(std::int64_t global_slice, double dt) {
  return (static_cast<double>(global_slice) + 0.5) * dt;
}

inline double slice_time(std::int64_t global_slice, double dt) { return static_cast<double>(global_slice) * dt; }

template <std::size_t D>
Vec<D> step_velocity(const Node<D>& j, double dx, double dt) {
  Vec<D> u;
  for (std::size_t a = 0; a < D; ++a) u[a] = static_cast<double>(j[a]) * dx / dt;
  return u;
}

template <std::size_t D>
double kinetic_term(const KineticEnergy& L, const Frame<D>& fr, const Node<D>& j, double dx, double dt) {
  return dt * fr.alpha * L.eval(step_velocity(j, dx, dt) + fr.v);
}

template <std::size_t D>
double potential_term(const Frame<D>& fr, double dt, double f) {
  return dt * fr.beta * f;
}

template <std::size_t D>
Node<D> window_centre(const Frame<D>& fr, const GridSpec& g) {
  Node<D> c;
  for (std::size_t a = 0; a < D; ++a) c[a] = -std::llround(fr.v[a] * g.dt / g.dx);
  return c;
}

/// Displacements ordered so that the predecessor y = x - j increases lexicographically.
template <std::size_t D>
std::vector<Node<D>> window_displacements(const Node<D>& centre, std::int64_t W) {
  NodeBox<D> box;
  for (std::size_t a = 0; a < D; ++a) {
    box.lo[a] = centre[a] - W;
    box.hi[a] = centre[a] + W;
  }
  std::vector<Node<D>> out(box.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[out.size() - 1 - k] = box.node(k);
  return out;
}

/// Node boxes of every slice that can be reached from the start and can still reach a target.
template <std::size_t D>
std::vector<NodeBox<D>> plan_boxes(const GridSpec& g, const Frame<D>& fr, const SolveRequest<D>& req) {
  const Node<D> c = window_centre(fr, g);
  const std::int64_t W = g.window;
  std::vector<NodeBox<D>> boxes(static_cast<std::size_t>(g.steps + 1));
  for (std::int64_t k = 0; k <= g.steps; ++k) {
    NodeBox<D> b;
    for (std::size_t a = 0; a < D; ++a) {
      b.lo[a] = req.start_node[a] + k * (c[a] - W);
      b.hi[a] = req.start_node[a] + k * (c[a] + W);
    }
    if (!req.targets.empty()) {
      NodeBox<D> back;
      bool any = false;
      for (const auto& [kc, nc] : req.targets) {
        if (kc < k) continue;
        NodeBox<D> r;
        for (std::size_t a = 0; a < D; ++a) {
          r.lo[a] = nc[a] - (kc - k) * (c[a] + W);
          r.hi[a] = nc[a] - (kc - k) * (c[a] - W);
        }
        if (!any) {
          back = r;
          any = true;
        } else {
          for (std::size_t a = 0; a < D; ++a) {
            back.lo[a] = std::min(back.lo[a], r.lo[a]);
            back.hi[a] = std::max(back.hi[a], r.hi[a]);
          }
        }
      }
      if (!any) {
        for (std::size_t a = 0; a < D; ++a) {
          b.lo[a] = 1;
          b.hi[a] = 0;
        }
      } else {
        b = intersect(b, back);
      }
    }
    if (g.half_extent > 0) {
      NodeBox<D> clip;
      clip.lo.fill(-g.half_extent);
      clip.hi.fill(g.half_extent);
      b = intersect(b, clip);
    }
    boxes[static_cast<std::size_t>(k)] = b;
  }
  return boxes;
}

/// Unsheared sampling window that makes every potential evaluation of a solve exact.
template <std::size_t D>
Window<D> required_window(const GridSpec& g, const Frame<D>& fr, const SolveRequest<D>& req, double r_t_max) {
  const auto boxes = plan_boxes(g, fr, req);
  Window<D> w;
  w.t_lo = slice_time(req.start_slice, g.dt);
  w.t_hi = slice_time(req.start_slice + g.steps, g.dt);
  w.x_lo.fill(kInf);
  w.x_hi.fill(-kInf);
  for (std::size_t k = 0; k + 1 < boxes.size(); ++k) {
    if (boxes[k].empty() || boxes[k + 1].empty()) continue;
    for (std::size_t a = 0; a < D; ++a) {
      const double reach = r_t_max * std::abs(fr.v[a]);
      w.x_lo[a] = std::min(w.x_lo[a], half_node_coord(boxes[k].lo[a] + boxes[k + 1].lo[a], g.dx) - reach);
      w.x_hi[a] = std::max(w.x_hi[a], half_node_coord(boxes[k].hi[a] + boxes[k + 1].hi[a], g.dx) + reach);
    }
  }
  for (std::size_t a = 0; a < D; ++a) {
    if (!(w.x_hi[a] > w.x_lo[a])) {
      w.x_lo[a] = -g.dx;
      w.x_hi[a] = g.dx;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------

template <std::size_t D>
struct GridPath {
  std::int64_t start_slice = 0;
  double dt = 0.1;
  double dx = 0.05;
  std::vector<Node<D>> nodes;  // one per slice, start included

  [[nodiscard]] std::size_t steps() const { return nodes.empty() ? 0 : nodes.size() - 1; }
  [[nodiscard]] double duration() const { return static_cast<double>(steps()) * dt; }

  [[nodiscard]] Node<D> displacement(std::size_t k) const {
    Node<D> j;
    for (std::size_t a = 0; a < D; ++a) j[a] = nodes[k + 1][a] - nodes[k][a];
    return j;
  }

  [[nodiscard]] std::vector<Vec<D>> velocities() const {
    std::vector<Vec<D>> out;
    for (std::size_t k = 0; k < steps(); ++k) out.push_back(step_velocity(displacement(k), dx, dt));
    return out;
  }

  [[nodiscard]] Vec<D> position(std::size_t k) const {
    Vec<D> x;
    for (std::size_t a = 0; a < D; ++a) x[a] = node_coord(nodes[k][a], dx);
    return x;
  }

  [[nodiscard]] Vec<D> midpoint(std::size_t k) const {
    Vec<D> x;
    for (std::size_t a = 0; a < D; ++a) x[a] = half_node_coord(nodes[k][a] + nodes[k + 1][a], dx);
    return x;
  }

  [[nodiscard]] double mid_t(std::size_t k) const {
    return mid_time(start_slice + static_cast<std::int64_t>(k), dt);
  }
};

template <std::size_t D>
class ActionStack {
 public:
  GridSpec grid;
  Frame<D> frame;
  std::int64_t start_slice = 0;
  Node<D> start_node{};
  Node<D> centre{};
  std::vector<Node<D>> displacements;
  std::vector<NodeBox<D>> boxes;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<std::int32_t>> preds;
  std::uint64_t env_hash = 0;

  [[nodiscard]] std::int64_t slices() const { return static_cast<std::int64_t>(values.size()); }

  [[nodiscard]] double time(std::int64_t k) const { return slice_time(start_slice + k, grid.dt); }

  [[nodiscard]] double value(std::int64_t k, const Node<D>& n) const {
    if (k < 0 || k >= slices()) return kInf;
    const auto& b = boxes[static_cast<std::size_t>(k)];
    if (!b.contains(n)) return kInf;
    return values[static_cast<std::size_t>(k)][b.linear(n)];
  }

  [[nodiscard]] std::int32_t pred(std::int64_t k, const Node<D>& n) const {
    const auto& b = boxes[static_cast<std::size_t>(k)];
    if (!b.contains(n)) return -1;
    return preds[static_cast<std::size_t>(k)][b.linear(n)];
  }
};

/// Runs the Bellman recursion. Throws DomainError if the field does not cover
/// the grid's space-time range.
template <std::size_t D, class Field>
  requires FieldSource<Field, D>
ActionStack<D> solve(const Field& field, const KineticEnergy& L, const GridSpec& g, const Frame<D>& fr,
                     const SolveRequest<D>& req = {}) {
  g.validate();
  if (!(fr.alpha > 0.0) || !(fr.beta > 0.0)) throw ValidationError("frame", "alpha and beta must be positive");

  ActionStack<D> st;
  st.grid = g;
  st.frame = fr;
  st.start_slice = req.start_slice;
  st.start_node = req.start_node;
  st.centre = window_centre(fr, g);
  st.displacements = window_displacements<D>(st.centre, g.window);
  st.boxes = plan_boxes(g, fr, req);
  st.env_hash = field.content_hash();

  const std::size_t K = static_cast<std::size_t>(g.steps);
  st.values.resize(K + 1);
  st.preds.resize(K + 1);
  st.values[0].assign(st.boxes[0].size(), kInf);
  st.preds[0].assign(st.boxes[0].size(), -1);
  if (st.boxes[0].contains(req.start_node)) st.values[0][st.boxes[0].linear(req.start_node)] = 0.0;

  const std::size_t nj = st.displacements.size();
  std::vector<double> kin(nj);
  for (std::size_t i = 0; i < nj; ++i) kin[i] = kinetic_term(L, fr, st.displacements[i], g.dx, g.dt);

  std::vector<double> pot;
  for (std::size_t k = 0; k < K; ++k) {
    const NodeBox<D>& b0 = st.boxes[k];
    const NodeBox<D>& b1 = st.boxes[k + 1];
    auto& out = st.values[k + 1];
    auto& arg = st.preds[k + 1];
    out.assign(b1.size(), kInf);
    arg.assign(b1.size(), -1);
    if (b0.empty() || b1.empty()) continue;

    NodeBox<D> hb;
    for (std::size_t a = 0; a < D; ++a) {
      hb.lo[a] = b0.lo[a] + b1.lo[a];
      hb.hi[a] = b0.hi[a] + b1.hi[a];
    }
    pot.resize(hb.size());
    field.sheared_lattice(fr.v, mid_time(req.start_slice + static_cast<std::int64_t>(k), g.dt), hb, g.dx, pot);
    for (double& p : pot) p = potential_term(fr, g.dt, p);

    const auto& prev = st.values[k];
    if constexpr (D == 1) {
      const std::int64_t jmax = st.centre[0] + g.window;  // displacement of index 0
      for (std::int64_t x = b1.lo[0]; x <= b1.hi[0]; ++x) {
        // y = x - j must lie in b0: j in [x - b0.hi, x - b0.lo], index i = jmax - j.
        const std::int64_t i_lo = std::max<std::int64_t>(0, jmax - (x - b0.lo[0]));
        const std::int64_t i_hi = std::min<std::int64_t>(static_cast<std::int64_t>(nj) - 1, jmax - (x - b0.hi[0]));
        double best = kInf;
        std::int32_t besti = -1;
        for (std::int64_t i = i_lo; i <= i_hi; ++i) {
          const std::int64_t y = x - (jmax - i);
          const double a = prev[static_cast<std::size_t>(y - b0.lo[0])];
          if (a == kInf) continue;
          const double cand = a + kin[static_cast<std::size_t>(i)] + pot[static_cast<std::size_t>(x + y - hb.lo[0])];
          if (cand < best) {
            best = cand;
            besti = static_cast<std::int32_t>(i);
          }
        }
        out[static_cast<std::size_t>(x - b1.lo[0])] = best;
        arg[static_cast<std::size_t>(x - b1.lo[0])] = besti;
      }
    } else {
      const std::size_t n1 = b1.size();
      for (std::size_t lx = 0; lx < n1; ++lx) {
        const Node<D> x = b1.node(lx);
        double best = kInf;
        std::int32_t besti = -1;
        for (std::size_t i = 0; i < nj; ++i) {
          Node<D> y, m;
          for (std::size_t a = 0; a < D; ++a) {
            y[a] = x[a] - st.displacements[i][a];
            m[a] = x[a] + y[a];
          }
          if (!b0.contains(y)) continue;
          const double a = prev[b0.linear(y)];
          if (a == kInf) continue;
          const double cand = a + kin[i] + pot[hb.linear(m)];
          if (cand < best) {
            best = cand;
            besti = static_cast<std::int32_t>(i);
          }
        }
        out[lx] = best;
        arg[lx] = besti;
      }
    }
  }
  return st;
}

/// Node for a physical location, refusing anything off the lattice.
template <std::size_t D>
Node<D> snap_to_node(const Vec<D>& x, double dx, double tol = 1e-9) {
  Node<D> n;
  for (std::size_t a = 0; a < D; ++a) {
    const double r = x[a] / dx;
    n[a] = std::llround(r);
    if (std::abs(r - static_cast<double>(n[a])) > tol)
      throw SnapError("target " + std::to_string(x[a]) + " is not on the grid (dx = " + std::to_string(dx) + ")");
  }
  return n;
}

/// Final-slice value at target_x; +inf when the target is outside the reachable cone.
template <std::size_t D>
double point_to_point_action(const ActionStack<D>& st, const Vec<D>& target_x) {
  return st.value(st.slices() - 1, snap_to_node(target_x, st.grid.dx));
}

/// Backtracks from (slice k, node) to the initial slice. With check_window set, a
/// step on the edge of the displacement window or of a clipped extent raises
/// BoundaryHitError naming the slice.
template <std::size_t D>
GridPath<D> extract_minimizer(const ActionStack<D>& st, std::int64_t k, const Node<D>& target,
                              bool check_window = true) {
  if (st.value(k, target) == kInf) throw UnreachableError("target has infinite action");
  GridPath<D> path;
  path.start_slice = st.start_slice;
  path.dt = st.grid.dt;
  path.dx = st.grid.dx;
  path.nodes.resize(static_cast<std::size_t>(k + 1));
  Node<D> cur = target;
  for (std::int64_t s = k; s > 0; --s) {
    path.nodes[static_cast<std::size_t>(s)] = cur;
    const std::int32_t i = st.pred(s, cur);
    const Node<D>& j = st.displacements[static_cast<std::size_t>(i)];
    if (check_window) {
      for (std::size_t a = 0; a < D; ++a) {
        if (std::abs(j[a] - st.centre[a]) == st.grid.window)
          throw BoundaryHitError(st.start_slice + s, "minimizer uses the edge of the velocity window");
        if (st.grid.half_extent > 0 && std::abs(cur[a]) == st.grid.half_extent)
          throw BoundaryHitError(st.start_slice + s, "minimizer touches the spatial extent");
      }
    }
    for (std::size_t a = 0; a < D; ++a) cur[a] -= j[a];
  }
  path.nodes[0] = cur;
  return path;
}

template <std::size_t D>
GridPath<D> extract_minimizer(const ActionStack<D>& st, const Node<D>& target, bool check_window = true) {
  return extract_minimizer(st, st.slices() - 1, target, check_window);
}

/// Sum over steps of dt [alpha L(u_k + v) + beta F_v(t_k + dt/2, midpoint_k)].
template <std::size_t D, class Field>
  requires FieldSource<Field, D>
double action_of_path(const Field& field, const KineticEnergy& L, const GridSpec& g, const Frame<D>& fr,
                      const GridPath<D>& path) {
  double acc = 0.0;
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const double kin = kinetic_term(L, fr, path.displacement(k), g.dx, g.dt);
    const double pot = potential_term(fr, g.dt, field.eval_F_sheared(fr.v, path.mid_t(k), path.midpoint(k)));
    acc = acc + kin + pot;
  }
  return acc;
}

/// Time averages (1/T) sum dt L(u_k + v) and (1/T) sum dt F_v along a path.
template <std::size_t D, class Field>
  requires FieldSource<Field, D>
std::pair<double, double> path_averages(const Field& field, const KineticEnergy& L, const GridSpec& g,
                                        const Frame<D>& fr, const GridPath<D>& path) {
  double lsum = 0.0, fsum = 0.0;
  for (std::size_t k = 0; k < path.steps(); ++k) {
    lsum += g.dt * L.eval(step_velocity(path.displacement(k), g.dx, g.dt) + fr.v);
    fsum += g.dt * field.eval_F_sheared(fr.v, path.mid_t(k), path.midpoint(k));
  }
  const double T = path.duration();
  return {lsum / T, fsum / T};
}

}  // namespace elab
