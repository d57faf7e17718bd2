// Marked Poisson random potential.
//
// The field is F(t,x) = sum_i a_i g((t - t_i)/rt_i) h(|x - x_i|/rx_i) with
// h(q) = (1 - q^2)^3 and g(q) = (1 - q^2)^2 on the unit interval, zero outside.
// The sheared field F_v(t,x) evaluates every bump at x + (t - t_i) v.
//
// Points are sampled tile by tile from counter-based streams keyed by
// (seed, tile), so two windows sampled with the same seed agree on their
// overlap. A cloud covers a padded window; queries are accepted only where every
// bump that could reach them was sampled, otherwise DomainError.
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "elab/core.hpp"
#include "elab/rng.hpp"

namespace elab {

// ---------------------------------------------------------------------------
// Profile family
// ---------------------------------------------------------------------------

enum class SpatialShape { CubicBump };
enum class TemporalShape { QuarticBump };

struct BumpProfile {
  SpatialShape spatial = SpatialShape::CubicBump;
  TemporalShape temporal = TemporalShape::QuarticBump;
};

namespace profile {

/// h(q) = (1 - q^2)^3 for 0 <= q < 1.
inline double h(double q) {
  if (q >= 1.0) return 0.0;
  const double w = 1.0 - q * q;
  return w * w * w;
}

/// h'(q) / q = -6 (1 - q^2)^2, regular at q = 0.
inline double h1_over_q(double q) {
  if (q >= 1.0) return 0.0;
  const double w = 1.0 - q * q;
  return -6.0 * w * w;
}

inline double h1(double q) { return q * h1_over_q(q); }

inline double h2(double q) {
  if (q >= 1.0) return 0.0;
  return -6.0 * (1.0 - q * q) * (1.0 - 5.0 * q * q);
}

/// (h''(q) - h'(q)/q) / q^2 = 24 (1 - q^2).
inline double h_radial_excess(double q) {
  if (q >= 1.0) return 0.0;
  return 24.0 * (1.0 - q * q);
}

/// Upper bound on the spectral norm of the Hessian of u -> h(|u|) over all u.
inline constexpr double kHessSup = 6.0;

/// g(q) = (1 - q^2)^2 for |q| < 1.
inline double g(double q) {
  if (std::abs(q) >= 1.0) return 0.0;
  const double w = 1.0 - q * q;
  return w * w;
}

}  // namespace profile

// ---------------------------------------------------------------------------
// Environment parameters
// ---------------------------------------------------------------------------

struct Mark {
  double amplitude = 0.0;
  double r_t = 1.0;
  double r_x = 1.0;
  friend bool operator==(const Mark&, const Mark&) = default;
};

struct AmplitudeDist {
  enum class Kind { Constant, Uniform, Exponential };
  Kind kind = Kind::Constant;
  double value = 1.0;         // Constant
  double lo = -1.0, hi = 1.0;  // Uniform
  double rate = 1.0;          // Exponential
  int sign = 1;               // Exponential: +1, -1, or 0 for a fair random sign

  static AmplitudeDist constant(double a) { return {Kind::Constant, a}; }
  static AmplitudeDist uniform(double lo, double hi) {
    AmplitudeDist d;
    d.kind = Kind::Uniform;
    d.lo = lo;
    d.hi = hi;
    return d;
  }
  static AmplitudeDist exponential(double rate, int sign) {
    AmplitudeDist d;
    d.kind = Kind::Exponential;
    d.rate = rate;
    d.sign = sign;
    return d;
  }
  friend bool operator==(const AmplitudeDist&, const AmplitudeDist&) = default;
};

struct RadiusRange {
  double lo = 1.0;
  double hi = 1.0;
  friend bool operator==(const RadiusRange&, const RadiusRange&) = default;
};

struct EnvironmentSpec {
  int d = 1;
  double intensity = 1.0;
  AmplitudeDist amplitude = AmplitudeDist::uniform(-1.0, 1.0);
  RadiusRange r_t{};
  RadiusRange r_x{};
  double r_t_max = 1.0;
  double r_x_max = 1.0;
  std::uint64_t seed = 0;
  BumpProfile profile{};

  /// Side of the sampling tiles and index bins.
  [[nodiscard]] double bin_side() const { return std::max(r_t_max, r_x_max); }
  friend bool operator==(const EnvironmentSpec& a, const EnvironmentSpec& b) {
    return a.d == b.d && a.intensity == b.intensity && a.amplitude == b.amplitude && a.r_t == b.r_t &&
           a.r_x == b.r_x && a.r_t_max == b.r_t_max && a.r_x_max == b.r_x_max && a.seed == b.seed;
  }
};

inline void validate(const EnvironmentSpec& s) {
  if (s.d < 1) throw ValidationError("environment.d", "dimension must be >= 1");
  if (!std::isfinite(s.intensity) || s.intensity < 0.0)
    throw ValidationError("environment.intensity", "must be a finite non-negative rate");
  if (!(s.r_t_max > 0.0) || !(s.r_x_max > 0.0))
    throw ValidationError("environment.radius_caps", "caps must be positive");
  auto check_range = [](const RadiusRange& r, double cap, const char* field) {
    if (!(r.lo > 0.0) || !(r.hi >= r.lo) || !std::isfinite(r.hi))
      throw ValidationError(field, "radius range must satisfy 0 < lo <= hi");
    if (r.hi > cap) throw ValidationError(field, "radius exceeds the support cap");
  };
  check_range(s.r_t, s.r_t_max, "environment.r_t");
  check_range(s.r_x, s.r_x_max, "environment.r_x");
  const auto& a = s.amplitude;
  switch (a.kind) {
    case AmplitudeDist::Kind::Constant:
      if (!std::isfinite(a.value)) throw ValidationError("environment.amplitude", "constant must be finite");
      break;
    case AmplitudeDist::Kind::Uniform:
      if (!std::isfinite(a.lo) || !std::isfinite(a.hi) || a.hi < a.lo)
        throw ValidationError("environment.amplitude", "uniform bounds must be finite with lo <= hi");
      break;
    case AmplitudeDist::Kind::Exponential:
      if (!(a.rate > 0.0) || !std::isfinite(a.rate))
        throw ValidationError("environment.amplitude", "exponential rate must be positive");
      if (a.sign < -1 || a.sign > 1) throw ValidationError("environment.amplitude", "sign must be -1, 0 or 1");
      break;
  }
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// Time-space box {t in [t_lo, t_hi], x - t*shear in [x_lo, x_hi]}.
template <std::size_t D>
struct Window {
  double t_lo = 0.0, t_hi = 1.0;
  Vec<D> x_lo{}, x_hi{};
  Vec<D> shear = zero_vec<D>();

  [[nodiscard]] bool contains(double t, const Vec<D>& x, double slack = 1e-9) const {
    if (t < t_lo - slack || t > t_hi + slack) return false;
    for (std::size_t a = 0; a < D; ++a) {
      const double y = x[a] - t * shear[a];
      if (y < x_lo[a] - slack || y > x_hi[a] + slack) return false;
    }
    return true;
  }

  [[nodiscard]] Window padded(double pad_t, double pad_x) const {
    Window w = *this;
    w.t_lo -= pad_t;
    w.t_hi += pad_t;
    for (std::size_t a = 0; a < D; ++a) {
      w.x_lo[a] -= pad_x;
      w.x_hi[a] += pad_x;
    }
    return w;
  }

  [[nodiscard]] bool degenerate() const {
    if (!(t_hi > t_lo)) return true;
    for (std::size_t a = 0; a < D; ++a)
      if (!(x_hi[a] > x_lo[a])) return true;
    return false;
  }

  [[nodiscard]] double volume() const {
    double v = t_hi - t_lo;
    for (std::size_t a = 0; a < D; ++a) v *= x_hi[a] - x_lo[a];
    return v;
  }

  friend bool operator==(const Window&, const Window&) = default;
};

template <std::size_t D>
Window<D> make_window(double t_lo, double t_hi, double x_lo, double x_hi) {
  Window<D> w;
  w.t_lo = t_lo;
  w.t_hi = t_hi;
  w.x_lo.fill(x_lo);
  w.x_hi.fill(x_hi);
  return w;
}

// ---------------------------------------------------------------------------
// Cloud
// ---------------------------------------------------------------------------

template <std::size_t D>
struct PoissonPoint {
  double t = 0.0;
  Vec<D> x{};
  Mark mark{};
  friend bool operator==(const PoissonPoint&, const PoissonPoint&) = default;
};

namespace detail {

template <std::size_t D>
double bump_value(const Mark& m, double s, const Vec<D>& u) {
  const double gt = profile::g(s / m.r_t);
  if (gt == 0.0) return 0.0;
  const double q = norm2(u) / m.r_x;
  return m.amplitude * gt * profile::h(q);
}

template <std::size_t D>
Vec<D> bump_grad(const Mark& m, double s, const Vec<D>& u) {
  Vec<D> out = zero_vec<D>();
  const double gt = profile::g(s / m.r_t);
  if (gt == 0.0) return out;
  const double q = norm2(u) / m.r_x;
  const double c = m.amplitude * gt * profile::h1_over_q(q) / (m.r_x * m.r_x);
  for (std::size_t a = 0; a < D; ++a) out[a] = c * u[a];
  return out;
}

template <std::size_t D>
Mat<D> bump_hess(const Mark& m, double s, const Vec<D>& u) {
  Mat<D> out = zero_mat<D>();
  const double gt = profile::g(s / m.r_t);
  if (gt == 0.0) return out;
  const double q = norm2(u) / m.r_x;
  const double r2 = m.r_x * m.r_x;
  const double iso = m.amplitude * gt * profile::h1_over_q(q) / r2;
  const double rad = m.amplitude * gt * profile::h_radial_excess(q) / (r2 * r2);
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t j = 0; j < D; ++j) out[i][j] = rad * u[i] * u[j] + (i == j ? iso : 0.0);
  return out;
}

template <std::size_t D>
Vec<D> sheared_offset(const Vec<D>& x, double s, const Vec<D>& v, const Vec<D>& xi) {
  Vec<D> u;
  for (std::size_t a = 0; a < D; ++a) u[a] = x[a] + s * v[a] - xi[a];
  return u;
}

inline double sample_amplitude(const AmplitudeDist& d, double u0, double u1) {
  switch (d.kind) {
    case AmplitudeDist::Kind::Constant:
      return d.value;
    case AmplitudeDist::Kind::Uniform:
      return d.lo + (d.hi - d.lo) * u0;
    case AmplitudeDist::Kind::Exponential: {
      const double mag = -std::log(1.0 - u0) / d.rate;
      if (d.sign == 0) return u1 < 0.5 ? -mag : mag;
      return d.sign > 0 ? mag : -mag;
    }
  }
  return 0.0;
}

}  // namespace detail

template <std::size_t D>
class PoissonCloud {
 public:
  PoissonCloud() = default;

  PoissonCloud(EnvironmentSpec spec, Window<D> window, std::vector<PoissonPoint<D>> points)
      : spec_(std::move(spec)), window_(window), points_(std::move(points)) {
    build_index();
  }

  [[nodiscard]] const EnvironmentSpec& spec() const { return spec_; }
  [[nodiscard]] const Window<D>& window() const { return window_; }
  [[nodiscard]] Window<D> padded_window() const { return window_.padded(spec_.r_t_max, spec_.r_x_max); }
  [[nodiscard]] const std::vector<PoissonPoint<D>>& points() const { return points_; }
  [[nodiscard]] std::size_t size() const { return points_.size(); }

  /// True when F_v(t, x) is an exact sum over the sampled points.
  [[nodiscard]] bool covers(const Vec<D>& v, double t, const Vec<D>& x) const {
    if (t < window_.t_lo - 1e-9 || t > window_.t_hi + 1e-9) return false;
    // Bump centres (s, y) reaching the query satisfy |y - x - (t - s) v| < r_x; the
    // requirement is linear in s, so the two extremes of s suffice.
    for (double s : {t - spec_.r_t_max, t + spec_.r_t_max}) {
      for (std::size_t a = 0; a < D; ++a) {
        const double y = x[a] + (t - s) * v[a] - s * window_.shear[a];
        if (y < window_.x_lo[a] - 1e-9 || y > window_.x_hi[a] + 1e-9) return false;
      }
    }
    return true;
  }

  void require_covered(const Vec<D>& v, double t, const Vec<D>& x) const {
    if (!covers(v, t, x)) throw DomainError("query at t=" + std::to_string(t) + " lies outside the sampled window");
  }

  // -- point evaluation -----------------------------------------------------

  [[nodiscard]] double eval_F(double t, const Vec<D>& x) const { return eval_F_sheared(zero_vec<D>(), t, x); }

  [[nodiscard]] double eval_F_sheared(const Vec<D>& v, double t, const Vec<D>& x) const {
    require_covered(v, t, x);
    double acc = 0.0;
    for (std::uint32_t i : candidates(v, t, x, x)) {
      const auto& p = points_[i];
      const double s = t - p.t;
      acc += detail::bump_value(p.mark, s, detail::sheared_offset(x, s, v, p.x));
    }
    return acc;
  }

  [[nodiscard]] Vec<D> eval_gradF(double t, const Vec<D>& x) const {
    const Vec<D> v0 = zero_vec<D>();
    require_covered(v0, t, x);
    Vec<D> acc = zero_vec<D>();
    for (std::uint32_t i : candidates(v0, t, x, x)) {
      const auto& p = points_[i];
      acc = acc + detail::bump_grad(p.mark, t - p.t, x - p.x);
    }
    return acc;
  }

  [[nodiscard]] Mat<D> eval_hessF(double t, const Vec<D>& x) const {
    const Vec<D> v0 = zero_vec<D>();
    require_covered(v0, t, x);
    Mat<D> acc = zero_mat<D>();
    for (std::uint32_t i : candidates(v0, t, x, x)) {
      const auto& p = points_[i];
      const Mat<D> h = detail::bump_hess(p.mark, t - p.t, x - p.x);
      for (std::size_t r = 0; r < D; ++r)
        for (std::size_t c = 0; c < D; ++c) acc[r][c] += h[r][c];
    }
    return acc;
  }

  /// Theta(t,x) = sum_i (t - t_i) grad phi_i(t - t_i, x - x_i).
  [[nodiscard]] Vec<D> eval_Theta(double t, const Vec<D>& x) const {
    const Vec<D> v0 = zero_vec<D>();
    require_covered(v0, t, x);
    Vec<D> acc = zero_vec<D>();
    for (std::uint32_t i : candidates(v0, t, x, x)) {
      const auto& p = points_[i];
      const double s = t - p.t;
      acc = acc + s * detail::bump_grad(p.mark, s, x - p.x);
    }
    return acc;
  }

  /// Fills out[half_box.linear(m)] = F_v(t, m * dx / 2). Summation order per
  /// lattice point equals the point evaluators, so results are bit-identical.
  void sheared_lattice(const Vec<D>& v, double t, const NodeBox<D>& half_box, double dx,
                       std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    if (half_box.empty()) return;
    Vec<D> lo, hi;
    for (std::size_t a = 0; a < D; ++a) {
      lo[a] = half_node_coord(half_box.lo[a], dx);
      hi[a] = half_node_coord(half_box.hi[a], dx);
    }
    for (std::size_t corner = 0; corner < (std::size_t{1} << D); ++corner) {
      Vec<D> c;
      for (std::size_t a = 0; a < D; ++a) c[a] = (corner >> a) & 1U ? hi[a] : lo[a];
      require_covered(v, t, c);
    }
    const double h = 0.5 * dx;
    for (std::uint32_t i : candidates(v, t, lo, hi)) {
      const auto& p = points_[i];
      const double s = t - p.t;
      if (std::abs(s) >= p.mark.r_t) continue;
      NodeBox<D> sub;
      for (std::size_t a = 0; a < D; ++a) {
        const double centre = p.x[a] - s * v[a];
        sub.lo[a] = static_cast<std::int64_t>(std::ceil((centre - p.mark.r_x) / h)) - 1;
        sub.hi[a] = static_cast<std::int64_t>(std::floor((centre + p.mark.r_x) / h)) + 1;
      }
      sub = intersect(sub, half_box);
      const std::size_t n = sub.size();
      for (std::size_t k = 0; k < n; ++k) {
        const Node<D> m = sub.node(k);
        Vec<D> x;
        for (std::size_t a = 0; a < D; ++a) x[a] = half_node_coord(m[a], dx);
        out[half_box.linear(m)] += detail::bump_value(p.mark, s, detail::sheared_offset(x, s, v, p.x));
      }
    }
  }

  // -- linear-scan oracles --------------------------------------------------

  [[nodiscard]] double eval_F_sheared_scan(const Vec<D>& v, double t, const Vec<D>& x) const {
    double acc = 0.0;
    for (const auto& p : points_) {
      const double s = t - p.t;
      acc += detail::bump_value(p.mark, s, detail::sheared_offset(x, s, v, p.x));
    }
    return acc;
  }

  [[nodiscard]] Vec<D> eval_gradF_scan(double t, const Vec<D>& x) const {
    Vec<D> acc = zero_vec<D>();
    for (const auto& p : points_) acc = acc + detail::bump_grad(p.mark, t - p.t, x - p.x);
    return acc;
  }

  [[nodiscard]] Mat<D> eval_hessF_scan(double t, const Vec<D>& x) const {
    Mat<D> acc = zero_mat<D>();
    for (const auto& p : points_) {
      const Mat<D> h = detail::bump_hess(p.mark, t - p.t, x - p.x);
      for (std::size_t r = 0; r < D; ++r)
        for (std::size_t c = 0; c < D; ++c) acc[r][c] += h[r][c];
    }
    return acc;
  }

  [[nodiscard]] Vec<D> eval_Theta_scan(double t, const Vec<D>& x) const {
    Vec<D> acc = zero_vec<D>();
    for (const auto& p : points_) {
      const double s = t - p.t;
      acc = acc + s * detail::bump_grad(p.mark, s, x - p.x);
    }
    return acc;
  }

  // -- index ----------------------------------------------------------------

  /// Indices (ascending) of points whose sheared bump can reach some x in [lo, hi] at time t.
  [[nodiscard]] std::vector<std::uint32_t> candidates(const Vec<D>& v, double t, const Vec<D>& lo,
                                                      const Vec<D>& hi) const {
    std::vector<std::uint32_t> out;
    if (points_.empty()) return out;
    const double rt = spec_.r_t_max;
    std::int64_t blo[D + 1], bhi[D + 1];
    blo[0] = bin_of(t - rt, 0);
    bhi[0] = bin_of(t + rt, 0);
    for (std::size_t a = 0; a < D; ++a) {
      const double reach = spec_.r_x_max + rt * std::abs(v[a]);
      blo[a + 1] = bin_of(lo[a] - reach, a + 1);
      bhi[a + 1] = bin_of(hi[a] + reach, a + 1);
    }
    for (std::size_t a = 0; a <= D; ++a)
      if (bhi[a] < blo[a]) return out;
    std::int64_t cur[D + 1];
    std::copy(blo, blo + D + 1, cur);
    while (true) {
      std::size_t flat = 0;
      for (std::size_t a = 0; a <= D; ++a) flat = flat * static_cast<std::size_t>(bins_[a]) + static_cast<std::size_t>(cur[a]);
      out.insert(out.end(), items_.begin() + static_cast<std::ptrdiff_t>(starts_[flat]),
                 items_.begin() + static_cast<std::ptrdiff_t>(starts_[flat + 1]));
      std::size_t a = D + 1;
      while (a-- > 0) {
        if (++cur[a] <= bhi[a]) break;
        cur[a] = blo[a];
        if (a == 0) {
          std::sort(out.begin(), out.end());
          return out;
        }
      }
    }
  }

  /// FNV-1a hash of the environment seed, window and every point coordinate.
  [[nodiscard]] std::uint64_t content_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](double x) {
      std::uint64_t bits;
      static_assert(sizeof(bits) == sizeof(x));
      std::memcpy(&bits, &x, sizeof(bits));
      for (int k = 0; k < 8; ++k) {
        h ^= (bits >> (8 * k)) & 0xFFU;
        h *= 1099511628211ULL;
      }
    };
    mix(static_cast<double>(spec_.seed));
    mix(window_.t_lo);
    mix(window_.t_hi);
    for (std::size_t a = 0; a < D; ++a) {
      mix(window_.x_lo[a]);
      mix(window_.x_hi[a]);
      mix(window_.shear[a]);
    }
    for (const auto& p : points_) {
      mix(p.t);
      for (double c : p.x) mix(c);
      mix(p.mark.amplitude);
      mix(p.mark.r_t);
      mix(p.mark.r_x);
    }
    return h;
  }

 private:
  [[nodiscard]] std::int64_t bin_of(double c, std::size_t axis) const {
    const auto b = static_cast<std::int64_t>(std::floor((c - origin_[axis]) / side_));
    return std::clamp<std::int64_t>(b, 0, bins_[axis] - 1);
  }

  void build_index() {
    side_ = spec_.bin_side();
    const Window<D> pw = padded_window();
    origin_[0] = pw.t_lo;
    double top[D + 1];
    top[0] = pw.t_hi;
    for (std::size_t a = 0; a < D; ++a) {
      // Raw-coordinate bounding box of a possibly sheared window.
      const double s0 = pw.t_lo * pw.shear[a], s1 = pw.t_hi * pw.shear[a];
      origin_[a + 1] = pw.x_lo[a] + std::min(s0, s1);
      top[a + 1] = pw.x_hi[a] + std::max(s0, s1);
    }
    for (const auto& p : points_) {
      origin_[0] = std::min(origin_[0], p.t);
      top[0] = std::max(top[0], p.t);
      for (std::size_t a = 0; a < D; ++a) {
        origin_[a + 1] = std::min(origin_[a + 1], p.x[a]);
        top[a + 1] = std::max(top[a + 1], p.x[a]);
      }
    }
    std::size_t total = 1;
    for (std::size_t a = 0; a <= D; ++a) {
      bins_[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor((top[a] - origin_[a]) / side_)) + 1);
      total *= static_cast<std::size_t>(bins_[a]);
    }
    std::vector<std::size_t> flat(points_.size());
    std::vector<std::uint32_t> counts(total, 0);
    for (std::size_t i = 0; i < points_.size(); ++i) {
      std::size_t f = bin_of(points_[i].t, 0);
      for (std::size_t a = 0; a < D; ++a)
        f = f * static_cast<std::size_t>(bins_[a + 1]) + static_cast<std::size_t>(bin_of(points_[i].x[a], a + 1));
      flat[i] = f;
      ++counts[f];
    }
    starts_.assign(total + 1, 0);
    for (std::size_t b = 0; b < total; ++b) starts_[b + 1] = starts_[b] + counts[b];
    items_.resize(points_.size());
    std::vector<std::size_t> fill(starts_.begin(), starts_.end() - 1);
    for (std::size_t i = 0; i < points_.size(); ++i) items_[fill[flat[i]]++] = static_cast<std::uint32_t>(i);
  }

  EnvironmentSpec spec_{};
  Window<D> window_{};
  std::vector<PoissonPoint<D>> points_;

  double side_ = 1.0;
  double origin_[D + 1]{};
  std::int64_t bins_[D + 1]{};
  std::vector<std::size_t> starts_;
  std::vector<std::uint32_t> items_;
};

// ---------------------------------------------------------------------------
// Sampling and shear
// ---------------------------------------------------------------------------

/// Samples the marked Poisson process on window padded by the support caps.
template <std::size_t D>
PoissonCloud<D> sample_environment(const EnvironmentSpec& spec, const Window<D>& window) {
  validate(spec);
  if (spec.d != static_cast<int>(D)) throw ValidationError("environment.d", "does not match the compiled dimension");
  if (window.degenerate()) throw ValidationError("window", "window must have positive extent on every axis");
  for (double s : window.shear)
    if (s != 0.0) throw ValidationError("window", "sampling requires an unsheared window");

  const Window<D> pw = window.padded(spec.r_t_max, spec.r_x_max);
  const double side = spec.bin_side();
  const double tile_mean = spec.intensity * std::pow(side, static_cast<double>(D + 1));

  std::int64_t lo[D + 1], hi[D + 1];
  lo[0] = static_cast<std::int64_t>(std::floor(pw.t_lo / side));
  hi[0] = static_cast<std::int64_t>(std::floor(pw.t_hi / side));
  for (std::size_t a = 0; a < D; ++a) {
    lo[a + 1] = static_cast<std::int64_t>(std::floor(pw.x_lo[a] / side));
    hi[a + 1] = static_cast<std::int64_t>(std::floor(pw.x_hi[a] / side));
  }

  std::vector<PoissonPoint<D>> points;
  if (tile_mean > 0.0) {
    std::int64_t cur[D + 1];
    std::copy(lo, lo + D + 1, cur);
    bool done = false;
    while (!done) {
      std::uint64_t key = splitmix64(spec.seed ^ 0x5EED5EED5EED5EEDULL);
      for (std::size_t a = 0; a <= D; ++a) key = hash_combine(key, static_cast<std::uint64_t>(cur[a]));
      const CounterStream tile(key);
      const std::uint64_t count = tile.poisson(tile_mean);
      for (std::uint64_t k = 0; k < count; ++k) {
        const CounterStream ps(hash_combine(key, k + 1));
        PoissonPoint<D> p;
        p.t = (static_cast<double>(cur[0]) + ps.uniform(0)) * side;
        for (std::size_t a = 0; a < D; ++a) p.x[a] = (static_cast<double>(cur[a + 1]) + ps.uniform(1 + a)) * side;
        if (!pw.contains(p.t, p.x, 0.0)) continue;
        p.mark.amplitude = detail::sample_amplitude(spec.amplitude, ps.uniform(D + 1), ps.uniform(D + 2));
        p.mark.r_t = spec.r_t.lo + (spec.r_t.hi - spec.r_t.lo) * ps.uniform(D + 3);
        p.mark.r_x = spec.r_x.lo + (spec.r_x.hi - spec.r_x.lo) * ps.uniform(D + 4);
        points.push_back(p);
      }
      std::size_t a = D + 1;
      while (a-- > 0) {
        if (++cur[a] <= hi[a]) break;
        cur[a] = lo[a];
        if (a == 0) done = true;
      }
    }
  }
  return PoissonCloud<D>(spec, window, std::move(points));
}

/// Pushforward under (t, x) -> (t, x + t w); marks unchanged.
template <std::size_t D>
PoissonCloud<D> shear_cloud(const PoissonCloud<D>& cloud, const Vec<D>& w) {
  std::vector<PoissonPoint<D>> pts = cloud.points();
  for (auto& p : pts)
    for (std::size_t a = 0; a < D; ++a) p.x[a] += p.t * w[a];
  Window<D> win = cloud.window();
  win.shear = win.shear + w;
  return PoissonCloud<D>(cloud.spec(), win, std::move(pts));
}

// ---------------------------------------------------------------------------
// Deterministic test field
// ---------------------------------------------------------------------------

/// F identically equal to a constant; used to check additive-constant shifts.
template <std::size_t D>
struct ConstantField {
  double value = 0.0;

  [[nodiscard]] double eval_F_sheared(const Vec<D>&, double, const Vec<D>&) const { return value; }
  [[nodiscard]] Vec<D> eval_Theta(double, const Vec<D>&) const { return zero_vec<D>(); }
  void require_covered(const Vec<D>&, double, const Vec<D>&) const {}
  void sheared_lattice(const Vec<D>&, double, const NodeBox<D>&, double, std::span<double> out) const {
    std::fill(out.begin(), out.end(), value);
  }
  [[nodiscard]] std::uint64_t content_hash() const { return std::hash<double>{}(value); }
};

template <class P, std::size_t D>
concept FieldSource = requires(const P& p, const Vec<D>& v, double t, const NodeBox<D>& box, std::span<double> out) {
  { p.eval_F_sheared(v, t, v) } -> std::convertible_to<double>;
  { p.eval_Theta(t, v) } -> std::convertible_to<Vec<D>>;
  p.sheared_lattice(v, t, box, t, out);
  { p.content_hash() } -> std::convertible_to<std::uint64_t>;
};

}  // namespace elab
