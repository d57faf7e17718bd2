// Basic value types shared by every module: fixed-dimension vectors, node
// indices, node boxes and the error hierarchy.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace elab {

template <std::size_t D>
using Vec = std::array<double, D>;

template <std::size_t D>
using Mat = std::array<std::array<double, D>, D>;

/// Integer lattice coordinate of a spatial grid node.
template <std::size_t D>
using Node = std::array<std::int64_t, D>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration; raised before any compute.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  [[nodiscard]] const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Query outside the region where the sampled field is exact.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A minimizer used a displacement on the edge of the velocity window.
class BoundaryHitError : public Error {
 public:
  BoundaryHitError(std::int64_t slice, const std::string& what)
      : Error("boundary hit at slice " + std::to_string(slice) + ": " + what), slice_(slice), detail_(what) {}
  [[nodiscard]] std::int64_t slice() const noexcept { return slice_; }
  [[nodiscard]] const std::string& detail() const noexcept { return detail_; }

 private:
  std::int64_t slice_;
  std::string detail_;
};

class UnreachableError : public Error {
 public:
  using Error::Error;
};

/// Target does not sit on a grid node.
class SnapError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Small vector algebra
// ---------------------------------------------------------------------------

template <std::size_t D>
constexpr Vec<D> zero_vec() {
  Vec<D> v{};
  v.fill(0.0);
  return v;
}

template <std::size_t D>
constexpr Mat<D> zero_mat() {
  Mat<D> m{};
  for (auto& row : m) row.fill(0.0);
  return m;
}

template <std::size_t D>
constexpr Mat<D> identity_mat() {
  Mat<D> m = zero_mat<D>();
  for (std::size_t i = 0; i < D; ++i) m[i][i] = 1.0;
  return m;
}

template <std::size_t D>
double dot(const Vec<D>& a, const Vec<D>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < D; ++i) s += a[i] * b[i];
  return s;
}

template <std::size_t D>
double norm2(const Vec<D>& a) {
  return std::sqrt(dot(a, a));
}

template <std::size_t D>
double norm_inf(const Vec<D>& a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

template <std::size_t D>
Vec<D> operator+(const Vec<D>& a, const Vec<D>& b) {
  Vec<D> r;
  for (std::size_t i = 0; i < D; ++i) r[i] = a[i] + b[i];
  return r;
}

template <std::size_t D>
Vec<D> operator-(const Vec<D>& a, const Vec<D>& b) {
  Vec<D> r;
  for (std::size_t i = 0; i < D; ++i) r[i] = a[i] - b[i];
  return r;
}

template <std::size_t D>
Vec<D> operator*(double s, const Vec<D>& a) {
  Vec<D> r;
  for (std::size_t i = 0; i < D; ++i) r[i] = s * a[i];
  return r;
}

/// Spectral norm of a symmetric matrix; exact for D <= 2, Frobenius bound above.
template <std::size_t D>
double sym_operator_norm(const Mat<D>& m) {
  if constexpr (D == 1) {
    return std::abs(m[0][0]);
  } else if constexpr (D == 2) {
    const double tr = 0.5 * (m[0][0] + m[1][1]);
    const double df = 0.5 * (m[0][0] - m[1][1]);
    const double rad = std::sqrt(df * df + m[0][1] * m[1][0]);
    return std::max(std::abs(tr + rad), std::abs(tr - rad));
  } else {
    double s = 0.0;
    for (const auto& row : m)
      for (double x : row) s += x * x;
    return std::sqrt(s);
  }
}

// ---------------------------------------------------------------------------
// Node boxes
// ---------------------------------------------------------------------------

/// Inclusive axis-aligned box of lattice nodes, row-major with the last axis fastest.
template <std::size_t D>
struct NodeBox {
  Node<D> lo{};
  Node<D> hi{};

  [[nodiscard]] bool empty() const {
    for (std::size_t a = 0; a < D; ++a)
      if (hi[a] < lo[a]) return true;
    return false;
  }

  [[nodiscard]] std::int64_t extent(std::size_t axis) const { return hi[axis] - lo[axis] + 1; }

  [[nodiscard]] std::size_t size() const {
    if (empty()) return 0;
    std::size_t n = 1;
    for (std::size_t a = 0; a < D; ++a) n *= static_cast<std::size_t>(extent(a));
    return n;
  }

  [[nodiscard]] bool contains(const Node<D>& n) const {
    for (std::size_t a = 0; a < D; ++a)
      if (n[a] < lo[a] || n[a] > hi[a]) return false;
    return true;
  }

  [[nodiscard]] std::size_t linear(const Node<D>& n) const {
    std::size_t idx = 0;
    for (std::size_t a = 0; a < D; ++a)
      idx = idx * static_cast<std::size_t>(extent(a)) + static_cast<std::size_t>(n[a] - lo[a]);
    return idx;
  }

  [[nodiscard]] Node<D> node(std::size_t idx) const {
    Node<D> n{};
    for (std::size_t a = D; a-- > 0;) {
      const auto e = static_cast<std::size_t>(extent(a));
      n[a] = lo[a] + static_cast<std::int64_t>(idx % e);
      idx /= e;
    }
    return n;
  }

  friend bool operator==(const NodeBox&, const NodeBox&) = default;
};

template <std::size_t D>
NodeBox<D> intersect(const NodeBox<D>& a, const NodeBox<D>& b) {
  NodeBox<D> r;
  for (std::size_t i = 0; i < D; ++i) {
    r.lo[i] = std::max(a.lo[i], b.lo[i]);
    r.hi[i] = std::min(a.hi[i], b.hi[i]);
  }
  return r;
}

/// Coordinate of half-lattice index m (the midpoint of nodes y and x has m = x + y).
/// Every code path that evaluates the potential at a step midpoint goes through here.
inline double half_node_coord(std::int64_t m, double dx) { return static_cast<double>(m) * (0.5 * dx); }

inline double node_coord(std::int64_t n, double dx) { return static_cast<double>(n) * dx; }

}  // namespace elab
