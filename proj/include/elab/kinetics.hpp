// Radial polynomial kinetic energies L(v) = sum_k a_k |v|^k and their
// Legendre transforms.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "elab/core.hpp"

namespace elab {

class KineticEnergy {
 public:
  enum class Kind { Quadratic, PolynomialNorm };

  /// L(v) = scale * |v|^2 / 2.
  static KineticEnergy quadratic(double scale = 1.0) {
    return KineticEnergy(Kind::Quadratic, {0.0, 0.0, 0.5 * scale});
  }

  /// L(v) = sum_k coeffs[k] |v|^k.
  static KineticEnergy polynomial_norm(std::vector<double> coeffs) {
    return KineticEnergy(Kind::PolynomialNorm, std::move(coeffs));
  }

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] const std::vector<double>& coeffs() const { return coeffs_; }
  [[nodiscard]] std::size_t degree() const { return coeffs_.size() - 1; }

  /// Radial profile f(rho) and its derivatives.
  [[nodiscard]] double f(double rho) const {
    double acc = 0.0;
    for (std::size_t k = coeffs_.size(); k-- > 0;) acc = acc * rho + coeffs_[k];
    return acc;
  }

  [[nodiscard]] double f1(double rho) const {
    double acc = 0.0;
    for (std::size_t k = coeffs_.size(); k-- > 1;) acc = acc * rho + static_cast<double>(k) * coeffs_[k];
    return acc;
  }

  [[nodiscard]] double f2(double rho) const {
    double acc = 0.0;
    for (std::size_t k = coeffs_.size(); k-- > 2;) acc = acc * rho + static_cast<double>(k * (k - 1)) * coeffs_[k];
    return acc;
  }

  /// f'(rho) / rho, with its limit 2 a_2 at the origin (a_1 = 0 is enforced).
  [[nodiscard]] double f1_over_rho(double rho) const {
    double acc = 0.0;
    for (std::size_t k = coeffs_.size(); k-- > 2;) acc = acc * rho + static_cast<double>(k) * coeffs_[k];
    return acc;
  }

  template <std::size_t D>
  [[nodiscard]] double eval(const Vec<D>& v) const {
    return f(norm2(v));
  }

  template <std::size_t D>
  [[nodiscard]] Vec<D> grad(const Vec<D>& v) const {
    return f1_over_rho(norm2(v)) * v;
  }

  template <std::size_t D>
  [[nodiscard]] Mat<D> hess(const Vec<D>& v) const {
    const double rho = norm2(v);
    const double iso = f1_over_rho(rho);
    // (f'' - f'/rho) / rho^2 = sum_k a_k k (k - 2) rho^(k - 4); the k = 3 term is
    // singular alone but its product with v v^T vanishes at the origin.
    double radial = 0.0;
    if (rho > 0.0)
      for (std::size_t k = 3; k < coeffs_.size(); ++k)
        radial += coeffs_[k] * static_cast<double>(k * (k - 2)) * std::pow(rho, static_cast<double>(k) - 4.0);
    Mat<D> h = zero_mat<D>();
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t j = 0; j < D; ++j) h[i][j] = radial * v[i] * v[j] + (i == j ? iso : 0.0);
    return h;
  }

  /// Spectral norm of the Hessian at any point of norm rho.
  template <std::size_t D>
  [[nodiscard]] double hess_norm_at_radius(double rho) const {
    if constexpr (D == 1) return std::abs(f2(rho));
    return std::max(std::abs(f2(rho)), std::abs(f1_over_rho(rho)));
  }

  /// sup over |r| <= delta0 of |Hess L(w + r)|; both radial and tangential
  /// curvatures are nondecreasing in the radius for this family.
  template <std::size_t D>
  [[nodiscard]] double hess_sup_ball(const Vec<D>& w, double delta0) const {
    return hess_norm_at_radius<D>(norm2(w) + delta0);
  }

  /// H(p) = sup_x <p, x> - L(x). Radial reduction plus safeguarded Newton on f'(rho) = |p|.
  template <std::size_t D>
  [[nodiscard]] double legendre(const Vec<D>& p) const {
    return legendre_radial(norm2(p));
  }

  [[nodiscard]] double legendre_radial(double pn) const {
    const double rho = maximizer_radius(pn);
    return pn * rho - f(rho);
  }

  /// rho* with f'(rho*) = |p|.
  [[nodiscard]] double maximizer_radius(double pn) const {
    if (pn <= 0.0) return 0.0;
    double lo = 0.0, hi = 1.0;
    while (f1(hi) < pn) {
      lo = hi;
      hi *= 2.0;
    }
    double rho = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
      const double g = f1(rho) - pn;
      if (g > 0.0)
        hi = rho;
      else
        lo = rho;
      const double slope = f2(rho);
      double next = slope > 0.0 ? rho - g / slope : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - rho) <= 1e-14 * std::max(1.0, rho) || hi - lo <= 1e-15 * std::max(1.0, hi)) {
        rho = next;
        break;
      }
      rho = next;
    }
    return rho;
  }

  friend bool operator==(const KineticEnergy&, const KineticEnergy&) = default;

 private:
  KineticEnergy(Kind kind, std::vector<double> coeffs) : kind_(kind), coeffs_(std::move(coeffs)) { validate(); }

  void validate() const {
    if (coeffs_.size() < 3) throw ValidationError("kinetic.coeffs", "degree must be at least 2 for superlinear growth");
    if (!(coeffs_.back() > 0.0)) throw ValidationError("kinetic.coeffs", "leading coefficient must be positive");
    for (double c : coeffs_)
      if (!(c >= 0.0) || !std::isfinite(c)) throw ValidationError("kinetic.coeffs", "coefficients must be non-negative");
    if (coeffs_[1] != 0.0)
      throw ValidationError("kinetic.coeffs", "a linear |v| term makes L non-differentiable at the origin");
  }

  Kind kind_;
  std::vector<double> coeffs_;
};

// ---------------------------------------------------------------------------

struct AssumptionReport {
  double delta0 = 0.5;
  std::vector<double> radii;
  std::vector<double> ratios;  // sup_{|r|<=delta0} |Hess L(v + r)| / L(v) at |v| = radius
  bool diverging = false;
};

/// Probes the growth ratio at increasing radii. Advisory only.
template <std::size_t D>
AssumptionReport check_assumptions(const KineticEnergy& L, double delta0, const std::vector<double>& probe_radii) {
  if (!(delta0 > 0.0 && delta0 < 1.0)) throw ValidationError("kinetic.delta0", "must lie in (0, 1)");
  for (std::size_t i = 1; i < probe_radii.size(); ++i)
    if (!(probe_radii[i] > probe_radii[i - 1])) throw ValidationError("probe_radii", "must be increasing");
  AssumptionReport rep;
  rep.delta0 = delta0;
  for (double r : probe_radii) {
    const double lv = L.f(r);
    rep.radii.push_back(r);
    rep.ratios.push_back(lv > 0.0 ? L.hess_norm_at_radius<D>(r + delta0) / lv : kInf);
  }
  // Diverging: strictly increasing over the last three probes and ten times the smallest finite ratio.
  const std::size_t n = rep.ratios.size();
  if (n >= 3) {
    double mn = kInf;
    for (double x : rep.ratios) mn = std::min(mn, x);
    const bool rising = rep.ratios[n - 1] > rep.ratios[n - 2] && rep.ratios[n - 2] > rep.ratios[n - 3];
    rep.diverging = rising && rep.ratios[n - 1] > 10.0 * mn;
  }
  return rep;
}

template <std::size_t D>
struct ShapeSample {
  Vec<D> v{};
  double value = 0.0;
};

/// max over samples of <p, v> - value: a lower bound for the conjugate at p.
template <std::size_t D>
double discrete_legendre(const std::vector<ShapeSample<D>>& samples, const Vec<D>& p) {
  if (samples.empty()) throw ValidationError("samples", "discrete Legendre transform needs at least one sample");
  double best = -kInf;
  for (const auto& s : samples) best = std::max(best, dot(p, s.v) - s.value);
  return best;
}

}  // namespace elab
