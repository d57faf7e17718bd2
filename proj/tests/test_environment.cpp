#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "elab/environment.hpp"

using namespace elab;

namespace {

EnvironmentSpec standard_spec(std::uint64_t seed, int d = 1) {
  EnvironmentSpec s;
  s.d = d;
  s.intensity = 1.0;
  s.amplitude = AmplitudeDist::uniform(-1.0, 1.0);
  s.seed = seed;
  return s;
}

template <std::size_t D>
PoissonCloud<D> single_point_cloud(double amplitude, double t0 = 0.0) {
  EnvironmentSpec s = standard_spec(0, static_cast<int>(D));
  PoissonPoint<D> p;
  p.t = t0;
  p.x = zero_vec<D>();
  p.mark = {amplitude, 1.0, 1.0};
  return PoissonCloud<D>(s, make_window<D>(-3.0, 3.0, -3.0, 3.0), {p});
}

}  // namespace

TEST(Profile, BoundaryValuesAndDerivatives) {
  EXPECT_EQ(profile::h(0.0), 1.0);
  EXPECT_EQ(profile::g(0.0), 1.0);
  EXPECT_EQ(profile::h(1.0), 0.0);
  EXPECT_EQ(profile::g(1.0), 0.0);
  EXPECT_EQ(profile::g(-1.0), 0.0);
  EXPECT_EQ(profile::h1(1.0), 0.0);
  EXPECT_EQ(profile::h2(1.0), 0.0);
  for (double q : {0.1, 0.4, 0.7, 0.95}) {
    const double e = 1e-6;
    EXPECT_NEAR(profile::h1(q), (profile::h(q + e) - profile::h(q - e)) / (2 * e), 1e-8);
    EXPECT_NEAR(profile::h2(q), (profile::h1(q + e) - profile::h1(q - e)) / (2 * e), 1e-7);
    EXPECT_NEAR(profile::h_radial_excess(q), (profile::h2(q) - profile::h1_over_q(q)) / (q * q), 1e-9);
  }
}

TEST(Sampling, ZeroIntensityGivesEmptyCloud) {
  EnvironmentSpec s = standard_spec(7);
  s.intensity = 0.0;
  const auto c = sample_environment<1>(s, make_window<1>(0.0, 10.0, -5.0, 5.0));
  EXPECT_EQ(c.size(), 0u);
  EXPECT_EQ(c.eval_F(3.0, {1.0}), 0.0);
  EXPECT_EQ(c.eval_gradF(3.0, {1.0})[0], 0.0);
}

TEST(Sampling, SameSeedIsBitIdentical) {
  const auto w = make_window<2>(0.0, 5.0, -3.0, 3.0);
  const auto a = sample_environment<2>(standard_spec(42, 2), w);
  const auto b = sample_environment<2>(standard_spec(42, 2), w);
  ASSERT_EQ(a.points(), b.points());
  EXPECT_EQ(a.content_hash(), b.content_hash());
  const auto c = sample_environment<2>(standard_spec(43, 2), w);
  EXPECT_NE(a.content_hash(), c.content_hash());
}

TEST(Sampling, OverlappingWindowsAgree) {
  const auto small = sample_environment<1>(standard_spec(5), make_window<1>(0.0, 4.0, -2.0, 2.0));
  const auto big = sample_environment<1>(standard_spec(5), make_window<1>(-3.0, 10.0, -8.0, 8.0));
  for (double t : {0.3, 1.7, 3.9})
    for (double x : {-1.5, 0.0, 0.8}) EXPECT_EQ(small.eval_F(t, {x}), big.eval_F(t, {x}));
}

TEST(Sampling, PointsStayInPaddedWindowWithMarksInRange) {
  EnvironmentSpec s = standard_spec(11, 2);
  s.r_t = {0.3, 0.9};
  s.r_x = {0.5, 1.0};
  const auto c = sample_environment<2>(s, make_window<2>(0.0, 4.0, -2.0, 2.0));
  ASSERT_GT(c.size(), 0u);
  const auto pw = c.padded_window();
  for (const auto& p : c.points()) {
    EXPECT_TRUE(pw.contains(p.t, p.x, 0.0));
    EXPECT_GE(p.mark.amplitude, -1.0);
    EXPECT_LE(p.mark.amplitude, 1.0);
    EXPECT_GE(p.mark.r_t, 0.3);
    EXPECT_LE(p.mark.r_t, 0.9);
    EXPECT_GE(p.mark.r_x, 0.5);
    EXPECT_LE(p.mark.r_x, 1.0);
  }
}

TEST(Sampling, CountMatchesPoissonLawOverSeeds) {
  const auto w = make_window<1>(0.0, 10.0, -5.0, 5.0);
  const double expected = w.padded(1.0, 1.0).volume();
  double sum = 0.0;
  const int n = 1000;
  for (int s = 0; s < n; ++s) sum += static_cast<double>(sample_environment<1>(standard_spec(s), w).size());
  const double mean = sum / n;
  EXPECT_LT(std::abs(mean - expected), 3.0 * std::sqrt(expected / n));
}

TEST(Sampling, LocationsAreUniformInTime) {
  // Chi-square over ten equal time bins of the padded window.
  const auto w = make_window<1>(0.0, 8.0, -3.0, 3.0);
  std::vector<double> bins(10, 0.0);
  double total = 0.0;
  for (int s = 0; s < 200; ++s) {
    for (const auto& p : sample_environment<1>(standard_spec(s), w).points()) {
      bins[static_cast<std::size_t>(std::min(9.0, std::floor((p.t + 1.0) / 1.0)))] += 1.0;
      total += 1.0;
    }
  }
  double chi2 = 0.0;
  for (double b : bins) chi2 += (b - total / 10) * (b - total / 10) / (total / 10);
  EXPECT_LT(chi2, 27.88);  // 0.999 quantile, 9 degrees of freedom
}

TEST(Validation, RejectsBadSpecs) {
  EnvironmentSpec s = standard_spec(1);
  s.intensity = -1.0;
  try {
    validate(s);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "environment.intensity");
  }
  s = standard_spec(1);
  s.r_x = {0.5, 2.0};
  EXPECT_THROW(validate(s), ValidationError);
  s = standard_spec(1);
  s.amplitude = AmplitudeDist::exponential(0.0, 1);
  EXPECT_THROW(validate(s), ValidationError);
  EXPECT_THROW(sample_environment<1>(standard_spec(1), make_window<1>(0.0, 0.0, -1.0, 1.0)), ValidationError);
  EXPECT_THROW(sample_environment<2>(standard_spec(1, 1), make_window<2>(0.0, 1.0, -1.0, 1.0)), ValidationError);
}

TEST(Evaluation, SinglePointNormalisationAndSymmetry) {
  const auto c = single_point_cloud<2>(0.7);
  EXPECT_DOUBLE_EQ(c.eval_F(0.0, {0.0, 0.0}), 0.7);
  const auto g = c.eval_gradF(0.0, {0.0, 0.0});
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(c.eval_F(0.0, {0.6, 0.8}), 0.0);
  EXPECT_EQ(c.eval_F(1.0, {0.0, 0.0}), 0.0);
  EXPECT_DOUBLE_EQ(c.eval_F(0.5, {0.5, 0.0}), 0.7 * std::pow(0.75, 2) * std::pow(0.75, 3));
}

TEST(Evaluation, ThetaVanishesAtOwnBumpTime) {
  const auto c = single_point_cloud<1>(0.9, 0.4);
  EXPECT_EQ(c.eval_Theta(0.4, {0.3})[0], 0.0);
  EXPECT_NE(c.eval_Theta(0.6, {0.3})[0], 0.0);
}

TEST(Evaluation, OutsideWindowIsDomainError) {
  const auto c = sample_environment<1>(standard_spec(3), make_window<1>(0.0, 4.0, -2.0, 2.0));
  EXPECT_THROW((void)c.eval_F(5.0, {0.0}), DomainError);
  EXPECT_THROW((void)c.eval_F(1.0, {2.5}), DomainError);
  EXPECT_NO_THROW((void)c.eval_F(1.0, {2.0}));
  // A sheared query reaches bumps up to r_t * |v| further away.
  EXPECT_THROW((void)c.eval_F_sheared({1.0}, 1.0, {1.5}), DomainError);
  EXPECT_NO_THROW((void)c.eval_F_sheared({1.0}, 1.0, {0.5}));
}

TEST(Evaluation, IndexMatchesLinearScan) {
  std::mt19937_64 rng(9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EnvironmentSpec s = standard_spec(seed, 2);
    s.r_t = {0.2, 1.0};
    s.r_x = {0.3, 1.0};
    const auto c = sample_environment<2>(s, make_window<2>(0.0, 5.0, -3.0, 3.0));
    std::uniform_real_distribution<double> ut(0.0, 5.0), ux(-2.0, 2.0), uv(-0.5, 0.5);
    for (int q = 0; q < 100; ++q) {
      const double t = ut(rng);
      const Vec<2> x{ux(rng), ux(rng)};
      const Vec<2> v{uv(rng), uv(rng)};
      EXPECT_NEAR(c.eval_F(t, x), c.eval_F_sheared_scan(zero_vec<2>(), t, x), 1e-12);
      EXPECT_NEAR(c.eval_F_sheared(v, t, x), c.eval_F_sheared_scan(v, t, x), 1e-12);
      const auto g = c.eval_gradF(t, x), gs = c.eval_gradF_scan(t, x);
      const auto th = c.eval_Theta(t, x), ths = c.eval_Theta_scan(t, x);
      const auto h = c.eval_hessF(t, x), hs = c.eval_hessF_scan(t, x);
      for (std::size_t a = 0; a < 2; ++a) {
        EXPECT_NEAR(g[a], gs[a], 1e-12);
        EXPECT_NEAR(th[a], ths[a], 1e-12);
        for (std::size_t b = 0; b < 2; ++b) EXPECT_NEAR(h[a][b], hs[a][b], 1e-12);
      }
    }
  }
}

TEST(Evaluation, CompactSupport) {
  const auto c = sample_environment<1>(standard_spec(21), make_window<1>(0.0, 6.0, -4.0, 4.0));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> ut(0.0, 6.0), ux(-4.0, 4.0);
  int checked = 0;
  for (int q = 0; q < 2000; ++q) {
    const double t = ut(rng), x = ux(rng);
    bool reach = false;
    for (const auto& p : c.points())
      reach = reach || (std::abs(t - p.t) < p.mark.r_t && std::abs(x - p.x[0]) < p.mark.r_x);
    if (!reach) {
      EXPECT_EQ(c.eval_F(t, {x}), 0.0);
      ++checked;
    }
  }
  SUCCEED() << checked << " queries outside every support";
}

TEST(Evaluation, DerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  const auto c = sample_environment<2>(standard_spec(8, 2), make_window<2>(0.0, 5.0, -3.0, 3.0));
  std::uniform_real_distribution<double> ut(0.5, 4.5), ux(-2.0, 2.0);
  const double e = 1e-5;
  for (int q = 0; q < 100; ++q) {
    const double t = ut(rng);
    const Vec<2> x{ux(rng), ux(rng)};
    const auto g = c.eval_gradF(t, x);
    const auto h = c.eval_hessF(t, x);
    for (std::size_t a = 0; a < 2; ++a) {
      Vec<2> xp = x, xm = x;
      xp[a] += e;
      xm[a] -= e;
      EXPECT_NEAR(g[a], (c.eval_F(t, xp) - c.eval_F(t, xm)) / (2 * e), 1e-6);
      const auto gp = c.eval_gradF(t, xp), gm = c.eval_gradF(t, xm);
      for (std::size_t b = 0; b < 2; ++b) EXPECT_NEAR(h[b][a], (gp[b] - gm[b]) / (2 * e), 1e-5);
    }
  }
}

TEST(Theta, SymmetricShearDifferenceDecaysQuadratically) {
  std::mt19937_64 rng(12);
  const auto c = sample_environment<1>(standard_spec(17), make_window<1>(0.0, 6.0, -4.0, 4.0));
  std::uniform_real_distribution<double> ut(1.0, 5.0), ux(-2.0, 2.0);
  double err[3] = {0, 0, 0};
  const double ws[3] = {1e-2, 1e-3, 1e-4};
  for (int q = 0; q < 100; ++q) {
    const double t = ut(rng);
    const Vec<1> x{ux(rng)};
    const double th = c.eval_Theta(t, x)[0];
    for (int i = 0; i < 3; ++i) {
      const double fd = (c.eval_F_sheared({ws[i]}, t, x) - c.eval_F_sheared({-ws[i]}, t, x)) / (2 * ws[i]);
      err[i] += std::abs(th - fd);
    }
  }
  EXPECT_GT(err[0] / err[1], 50.0);
  EXPECT_LT(err[0] / err[1], 200.0);
}

TEST(Shear, ZeroVelocityMatchesPlainField) {
  const auto c = sample_environment<1>(standard_spec(2), make_window<1>(0.0, 5.0, -3.0, 3.0));
  for (double t : {0.5, 2.5, 4.1})
    for (double x : {-2.0, 0.3, 1.9}) EXPECT_EQ(c.eval_F_sheared({0.0}, t, {x}), c.eval_F(t, {x}));
}

TEST(Shear, GroupLawRestoresPoints) {
  const auto c = sample_environment<2>(standard_spec(3, 2), make_window<2>(0.0, 5.0, -3.0, 3.0));
  const auto back = shear_cloud(shear_cloud(c, {0.5, -0.25}), {-0.5, 0.25});
  ASSERT_EQ(back.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t a = 0; a < 2; ++a) EXPECT_NEAR(back.points()[i].x[a], c.points()[i].x[a], 1e-12);
  const auto id = shear_cloud(c, {0.0, 0.0});
  EXPECT_EQ(id.points(), c.points());
}

TEST(Shear, ShearedFieldEqualsPushforwardCloud) {
  // F_v[N](t, x) = F[Xi_v N](t, x + t v), and equivalently F[N](t, x + t v) = F_v[Xi_{-v} N](t, x).
  std::mt19937_64 rng(5);
  const auto c = sample_environment<1>(standard_spec(29), make_window<1>(0.0, 6.0, -10.0, 10.0));
  std::uniform_real_distribution<double> ut(0.5, 5.5), ux(-3.0, 3.0);
  for (double v : {0.5, -1.0, 0.25}) {
    const auto plus = shear_cloud(c, {v});
    const auto minus = shear_cloud(c, {-v});
    for (int q = 0; q < 100; ++q) {
      const double t = ut(rng), x = ux(rng);
      EXPECT_NEAR(c.eval_F_sheared({v}, t, {x}), plus.eval_F(t, {x + t * v}), 1e-12);
      EXPECT_NEAR(c.eval_F(t, {x + t * v}), minus.eval_F_sheared({v}, t, {x}), 1e-12);
    }
  }
}

TEST(Shear, DistributionalInvarianceOfPointValue) {
  const double v = 0.75;
  const auto w = make_window<1>(-2.0, 2.0, -4.0, 4.0);
  double s0 = 0, s1 = 0, q0 = 0, q1 = 0;
  const int n = 500;
  for (int s = 0; s < n; ++s) {
    const auto a = sample_environment<1>(standard_spec(1000 + s), w);
    const auto b = shear_cloud(sample_environment<1>(standard_spec(5000 + s), w), {v});
    const double fa = a.eval_F(0.0, {0.0}), fb = b.eval_F(0.0, {0.0});
    s0 += fa;
    q0 += fa * fa;
    s1 += fb;
    q1 += fb * fb;
  }
  const double m0 = s0 / n, m1 = s1 / n;
  const double se = std::sqrt((q0 / n - m0 * m0) / n + (q1 / n - m1 * m1) / n);
  EXPECT_LT(std::abs(m0 - m1), 3.0 * se);
}

TEST(Lattice, ShearedLatticeMatchesPointEvaluationBitwise) {
  const auto c = sample_environment<2>(standard_spec(31, 2), make_window<2>(0.0, 4.0, -4.0, 4.0));
  NodeBox<2> hb{{-20, -12}, {18, 22}};
  const double dx = 0.125;
  std::vector<double> out(hb.size());
  for (const Vec<2> v : {Vec<2>{0.0, 0.0}, Vec<2>{0.5, -0.25}}) {
    c.sheared_lattice(v, 1.3, hb, dx, out);
    for (std::size_t i = 0; i < hb.size(); ++i) {
      const auto m = hb.node(i);
      const Vec<2> x{half_node_coord(m[0], dx), half_node_coord(m[1], dx)};
      ASSERT_EQ(out[i], c.eval_F_sheared(v, 1.3, x));
    }
  }
  NodeBox<2> outside{{-80, 0}, {0, 0}};
  std::vector<double> o2(outside.size());
  EXPECT_THROW(c.sheared_lattice({0.0, 0.0}, 1.0, outside, dx, o2), DomainError);
}
