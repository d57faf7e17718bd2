#include <gtest/gtest.h>

#include <random>
#include <set>

#include "elab/diagnostics.hpp"
#include "elab/environment_audit.hpp"
#include "support/dense_oracle.hpp"

using namespace elab;

namespace {

GridPath<1> straight(double slope, double T, double dt, double dx) {
  GridPath<1> p;
  p.dt = dt;
  p.dx = dx;
  const auto K = std::llround(T / dt);
  for (std::int64_t k = 0; k <= K; ++k) p.nodes.push_back({std::llround(slope * static_cast<double>(k) * dt / dx)});
  return p;
}

template <std::size_t D>
GridPath<D> random_walk(std::mt19937_64& rng, std::int64_t K, std::int64_t W, double dt, double dx) {
  GridPath<D> p;
  p.dt = dt;
  p.dx = dx;
  Node<D> cur{};
  p.nodes.push_back(cur);
  std::uniform_int_distribution<std::int64_t> step(-W, W);
  for (std::int64_t k = 0; k < K; ++k) {
    for (auto& c : cur) c += step(rng);
    p.nodes.push_back(cur);
  }
  return p;
}

}  // namespace

TEST(Discretize, StraightPathsOnUnitBoxes) {
  const auto flat = discretize_path(straight(0.0, 10.0, 0.25, 0.0625));
  EXPECT_EQ(flat.m(), 10u);
  for (std::int64_t k = 0; k < 10; ++k) EXPECT_EQ(flat.boxes[static_cast<std::size_t>(k)], (Box<1>{k, 0}));
  const auto diag = discretize_path(straight(1.0, 10.0, 0.25, 0.0625));
  EXPECT_EQ(diag.m(), 10u);
  for (std::int64_t k = 0; k < 10; ++k) EXPECT_EQ(diag.boxes[static_cast<std::size_t>(k)], (Box<1>{k, k}));
}

TEST(Discretize, DownwardDiagonalTouchesCornerBoxes) {
  // x = -t passes exactly through lattice corners; each corner (k, -k) lies in a box of its own.
  const auto d = discretize_path(straight(-1.0, 3.0, 0.25, 0.0625));
  const std::set<Box<1>> got(d.boxes.begin(), d.boxes.end());
  const std::set<Box<1>> want{{0, 0}, {0, -1}, {1, -1}, {1, -2}, {2, -2}, {2, -3}};
  EXPECT_EQ(got, want);
}

TEST(Discretize, MatchesDenseOracleAndIsConnected) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto p = random_walk<1>(rng, 80, 12, 0.25, 0.0625);
    const auto d = discretize_path(p);
    EXPECT_EQ(std::set<Box<1>>(d.boxes.begin(), d.boxes.end()), oracle::dense_boxes(p));
    EXPECT_TRUE(is_connected<1>(d.boxes));
    EXPECT_GE(d.m(), 20u);
  }
  for (int i = 0; i < 10; ++i) {
    const auto p = random_walk<2>(rng, 40, 6, 0.25, 0.0625);
    const auto d = discretize_path(p);
    EXPECT_EQ(std::set<Box<2>>(d.boxes.begin(), d.boxes.end()), oracle::dense_boxes(p));
    EXPECT_TRUE(is_connected<2>(d.boxes));
  }
}

TEST(Discretize, ScaleChangesBoxUnits) {
  const auto d = discretize_path(straight(0.0, 10.0, 0.25, 0.0625), 2.0);
  EXPECT_EQ(d.m(), 5u);
}

TEST(Partition, ResidueClassesSeparateBoxes) {
  std::vector<Box<1>> one{{3, -2}};
  EXPECT_EQ(partition_boxes<1>(one, 1.0).size(), 1u);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::int64_t> u(-10, 10);
  std::set<Box<1>> s;
  while (s.size() < 200) s.insert({u(rng), u(rng)});
  const std::vector<Box<1>> boxes(s.begin(), s.end());
  for (double r : {1.0, 2.5}) {
    const auto parts = partition_boxes<1>(boxes, r);
    const auto chk = verify_partition<1>(boxes, parts, r);
    EXPECT_TRUE(chk.ok());
    if (r == 1.0) {
      EXPECT_LE(parts.size(), 4u);
    }
  }
  EXPECT_THROW(partition_boxes<1>(boxes, 0.0), ValidationError);
}

TEST(LengthAudit, StraightAndOscillatoryPaths) {
  const auto rep = length_bound_audit<1>({straight(0.0, 10.0, 0.25, 0.0625)});
  EXPECT_DOUBLE_EQ(rep.lengths[0], 10.0);
  EXPECT_EQ(rep.m[0], 10u);
  EXPECT_TRUE(rep.holds());
  // Zig-zag paths of growing amplitude: m grows and the bound keeps holding.
  std::vector<GridPath<1>> zig;
  for (int amp : {4, 8, 12}) {
    GridPath<1> p;
    p.dt = 0.25;
    p.dx = 0.0625;
    for (int k = 0; k <= 40; ++k) p.nodes.push_back({(k % 2) * amp * 4});
    zig.push_back(p);
  }
  const auto z = length_bound_audit<1>(zig);
  EXPECT_LT(z.m[0], z.m[2]);
  EXPECT_TRUE(z.holds());
}

TEST(LowerBound, SignedEnvironments) {
  EnvironmentSpec s;
  s.intensity = 0.0;
  const auto path = straight(0.5, 8.0, 0.25, 0.0625);
  GridSpec g{0.25, 0.0625, 32, 12};
  const auto empty = sample_environment<1>(s, make_window<1>(0.0, 8.0, -3.0, 7.0));
  const auto r0 = lower_bound_audit(empty, KineticEnergy::quadratic(), g, path);
  EXPECT_EQ(r0.mean_potential, 0.0);
  EXPECT_EQ(r0.q_path, 0.0);
  EXPECT_EQ(r0.q_boxes, 0.0);
  EXPECT_EQ(r0.samples_per_box, 25u);
  s.intensity = 1.0;
  s.amplitude = AmplitudeDist::uniform(0.0, 1.0);
  const auto pos = sample_environment<1>(s, make_window<1>(0.0, 8.0, -3.0, 7.0));
  const auto rp = lower_bound_audit(pos, KineticEnergy::quadratic(), g, path);
  EXPECT_GE(rp.mean_potential, 0.0);
  EXPECT_EQ(rp.q_path, 0.0);
  EXPECT_EQ(running_q({0.1, 0.05, 0.3, 0.2}), (std::vector<double>{0.1, 0.1, 0.3, 0.3}));
}

TEST(MGrowth, ZeroFieldStraightLines) {
  EnvironmentSpec s;
  s.intensity = 0.0;
  ShapeOptions opt;
  opt.keep_paths = true;
  const auto est = estimate_shape<1>(s, KineticEnergy::quadratic(), GridSpec{0.25, 0.0625, 1, 12}, {0.5},
                                     {4.0, 8.0, 16.0}, {1}, opt);
  const auto rep = m_growth_audit(est);
  EXPECT_TRUE(rep.above_floor);
  EXPECT_TRUE(rep.bounded);
  // x = t / 2 crosses a space level every other time level, always at a lattice corner.
  for (double x : rep.mean_m_over_T) EXPECT_DOUBLE_EQ(x, 1.0);
}

TEST(Hjb, ZeroFieldResidualShrinksUnderParabolicRefinement) {
  // Halving dt while quartering dx keeps the speed cap and shrinks the lattice velocity step dx/dt.
  const auto L = KineticEnergy::quadratic();
  const ConstantField<1> zero{0.0};
  const auto coarse = hjb_residual(solve<1>(zero, L, GridSpec{0.25, 0.0625, 24, 8}, Frame<1>{}), zero, L);
  const auto fine = hjb_residual(solve<1>(zero, L, GridSpec{0.125, 0.015625, 48, 16}, Frame<1>{}), zero, L);
  ASSERT_GT(coarse.cells.size(), 100u);
  EXPECT_GT(coarse.median, 1.5 * fine.median);
}

TEST(Hjb, HalvingBothStepsKeepsVelocityArtifact) {
  // With dx/dt fixed the free value is t times a piecewise linear interpolant of L,
  // whose residual is (dx/dt)^2 / 8 at every smooth cell.
  const auto L = KineticEnergy::quadratic();
  const ConstantField<1> zero{0.0};
  const auto a = hjb_residual(solve<1>(zero, L, GridSpec{0.25, 0.0625, 24, 8}, Frame<1>{}), zero, L);
  const auto b = hjb_residual(solve<1>(zero, L, GridSpec{0.125, 0.03125, 48, 8}, Frame<1>{}), zero, L);
  EXPECT_NEAR(a.median, 0.0078125, 1e-9);
  EXPECT_NEAR(b.median, 0.0078125, 1e-9);
}

TEST(Hjb, RejectsShearedStack) {
  const ConstantField<1> zero{0.0};
  const auto st = solve<1>(zero, KineticEnergy::quadratic(), GridSpec{0.25, 0.0625, 4, 4}, Frame<1>{{0.5}, 1, 1});
  EXPECT_THROW(hjb_residual(st, zero, KineticEnergy::quadratic()), ValidationError);
}

TEST(EnvironmentAudit, MomentsAndGrowthReport) {
  EnvironmentSpec s;
  s.amplitude = AmplitudeDist::uniform(-1.0, 1.0);
  const auto m = moment_audit<1>(s, {0.1, 0.5, 1.0}, {50, 100, 200});
  ASSERT_EQ(m.mgf.size(), 3u);
  for (const auto& row : m.mgf)
    for (double x : row) EXPECT_TRUE(std::isfinite(x));
  EXPECT_GT(m.largest_stable_lambda, 0.0);
  const auto g = linear_growth_audit<1>(s, 5.0, {5.0, 10.0, 20.0, 40.0});
  ASSERT_EQ(g.ratio.size(), 4u);
  for (std::size_t i = 1; i < g.ratio.size(); ++i) EXPECT_GE(g.ratio[i], g.ratio[i - 1]);
}
