#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "elab/cli.hpp"

using namespace elab;
namespace cli = elab::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() / "elab_cli_tests" / (std::string(info->name()) + "_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json base_config(const std::string& experiment, double intensity = 1.0) {
  return {{"experiment", experiment},
          {"environment", {{"intensity", intensity}, {"amplitude", {{"kind", "uniform"}, {"lo", -1.0}, {"hi", 1.0}}}}},
          {"kinetic", {{"kind", "quadratic"}}},
          {"grid", {{"dt", 0.25}, {"dx", 0.0625}, {"window", 12}}},
          {"params", {{"seeds", {1, 2, 3}}}}};
}

json shape_config(double intensity = 1.0) {
  json j = base_config("shape", intensity);
  j["params"]["v"] = {{0.5}};
  j["params"]["T"] = {2.0, 4.0};
  return j;
}

struct Proc {
  int code;
  std::string output;
};

Proc run_binary(const std::string& args) {
  const std::string cmd = std::string(ELAB_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 256> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), out};
}

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << j.dump(2);
}

json strip_volatile(json manifest) {
  manifest.erase("created_utc");
  manifest.erase("wall_time_seconds");
  return manifest;
}

}  // namespace

TEST(Config, ParsesAndHashesIgnoringWorkers) {
  auto j = shape_config();
  const auto a = cli::parse_config(j);
  j["params"]["workers"] = 4;
  j["output_dir"] = "elsewhere";
  const auto b = cli::parse_config(j);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(b.params.workers, 4u);
  j["params"]["seeds"] = {7, 8};
  const auto c = cli::parse_config(j);
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_EQ(a.compat_hash(), c.compat_hash());
}

TEST(Config, FieldLevelErrors) {
  auto expect_field = [](json j, const std::string& field) {
    try {
      cli::parse_config(j);
      ADD_FAILURE() << "accepted config, expected error on " << field;
    } catch (const ValidationError& e) {
      EXPECT_EQ(e.field(), field) << e.what();
    }
  };
  auto j = shape_config();
  j["environment"]["intensity"] = -1.0;
  expect_field(j, "environment.intensity");
  j = shape_config();
  j["params"]["T"] = {4.1};
  expect_field(j, "params.T");
  j = shape_config();
  j["grid"]["bogus"] = 1;
  expect_field(j, "grid.bogus");
  j = shape_config();
  j["params"]["v"] = {{0.5, 0.5}};
  expect_field(j, "params.v[0]");
  j = shape_config();
  j["params"]["seeds"] = {1, 1};
  expect_field(j, "params.seeds");
  j = shape_config();
  j["kinetic"] = {{"kind", "polynomial_norm"}, {"coeffs", {0.0, 1.0, 1.0}}};
  expect_field(j, "kinetic.coeffs");
  j = shape_config();
  j.erase("grid");
  expect_field(j, "grid");
  j = shape_config();
  j["environment"]["seed"] = 3;
  expect_field(j, "environment.seed");
  EXPECT_THROW(cli::parse_config(shape_config(), cli::Experiment::Panel), ValidationError);
}

TEST(Run, ZeroIntensityShapeIsKineticEnergy) {
  const auto dir = scratch("run");
  cli::run(cli::parse_config(shape_config(0.0)), dir);
  const auto rep = json::parse(slurp(dir / "report.json"));
  const auto& est = rep.at("results").at("estimates")[0];
  EXPECT_EQ(est.at("lambda_hat").get<double>(), 0.125);
  EXPECT_EQ(est.at("stderr").get<double>(), 0.0);
  EXPECT_EQ(rep.at("format_version"), kFormatVersion);
  const auto man = json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(man.at("config_hash"), rep.at("config_hash"));
  EXPECT_EQ(man.at("seeds"), json({1, 2, 3}));
  const auto csv = slurp(dir / "shape.csv");
  EXPECT_EQ(csv.rfind("# format_version=1\n# config_hash=" + man.at("config_hash").get<std::string>(), 0), 0u);
}

TEST(Run, DeterministicAcrossRunsAndWorkerCounts) {
  auto cfg = cli::parse_config(shape_config());
  const auto a = scratch("a"), b = scratch("b");
  const auto ma = cli::run(cfg, a);
  cfg.params.workers = 3;
  const auto mb = cli::run(cfg, b);
  EXPECT_EQ(slurp(a / "shape.csv"), slurp(b / "shape.csv"));
  EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
  auto sa = strip_volatile(ma), sb = strip_volatile(mb);
  sa.erase("workers");
  sb.erase("workers");
  EXPECT_EQ(sa, sb);
}

TEST(Run, EveryExperimentWritesVersionedArtifacts) {
  std::vector<json> cfgs;
  auto env = base_config("env-sample");
  env["params"]["window"] = {{"t", {0.0, 2.0}}, {"x", {-1.0, 1.0}}};
  cfgs.push_back(env);
  auto solve = base_config("solve");
  solve["params"]["T"] = 2.0;
  solve["params"]["v"] = {{0.5}};
  solve["params"]["dump_stack"] = true;
  cfgs.push_back(solve);
  auto grad = base_config("grad");
  grad["params"]["v"] = {{0.0}};
  grad["params"]["T"] = 2.0;
  cfgs.push_back(grad);
  auto panel = base_config("panel");
  panel["params"]["v"] = {{0.5}};
  panel["params"]["T"] = 2.0;
  panel["params"]["alphas"] = {0.5, 1.0, 1.5};
  panel["params"]["betas"] = {0.5, 1.0, 1.5};
  cfgs.push_back(panel);
  auto homog = base_config("homog");
  homog["params"]["t"] = 1.0;
  homog["params"]["x"] = {0.5};
  homog["params"]["epsilons"] = {1.0, 0.5};
  homog["params"]["reference_T"] = 4.0;
  cfgs.push_back(homog);
  auto audit = base_config("audit");
  audit["params"]["v"] = {{0.5}};
  audit["params"]["T"] = {2.0, 4.0};
  cfgs.push_back(audit);
  for (const auto& j : cfgs) {
    const auto name = j.at("experiment").get<std::string>();
    const auto dir = scratch(name);
    const auto man = cli::run(cli::parse_config(j), dir);
    ASSERT_GE(man.at("artifacts").size(), 2u) << name;
    for (const auto& a : man.at("artifacts")) {
      EXPECT_EQ(a.at("format_version"), kFormatVersion);
      const auto file = dir / a.at("name").get<std::string>();
      ASSERT_TRUE(fs::exists(file)) << file;
      const auto body = slurp(file);
      if (file.extension() == ".csv") {
        EXPECT_EQ(body.rfind("# format_version=1", 0), 0u) << file;
      } else if (file.extension() == ".json") {
        EXPECT_EQ(json::parse(body).at("format_version"), kFormatVersion) << file;
      }
    }
    for (const auto& e : fs::directory_iterator(dir)) EXPECT_TRUE(e.is_regular_file());
  }
}

TEST(Run, StackDumpRoundTrips) {
  auto j = base_config("solve");
  j["params"]["T"] = 2.0;
  j["params"]["seeds"] = {5};
  j["params"]["dump_stack"] = true;
  const auto cfg = cli::parse_config(j);
  const auto dir = scratch("dump");
  cli::run(cfg, dir);
  std::ifstream in(dir / "stack_5.bin", std::ios::binary);
  const auto [boxes, values] = read_stack<1>(in);

  GridSpec g = cfg.grid;
  g.steps = 8;
  const SolveRequest<1> req;
  const auto s = with_seed(cfg.environment, 5);
  const auto cloud = sample_environment<1>(s, required_window(g, Frame<1>{}, req, s.r_t_max));
  const auto st = solve(cloud, cfg.kinetic, g, Frame<1>{}, req);
  ASSERT_EQ(values.size(), st.values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    EXPECT_EQ(boxes[k].lo, st.boxes[k].lo);
    EXPECT_EQ(boxes[k].hi, st.boxes[k].hi);
    EXPECT_EQ(values[k], st.values[k]);
  }
  const auto man = json::parse(slurp(dir / "stack_5.json"));
  EXPECT_EQ(man.at("env_hash"), hex64(cloud.content_hash()));
  EXPECT_EQ(man.at("code_version"), kCodeVersion);
}

TEST(Io, CloudJsonRoundTripIsBitExact) {
  EnvironmentSpec s;
  s.d = 2;
  s.intensity = 2.0;
  s.r_x = {0.5, 1.0};
  s.seed = 11;
  const auto cloud = sample_environment<2>(s, make_window<2>(0.0, 3.0, -2.0, 2.0));
  const auto back = cloud_from_json<2>(json::parse(elab::to_json(cloud).dump()));
  EXPECT_EQ(back.points(), cloud.points());
  EXPECT_EQ(back.content_hash(), cloud.content_hash());
  EXPECT_EQ(back.spec(), cloud.spec());
  EXPECT_EQ(back.window(), cloud.window());
}

TEST(Io, SpecRoundTrips) {
  const auto L = KineticEnergy::polynomial_norm({0.0, 0.0, 0.5, 0.0, 0.25});
  EXPECT_EQ(kinetic_from_json(elab::to_json(L)), L);
  GridSpec g{0.1, 0.05, 7, 3, 9};
  EXPECT_EQ(grid_from_json(elab::to_json(g)), g);
  EnvironmentSpec s;
  s.amplitude = AmplitudeDist::exponential(2.0, 0);
  s.seed = 99;
  EXPECT_EQ(environment_from_json(elab::to_json(s)), s);
}

TEST(Io, OutputRootFromEnvironment) {
  const auto root = scratch("root");
  setenv("ELAB_OUTPUT_ROOT", root.c_str(), 1);
  auto j = shape_config();
  j["output_dir"] = "runs/x";
  EXPECT_EQ(cli::resolve_output(cli::parse_config(j)), root / "runs/x");
  unsetenv("ELAB_OUTPUT_ROOT");
}

TEST(Report, SingleRunMatchesItsReport) {
  const auto root = scratch("single");
  cli::run(cli::parse_config(shape_config()), root / "r1");
  const auto summary = cli::report(root, root);
  const auto rep = json::parse(slurp(root / "r1" / "report.json"));
  const auto& per = rep.at("results").at("estimates")[0].at("per_checkpoint");
  const auto& rows = summary.at("tables").at("shape");
  ASSERT_EQ(rows.size(), per.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    EXPECT_EQ(rows[k].at("mean"), per[k].at("mean"));
    EXPECT_EQ(rows[k].at("stderr"), per[k].at("stderr"));
  }
  EXPECT_TRUE(fs::exists(root / "summary_shape.csv"));
}

TEST(Report, DisjointSeedsPoolAndShrinkStderr) {
  const auto root = scratch("pool");
  auto j = shape_config();
  j["params"]["seeds"] = {1, 2, 3, 4, 5, 6};
  cli::run(cli::parse_config(j), root / "a");
  j["params"]["seeds"] = {11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28};
  cli::run(cli::parse_config(j), root / "b");
  const auto single = json::parse(slurp(root / "a" / "report.json")).at("results").at("estimates")[0];
  const auto summary = cli::report(root, root);
  const auto& last = summary.at("tables").at("shape").back();
  EXPECT_EQ(last.at("n"), 24);
  EXPECT_LT(last.at("stderr").get<double>(), single.at("stderr").get<double>());
}

TEST(Report, HomogenizationPoolsWithSharedReference) {
  const auto root = scratch("homog");
  auto j = base_config("homog");
  j["params"]["t"] = 1.0;
  j["params"]["x"] = {0.5};
  j["params"]["epsilons"] = {1.0, 0.5};
  j["params"]["reference_T"] = 4.0;
  j["params"]["seeds"] = {1, 2};
  cli::run(cli::parse_config(j), root / "a");
  j["params"]["seeds"] = {3};
  cli::run(cli::parse_config(j), root / "b");
  const auto summary = cli::report(root, root);
  EXPECT_EQ(summary.at("tables").at("homog").at("rows")[0].at("n"), 3);
}

TEST(Report, ConflictsAreListed) {
  const auto root = scratch("conflict");
  auto j = shape_config();
  cli::run(cli::parse_config(j), root / "a");
  j["params"]["seeds"] = {9};
  j["grid"]["dx"] = 0.125;
  cli::run(cli::parse_config(j), root / "b");
  try {
    cli::report(root, root);
    FAIL();
  } catch (const cli::ConflictError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("shape: incompatible configs"), std::string::npos);
    EXPECT_NE(msg.find((root / "a").string()), std::string::npos);
  }
  const auto root2 = scratch("overlap");
  auto k = shape_config();
  cli::run(cli::parse_config(k), root2 / "a");
  k["params"]["seeds"] = {3, 4};
  cli::run(cli::parse_config(k), root2 / "b");
  EXPECT_THROW(cli::report(root2, root2), cli::ConflictError);
}

TEST(Binary, ExitCodes) {
  const auto dir = scratch("bin");
  auto bad = shape_config();
  bad["environment"]["intensity"] = -0.5;
  write_json(dir / "bad.json", bad);
  auto r = run_binary("shape " + (dir / "bad.json").string() + " -o " + (dir / "out_bad").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("environment.intensity"), std::string::npos) << r.output;

  auto tight = shape_config();
  tight["grid"]["window"] = 2;
  tight["params"]["seeds"] = {7};
  write_json(dir / "tight.json", tight);
  r = run_binary("shape " + (dir / "tight.json").string() + " -o " + (dir / "out_tight").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("seed 7"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("slice"), std::string::npos) << r.output;

  write_json(dir / "ok.json", shape_config(0.0));
  r = run_binary("shape " + (dir / "ok.json").string() + " -o " + (dir / "runs" / "ok").string());
  EXPECT_EQ(r.code, 0) << r.output;
  r = run_binary("report " + (dir / "runs").string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "runs" / "summary.json"));

  r = run_binary("shape " + (dir / "missing.json").string());
  EXPECT_EQ(r.code, 2);
}
