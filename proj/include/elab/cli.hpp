// Batch experiments: config parsing, orchestration, artefact writing and the
// `report` merge step. The command-line front end in tools/elab.cpp is a thin
// wrapper over run() and report().
#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "elab/asymptotics.hpp"
#include "elab/diagnostics.hpp"
#include "elab/environment_audit.hpp"
#include "elab/io.hpp"

namespace elab::cli {

namespace fs = std::filesystem;

/// Raised by report() when runs cannot be pooled.
class ConflictError : public Error {
 public:
  using Error::Error;
};

enum class Experiment { EnvSample, Solve, Shape, Grad, Panel, Homog, Audit };

inline const std::map<std::string, Experiment>& experiment_names() {
  static const std::map<std::string, Experiment> names{
      {"env-sample", Experiment::EnvSample}, {"solve", Experiment::Solve}, {"shape", Experiment::Shape},
      {"grad", Experiment::Grad},           {"panel", Experiment::Panel}, {"homog", Experiment::Homog},
      {"audit", Experiment::Audit}};
  return names;
}

inline std::string to_string(Experiment e) {
  for (const auto& [k, v] : experiment_names())
    if (v == e) return k;
  return "?";
}

inline Experiment parse_experiment(const std::string& s, const std::string& field = "experiment") {
  const auto it = experiment_names().find(s);
  if (it == experiment_names().end()) throw ValidationError(field, "unknown experiment '" + s + "'");
  return it->second;
}

inline const std::vector<std::string>& all_audits() {
  static const std::vector<std::string> a{"m_growth", "lower_bound", "second_order", "moments", "growth", "hjb"};
  return a;
}

struct Params {
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  std::vector<std::vector<double>> v;
  std::vector<double> T;
  bool gradient = true;
  std::optional<double> fd_step;
  double alpha = 1.0, beta = 1.0;
  bool dump_stack = false;
  std::vector<double> alphas, betas;
  double t = 1.0;
  std::vector<double> x;
  std::vector<double> epsilons;
  std::optional<double> reference;
  double reference_T = 200.0;
  std::vector<double> window_t, window_x;
  double delta0 = 0.5;
  int density = 5;
  std::vector<std::string> audits;
};

struct RunConfig {
  Experiment experiment = Experiment::Shape;
  EnvironmentSpec environment;
  KineticEnergy kinetic = KineticEnergy::quadratic();
  GridSpec grid;
  Params params;
  std::optional<std::string> output_dir;

  /// Normalised config. Worker count and output location never change results
  /// and are left out; `with_seeds = false` gives the pooling key.
  [[nodiscard]] json canonical(bool with_seeds = true) const {
    const auto& p = params;
    json pj;
    if (with_seeds) pj["seeds"] = p.seeds;
    switch (experiment) {
      case Experiment::EnvSample:
        pj["window"] = {{"t", p.window_t}, {"x", p.window_x}};
        break;
      case Experiment::Solve:
        pj["T"] = p.T;
        pj["v"] = p.v;
        pj["alpha"] = p.alpha;
        pj["beta"] = p.beta;
        pj["dump_stack"] = p.dump_stack;
        break;
      case Experiment::Shape:
        pj["v"] = p.v;
        pj["T"] = p.T;
        pj["gradient"] = p.gradient;
        break;
      case Experiment::Grad:
        pj["v"] = p.v;
        pj["T"] = p.T;
        pj["fd_step"] = *p.fd_step;
        break;
      case Experiment::Panel:
        pj["v"] = p.v;
        pj["T"] = p.T;
        pj["alphas"] = p.alphas;
        pj["betas"] = p.betas;
        break;
      case Experiment::Homog:
        pj["t"] = p.t;
        pj["x"] = p.x;
        pj["epsilons"] = p.epsilons;
        if (p.reference) pj["reference"] = *p.reference;
        else pj["reference_T"] = p.reference_T;
        break;
      case Experiment::Audit:
        pj["v"] = p.v;
        pj["T"] = p.T;
        pj["delta0"] = p.delta0;
        pj["density"] = p.density;
        pj["audits"] = p.audits;
        break;
    }
    json env = to_json(environment);
    env.erase("seed");
    return {{"format_version", kFormatVersion},
            {"experiment", to_string(experiment)},
            {"environment", env},
            {"kinetic", to_json(kinetic)},
            {"grid", to_json(grid)},
            {"params", pj}};
  }

  [[nodiscard]] std::string hash() const { return hex64(fnv1a64(canonical().dump())); }
  [[nodiscard]] std::string compat_hash() const { return hex64(fnv1a64(canonical(false).dump())); }
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<double>> velocity_list(const json& j, const std::string& path, std::size_t d) {
  if (!j.is_array() || j.empty()) throw ValidationError(path, "expected a non-empty list of velocities");
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    std::vector<double> v = j[i].is_number() ? std::vector<double>{schema::number(j[i], p)} : schema::numbers(j[i], p);
    if (v.size() != d) throw ValidationError(p, "velocity must have " + std::to_string(d) + " components");
    out.push_back(std::move(v));
  }
  return out;
}

inline std::vector<double> horizons(const json& j, const std::string& path, double dt) {
  std::vector<double> T = j.is_number() ? std::vector<double>{schema::number(j, path)} : schema::numbers(j, path);
  if (T.empty()) throw ValidationError(path, "at least one horizon is required");
  for (double x : T) slices_for(x, dt, path.c_str());
  std::sort(T.begin(), T.end());
  if (std::adjacent_find(T.begin(), T.end()) != T.end()) throw ValidationError(path, "horizons must be distinct");
  return T;
}

inline std::vector<double> positive_list(const json& j, const std::string& path) {
  const auto xs = schema::numbers(j, path);
  if (xs.empty()) throw ValidationError(path, "must not be empty");
  for (double x : xs)
    if (!(x > 0.0) || !std::isfinite(x)) throw ValidationError(path, "entries must be positive");
  return xs;
}

inline bool boolean(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ValidationError(path, "expected true or false");
  return j.get<bool>();
}

}  // namespace detail

/// `forced` is the subcommand; a config that names another experiment is rejected.
inline RunConfig parse_config(const json& j, std::optional<Experiment> forced = std::nullopt) {
  schema::allow_only(j, "", {"format_version", "experiment", "environment", "kinetic", "grid", "params", "output_dir"});
  if (j.contains("format_version") && schema::integer(j, "", "format_version") != kFormatVersion)
    throw ValidationError("format_version", "unsupported version");
  RunConfig c;
  if (j.contains("experiment")) {
    c.experiment = parse_experiment(schema::string(j, "", "experiment"));
    if (forced && *forced != c.experiment)
      throw ValidationError("experiment", "config is for '" + to_string(c.experiment) + "', not '" +
                                              to_string(*forced) + "'");
  } else if (forced) {
    c.experiment = *forced;
  } else {
    throw ValidationError("experiment", "missing");
  }
  const json& env = schema::at(j, "", "environment");
  if (env.is_object() && env.contains("seed"))
    throw ValidationError("environment.seed", "seeds belong in params.seeds");
  c.environment = environment_from_json(env);
  if (c.environment.d != 1 && c.environment.d != 2)
    throw ValidationError("environment.d", "only dimensions 1 and 2 are built");
  c.kinetic = kinetic_from_json(schema::at(j, "", "kinetic"));
  c.grid = grid_from_json(schema::at(j, "", "grid"));
  if (j.contains("output_dir")) c.output_dir = schema::string(j, "", "output_dir");

  const json& p = schema::at(j, "", "params");
  const auto d = static_cast<std::size_t>(c.environment.d);
  auto& P = c.params;
  const double dt = c.grid.dt;
  switch (c.experiment) {
    case Experiment::EnvSample:
      schema::allow_only(p, "params", {"seeds", "workers", "window"});
      break;
    case Experiment::Solve:
      schema::allow_only(p, "params", {"seeds", "workers", "T", "v", "alpha", "beta", "dump_stack"});
      break;
    case Experiment::Shape:
      schema::allow_only(p, "params", {"seeds", "workers", "v", "T", "gradient"});
      break;
    case Experiment::Grad:
      schema::allow_only(p, "params", {"seeds", "workers", "v", "T", "fd_step"});
      break;
    case Experiment::Panel:
      schema::allow_only(p, "params", {"seeds", "workers", "v", "T", "alphas", "betas"});
      break;
    case Experiment::Homog:
      schema::allow_only(p, "params", {"seeds", "workers", "t", "x", "epsilons", "reference", "reference_T"});
      break;
    case Experiment::Audit:
      schema::allow_only(p, "params", {"seeds", "workers", "v", "T", "delta0", "density", "audits"});
      break;
  }

  const json& seeds = schema::at(p, "params", "seeds");
  if (!seeds.is_array() || seeds.empty()) throw ValidationError("params.seeds", "expected a non-empty list");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    P.seeds.push_back(schema::unsigned_integer(seeds[i], "params.seeds[" + std::to_string(i) + "]"));
  if (std::set<std::uint64_t>(P.seeds.begin(), P.seeds.end()).size() != P.seeds.size())
    throw ValidationError("params.seeds", "seeds must be distinct");
  const auto workers = schema::integer_or(p, "params", "workers", 1);
  if (workers < 1) throw ValidationError("params.workers", "must be at least 1");
  P.workers = static_cast<std::size_t>(workers);

  auto need_v = [&](bool single) {
    P.v = detail::velocity_list(schema::at(p, "params", "v"), "params.v", d);
    if (single && P.v.size() != 1) throw ValidationError("params.v", "exactly one velocity is expected");
  };
  auto need_T = [&](bool single) {
    P.T = detail::horizons(schema::at(p, "params", "T"), "params.T", dt);
    if (single && P.T.size() != 1) throw ValidationError("params.T", "exactly one horizon is expected");
  };

  switch (c.experiment) {
    case Experiment::EnvSample: {
      const json& w = schema::at(p, "params", "window");
      schema::allow_only(w, "params.window", {"t", "x"});
      P.window_t = schema::numbers(schema::at(w, "params.window", "t"), "params.window.t");
      P.window_x = schema::numbers(schema::at(w, "params.window", "x"), "params.window.x");
      if (P.window_t.size() != 2 || !(P.window_t[1] > P.window_t[0]))
        throw ValidationError("params.window.t", "expected [lo, hi] with lo < hi");
      if (P.window_x.size() != 2 || !(P.window_x[1] > P.window_x[0]))
        throw ValidationError("params.window.x", "expected [lo, hi] with lo < hi");
      break;
    }
    case Experiment::Solve:
      need_T(true);
      P.v = p.contains("v") ? detail::velocity_list(p.at("v"), "params.v", d)
                            : std::vector<std::vector<double>>{std::vector<double>(d, 0.0)};
      if (P.v.size() != 1) throw ValidationError("params.v", "exactly one velocity is expected");
      P.alpha = schema::number_or(p, "params", "alpha", 1.0);
      P.beta = schema::number_or(p, "params", "beta", 1.0);
      if (!(P.alpha > 0.0)) throw ValidationError("params.alpha", "must be positive");
      if (!(P.beta > 0.0)) throw ValidationError("params.beta", "must be positive");
      if (p.contains("dump_stack")) P.dump_stack = detail::boolean(p.at("dump_stack"), "params.dump_stack");
      break;
    case Experiment::Shape:
      need_v(false);
      need_T(false);
      if (p.contains("gradient")) P.gradient = detail::boolean(p.at("gradient"), "params.gradient");
      break;
    case Experiment::Grad: {
      need_v(false);
      need_T(true);
      const double h = schema::number_or(p, "params", "fd_step", c.grid.dx / c.grid.dt);
      if (!(h > 0.0)) throw ValidationError("params.fd_step", "must be positive");
      P.fd_step = h;
      break;
    }
    case Experiment::Panel:
      need_v(true);
      need_T(true);
      P.alphas = detail::positive_list(schema::at(p, "params", "alphas"), "params.alphas");
      P.betas = detail::positive_list(schema::at(p, "params", "betas"), "params.betas");
      break;
    case Experiment::Homog: {
      P.t = schema::number(p, "params", "t");
      if (!(P.t > 0.0)) throw ValidationError("params.t", "must be positive");
      P.x = schema::numbers(schema::at(p, "params", "x"), "params.x");
      if (P.x.size() != d) throw ValidationError("params.x", "must have " + std::to_string(d) + " components");
      P.epsilons = detail::positive_list(schema::at(p, "params", "epsilons"), "params.epsilons");
      for (double e : P.epsilons) slices_for(P.t / e, dt, "params.epsilons");
      if (p.contains("reference")) P.reference = schema::number(p, "params", "reference");
      P.reference_T = schema::number_or(p, "params", "reference_T", 200.0);
      if (!P.reference) slices_for(P.reference_T, dt, "params.reference_T");
      break;
    }
    case Experiment::Audit: {
      need_v(true);
      need_T(false);
      P.delta0 = schema::number_or(p, "params", "delta0", 0.5);
      if (!(P.delta0 > 0.0 && P.delta0 < 1.0)) throw ValidationError("params.delta0", "must lie in (0, 1)");
      P.density = static_cast<int>(schema::integer_or(p, "params", "density", 5));
      if (P.density < 2) throw ValidationError("params.density", "must be at least 2");
      if (p.contains("audits")) {
        const json& a = p.at("audits");
        if (!a.is_array() || a.empty()) throw ValidationError("params.audits", "expected a non-empty list");
        for (const auto& x : a) {
          if (!x.is_string()) throw ValidationError("params.audits", "expected audit names");
          const auto name = x.get<std::string>();
          if (std::find(all_audits().begin(), all_audits().end(), name) == all_audits().end())
            throw ValidationError("params.audits", "unknown audit '" + name + "'");
          P.audits.push_back(name);
        }
      } else {
        P.audits = all_audits();
      }
      break;
    }
  }
  return c;
}

inline RunConfig load_config(const fs::path& file, std::optional<Experiment> forced = std::nullopt) {
  std::ifstream in(file);
  if (!in) throw ValidationError("config", "cannot read " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config", std::string("not valid JSON: ") + e.what());
  }
  return parse_config(j, forced);
}

/// Root for relative output paths: $ELAB_OUTPUT_ROOT, else the working directory.
inline fs::path output_root() {
  const char* env = std::getenv("ELAB_OUTPUT_ROOT");
  return (env && *env) ? fs::path(env) : fs::current_path();
}

inline fs::path resolve_output(const RunConfig& c, const std::optional<fs::path>& override_dir = std::nullopt) {
  fs::path p = override_dir ? *override_dir
                            : fs::path(c.output_dir.value_or(to_string(c.experiment) + "-" + c.hash()));
  return p.is_absolute() ? p : output_root() / p;
}

// ---------------------------------------------------------------------------
// Artefacts
// ---------------------------------------------------------------------------

/// Writes into one directory; every file name is a plain leaf name.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void text(const std::string& name, const std::string& body) {
    if (fs::path(name).has_parent_path()) throw Error("artifact names must not contain directories");
    std::ofstream out(dir_ / name, std::ios::binary);
    out << body;
    if (!out) throw Error("cannot write " + (dir_ / name).string());
    names_.push_back(name);
  }

  void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

  void binary(const std::string& name, const std::function<void(std::ostream&)>& fill) {
    std::ofstream out(dir_ / name, std::ios::binary);
    fill(out);
    if (!out) throw Error("cannot write " + (dir_ / name).string());
    names_.push_back(name);
  }

  [[nodiscard]] const std::vector<std::string>& names() const { return names_; }
  [[nodiscard]] const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::string> names_;
};

inline json to_json(const MeanStderr& m) { return {{"mean", m.mean}, {"stderr", m.stderr_}, {"flagged", m.flagged}}; }

template <std::size_t D>
Vec<D> as_vec(const std::vector<double>& xs) {
  Vec<D> v;
  for (std::size_t a = 0; a < D; ++a) v[a] = xs[a];
  return v;
}

template <std::size_t D>
std::vector<double> as_list(const Vec<D>& v) {
  return {v.begin(), v.end()};
}

// ---------------------------------------------------------------------------
// Experiments. Each returns the `results` block of report.json.
// ---------------------------------------------------------------------------

template <std::size_t D>
json run_env_sample(const RunConfig& c, ArtifactWriter& out) {
  const auto& P = c.params;
  const auto w = make_window<D>(P.window_t[0], P.window_t[1], P.window_x[0], P.window_x[1]);
  std::vector<PoissonCloud<D>> clouds(P.seeds.size());
  parallel_for(P.seeds.size(), P.workers,
               [&](std::size_t i) { clouds[i] = sample_environment<D>(with_seed(c.environment, P.seeds[i]), w); });
  json runs = json::array();
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const auto& cl = clouds[i];
    const std::string tag = std::to_string(P.seeds[i]);
    out.json_file("cloud_" + tag + ".json", elab::to_json(cl));
    std::vector<std::string> cols{"t"};
    for (std::size_t a = 0; a < D; ++a) cols.push_back("x" + std::to_string(a));
    for (const char* s : {"amplitude", "r_t", "r_x"}) cols.emplace_back(s);
    CsvTable t(cols, c.hash());
    for (const auto& p : cl.points()) {
      std::vector<double> r{p.t};
      r.insert(r.end(), p.x.begin(), p.x.end());
      r.insert(r.end(), {p.mark.amplitude, p.mark.r_t, p.mark.r_x});
      t.row(r);
    }
    out.text("points_" + tag + ".csv", t.str());
    runs.push_back({{"seed", P.seeds[i]},
                    {"points", cl.points().size()},
                    {"expected_points", c.environment.intensity * cl.padded_window().volume()},
                    {"content_hash", hex64(cl.content_hash())}});
  }
  return {{"window", elab::to_json(w)}, {"per_seed", runs}};
}

template <std::size_t D>
json run_solve(const RunConfig& c, ArtifactWriter& out) {
  const auto& P = c.params;
  GridSpec g = c.grid;
  g.steps = slices_for(P.T[0], g.dt, "params.T");
  const Frame<D> fr{as_vec<D>(P.v[0]), P.alpha, P.beta};
  const SolveRequest<D> req;
  std::vector<ActionStack<D>> stacks(P.seeds.size());
  std::vector<GridPath<D>> paths(P.seeds.size());
  parallel_for(P.seeds.size(), P.workers, [&](std::size_t i) {
    for_seed(P.seeds[i], [&] {
      const auto s = with_seed(c.environment, P.seeds[i]);
      const auto cloud = sample_environment<D>(s, required_window(g, fr, req, s.r_t_max));
      stacks[i] = solve(cloud, c.kinetic, g, fr, req);
      paths[i] = extract_minimizer(stacks[i], Node<D>{});
    });
  });
  json runs = json::array();
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    const auto& st = stacks[i];
    const std::string tag = std::to_string(P.seeds[i]);
    out.text("final_slice_" + tag + ".csv", final_slice_csv(st, c.hash()).str());
    if (P.dump_stack) {
      out.binary("stack_" + tag + ".bin", [&](std::ostream& os) { write_stack(st, os); });
      out.json_file("stack_" + tag + ".json", stack_manifest(st, "stack_" + tag + ".bin"));
    }
    const auto& last = st.values.back();
    json path_nodes = json::array();
    for (const auto& n : paths[i].nodes) path_nodes.push_back(n);
    runs.push_back({{"seed", P.seeds[i]},
                    {"env_hash", hex64(st.env_hash)},
                    {"value_at_origin", st.value(st.slices() - 1, Node<D>{})},
                    {"min_final", *std::min_element(last.begin(), last.end())},
                    {"minimizer_nodes", path_nodes}});
  }
  return {{"T", P.T[0]}, {"frame", elab::to_json(fr)}, {"per_seed", runs}};
}

template <std::size_t D>
json shape_json(const ShapeEstimate<D>& est) {
  json per_checkpoint = json::array();
  for (std::size_t k = 0; k < est.T_checkpoints.size(); ++k) {
    std::vector<double> xs;
    for (const auto& row : est.lambda_series) xs.push_back(row[k]);
    per_checkpoint.push_back(to_json(mean_stderr(xs)));
  }
  return {{"v", est.v},
          {"T", est.T_checkpoints},
          {"seeds", est.seeds},
          {"lambda_per_seed", est.lambda_series},
          {"grad_per_seed", est.grad_per_seed},
          {"lambda_hat", est.lambda_hat},
          {"stderr", est.stderr_},
          {"stderr_flagged", est.stderr_flagged},
          {"grad_hat", est.grad_hat},
          {"grad_stderr", est.grad_stderr},
          {"snap_error", est.snap_error},
          {"per_checkpoint", per_checkpoint},
          {"doubling_gaps", doubling_gaps(est)}};
}

/// Convergence table rows (v..., T, n, mean, stderr) for one velocity.
inline void shape_rows(CsvTable& t, const std::vector<double>& v, const std::vector<double>& T,
                       const std::vector<std::vector<double>>& per_seed) {
  for (std::size_t k = 0; k < T.size(); ++k) {
    std::vector<double> xs;
    for (const auto& row : per_seed) xs.push_back(row[k]);
    const auto ms = mean_stderr(xs);
    std::vector<double> r = v;
    r.insert(r.end(), {T[k], static_cast<double>(xs.size()), ms.mean, ms.stderr_});
    t.row(r);
  }
}

template <std::size_t D>
std::vector<std::string> v_columns(std::vector<std::string> tail) {
  std::vector<std::string> cols;
  for (std::size_t a = 0; a < D; ++a) cols.push_back("v" + std::to_string(a));
  cols.insert(cols.end(), tail.begin(), tail.end());
  return cols;
}

template <std::size_t D>
json run_shape(const RunConfig& c, ArtifactWriter& out) {
  const auto& P = c.params;
  ShapeOptions opt;
  opt.gradient = P.gradient;
  opt.workers = P.workers;
  json ests = json::array();
  CsvTable t(v_columns<D>({"T", "n", "mean", "stderr"}), c.hash());
  for (const auto& v : P.v) {
    const auto est = estimate_shape<D>(c.environment, c.kinetic, c.grid, as_vec<D>(v), P.T, P.seeds, opt);
    shape_rows(t, v, est.T_checkpoints, est.lambda_series);
    ests.push_back(shape_json(est));
  }
  out.text("shape.csv", t.str());
  return {{"estimates", ests}};
}

/// Rows (v..., axis, n, grad, grad_stderr, fd, fd_stderr, gap).
inline void grad_rows(CsvTable& t, const std::vector<double>& v, std::size_t axis, const std::vector<double>& grad,
                      const std::vector<double>& fd) {
  const auto g = mean_stderr(grad), f = mean_stderr(fd);
  std::vector<double> r = v;
  r.insert(r.end(), {static_cast<double>(axis), static_cast<double>(grad.size()), g.mean, g.stderr_, f.mean,
                     f.stderr_, std::abs(g.mean - f.mean)});
  t.row(r);
}

template <std::size_t D>
json run_grad(const RunConfig& c, ArtifactWriter& out) {
  const auto& P = c.params;
  const double h = *P.fd_step;
  ShapeOptions with_grad, plain;
  with_grad.workers = plain.workers = P.workers;
  plain.gradient = false;
  json rows = json::array();
  CsvTable t(v_columns<D>({"axis", "n", "grad", "grad_stderr", "fd", "fd_stderr", "gap"}), c.hash());
  for (const auto& vl : P.v) {
    const Vec<D> v = as_vec<D>(vl);
    const auto est = estimate_shape<D>(c.environment, c.kinetic, c.grid, v, P.T, P.seeds, with_grad);
    json axes = json::array();
    for (std::size_t a = 0; a < D; ++a) {
      Vec<D> vp = v, vm = v;
      vp[a] += h;
      vm[a] -= h;
      const auto plus = estimate_shape<D>(c.environment, c.kinetic, c.grid, vp, P.T, P.seeds, plain);
      const auto minus = estimate_shape<D>(c.environment, c.kinetic, c.grid, vm, P.T, P.seeds, plain);
      std::vector<double> grad, fd;
      for (std::size_t i = 0; i < P.seeds.size(); ++i) {
        grad.push_back(est.grad_per_seed[i][a]);
        fd.push_back((plus.lambda_series[i].back() - minus.lambda_series[i].back()) / (2.0 * h));
      }
      grad_rows(t, vl, a, grad, fd);
      axes.push_back({{"axis", a},
                      {"grad_per_seed", grad},
                      {"fd_per_seed", fd},
                      {"grad", to_json(mean_stderr(grad))},
                      {"fd", to_json(mean_stderr(fd))},
                      {"snap_error", std::max(plus.snap_error, minus.snap_error)}});
    }
    rows.push_back({{"v", vl}, {"seeds", P.seeds}, {"lambda_hat", est.lambda_hat}, {"axes", axes}});
  }
  out.text("grad.csv", t.str());
  return {{"h", h}, {"T", P.T[0]}, {"estimates", rows}};
}

template <std::size_t D>
json run_panel(const RunConfig& c, ArtifactWriter& out) {
  const auto& P = c.params;
  const auto panel = panel_alpha_beta<D>(c.environment, c.kinetic, c.grid, as_vec<D>(P.v[0]), P.T[0], P.alphas,
                                         P.betas, P.seeds, P.workers);
  CsvTable t({"alpha", "beta", "n", "mean", "stderr"}, c.hash());
  for (std::size_t i = 0; i < P.alphas.size(); ++i)
    for (std::size_t j = 0; j < P.betas.size(); ++j) {
      const auto& m = panel.b_over_T[panel.cell(i, j)];
      t.row(std::vector<double>{P.alphas[i], P.betas[j], static_cast<double>(P.seeds.size()), m.mean, m.stderr_});
    }
  out.text("panel.csv", t.str());
  json seeds = json::array();
  std::size_t mid_viol = 0, env_viol = 0;
  for (const auto& ps : panel.seeds) {
    const auto rep = check_panel_concavity(P.alphas, P.betas, ps);
    mid_viol += rep.midpoint_violations;
    env_viol += rep.envelope_violations;
    json cells = json::array();
    for (const auto& cell : ps.cells)
      cells.push_back({{"alpha", cell.alpha},
                       {"beta", cell.beta},
                       {"b_over_T", cell.b_over_T},
                       {"l_bar", cell.l_bar},
                       {"f_bar", cell.f_bar}});
    seeds.push_back({{"seed", ps.seed},
                     {"cells", cells},
                     {"concavity",
                      {{"midpoint_checks", rep.midpoint_checks},
                       {"midpoint_violations", rep.midpoint_violations},
                       {"worst_midpoint", rep.worst_midpoint},
                       {"envelope_checks", rep.envelope_checks},
                       {"envelope_violations", rep.envelope_violations},
                       {"worst_envelope", rep.worst_envelope}}}});
  }
  return {{"v", P.v[0]},
          {"T", P.T[0]},
          {"per_seed", seeds},
          {"midpoint_violations", mid_viol},
          {"envelope_violations", env_viol}};
}

template <std::size_t D>
json run_homog(const RunConfig& c, ArtifactWriter& out) {
  const auto& P = c.params;
  const Vec<D> x = as_vec<D>(P.x);
  double reference = 0.0;
  std::vector<double> ref_per_seed;
  if (P.reference) {
    reference = *P.reference;
  } else {
    ShapeOptions opt;
    opt.gradient = false;
    opt.workers = P.workers;
    const auto est =
        estimate_shape<D>(c.environment, c.kinetic, c.grid, (1.0 / P.t) * x, {P.reference_T}, P.seeds, opt);
    for (const auto& row : est.lambda_series) ref_per_seed.push_back(P.t * row.back());
    reference = P.t * est.lambda_hat;
  }
  const auto curve = homogenization_curve<D>(c.environment, c.kinetic, c.grid, P.t, x, P.epsilons, P.seeds,
                                             reference, P.workers);
  CsvTable t({"epsilon", "n", "mean_abs_gap", "gap_of_mean"}, c.hash());
  for (std::size_t e = 0; e < P.epsilons.size(); ++e)
    t.row(std::vector<double>{P.epsilons[e], static_cast<double>(P.seeds.size()), curve.mean_abs_gap[e],
                              curve.gap_of_mean[e]});
  out.text("homog.csv", t.str());
  json j{{"t", P.t},
         {"x", P.x},
         {"epsilons", P.epsilons},
         {"seeds", P.seeds},
         {"scaled_per_seed", curve.scaled},
         {"reference", reference},
         {"mean_abs_gap", curve.mean_abs_gap},
         {"gap_of_mean", curve.gap_of_mean},
         {"snap_error", curve.snap_error}};
  if (!P.reference) j["reference_per_seed"] = ref_per_seed;
  return j;
}

/// Window covering the closed unit boxes of a discretisation.
template <std::size_t D>
Window<D> box_hull(const std::vector<Box<D>>& boxes, double scale) {
  Window<D> w;
  w.t_lo = kInf;
  w.t_hi = -kInf;
  w.x_lo.fill(kInf);
  w.x_hi.fill(-kInf);
  for (const auto& b : boxes) {
    w.t_lo = std::min(w.t_lo, static_cast<double>(b[0]) * scale);
    w.t_hi = std::max(w.t_hi, static_cast<double>(b[0] + 1) * scale);
    for (std::size_t a = 0; a < D; ++a) {
      w.x_lo[a] = std::min(w.x_lo[a], static_cast<double>(b[a + 1]) * scale);
      w.x_hi[a] = std::max(w.x_hi[a], static_cast<double>(b[a + 1] + 1) * scale);
    }
  }
  return w;
}

template <std::size_t D>
json run_audit(const RunConfig& c, ArtifactWriter& out) {
  const auto& P = c.params;
  const Vec<D> v = as_vec<D>(P.v[0]);
  auto wants = [&](const char* name) { return std::find(P.audits.begin(), P.audits.end(), name) != P.audits.end(); };
  json res;

  std::optional<ShapeEstimate<D>> est;
  if (wants("m_growth") || wants("lower_bound")) {
    ShapeOptions opt;
    opt.gradient = false;
    opt.keep_paths = true;
    opt.workers = P.workers;
    est = estimate_shape<D>(c.environment, c.kinetic, c.grid, v, P.T, P.seeds, opt);
  }

  if (wants("m_growth")) {
    const auto mg = m_growth_audit(*est);
    std::vector<GridPath<D>> corpus;
    for (const auto& r : est->runs) corpus.insert(corpus.end(), r.paths.begin(), r.paths.end());
    const auto len = length_bound_audit(corpus);
    std::size_t partitions_ok = 0, connected = 0;
    for (const auto& p : corpus) {
      const auto boxes = discretize_path(p).boxes;
      if (verify_partition<D>(boxes, partition_boxes<D>(boxes, 1.0), 1.0).ok()) ++partitions_ok;
      if (is_connected<D>(boxes)) ++connected;
    }
    CsvTable t({"T", "mean_m_over_T"}, c.hash());
    for (std::size_t k = 0; k < mg.T.size(); ++k) t.row(std::vector<double>{mg.T[k], mg.mean_m_over_T[k]});
    out.text("m_growth.csv", t.str());
    res["m_growth"] = {{"T", mg.T},
                       {"mean_m_over_T", mg.mean_m_over_T},
                       {"per_seed", mg.per_seed},
                       {"bounded", mg.bounded},
                       {"above_floor", mg.above_floor}};
    res["length"] = {{"lengths", len.lengths},
                     {"m", len.m},
                     {"floor_c", len.floor_c},
                     {"floor_C", len.floor_C},
                     {"fitted_c", len.fitted_c},
                     {"min_margin", len.min_margin},
                     {"holds", len.holds()}};
    res["partition"] = {{"paths", corpus.size()}, {"verified", partitions_ok}, {"connected", connected}};
  }

  if (wants("lower_bound")) {
    std::vector<double> qp, qb, mean_pot, action;
    for (std::size_t i = 0; i < est->runs.size(); ++i) {
      const auto& path = est->runs[i].paths.back();
      const auto boxes = discretize_path(path).boxes;
      const auto cloud = sample_environment<D>(with_seed(c.environment, P.seeds[i]), box_hull<D>(boxes, 1.0));
      GridSpec g = c.grid;
      g.steps = static_cast<std::int64_t>(path.steps());
      const auto rep = lower_bound_audit(cloud, c.kinetic, g, path, P.density);
      qp.push_back(rep.q_path);
      qb.push_back(rep.q_boxes);
      mean_pot.push_back(rep.mean_potential);
      action.push_back(rep.action_over_T);
    }
    CsvTable t({"seed_index", "q_path", "q_boxes", "running_q_boxes"}, c.hash());
    const auto run = running_q(qb);
    for (std::size_t i = 0; i < qb.size(); ++i)
      t.row(std::vector<double>{static_cast<double>(i), qp[i], qb[i], run[i]});
    out.text("lower_bound.csv", t.str());
    res["lower_bound"] = {{"T", P.T.back()},
                          {"density", P.density},
                          {"q_path", qp},
                          {"q_boxes", qb},
                          {"running_q_boxes", run},
                          {"mean_potential", mean_pot},
                          {"action_over_T", action}};
  }

  if (wants("second_order")) {
    const auto so =
        second_order_audit<D>(c.environment, c.kinetic, c.grid, v, P.T, P.seeds, P.delta0, P.workers);
    CsvTable t({"T", "M", "N"}, c.hash());
    for (std::size_t k = 0; k < so.T.size(); ++k) t.row(std::vector<double>{so.T[k], so.M[k], so.N[k]});
    out.text("second_order.csv", t.str());
    res["second_order"] = {{"T", so.T},
                           {"M", so.M},
                           {"N", so.N},
                           {"M_per_seed", so.M_per_seed},
                           {"N_per_seed", so.N_per_seed},
                           {"delta0", P.delta0},
                           {"bounded", so.bounded}};
  }

  if (wants("moments")) {
    const std::vector<double> lambdas{0.25, 0.5, 1.0, 2.0};
    const std::vector<std::size_t> sizes{100, 200, 400};
    const auto m = moment_audit<D>(with_seed(c.environment, P.seeds[0]), lambdas, sizes, P.density);
    CsvTable t({"lambda", "n", "mgf"}, c.hash());
    for (std::size_t i = 0; i < lambdas.size(); ++i)
      for (std::size_t k = 0; k < sizes.size(); ++k)
        t.row(std::vector<double>{lambdas[i], static_cast<double>(sizes[k]), m.mgf[i][k]});
    out.text("moments.csv", t.str());
    res["moments"] = {{"lambdas", lambdas},
                      {"sample_sizes", sizes},
                      {"mgf", m.mgf},
                      {"largest_stable_lambda", m.largest_stable_lambda}};
  }

  if (wants("growth")) {
    const std::vector<double> ranges{5.0, 10.0, 20.0};
    const double horizon = 10.0;
    const auto g = linear_growth_audit<D>(with_seed(c.environment, P.seeds[0]), horizon, ranges);
    CsvTable t({"R", "ratio"}, c.hash());
    for (std::size_t i = 0; i < ranges.size(); ++i) t.row(std::vector<double>{ranges[i], g.ratio[i]});
    out.text("growth.csv", t.str());
    res["growth"] = {{"T", horizon}, {"ranges", ranges}, {"ratio", g.ratio}, {"stabilised", g.stabilised}};
  }

  if (wants("hjb")) {
    GridSpec g = c.grid;
    g.steps = slices_for(P.T.front(), g.dt, "params.T");
    const SolveRequest<D> req;
    std::vector<double> med, q90;
    std::vector<std::size_t> cells, kinks;
    for (auto seed : P.seeds) {
      const auto s = with_seed(c.environment, seed);
      const auto cloud = sample_environment<D>(s, required_window(g, Frame<D>{}, req, s.r_t_max));
      const auto r = hjb_residual(solve(cloud, c.kinetic, g, Frame<D>{}, req), cloud, c.kinetic);
      med.push_back(r.median);
      q90.push_back(r.q90);
      cells.push_back(r.cells.size());
      kinks.push_back(r.kinks);
    }
    res["hjb"] = {{"T", P.T.front()}, {"median", med}, {"q90", q90}, {"cells", cells}, {"kinks", kinks}};
  }
  return res;
}

template <std::size_t D>
json run_experiment(const RunConfig& c, ArtifactWriter& out) {
  switch (c.experiment) {
    case Experiment::EnvSample:
      return run_env_sample<D>(c, out);
    case Experiment::Solve:
      return run_solve<D>(c, out);
    case Experiment::Shape:
      return run_shape<D>(c, out);
    case Experiment::Grad:
      return run_grad<D>(c, out);
    case Experiment::Panel:
      return run_panel<D>(c, out);
    case Experiment::Homog:
      return run_homog<D>(c, out);
    case Experiment::Audit:
      return run_audit<D>(c, out);
  }
  return {};
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

/// Runs one experiment into `dir` and returns the manifest.
inline json run(const RunConfig& c, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  ArtifactWriter out(dir);
  const json results = c.environment.d == 1 ? run_experiment<1>(c, out) : run_experiment<2>(c, out);
  out.json_file("report.json", {{"format_version", kFormatVersion},
                                {"experiment", to_string(c.experiment)},
                                {"config_hash", c.hash()},
                                {"compat_hash", c.compat_hash()},
                                {"config", c.canonical()},
                                {"results", results}});
  json artifacts = json::array();
  for (const auto& n : out.names()) artifacts.push_back({{"name", n}, {"format_version", kFormatVersion}});
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json manifest{{"format_version", kFormatVersion},
                {"experiment", to_string(c.experiment)},
                {"config_hash", c.hash()},
                {"compat_hash", c.compat_hash()},
                {"seeds", c.params.seeds},
                {"artifacts", artifacts},
                {"code_version", kCodeVersion},
                {"workers", c.params.workers},
                {"wall_time_seconds", wall},
                {"created_utc", utc_timestamp()}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  return manifest;
}

// ---------------------------------------------------------------------------
// report: merge runs found under a directory
// ---------------------------------------------------------------------------

struct RunRecord {
  fs::path dir;
  json manifest;
  json report;
};

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("report", "cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("report", p.string() + " is not valid JSON");
  }
}

inline std::vector<RunRecord> collect_runs(const fs::path& root) {
  if (!fs::is_directory(root)) throw ValidationError("report", root.string() + " is not a directory");
  std::vector<fs::path> manifests;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "manifest.json") manifests.push_back(e.path());
  std::sort(manifests.begin(), manifests.end());
  if (manifests.empty()) throw ValidationError("report", "no manifest.json under " + root.string());
  std::vector<RunRecord> runs;
  for (const auto& m : manifests) {
    RunRecord r{m.parent_path(), read_json(m), read_json(m.parent_path() / "report.json")};
    if (r.manifest.value("format_version", 0) != kFormatVersion || r.report.value("format_version", 0) != kFormatVersion)
      throw ValidationError("report", "unsupported format_version in " + r.dir.string());
    runs.push_back(std::move(r));
  }
  return runs;
}

/// Concatenates per-seed rows of several runs, in run order.
inline std::vector<std::vector<double>> concat_rows(const std::vector<const json*>& parts, const char* key) {
  std::vector<std::vector<double>> out;
  for (const json* p : parts)
    for (const auto& row : p->at(key)) out.push_back(row.get<std::vector<double>>());
  return out;
}

inline std::vector<double> concat(const std::vector<const json*>& parts, const char* key) {
  std::vector<double> out;
  for (const json* p : parts)
    for (const auto& x : p->at(key)) out.push_back(x.get<double>());
  return out;
}

/// Writes summary.json and plot-ready CSVs into `out_dir`; returns the summary.
inline json report(const fs::path& root, const fs::path& out_dir) {
  const auto runs = collect_runs(root);
  std::map<std::string, std::vector<const RunRecord*>> by_exp;
  for (const auto& r : runs) by_exp[r.manifest.at("experiment").get<std::string>()].push_back(&r);

  std::vector<std::string> conflicts;
  for (const auto& [exp, group] : by_exp) {
    std::map<std::string, std::vector<std::string>> hashes;
    for (const auto* r : group) hashes[r->manifest.at("compat_hash").get<std::string>()].push_back(r->dir.string());
    if (hashes.size() > 1) {
      std::string msg = exp + ": incompatible configs";
      for (const auto& [h, dirs] : hashes) {
        msg += " [" + h + ":";
        for (const auto& d : dirs) msg += " " + d;
        msg += "]";
      }
      conflicts.push_back(msg);
    }
    std::set<std::uint64_t> seen;
    for (const auto* r : group)
      for (const auto& s : r->manifest.at("seeds"))
        if (!seen.insert(s.get<std::uint64_t>()).second)
          conflicts.push_back(exp + ": seed " + std::to_string(s.get<std::uint64_t>()) + " appears in more than one run");
  }
  if (!conflicts.empty()) {
    std::string msg = "cannot pool runs:";
    for (const auto& c : conflicts) msg += "\n  " + c;
    throw ConflictError(msg);
  }

  const std::string tag = [&] {
    std::string all;
    for (const auto& r : runs) all += r.manifest.at("config_hash").get<std::string>();
    return hex64(fnv1a64(all));
  }();
  CsvTable shape_csv({"experiment", "v", "T", "n", "mean", "stderr"}, tag);
  CsvTable grad_csv({"v", "axis", "n", "grad", "grad_stderr", "fd", "fd_stderr", "gap"}, tag);
  CsvTable homog_csv({"epsilon", "n", "mean_abs_gap", "gap_of_mean"}, tag);
  auto vtext = [](const json& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : " ") + format_double(x.get<double>());
    return s;
  };

  json summary{{"format_version", kFormatVersion}, {"runs", json::array()}, {"tables", json::object()}};
  for (const auto& r : runs)
    summary["runs"].push_back({{"dir", fs::relative(r.dir, root).generic_string()},
                               {"experiment", r.manifest.at("experiment")},
                               {"config_hash", r.manifest.at("config_hash")},
                               {"seeds", r.manifest.at("seeds")}});

  for (const auto& [exp, group] : by_exp) {
    const json& first = group.front()->report.at("results");
    if (exp == "shape") {
      json rows = json::array();
      for (std::size_t e = 0; e < first.at("estimates").size(); ++e) {
        std::vector<const json*> parts;
        for (const auto* r : group) parts.push_back(&r->report.at("results").at("estimates")[e]);
        const auto per_seed = concat_rows(parts, "lambda_per_seed");
        const auto T = first.at("estimates")[e].at("T").get<std::vector<double>>();
        const auto& v = first.at("estimates")[e].at("v");
        for (std::size_t k = 0; k < T.size(); ++k) {
          std::vector<double> xs;
          for (const auto& row : per_seed) xs.push_back(row[k]);
          const auto ms = mean_stderr(xs);
          shape_csv.row(std::vector<std::string>{"shape", vtext(v), format_double(T[k]), std::to_string(xs.size()),
                                                 format_double(ms.mean), format_double(ms.stderr_)});
          rows.push_back({{"v", v}, {"T", T[k]}, {"n", xs.size()}, {"mean", ms.mean}, {"stderr", ms.stderr_}});
        }
      }
      summary["tables"]["shape"] = rows;
    } else if (exp == "grad") {
      json rows = json::array();
      for (std::size_t e = 0; e < first.at("estimates").size(); ++e) {
        const auto& v = first.at("estimates")[e].at("v");
        for (std::size_t a = 0; a < first.at("estimates")[e].at("axes").size(); ++a) {
          std::vector<const json*> parts;
          for (const auto* r : group) parts.push_back(&r->report.at("results").at("estimates")[e].at("axes")[a]);
          const auto grad = concat(parts, "grad_per_seed"), fd = concat(parts, "fd_per_seed");
          const auto g = mean_stderr(grad), f = mean_stderr(fd);
          grad_csv.row(std::vector<std::string>{vtext(v), std::to_string(a), std::to_string(grad.size()),
                                                format_double(g.mean), format_double(g.stderr_),
                                                format_double(f.mean), format_double(f.stderr_),
                                                format_double(std::abs(g.mean - f.mean))});
          rows.push_back({{"v", v},
                          {"axis", a},
                          {"n", grad.size()},
                          {"grad", to_json(g)},
                          {"fd", to_json(f)},
                          {"gap", std::abs(g.mean - f.mean)}});
        }
      }
      summary["tables"]["grad"] = rows;
    } else if (exp == "homog") {
      std::vector<const json*> parts;
      for (const auto* r : group) parts.push_back(&r->report.at("results"));
      const auto scaled = concat_rows(parts, "scaled_per_seed");
      double reference = first.at("reference").get<double>();
      if (first.contains("reference_per_seed")) reference = mean_stderr(concat(parts, "reference_per_seed")).mean;
      const auto [mean_abs, of_mean] = homogenization_gaps(scaled, reference);
      const auto eps = first.at("epsilons").get<std::vector<double>>();
      json rows = json::array();
      for (std::size_t e = 0; e < eps.size(); ++e) {
        homog_csv.row(std::vector<double>{eps[e], static_cast<double>(scaled.size()), mean_abs[e], of_mean[e]});
        rows.push_back({{"epsilon", eps[e]}, {"n", scaled.size()}, {"mean_abs_gap", mean_abs[e]},
                        {"gap_of_mean", of_mean[e]}});
      }
      summary["tables"]["homog"] = {{"reference", reference}, {"rows", rows}};
    }
  }

  ArtifactWriter out(out_dir);
  if (shape_csv.size()) out.text("summary_shape.csv", shape_csv.str());
  if (grad_csv.size()) out.text("summary_grad.csv", grad_csv.str());
  if (homog_csv.size()) out.text("summary_homog.csv", homog_csv.str());
  out.json_file("summary.json", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// Exit codes
// ---------------------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

/// Runs `body`, printing errors to `err` and mapping them to exit codes.
template <class Fn>
int guarded(std::ostream& err, Fn&& body) {
  try {
    body();
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConflictError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace elab::cli
