// Serialisation: JSON for specs and clouds, CSV tables, and a binary dump of an
// action stack with its manifest. Every artefact carries `format_version`.
#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "elab/action_solver.hpp"
#include "elab/environment.hpp"
#include "elab/kinetics.hpp"

namespace elab {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kCodeVersion = "elab 0.1.0";

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double x) {
  if (x == kInf) return "inf";
  if (x == -kInf) return "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Strict field access. Every error names the dotted path of the offending key.
// ---------------------------------------------------------------------------

namespace schema {

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline void allow_only(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ValidationError(path, "expected an object");
  const std::set<std::string> ok(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ValidationError(join(path, k), "unknown key");
}

inline const json& at(const json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) throw ValidationError(join(path, key), "missing");
  return j.at(key);
}

inline double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ValidationError(path, "expected a number");
  return j.get<double>();
}

inline double number(const json& j, const std::string& path, const char* key) {
  return number(at(j, path, key), join(path, key));
}

inline double number_or(const json& j, const std::string& path, const char* key, double fallback) {
  return j.contains(key) ? number(j, path, key) : fallback;
}

inline std::int64_t integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ValidationError(path, "expected an integer");
  return j.get<std::int64_t>();
}

inline std::int64_t integer(const json& j, const std::string& path, const char* key) {
  return integer(at(j, path, key), join(path, key));
}

inline std::int64_t integer_or(const json& j, const std::string& path, const char* key, std::int64_t fallback) {
  return j.contains(key) ? integer(j, path, key) : fallback;
}

inline std::uint64_t unsigned_integer(const json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (!j.is_number_integer() || j.get<std::int64_t>() < 0)
    throw ValidationError(path, "expected a non-negative integer");
  return static_cast<std::uint64_t>(j.get<std::int64_t>());
}

inline std::string string(const json& j, const std::string& path, const char* key) {
  const json& v = at(j, path, key);
  if (!v.is_string()) throw ValidationError(join(path, key), "expected a string");
  return v.get<std::string>();
}

inline std::vector<double> numbers(const json& j, const std::string& path) {
  if (!j.is_array()) throw ValidationError(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

template <std::size_t D>
Vec<D> vec(const json& j, const std::string& path) {
  const auto xs = numbers(j, path);
  if (xs.size() != D) throw ValidationError(path, "expected " + std::to_string(D) + " components");
  Vec<D> v;
  for (std::size_t a = 0; a < D; ++a) v[a] = xs[a];
  return v;
}

}  // namespace schema

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

inline json to_json(const AmplitudeDist& a) {
  switch (a.kind) {
    case AmplitudeDist::Kind::Constant:
      return {{"kind", "constant"}, {"value", a.value}};
    case AmplitudeDist::Kind::Uniform:
      return {{"kind", "uniform"}, {"lo", a.lo}, {"hi", a.hi}};
    case AmplitudeDist::Kind::Exponential:
      return {{"kind", "exponential"}, {"rate", a.rate}, {"sign", a.sign}};
  }
  return {};
}

inline AmplitudeDist amplitude_from_json(const json& j, const std::string& path) {
  const auto kind = schema::string(j, path, "kind");
  if (kind == "constant") {
    schema::allow_only(j, path, {"kind", "value"});
    return AmplitudeDist::constant(schema::number(j, path, "value"));
  }
  if (kind == "uniform") {
    schema::allow_only(j, path, {"kind", "lo", "hi"});
    return AmplitudeDist::uniform(schema::number(j, path, "lo"), schema::number(j, path, "hi"));
  }
  if (kind == "exponential") {
    schema::allow_only(j, path, {"kind", "rate", "sign"});
    return AmplitudeDist::exponential(schema::number(j, path, "rate"),
                                      static_cast<int>(schema::integer_or(j, path, "sign", 1)));
  }
  throw ValidationError(schema::join(path, "kind"), "unknown amplitude law '" + kind + "'");
}

inline json to_json(const EnvironmentSpec& s) {
  return {{"d", s.d},
          {"intensity", s.intensity},
          {"amplitude", to_json(s.amplitude)},
          {"r_t", {s.r_t.lo, s.r_t.hi}},
          {"r_x", {s.r_x.lo, s.r_x.hi}},
          {"r_t_max", s.r_t_max},
          {"r_x_max", s.r_x_max},
          {"seed", s.seed},
          {"profile", {{"spatial", "cubic_bump"}, {"temporal", "quartic_bump"}}}};
}

/// Reads an environment block; the seed is optional and defaults to 0.
inline EnvironmentSpec environment_from_json(const json& j, const std::string& path = "environment") {
  schema::allow_only(j, path, {"d", "intensity", "amplitude", "r_t", "r_x", "r_t_max", "r_x_max", "seed", "profile"});
  EnvironmentSpec s;
  s.d = static_cast<int>(schema::integer_or(j, path, "d", 1));
  s.intensity = schema::number(j, path, "intensity");
  if (j.contains("amplitude")) s.amplitude = amplitude_from_json(j.at("amplitude"), schema::join(path, "amplitude"));
  auto range = [&](const char* key, RadiusRange& r) {
    if (!j.contains(key)) return;
    const auto xs = schema::numbers(j.at(key), schema::join(path, key));
    if (xs.size() != 2) throw ValidationError(schema::join(path, key), "expected [lo, hi]");
    r = {xs[0], xs[1]};
  };
  range("r_t", s.r_t);
  range("r_x", s.r_x);
  s.r_t_max = schema::number_or(j, path, "r_t_max", std::max(1.0, s.r_t.hi));
  s.r_x_max = schema::number_or(j, path, "r_x_max", std::max(1.0, s.r_x.hi));
  if (j.contains("seed")) s.seed = schema::unsigned_integer(j.at("seed"), schema::join(path, "seed"));
  if (j.contains("profile")) {
    const auto& p = j.at("profile");
    const auto pp = schema::join(path, "profile");
    schema::allow_only(p, pp, {"spatial", "temporal"});
    if (p.contains("spatial") && schema::string(p, pp, "spatial") != "cubic_bump")
      throw ValidationError(schema::join(pp, "spatial"), "only cubic_bump is available");
    if (p.contains("temporal") && schema::string(p, pp, "temporal") != "quartic_bump")
      throw ValidationError(schema::join(pp, "temporal"), "only quartic_bump is available");
  }
  validate(s);
  return s;
}

inline json to_json(const KineticEnergy& L) {
  return {{"kind", L.kind() == KineticEnergy::Kind::Quadratic ? "quadratic" : "polynomial_norm"},
          {"coeffs", L.coeffs()}};
}

inline KineticEnergy kinetic_from_json(const json& j, const std::string& path = "kinetic") {
  schema::allow_only(j, path, {"kind", "coeffs", "scale"});
  const auto kind = schema::string(j, path, "kind");
  if (kind == "quadratic") {
    if (j.contains("coeffs")) {
      const auto c = schema::numbers(j.at("coeffs"), schema::join(path, "coeffs"));
      if (c.size() != 3 || c[0] != 0.0 || c[1] != 0.0)
        throw ValidationError(schema::join(path, "coeffs"), "quadratic coefficients must be [0, 0, a]");
      return KineticEnergy::quadratic(2.0 * c[2]);
    }
    return KineticEnergy::quadratic(schema::number_or(j, path, "scale", 1.0));
  }
  if (kind == "polynomial_norm") {
    return KineticEnergy::polynomial_norm(schema::numbers(schema::at(j, path, "coeffs"), schema::join(path, "coeffs")));
  }
  throw ValidationError(schema::join(path, "kind"), "unknown kinetic energy '" + kind + "'");
}

inline json to_json(const GridSpec& g) {
  return {{"dt", g.dt}, {"dx", g.dx}, {"steps", g.steps}, {"window", g.window}, {"half_extent", g.half_extent}};
}

/// `steps` is optional here: experiments derive it from their horizons.
inline GridSpec grid_from_json(const json& j, const std::string& path = "grid") {
  schema::allow_only(j, path, {"dt", "dx", "steps", "window", "half_extent"});
  GridSpec g;
  g.dt = schema::number(j, path, "dt");
  g.dx = schema::number(j, path, "dx");
  g.steps = schema::integer_or(j, path, "steps", 1);
  g.window = schema::integer(j, path, "window");
  g.half_extent = schema::integer_or(j, path, "half_extent", 0);
  try {
    g.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(e.field(), std::string(e.what()).substr(e.field().size() + 2));
  }
  return g;
}

template <std::size_t D>
json to_json(const Frame<D>& fr) {
  return {{"v", fr.v}, {"alpha", fr.alpha}, {"beta", fr.beta}};
}

// ---------------------------------------------------------------------------
// Clouds
// ---------------------------------------------------------------------------

template <std::size_t D>
json to_json(const Window<D>& w) {
  return {{"t", {w.t_lo, w.t_hi}}, {"x_lo", w.x_lo}, {"x_hi", w.x_hi}, {"shear", w.shear}};
}

template <std::size_t D>
Window<D> window_from_json(const json& j, const std::string& path) {
  schema::allow_only(j, path, {"t", "x_lo", "x_hi", "shear"});
  const auto t = schema::numbers(schema::at(j, path, "t"), schema::join(path, "t"));
  if (t.size() != 2) throw ValidationError(schema::join(path, "t"), "expected [lo, hi]");
  Window<D> w;
  w.t_lo = t[0];
  w.t_hi = t[1];
  w.x_lo = schema::vec<D>(schema::at(j, path, "x_lo"), schema::join(path, "x_lo"));
  w.x_hi = schema::vec<D>(schema::at(j, path, "x_hi"), schema::join(path, "x_hi"));
  if (j.contains("shear")) w.shear = schema::vec<D>(j.at("shear"), schema::join(path, "shear"));
  return w;
}

/// Points are stored as rows [t, x..., amplitude, r_t, r_x].
template <std::size_t D>
json to_json(const PoissonCloud<D>& c) {
  json pts = json::array();
  for (const auto& p : c.points()) {
    json row = json::array({p.t});
    for (double x : p.x) row.push_back(x);
    row.push_back(p.mark.amplitude);
    row.push_back(p.mark.r_t);
    row.push_back(p.mark.r_x);
    pts.push_back(std::move(row));
  }
  return {{"format_version", kFormatVersion},
          {"spec", to_json(c.spec())},
          {"window", to_json(c.window())},
          {"content_hash", hex64(c.content_hash())},
          {"points", std::move(pts)}};
}

template <std::size_t D>
PoissonCloud<D> cloud_from_json(const json& j) {
  schema::allow_only(j, "cloud", {"format_version", "spec", "window", "content_hash", "points"});
  if (schema::integer(j, "cloud", "format_version") != kFormatVersion)
    throw ValidationError("cloud.format_version", "unsupported version");
  const auto spec = environment_from_json(schema::at(j, "cloud", "spec"), "cloud.spec");
  const auto win = window_from_json<D>(schema::at(j, "cloud", "window"), "cloud.window");
  std::vector<PoissonPoint<D>> pts;
  for (const auto& row : schema::at(j, "cloud", "points")) {
    const auto xs = schema::numbers(row, "cloud.points");
    if (xs.size() != D + 4) throw ValidationError("cloud.points", "row has the wrong length");
    PoissonPoint<D> p;
    p.t = xs[0];
    for (std::size_t a = 0; a < D; ++a) p.x[a] = xs[1 + a];
    p.mark = {xs[D + 1], xs[D + 2], xs[D + 3]};
    pts.push_back(p);
  }
  PoissonCloud<D> c(spec, win, std::move(pts));
  if (j.contains("content_hash") && j.at("content_hash").get<std::string>() != hex64(c.content_hash()))
    throw ValidationError("cloud.content_hash", "does not match the points");
  return c;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Two comment lines (format version, config hash), a header row, then rows.
class CsvTable {
 public:
  CsvTable(std::vector<std::string> columns, std::string config_hash)
      : columns_(std::move(columns)), hash_(std::move(config_hash)) {}

  CsvTable& row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_.size()) throw Error("csv row width does not match the header");
    rows_.push_back(cells);
    return *this;
  }

  CsvTable& row(const std::vector<double>& cells) {
    std::vector<std::string> s;
    for (double x : cells) s.push_back(format_double(x));
    return row(s);
  }

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << "# format_version=" << kFormatVersion << "\n# config_hash=" << hash_ << "\n";
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
      os << "\n";
    };
    line(columns_);
    for (const auto& r : rows_) line(r);
    return os.str();
  }

  [[nodiscard]] std::size_t size() const { return rows_.size(); }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
  std::string hash_;
};

/// Final slice as (node coordinates..., value).
template <std::size_t D>
CsvTable final_slice_csv(const ActionStack<D>& st, const std::string& config_hash) {
  std::vector<std::string> cols;
  for (std::size_t a = 0; a < D; ++a) cols.push_back("x" + std::to_string(a));
  cols.push_back("value");
  CsvTable t(cols, config_hash);
  const auto k = static_cast<std::size_t>(st.slices() - 1);
  const auto& box = st.boxes[k];
  for (std::size_t i = 0; i < box.size(); ++i) {
    const Node<D> n = box.node(i);
    std::vector<double> r;
    for (std::size_t a = 0; a < D; ++a) r.push_back(node_coord(n[a], st.grid.dx));
    r.push_back(st.values[k][i]);
    t.row(r);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Binary stack dump
// ---------------------------------------------------------------------------
//
// Layout (little endian host order): 8-byte magic "ELABSTK1", u32 D, i64 slices,
// then per slice D lo, D hi (i64) followed by the values (f64, row major).

inline constexpr char kStackMagic[9] = "ELABSTK1";

template <std::size_t D>
json stack_manifest(const ActionStack<D>& st, const std::string& file) {
  return {{"format_version", kFormatVersion},
          {"file", file},
          {"dimension", D},
          {"grid", to_json(st.grid)},
          {"frame", to_json(st.frame)},
          {"start_slice", st.start_slice},
          {"start_node", st.start_node},
          {"env_hash", hex64(st.env_hash)},
          {"code_version", kCodeVersion}};
}

template <std::size_t D>
void write_stack(const ActionStack<D>& st, std::ostream& os) {
  auto put = [&](const auto& x) { os.write(reinterpret_cast<const char*>(&x), sizeof x); };
  os.write(kStackMagic, 8);
  put(static_cast<std::uint32_t>(D));
  put(static_cast<std::int64_t>(st.slices()));
  for (std::size_t k = 0; k < st.values.size(); ++k) {
    for (auto x : st.boxes[k].lo) put(x);
    for (auto x : st.boxes[k].hi) put(x);
    os.write(reinterpret_cast<const char*>(st.values[k].data()),
             static_cast<std::streamsize>(st.values[k].size() * sizeof(double)));
  }
}

/// Reads back the boxes and values of a dump; predecessors are not stored.
template <std::size_t D>
std::pair<std::vector<NodeBox<D>>, std::vector<std::vector<double>>> read_stack(std::istream& is) {
  auto get = [&](auto& x) {
    if (!is.read(reinterpret_cast<char*>(&x), sizeof x)) throw Error("truncated stack dump");
  };
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kStackMagic, 8) != 0) throw Error("not a stack dump");
  std::uint32_t d = 0;
  std::int64_t slices = 0;
  get(d);
  get(slices);
  if (d != D) throw Error("stack dump has dimension " + std::to_string(d));
  std::vector<NodeBox<D>> boxes(static_cast<std::size_t>(slices));
  std::vector<std::vector<double>> values(static_cast<std::size_t>(slices));
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    for (auto& x : boxes[k].lo) get(x);
    for (auto& x : boxes[k].hi) get(x);
    values[k].resize(boxes[k].size());
    if (!is.read(reinterpret_cast<char*>(values[k].data()),
                 static_cast<std::streamsize>(values[k].size() * sizeof(double))))
      throw Error("truncated stack dump");
  }
  return {std::move(boxes), std::move(values)};
}

}  // namespace elab
