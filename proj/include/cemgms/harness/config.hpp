#pragma once

/** @file config.hpp
    @brief Experiment configuration: JSON schema, defaults, validation and the config hash.
*/

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "../fields.hpp"
#include "../grid.hpp"

namespace cemgms {

inline constexpr const char *kVersion = "1.0.0";

using Json = nlohmann::json;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const void *data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull)
{
  const auto *p = static_cast<const unsigned char *>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v)
{
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct BoxSpec {
  std::vector<int> lo, hi;
  double value = 0.0; ///< fractures only
};

struct FieldSpec {
  std::string type = "uniform"; ///< uniform | inclusions | fractures | raster
  double value = 100.0;         ///< uniform, mD
  double background = 1e5, inclusion = 1e9;
  std::vector<BoxSpec> boxes;
  int random_count = 0;
  std::vector<int> random_min, random_max;
  double matrix = 1e5;
  std::vector<BoxSpec> fractures;
  std::string raster; ///< resolved path
};

struct FaceSpec {
  bool dirichlet = false;
  double value = 0.0;
};

struct InitialSpec {
  std::string type = "constant"; ///< constant | linear
  double value = 2.16e7;
  int axis = 0;
  double from = 2.16e7, to = 2.0e7;
};

struct WellSpec {
  std::vector<int> index; ///< fine cell, or (x, y) column in 3D
  double rate = 0.0;      ///< kg/(m^3 s)
};

struct SourceSpec {
  std::string preset = "none"; ///< none | corners_and_center
  double rate = 0.0, sink_rate = 0.0;
  std::vector<WellSpec> cells, columns;
};

struct MethodSpec {
  int basis = 4;
  int layers = 0; ///< 0: default from the coarse grid
  double newton_tol = 1e-6;
  int newton_max_iters = 20;
  int spare = 2;
  bool indicators = true;
  double theta = 0.0; ///< 0: enrichment off
  int rounds = 0;
};

struct OutputSpec {
  std::string dir = "out";
  std::vector<int> snapshots;
  std::string format = "vtk";
  bool store_all = true;
};

struct ExperimentConfig {
  std::string name = "experiment";
  int dim = 2;
  std::vector<int> dims;
  std::vector<double> spacing;
  int coarse_factor = 4;
  FieldSpec field;
  FluidProps fluid;
  std::vector<FaceSpec> faces;
  InitialSpec initial;
  SourceSpec sources;
  double dt = 7 * 86400.0; ///< seconds
  int steps = 1;
  MethodSpec method;
  OutputSpec output;
  std::uint64_t seed = 1;
  std::filesystem::path base_dir; ///< directory of the config file

  /// Every semantic field with defaults filled in; name and output are left out.
  Json semantic() const;
  Json to_json() const;
  std::string hash() const;
};

namespace detail {

inline const char *face_name(int f)
{
  static const char *names[] = {"x_lo", "x_hi", "y_lo", "y_hi", "z_lo", "z_hi"};
  return names[f];
}

/// Rejects keys not in the allowed list, so typos do not pass silently.
inline void check_keys(const Json &j, const std::string &where, std::initializer_list<const char *> allowed)
{
  if (!j.is_object())
    throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key()))
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <class T>
T get_or(const Json &j, const char *key, const T &fallback, const std::string &where)
{
  if (!j.contains(key))
    return fallback;
  try {
    return j.at(key).get<T>();
  }
  catch (const Json::exception &e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline std::vector<int> int_list(const Json &j, const std::string &where, int dim)
{
  if (!j.is_array() || static_cast<int>(j.size()) != dim)
    throw ConfigError(where + ": expected " + std::to_string(dim) + " integers");
  std::vector<int> v;
  for (const auto &x : j) {
    if (!x.is_number_integer())
      throw ConfigError(where + ": expected integers");
    v.push_back(x.get<int>());
  }
  return v;
}

inline BoxSpec parse_box(const Json &j, const std::string &where, const std::vector<int> &dims, bool with_value)
{
  if (with_value)
    check_keys(j, where, {"lo", "hi", "value"});
  else
    check_keys(j, where, {"lo", "hi"});
  if (!j.contains("lo") || !j.contains("hi"))
    throw ConfigError(where + ": needs lo and hi");
  BoxSpec b;
  const int dim = static_cast<int>(dims.size());
  b.lo = int_list(j["lo"], where + ".lo", dim);
  b.hi = int_list(j["hi"], where + ".hi", dim);
  for (int a = 0; a < dim; ++a)
    if (b.lo[a] < 0 || b.hi[a] > dims[a] || b.lo[a] >= b.hi[a])
      throw ConfigError(where + ": needs 0 <= lo < hi <= grid.dims on every axis");
  if (with_value) {
    if (!j.contains("value"))
      throw ConfigError(where + ": needs value");
    b.value = get_or<double>(j, "value", 0.0, where);
  }
  return b;
}

inline Json box_json(const BoxSpec &b, bool with_value)
{
  Json j{{"lo", b.lo}, {"hi", b.hi}};
  if (with_value)
    j["value"] = b.value;
  return j;
}

inline std::vector<WellSpec> parse_wells(const Json &j, const std::string &where, int idx_len)
{
  if (!j.is_array())
    throw ConfigError(where + ": expected a list");
  std::vector<WellSpec> out;
  for (std::size_t k = 0; k < j.size(); ++k) {
    const std::string w = where + "[" + std::to_string(k) + "]";
    check_keys(j[k], w, {"index", "rate"});
    if (!j[k].contains("index") || !j[k].contains("rate"))
      throw ConfigError(w + ": needs index and rate");
    out.push_back({int_list(j[k]["index"], w + ".index", idx_len), get_or<double>(j[k], "rate", 0.0, w)});
  }
  return out;
}

} // namespace detail

/// Parses and validates; relative raster paths resolve against base_dir.
inline ExperimentConfig parse_config(const Json &j, const std::filesystem::path &base_dir = {})
{
  using namespace detail;
  ExperimentConfig c;
  c.base_dir = base_dir;
  check_keys(j, "config",
             {"name", "dim", "grid", "field", "fluid", "boundary", "initial", "sources", "time", "method", "output", "seed"});
  c.name = get_or<std::string>(j, "name", c.name, "config");
  c.dim = get_or<int>(j, "dim", 0, "config");
  if (c.dim != 2 && c.dim != 3)
    throw ConfigError("config.dim: must be 2 or 3");
  const int D = c.dim;

  if (!j.contains("grid"))
    throw ConfigError("config: missing grid");
  const auto &g = j["grid"];
  check_keys(g, "grid", {"dims", "spacing", "coarse_factor"});
  if (!g.contains("dims"))
    throw ConfigError("grid: missing dims");
  c.dims = int_list(g["dims"], "grid.dims", D);
  if (!g.contains("spacing"))
    throw ConfigError("grid: missing spacing");
  if (g["spacing"].is_number())
    c.spacing.assign(D, g["spacing"].get<double>());
  else
    c.spacing = get_or<std::vector<double>>(g, "spacing", {}, "grid");
  if (static_cast<int>(c.spacing.size()) != D)
    throw ConfigError("grid.spacing: expected a number or " + std::to_string(D) + " numbers");
  c.coarse_factor = get_or<int>(g, "coarse_factor", c.coarse_factor, "grid");

  if (j.contains("field")) {
    const auto &f = j["field"];
    auto &fs = c.field;
    fs.type = get_or<std::string>(f, "type", fs.type, "field");
    if (fs.type == "uniform") {
      check_keys(f, "field", {"type", "value"});
      fs.value = get_or<double>(f, "value", fs.value, "field");
    }
    else if (fs.type == "inclusions") {
      check_keys(f, "field", {"type", "background", "inclusion", "boxes", "random"});
      fs.background = get_or<double>(f, "background", fs.background, "field");
      fs.inclusion = get_or<double>(f, "inclusion", fs.inclusion, "field");
      if (f.contains("boxes"))
        for (std::size_t k = 0; k < f["boxes"].size(); ++k)
          fs.boxes.push_back(parse_box(f["boxes"][k], "field.boxes[" + std::to_string(k) + "]", c.dims, false));
      if (f.contains("random")) {
        const auto &r = f["random"];
        check_keys(r, "field.random", {"count", "min_size", "max_size"});
        fs.random_count = get_or<int>(r, "count", 0, "field.random");
        fs.random_min = r.contains("min_size") ? int_list(r["min_size"], "field.random.min_size", D) : std::vector<int>(D, 1);
        fs.random_max = r.contains("max_size") ? int_list(r["max_size"], "field.random.max_size", D) : std::vector<int>(D, 1);
        if (fs.random_count < 0)
          throw ConfigError("field.random.count: must be >= 0");
      }
    }
    else if (fs.type == "fractures") {
      check_keys(f, "field", {"type", "matrix", "fractures"});
      fs.matrix = get_or<double>(f, "matrix", fs.matrix, "field");
      if (f.contains("fractures"))
        for (std::size_t k = 0; k < f["fractures"].size(); ++k)
          fs.fractures.push_back(parse_box(f["fractures"][k], "field.fractures[" + std::to_string(k) + "]", c.dims, true));
    }
    else if (fs.type == "raster") {
      check_keys(f, "field", {"type", "path"});
      const auto p = std::filesystem::path(get_or<std::string>(f, "path", "", "field"));
      if (p.empty())
        throw ConfigError("field.path: required for raster fields");
      fs.raster = (p.is_absolute() ? p : base_dir / p).lexically_normal().string();
      if (!std::filesystem::exists(fs.raster))
        throw ConfigError("field.path: raster file not found: " + fs.raster);
    }
    else
      throw ConfigError("field.type: unknown '" + fs.type + "' (uniform, inclusions, fractures, raster)");
  }

  if (j.contains("fluid")) {
    const auto &f = j["fluid"];
    check_keys(f, "fluid", {"rho_ref", "p_ref", "compressibility", "viscosity", "porosity"});
    c.fluid.rho_ref = get_or<double>(f, "rho_ref", c.fluid.rho_ref, "fluid");
    c.fluid.p_ref = get_or<double>(f, "p_ref", c.fluid.p_ref, "fluid");
    c.fluid.compressibility = get_or<double>(f, "compressibility", c.fluid.compressibility, "fluid");
    c.fluid.viscosity = get_or<double>(f, "viscosity", c.fluid.viscosity, "fluid");
    c.fluid.porosity = get_or<double>(f, "porosity", c.fluid.porosity, "fluid");
  }
  c.fluid.validate();

  c.faces.assign(2 * D, FaceSpec{});
  if (j.contains("boundary")) {
    const auto &b = j["boundary"];
    if (!b.is_object())
      throw ConfigError("boundary: expected an object");
    for (auto it = b.begin(); it != b.end(); ++it) {
      int f = -1;
      for (int k = 0; k < 2 * D; ++k)
        if (it.key() == face_name(k))
          f = k;
      if (f < 0)
        throw ConfigError("boundary: unknown face '" + it.key() + "'");
      const std::string w = "boundary." + it.key();
      check_keys(it.value(), w, {"type", "value"});
      const auto type = get_or<std::string>(it.value(), "type", "neumann", w);
      if (type == "dirichlet") {
        if (!it.value().contains("value"))
          throw ConfigError(w + ": dirichlet needs a value");
        c.faces[f] = {true, get_or<double>(it.value(), "value", 0.0, w)};
      }
      else if (type != "neumann")
        throw ConfigError(w + ".type: expected neumann or dirichlet");
    }
  }

  if (j.contains("initial")) {
    const auto &i = j["initial"];
    auto &is = c.initial;
    is.type = get_or<std::string>(i, "type", is.type, "initial");
    if (is.type == "constant") {
      check_keys(i, "initial", {"type", "value"});
      is.value = get_or<double>(i, "value", is.value, "initial");
    }
    else if (is.type == "linear") {
      check_keys(i, "initial", {"type", "axis", "from", "to"});
      is.axis = get_or<int>(i, "axis", is.axis, "initial");
      is.from = get_or<double>(i, "from", is.from, "initial");
      is.to = get_or<double>(i, "to", is.to, "initial");
      if (is.axis < 0 || is.axis >= D)
        throw ConfigError("initial.axis: out of range");
    }
    else
      throw ConfigError("initial.type: expected constant or linear");
  }

  if (j.contains("sources")) {
    const auto &s = j["sources"];
    check_keys(s, "sources", {"preset", "rate", "sink_rate", "cells", "columns"});
    auto &ss = c.sources;
    ss.preset = get_or<std::string>(s, "preset", ss.preset, "sources");
    if (ss.preset != "none" && ss.preset != "corners_and_center")
      throw ConfigError("sources.preset: expected none or corners_and_center");
    ss.rate = get_or<double>(s, "rate", ss.rate, "sources");
    ss.sink_rate = get_or<double>(s, "sink_rate", ss.sink_rate, "sources");
    if (s.contains("cells"))
      ss.cells = parse_wells(s["cells"], "sources.cells", D);
    if (s.contains("columns")) {
      if (D != 3)
        throw ConfigError("sources.columns: vertical wells need dim 3");
      ss.columns = parse_wells(s["columns"], "sources.columns", 2);
    }
  }

  if (!j.contains("time"))
    throw ConfigError("config: missing time");
  {
    const auto &t = j["time"];
    check_keys(t, "time", {"dt_days", "dt_seconds", "steps"});
    if (t.contains("dt_days") == t.contains("dt_seconds"))
      throw ConfigError("time: give exactly one of dt_days, dt_seconds");
    c.dt = t.contains("dt_days") ? get_or<double>(t, "dt_days", 0.0, "time") * 86400.0 : get_or<double>(t, "dt_seconds", 0.0, "time");
    c.steps = get_or<int>(t, "steps", c.steps, "time");
    if (!(c.dt > 0.0) || c.steps < 1)
      throw ConfigError("time: dt must be positive and steps >= 1");
  }

  if (j.contains("method")) {
    const auto &m = j["method"];
    check_keys(m, "method", {"basis", "layers", "newton_tol", "newton_max_iters", "spare", "indicators", "enrichment"});
    auto &ms = c.method;
    ms.basis = get_or<int>(m, "basis", ms.basis, "method");
    if (m.contains("layers") && !(m["layers"].is_string() && m["layers"] == "auto"))
      ms.layers = get_or<int>(m, "layers", 0, "method");
    ms.newton_tol = get_or<double>(m, "newton_tol", ms.newton_tol, "method");
    ms.newton_max_iters = get_or<int>(m, "newton_max_iters", ms.newton_max_iters, "method");
    ms.spare = get_or<int>(m, "spare", ms.spare, "method");
    ms.indicators = get_or<bool>(m, "indicators", ms.indicators, "method");
    if (m.contains("enrichment") && !m["enrichment"].is_null()) {
      const auto &e = m["enrichment"];
      check_keys(e, "method.enrichment", {"theta", "rounds"});
      ms.theta = get_or<double>(e, "theta", 0.3, "method.enrichment");
      ms.rounds = get_or<int>(e, "rounds", 1, "method.enrichment");
    }
  }
  if (c.method.basis < 1)
    throw ConfigError("method.basis: must be >= 1");
  if (c.method.layers < 0)
    throw ConfigError("method.layers: must be >= 1 or \"auto\"");
  if (c.method.spare < 0)
    throw ConfigError("method.spare: must be >= 0");
  if (c.method.rounds < 0 || (c.method.rounds > 0 && !(c.method.theta > 0.0 && c.method.theta <= 1.0)))
    throw ConfigError("method.enrichment: theta must lie in (0, 1] and rounds >= 0");
  if (c.method.rounds > 0 && !c.method.indicators)
    throw ConfigError("method.enrichment: needs indicators enabled");

  if (j.contains("output")) {
    const auto &o = j["output"];
    check_keys(o, "output", {"dir", "snapshots", "format", "store_all"});
    c.output.dir = get_or<std::string>(o, "dir", c.output.dir, "output");
    c.output.snapshots = get_or<std::vector<int>>(o, "snapshots", {}, "output");
    c.output.format = get_or<std::string>(o, "format", c.output.format, "output");
    c.output.store_all = get_or<bool>(o, "store_all", c.output.store_all, "output");
    if (c.output.format != "vtk" && c.output.format != "csv")
      throw ConfigError("output.format: expected vtk or csv");
    for (int s : c.output.snapshots)
      if (s < 0 || s > c.steps)
        throw ConfigError("output.snapshots: step " + std::to_string(s) + " outside 0.." + std::to_string(c.steps));
  }
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "config");

  for (int a = 0; a < D; ++a) {
    if (c.dims[a] < 1 || !(c.spacing[a] > 0.0))
      throw ConfigError("grid: dims must be >= 1 and spacing positive");
    if (c.coarse_factor < 2 || c.dims[a] % c.coarse_factor != 0)
      throw ConfigError("grid.coarse_factor: must be >= 2 and divide every dimension");
  }
  return c;
}

inline ExperimentConfig load_config(const std::string &path)
{
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open config " + path);
  Json j;
  try {
    j = Json::parse(in, nullptr, true, true);
  }
  catch (const Json::parse_error &e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j, std::filesystem::path(path).parent_path());
}

inline Json ExperimentConfig::semantic() const
{
  using detail::box_json;
  Json j;
  j["dim"] = dim;
  j["grid"] = {{"dims", dims}, {"spacing", spacing}, {"coarse_factor", coarse_factor}};
  Json f{{"type", field.type}};
  if (field.type == "uniform")
    f["value"] = field.value;
  else if (field.type == "inclusions") {
    f["background"] = field.background;
    f["inclusion"] = field.inclusion;
    f["boxes"] = Json::array();
    for (const auto &b : field.boxes)
      f["boxes"].push_back(box_json(b, false));
    f["random"] = {{"count", field.random_count}, {"min_size", field.random_min}, {"max_size", field.random_max}};
  }
  else if (field.type == "fractures") {
    f["matrix"] = field.matrix;
    f["fractures"] = Json::array();
    for (const auto &b : field.fractures)
      f["fractures"].push_back(box_json(b, true));
  }
  else {
    // raster contents, not its location
    std::ifstream in(field.raster, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    f["raster_fnv1a"] = hex64(fnv1a64(bytes.data(), bytes.size()));
  }
  j["field"] = f;
  j["fluid"] = {{"rho_ref", fluid.rho_ref},
                {"p_ref", fluid.p_ref},
                {"compressibility", fluid.compressibility},
                {"viscosity", fluid.viscosity},
                {"porosity", fluid.porosity}};
  Json b;
  for (int k = 0; k < 2 * dim; ++k)
    b[detail::face_name(k)] = faces[k].dirichlet ? Json{{"type", "dirichlet"}, {"value", faces[k].value}} : Json{{"type", "neumann"}};
  j["boundary"] = b;
  j["initial"] = initial.type == "constant"
                     ? Json{{"type", "constant"}, {"value", initial.value}}
                     : Json{{"type", "linear"}, {"axis", initial.axis}, {"from", initial.from}, {"to", initial.to}};
  auto wells = [](const std::vector<WellSpec> &w) {
    Json a = Json::array();
    for (const auto &x : w)
      a.push_back({{"index", x.index}, {"rate", x.rate}});
    return a;
  };
  j["sources"] = {{"preset", sources.preset},
                  {"rate", sources.rate},
                  {"sink_rate", sources.sink_rate},
                  {"cells", wells(sources.cells)},
                  {"columns", wells(sources.columns)}};
  j["time"] = {{"dt_seconds", dt}, {"steps", steps}};
  j["method"] = {{"basis", method.basis},
                 {"layers", method.layers},
                 {"newton_tol", method.newton_tol},
                 {"newton_max_iters", method.newton_max_iters},
                 {"spare", method.spare},
                 {"indicators", method.indicators},
                 {"enrichment", method.rounds > 0 ? Json{{"theta", method.theta}, {"rounds", method.rounds}} : Json()}};
  j["seed"] = seed;
  return j;
}

inline Json ExperimentConfig::to_json() const
{
  Json j = semantic();
  j["name"] = name;
  j["output"] = {{"dir", output.dir}, {"snapshots", output.snapshots}, {"format", output.format}, {"store_all", output.store_all}};
  return j;
}

inline std::string ExperimentConfig::hash() const
{
  const std::string s = semantic().dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

} // namespace cemgms
