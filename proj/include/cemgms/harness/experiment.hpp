#pragma once

/** @file experiment.hpp
    @brief Builds a problem from an ExperimentConfig, runs fine and multiscale solves, norms, indicators and
    enrichment rounds, and writes the report and field artifacts.
*/

#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "../estimator.hpp"
#include "config.hpp"
#include "export.hpp"
#include "norms.hpp"

namespace cemgms {

/// Problem data shared by the fine and multiscale solves.
template <int Dim>
struct Problem {
  StructuredGrid<Dim> grid;
  PermeabilityField<Dim> perm;
  FlowDiscretization<Dim> disc;
  Vector p0;
  TimeGrid time;
};

namespace detail {

template <int Dim>
MultiIndex<Dim> to_multi(const std::vector<int> &v)
{
  MultiIndex<Dim> m{};
  for (int a = 0; a < Dim; ++a)
    m[a] = v[a];
  return m;
}

template <int Dim>
CellBox<Dim> to_box(const BoxSpec &b)
{
  return {to_multi<Dim>(b.lo), to_multi<Dim>(b.hi)};
}

template <int Dim>
Index checked_cell(const StructuredGrid<Dim> &g, const MultiIndex<Dim> &m, const std::string &what)
{
  for (int a = 0; a < Dim; ++a)
    if (m[a] < 0 || m[a] >= g.dims()[a])
      throw ConfigError(what + ": cell index outside the grid");
  return g.cell_index(m);
}

} // namespace detail

template <int Dim>
PermeabilityField<Dim> build_field(const ExperimentConfig &c, const MultiIndex<Dim> &dims)
{
  const auto &f = c.field;
  if (f.type == "uniform")
    return uniform_field<Dim>(dims, f.value);
  if (f.type == "inclusions") {
    std::vector<CellBox<Dim>> boxes;
    for (const auto &b : f.boxes)
      boxes.push_back(detail::to_box<Dim>(b));
    if (f.random_count > 0) {
      const auto r = random_boxes<Dim>(dims, f.random_count, detail::to_multi<Dim>(f.random_min), detail::to_multi<Dim>(f.random_max), c.seed);
      boxes.insert(boxes.end(), r.begin(), r.end());
    }
    return gen_inclusions<Dim>(dims, f.background, f.inclusion, boxes);
  }
  if (f.type == "fractures") {
    FractureGeometry<Dim> geom;
    geom.matrix_value = f.matrix;
    for (const auto &b : f.fractures)
      geom.fractures.push_back({detail::to_box<Dim>(b), b.value});
    return rasterize_fractures(geom, dims);
  }
  return load_raster_field<Dim>(f.raster, dims);
}

/// Per-cell rates; the preset puts injectors in the corner cells (corner columns in 3D) and a sink in the center cell.
template <int Dim>
SourceTerm<Dim> build_sources(const ExperimentConfig &c, const StructuredGrid<Dim> &g)
{
  SourceTerm<Dim> s;
  const auto &ss = c.sources;
  if (ss.preset == "none" && ss.cells.empty() && ss.columns.empty())
    return s;
  s.cell_rates.assign(g.cell_count(), 0.0);
  const auto &d = g.dims();
  if (ss.preset == "corners_and_center") {
    for (int corner = 0; corner < 4; ++corner) {
      MultiIndex<Dim> m{};
      m[0] = (corner & 1) ? d[0] - 1 : 0;
      m[1] = (corner & 2) ? d[1] - 1 : 0;
      if constexpr (Dim == 3) {
        for (int z = 0; z < d[2]; ++z) {
          m[2] = z;
          s.cell_rates[g.cell_index(m)] += ss.rate;
        }
      }
      else
        s.cell_rates[g.cell_index(m)] += ss.rate;
    }
    MultiIndex<Dim> mid{};
    for (int a = 0; a < Dim; ++a)
      mid[a] = d[a] / 2;
    s.cell_rates[g.cell_index(mid)] -= ss.sink_rate;
  }
  for (const auto &w : ss.cells)
    s.cell_rates[detail::checked_cell(g, detail::to_multi<Dim>(w.index), "sources.cells")] += w.rate;
  if constexpr (Dim == 3)
    for (const auto &w : ss.columns)
      for (int z = 0; z < d[2]; ++z)
        s.cell_rates[detail::checked_cell(g, MultiIndex<3>{w.index[0], w.index[1], z}, "sources.columns")] += w.rate;
  return s;
}

template <int Dim>
Problem<Dim> build_problem(const ExperimentConfig &c)
{
  if (c.dim != Dim)
    throw ConfigError("config: dimension mismatch");
  BoundaryTags<Dim> tags = all_neumann<Dim>();
  DirichletData<Dim> data;
  for (int f = 0; f < 2 * Dim; ++f)
    if (c.faces[f].dirichlet) {
      tags[f] = BoundaryTag::Dirichlet;
      data.face_values[f] = c.faces[f].value;
    }
  Point<Dim> h{};
  for (int a = 0; a < Dim; ++a)
    h[a] = c.spacing[a];
  auto grid = build_fine_grid<Dim>(detail::to_multi<Dim>(c.dims), h, tags);
  auto perm = build_field<Dim>(c, grid.dims());
  Vector p0(static_cast<Eigen::Index>(grid.node_count()));
  const double len = grid.dims()[c.initial.axis] * h[c.initial.axis];
  for (Index n = 0; n < grid.node_count(); ++n)
    p0[static_cast<Eigen::Index>(n)] = c.initial.type == "constant"
                                           ? c.initial.value
                                           : c.initial.from + (c.initial.to - c.initial.from) * grid.node_point(n)[c.initial.axis] / len;
  FlowDiscretization<Dim> disc(grid, perm, c.fluid, build_sources(c, grid), data);
  return Problem<Dim>{grid, std::move(perm), std::move(disc), std::move(p0), TimeGrid::uniform(c.dt, c.steps)};
}

/// One multiscale solve with its diagnostics.
struct MultiscaleRun {
  std::vector<int> counts;
  Index coarse_dofs = 0;
  double lambda = 0.0;
  double initial_projection_error = 0.0;
  ErrorNorms norms;
  std::vector<int> newton_iters;
  IndicatorReport indicators;
  bool has_indicators = false;
};

struct ErrorReport {
  std::string name, config_hash;
  Index fine_dofs = 0, coarse_elements = 0, neighborhoods = 0;
  int layers = 0;
  std::vector<int> fine_newton;
  std::vector<MultiscaleRun> runs; ///< runs[0] is the initial basis, then one per enrichment round
  std::vector<std::vector<Index>> marked;
  std::vector<char> capped;
  std::map<std::string, std::string> stages;

  const MultiscaleRun &final_run() const { return runs.back(); }

  Json to_json() const;
};

struct Timings {
  std::vector<std::pair<std::string, double>> seconds;
  int threads = 1;

  void add(const std::string &stage, double s) { seconds.emplace_back(stage, s); }

  Json to_json() const
  {
    Json j = Json::object();
    Json st = Json::object();
    double total = 0.0;
    for (const auto &[k, v] : seconds) {
      st[k] = st.contains(k) ? st[k].get<double>() + v : v;
      total += v;
    }
    j["seconds"] = st;
    j["total"] = total;
    j["threads"] = threads;
    return j;
  }
};

inline Json ErrorReport::to_json() const
{
  Json j;
  j["name"] = name;
  j["version"] = kVersion;
  j["config_hash"] = config_hash;
  j["fine_dofs"] = fine_dofs;
  j["coarse_elements"] = coarse_elements;
  j["neighborhoods"] = neighborhoods;
  j["layers"] = layers;
  j["stages"] = stages;
  j["newton"] = {{"fine", fine_newton}, {"coarse", final_run().newton_iters}};
  const auto &f = final_run();
  j["eps0"] = f.norms.eps0;
  j["eps1"] = f.norms.eps1;
  j["eps1_energy"] = f.norms.eps1_energy;
  j["coarse_dofs"] = f.coarse_dofs;
  j["initial_projection_error"] = f.initial_projection_error;
  Json runs_j = Json::array();
  for (Index r = 0; r < runs.size(); ++r) {
    const auto &run = runs[r];
    Json rj{{"round", r},
            {"coarse_dofs", run.coarse_dofs},
            {"lambda", run.lambda},
            {"eps0", run.norms.eps0},
            {"eps1", run.norms.eps1},
            {"eps1_energy", run.norms.eps1_energy},
            {"initial_projection_error", run.initial_projection_error},
            {"newton_coarse", run.newton_iters}};
    if (run.has_indicators) {
      const auto &agg = run.indicators.aggregated;
      const auto it = std::max_element(agg.begin(), agg.end());
      Json per_step = Json::array();
      for (const auto &row : run.indicators.values) {
        double s = 0.0;
        for (double v : row)
          s += v * v;
        per_step.push_back(s);
      }
      rj["indicators"] = {{"total", run.indicators.total},
                          {"max_aggregated", it == agg.end() ? 0.0 : *it},
                          {"argmax", it == agg.end() ? Index{0} : static_cast<Index>(it - agg.begin())},
                          {"per_step", per_step}};
    }
    if (r > 0) {
      rj["marked_neighborhoods"] = marked[r - 1].size();
      rj["capped"] = static_cast<bool>(capped[r - 1]);
    }
    runs_j.push_back(rj);
  }
  j["runs"] = runs_j;
  if (runs.size() > 1)
    j["enrichment"] = {{"eps0_before", runs.front().norms.eps0},
                       {"eps0_after", runs.back().norms.eps0},
                       {"eps1_before", runs.front().norms.eps1},
                       {"eps1_after", runs.back().norms.eps1}};
  return j;
}

namespace detail {

class Stopwatch {
public:
  Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

private:
  std::chrono::steady_clock::time_point t0_;
};

/// Runs one stage, prefixing its label to any library error while keeping the error category.
template <class F>
auto stage(const std::string &label, ErrorReport &rep, Timings &tm, F &&fn)
{
  Stopwatch sw;
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      tm.add(label, sw.seconds());
      rep.stages[label] = "ok";
    }
    else {
      auto r = fn();
      tm.add(label, sw.seconds());
      rep.stages[label] = "ok";
      return r;
    }
  }
  catch (const ConfigError &e) {
    throw ConfigError(label + ": " + e.what());
  }
  catch (const ValidationError &e) {
    throw ValidationError(label + ": " + e.what());
  }
  catch (const SolverError &e) {
    throw SolverError(label + ": " + e.what());
  }
  catch (const IoError &e) {
    throw IoError(label + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path &p, const Json &j)
{
  std::ofstream out(p, std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
  if (!out)
    throw IoError("write failed: " + p.string());
}

inline std::string step_name(Index n, const char *ext)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%04zu.%s", n, ext);
  return buf;
}

template <int Dim>
void write_solution_dir(const std::filesystem::path &dir, const ExperimentConfig &c, const Problem<Dim> &pb,
                        const TransientSolution &sol)
{
  std::filesystem::create_directories(dir);
  Json meta{{"dim", Dim},
            {"dims", c.dims},
            {"spacing", c.spacing},
            {"steps", sol.snapshots.size() - 1},
            {"dt_seconds", c.dt},
            {"fluid",
             {{"rho_ref", c.fluid.rho_ref},
              {"p_ref", c.fluid.p_ref},
              {"compressibility", c.fluid.compressibility},
              {"viscosity", c.fluid.viscosity},
              {"porosity", c.fluid.porosity}}}};
  write_json(dir / "meta.json", meta);
  write_f64_le_file((dir / "permeability.bin").string(), pb.perm.values);
  write_f64_le_file((dir / "initial.bin").string(), std::vector<double>(pb.p0.data(), pb.p0.data() + pb.p0.size()));
  if (c.output.store_all)
    for (Index n = 0; n < sol.snapshots.size(); ++n)
      write_f64_le_file((dir / step_name(n, "bin")).string(),
                        std::vector<double>(sol.snapshots[n].data(), sol.snapshots[n].data() + sol.snapshots[n].size()));
  const auto fmt = c.output.format == "vtk" ? ExportFormat::Vtk : ExportFormat::Csv;
  for (int s : c.output.snapshots)
    export_field(sol.snapshots[static_cast<Index>(s)], pb.grid, (dir / step_name(static_cast<Index>(s), c.output.format.c_str())).string(),
                 fmt);
}

inline void write_indicators_csv(const std::filesystem::path &p, const IndicatorReport &rep)
{
  std::ofstream out(p, std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + p.string());
  out << "n,i,indicator\n";
  for (Index n = 0; n < rep.values.size(); ++n)
    for (Index k = 0; k < rep.values[n].size(); ++k)
      out << (n + 1) << ',' << k << ',' << format_g17(rep.values[n][k]) << '\n';
  if (!out)
    throw IoError("write failed: " + p.string());
}

} // namespace detail

struct ExperimentResult {
  ErrorReport report;
  Timings timings;
  std::filesystem::path out_dir;
};

/**
 * @brief Fine reference, eigen stage, basis, coarse solve, norms, indicators and enrichment rounds.
 *
 * out_root empty: nothing is written. Otherwise artifacts go to out_root/<name>/: report.json
 * (deterministic), timings.json, config.json, fine/ and coarse/ snapshot directories and indicators CSVs.
 */
template <int Dim>
ExperimentResult run_experiment(const ExperimentConfig &c, const std::filesystem::path &out_root)
{
  ExperimentResult res;
  auto &rep = res.report;
  auto &tm = res.timings;
  tm.threads = thread_count();
  rep.name = c.name;
  rep.config_hash = c.hash();

  auto pb = detail::stage("setup", rep, tm, [&] { return build_problem<Dim>(c); });
  const auto part = build_coarse_partition(pb.grid, c.coarse_factor);
  const auto pou = build_partition_of_unity(part);
  rep.fine_dofs = pb.grid.node_count();
  rep.coarse_elements = part.element_count();
  rep.neighborhoods = part.coarse_node_count();
  rep.layers = c.method.layers > 0 ? c.method.layers : default_layers(part);

  NewtonConfig newton;
  newton.tol = c.method.newton_tol;
  newton.max_iters = c.method.newton_max_iters;

  const auto fine = detail::stage("fine", rep, tm, [&] { return solve_transient(pb.disc, pb.p0, pb.time, newton); });
  rep.fine_newton = fine.newton_iters;
  const auto ops = norm_operators(pb.grid, pb.perm, c.fluid, pb.p0);

  SpectralConfig scfg;
  scfg.spare = c.method.spare;
  auto aux = detail::stage("spectral", rep, tm,
                           [&] { return build_auxiliary_space(part, pb.perm, c.fluid, pb.p0, pou, c.method.basis, scfg); });
  const SparseMatrix s_mass = global_s_mass(pb.grid, pb.perm, c.fluid, pb.p0, pou);
  const auto stiffness = kappa_rho_field(pb.grid, pb.perm, c.fluid, pb.p0, false);
  const Vector base_lift = dirichlet_lift(part, pou, pb.disc.dirichlet(), 0.0);
  std::unique_ptr<IndicatorContext<Dim>> ictx;
  if (c.method.indicators)
    ictx = std::make_unique<IndicatorContext<Dim>>(pb.disc, part, pou);

  CoarseSolution coarse;
  auto multiscale = [&](const std::string &suffix) {
    MultiscaleRun run;
    run.counts = aux.counts();
    run.lambda = aux.Lambda();
    const auto basis =
        detail::stage("basis" + suffix, rep, tm, [&] { return build_cem_basis(part, aux, stiffness, rep.layers, &base_lift); });
    run.coarse_dofs = basis.size();
    CoarseContext<Dim> ctx{&part, &pou, &basis, s_mass, {}};
    ctx.lift = corrected_lift(part, pou, aux, stiffness, basis, pb.disc.dirichlet());
    coarse = detail::stage("coarse" + suffix, rep, tm, [&] { return solve_transient_coarse(pb.disc, ctx, pb.p0, pb.time, newton); });
    run.initial_projection_error = coarse.initial_projection_error;
    run.newton_iters = coarse.fine.newton_iters;
    run.norms = detail::stage("norms" + suffix, rep, tm, [&] { return error_norms(fine.snapshots, coarse.fine.snapshots, ops); });
    if (ictx) {
      run.indicators = detail::stage("indicators" + suffix, rep, tm, [&] { return compute_indicators(*ictx, coarse.fine, pb.time); });
      run.has_indicators = true;
    }
    rep.runs.push_back(std::move(run));
  };

  multiscale("");
  for (int r = 1; r <= c.method.rounds; ++r) {
    const std::string suffix = "_round" + std::to_string(r);
    const auto e = detail::stage("enrich" + suffix, rep, tm, [&] { return enrich(part, aux, rep.runs.back().indicators, c.method.theta); });
    rep.marked.push_back(e.marked);
    rep.capped.push_back(e.capped);
    aux = aux.with_counts(e.counts);
    multiscale(suffix);
  }

  if (!out_root.empty()) {
    res.out_dir = out_root / c.name;
    detail::stage("write", rep, tm, [&] {
      std::error_code ec;
      std::filesystem::create_directories(res.out_dir, ec);
      if (ec)
        throw IoError("cannot create " + res.out_dir.string() + ": " + ec.message());
      detail::write_json(res.out_dir / "config.json", c.to_json());
      detail::write_solution_dir(res.out_dir / "fine", c, pb, fine);
      detail::write_solution_dir(res.out_dir / "coarse", c, pb, coarse.fine);
      for (Index r = 0; r < rep.runs.size(); ++r)
        if (rep.runs[r].has_indicators)
          detail::write_indicators_csv(res.out_dir / (r == 0 ? std::string("indicators.csv") : "indicators_round" + std::to_string(r) + ".csv"),
                                       rep.runs[r].indicators);
    });
    detail::write_json(res.out_dir / "report.json", rep.to_json());
    detail::write_json(res.out_dir / "timings.json", tm.to_json());
  }
  return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig &c, const std::filesystem::path &out_root)
{
  return c.dim == 2 ? run_experiment<2>(c, out_root) : run_experiment<3>(c, out_root);
}

/// Fine or coarse snapshot directory written by run_experiment.
struct SolutionDir {
  Json meta;
  std::vector<double> perm;
  std::vector<Vector> snapshots;
};

inline SolutionDir read_solution_dir(const std::filesystem::path &dir)
{
  SolutionDir out;
  std::ifstream in(dir / "meta.json");
  if (!in)
    throw IoError("cannot open " + (dir / "meta.json").string());
  try {
    out.meta = Json::parse(in);
  }
  catch (const Json::parse_error &e) {
    throw IoError((dir / "meta.json").string() + ": " + e.what());
  }
  out.perm = read_f64_le_file((dir / "permeability.bin").string());
  const auto steps = out.meta.at("steps").get<Index>();
  for (Index n = 0; n <= steps; ++n) {
    const auto v = read_f64_le_file((dir / detail::step_name(n, "bin")).string());
    out.snapshots.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  return out;
}

/// eps0 / eps1 between two stored solutions; kappa, fluid and p0 come from the first (the reference).
template <int Dim>
ErrorNorms stored_norms(const SolutionDir &ref, const SolutionDir &other)
{
  const auto dims = ref.meta.at("dims").get<std::vector<int>>();
  const auto h = ref.meta.at("spacing").get<std::vector<double>>();
  if (other.meta.at("dims").get<std::vector<int>>() != dims)
    throw ConfigError("norms: grids differ");
  Point<Dim> sp{};
  for (int a = 0; a < Dim; ++a)
    sp[a] = h[a];
  const auto g = build_fine_grid<Dim>(detail::to_multi<Dim>(dims), sp);
  PermeabilityField<Dim> perm{g.dims(), ref.perm};
  perm.validate();
  const auto &fj = ref.meta.at("fluid");
  FluidProps fl;
  fl.rho_ref = fj.at("rho_ref").get<double>();
  fl.p_ref = fj.at("p_ref").get<double>();
  fl.compressibility = fj.at("compressibility").get<double>();
  fl.viscosity = fj.at("viscosity").get<double>();
  fl.porosity = fj.at("porosity").get<double>();
  return error_norms(ref.snapshots, other.snapshots, norm_operators(g, perm, fl, ref.snapshots.front()));
}

/// Deterministic synthetic log-normal permeability raster in mD (for SPE10-shaped inputs).
inline std::vector<double> synth_raster(const std::vector<int> &dims, std::uint64_t seed, double log10_mean, double log10_sd)
{
  Index n = 1;
  for (int d : dims)
    n *= static_cast<Index>(d);
  std::mt19937_64 rng(seed);
  std::vector<double> out(n);
  // Box-Muller on the raw 64-bit stream, so the raster is identical on every platform
  auto uniform = [&] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  for (Index i = 0; i < n; ++i) {
    const double z = std::sqrt(-2.0 * std::log(uniform())) * std::cos(2.0 * std::numbers::pi * uniform());
    out[i] = std::pow(10.0, log10_mean + log10_sd * z);
  }
  return out;
}

} // namespace cemgms
