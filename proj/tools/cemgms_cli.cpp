// cemgms command line: run, validate and enrich experiments, compare stored solutions, export fields, write synthetic rasters.
//
// Exit codes: 0 success, 2 configuration, 3 solver, 4 I/O, 1 anything else.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include <cemgms/harness/experiment.hpp>

namespace fs = std::filesystem;
using namespace cemgms;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kSolver = 3, kIo = 4 };

void print_summary(const ExperimentResult &r)
{
  const auto &rep = r.report;
  std::printf("%s  hash %s\n", rep.name.c_str(), rep.config_hash.c_str());
  std::printf("  fine dofs %zu  coarse elements %zu  layers %d\n", rep.fine_dofs, rep.coarse_elements, rep.layers);
  for (Index k = 0; k < rep.runs.size(); ++k) {
    const auto &run = rep.runs[k];
    std::printf("  round %zu: coarse dofs %zu  eps0 %.6e  eps1 %.6e  eps1' %.6e", k, run.coarse_dofs, run.norms.eps0, run.norms.eps1,
                run.norms.eps1_energy);
    if (run.has_indicators)
      std::printf("  indicators %.6e", run.indicators.total);
    std::printf("\n");
  }
  if (!r.out_dir.empty())
    std::printf("  written to %s\n", r.out_dir.string().c_str());
}

int run_config(const std::string &path, const std::string &out, int rounds, double theta)
{
  auto cfg = load_config(path);
  if (rounds >= 0) {
    cfg.method.rounds = rounds;
    if (theta > 0.0)
      cfg.method.theta = theta;
    if (rounds > 0 && !(cfg.method.theta > 0.0 && cfg.method.theta <= 1.0))
      throw ConfigError("enrich: theta must lie in (0, 1]");
    cfg.method.indicators = cfg.method.indicators || rounds > 0;
  }
  const auto res = run_experiment(cfg, out.empty() ? fs::path(cfg.output.dir) : fs::path(out));
  print_summary(res);
  return kOk;
}

int norms_cmd(const std::string &fine_dir, const std::string &coarse_dir)
{
  const auto ref = read_solution_dir(fine_dir);
  const auto other = read_solution_dir(coarse_dir);
  const int dim = ref.meta.at("dim").get<int>();
  const auto n = dim == 2 ? stored_norms<2>(ref, other) : stored_norms<3>(ref, other);
  std::printf("eps0 %.17g\neps1 %.17g\neps1_energy %.17g\n", n.eps0, n.eps1, n.eps1_energy);
  return kOk;
}

template <int Dim>
void export_with_meta(const std::vector<double> &values, const Json &meta, const std::string &out)
{
  const auto dims = meta.at("dims").get<std::vector<int>>();
  const auto h = meta.at("spacing").get<std::vector<double>>();
  MultiIndex<Dim> m{};
  Point<Dim> sp{};
  for (int a = 0; a < Dim; ++a) {
    m[a] = dims[a];
    sp[a] = h[a];
  }
  const auto g = build_fine_grid<Dim>(m, sp);
  const Vector v = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
  export_field(v, g, out, export_format_for(out));
}

int export_cmd(const std::string &field, const std::string &out, std::string meta_path)
{
  if (meta_path.empty())
    meta_path = (fs::path(field).parent_path() / "meta.json").string();
  std::ifstream in(meta_path);
  if (!in)
    throw IoError("cannot open " + meta_path + " (pass --meta)");
  Json meta;
  try {
    meta = Json::parse(in);
  }
  catch (const Json::parse_error &e) {
    throw IoError(meta_path + ": " + e.what());
  }
  const auto values = read_f64_le_file(field);
  if (meta.at("dim").get<int>() == 2)
    export_with_meta<2>(values, meta, out);
  else
    export_with_meta<3>(values, meta, out);
  return kOk;
}

int synth_cmd(const std::vector<int> &dims, std::uint64_t seed, double mean, double sd, const std::string &out)
{
  if (dims.size() < 2 || dims.size() > 3)
    throw ConfigError("synth-raster: --dims takes 2 or 3 values");
  for (int d : dims)
    if (d < 1)
      throw ConfigError("synth-raster: dims must be >= 1");
  write_f64_le_file(out, synth_raster(dims, seed, mean, sd));
  return kOk;
}

} // namespace

int main(int argc, char **argv)
{
  CLI::App app{"Multiscale solver for nonlinear compressible single-phase flow"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: $CEMGMS_THREADS or all cores)");

  std::string config, out;
  auto *run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config", config, "Config file")->required();
  run->add_option("--out", out, "Output root (default: output.dir of the config)");

  std::string fine_dir, coarse_dir;
  auto *norms = app.add_subcommand("norms", "eps0 / eps1 between two stored solution directories");
  norms->add_option("fine_dir", fine_dir, "Reference solution directory")->required();
  norms->add_option("coarse_dir", coarse_dir, "Compared solution directory")->required();

  std::string field, target, meta;
  auto *exp = app.add_subcommand("export", "Convert a stored step file to .vtk or .csv");
  exp->add_option("field", field, "step_NNNN.bin file")->required();
  exp->add_option("out", target, "Output path ending in .vtk or .csv")->required();
  exp->add_option("--meta", meta, "meta.json describing the grid (default: next to the field)");

  int rounds = 1;
  double theta = 0.3;
  auto *enr = app.add_subcommand("enrich", "Run a config with indicator-driven enrichment rounds");
  enr->add_option("config", config, "Config file")->required();
  enr->add_option("--rounds", rounds, "Enrichment rounds")->check(CLI::NonNegativeNumber);
  enr->add_option("--theta", theta, "Dörfler fraction in (0, 1]");
  enr->add_option("--out", out, "Output root (default: output.dir of the config)");

  auto *val = app.add_subcommand("validate", "Parse and check a config without running it; prints its hash");
  val->add_option("config", config, "Config file")->required();

  std::vector<int> dims;
  std::uint64_t seed = 1;
  double mean = 2.0, sd = 1.0;
  std::string raster_out;
  auto *syn = app.add_subcommand("synth-raster", "Write a deterministic log-normal permeability raster (mD, f64 little-endian)");
  syn->add_option("--dims", dims, "Cells per axis")->required();
  syn->add_option("--seed", seed, "Seed");
  syn->add_option("--log10-mean", mean, "Mean of log10 permeability");
  syn->add_option("--log10-sd", sd, "Standard deviation of log10 permeability");
  syn->add_option("out", raster_out, "Output file")->required();

  try {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  if (threads > 0)
    set_thread_count(threads);

  try {
    if (*run)
      return run_config(config, out, -1, 0.0);
    if (*norms)
      return norms_cmd(fine_dir, coarse_dir);
    if (*exp)
      return export_cmd(field, target, meta);
    if (*enr)
      return run_config(config, out, rounds, theta);
    if (*syn)
      return synth_cmd(dims, seed, mean, sd, raster_out);
    if (*val) {
      const auto cfg = load_config(config);
      std::printf("%s %s\n", cfg.name.c_str(), cfg.hash().c_str());
      return kOk;
    }
  }
  catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }
  catch (const ValidationError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }
  catch (const SolverError &e) {
    std::cerr << "solver error: " << e.what() << '\n';
    return kSolver;
  }
  catch (const IoError &e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  }
  catch (const Json::exception &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }
  catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
