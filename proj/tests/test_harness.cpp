#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include <cemgms/harness/experiment.hpp>

#include "oracles.hpp"

using namespace cemgms;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name)
{
  const fs::path p = fs::temp_directory_path() / ("cemgms_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Json small_json()
{
  return Json::parse(R"({
    "name": "small",
    "dim": 2,
    "grid": {"dims": [16, 16], "spacing": 20.0, "coarse_factor": 4},
    "field": {"type": "inclusions", "background": 1e5, "inclusion": 1e9,
              "boxes": [{"lo": [2, 3], "hi": [12, 5]}, {"lo": [5, 9], "hi": [14, 10]}]},
    "boundary": {"x_lo": {"type": "dirichlet", "value": 2.16e7}, "x_hi": {"type": "dirichlet", "value": 2.0e7}},
    "initial": {"type": "linear", "axis": 0, "from": 2.16e7, "to": 2.0e7},
    "time": {"dt_days": 7, "steps": 3},
    "method": {"basis": 3, "layers": 2},
    "output": {"dir": "out", "snapshots": [], "format": "csv"},
    "seed": 7
  })");
}

int run_cli(const std::string &args)
{
  const std::string cmd = std::string(CEMGMS_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path &p)
{
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST(Config, BundledPresetsParse)
{
  const fs::path dir = fs::path(CEMGMS_SOURCE_DIR) / "configs";
  for (const char *n : {"example1-desk", "example2-desk", "example3-desk", "example4-desk", "example1-full", "example2-full",
                        "example3-full"}) {
    const auto c = load_config((dir / (std::string(n) + ".json")).string());
    EXPECT_EQ(c.name, n);
    EXPECT_EQ(c.method.basis, 4);
  }
  const auto e1 = load_config((dir / "example1-desk.json").string());
  EXPECT_EQ(e1.output.snapshots, (std::vector<int>{11, 21}));
  EXPECT_DOUBLE_EQ(e1.dt, 7 * 86400.0);
  // the reservoir raster is not bundled, so the full-scale preset reports the missing file
  EXPECT_THROW(load_config((dir / "example4-full.json").string()), ConfigError);
}

TEST(Config, RejectsUnknownAndMalformedKeys)
{
  auto bad = [](auto mutate) {
    Json j = small_json();
    mutate(j);
    EXPECT_THROW(parse_config(j), ConfigError) << j.dump();
  };
  bad([](Json &j) { j["colour"] = 1; });
  bad([](Json &j) { j["grid"]["cells"] = 3; });
  bad([](Json &j) { j["boundary"]["left"] = {{"type", "neumann"}}; });
  bad([](Json &j) { j["boundary"]["x_lo"]["type"] = "robin"; });
  bad([](Json &j) { j["field"]["type"] = "lognormal"; });
  bad([](Json &j) { j["time"]["dt_seconds"] = 10.0; });
  bad([](Json &j) { j["output"]["snapshots"] = {4}; });
  bad([](Json &j) { j["grid"]["coarse_factor"] = 5; });
  bad([](Json &j) { j["grid"]["dims"] = {16}; });
  bad([](Json &j) {
    j["method"]["indicators"] = false;
    j["method"]["enrichment"] = {{"theta", 0.3}, {"rounds", 1}};
  });
  bad([](Json &j) { j["method"]["enrichment"] = {{"theta", 1.5}, {"rounds", 1}}; });
  bad([](Json &j) { j["method"]["basis"] = 0; });
  bad([](Json &j) { j.erase("time"); });
  bad([](Json &j) { j["dim"] = 4; });
  bad([](Json &j) { j["field"]["boxes"][0]["hi"] = {40, 5}; });
}

TEST(Config, RasterPathMustExist)
{
  Json j = small_json();
  j["field"] = {{"type", "raster"}, {"path", "nowhere.bin"}};
  EXPECT_THROW(parse_config(j, scratch("raster_missing")), ConfigError);
}

TEST(Config, HashCoversEverySemanticField)
{
  const std::string base = parse_config(small_json()).hash();
  std::vector<std::function<void(Json &)>> edits = {
      [](Json &j) { j["grid"]["dims"] = {32, 16}; },
      [](Json &j) { j["grid"]["spacing"] = 10.0; },
      [](Json &j) { j["grid"]["coarse_factor"] = 8; },
      [](Json &j) { j["field"]["background"] = 2e5; },
      [](Json &j) { j["field"]["inclusion"] = 2e9; },
      [](Json &j) { j["field"]["boxes"][0]["lo"] = {1, 3}; },
      [](Json &j) { j["field"]["random"] = {{"count", 2}}; },
      [](Json &j) { j["fluid"] = {{"viscosity", 1e-3}}; },
      [](Json &j) { j["fluid"] = {{"porosity", 0.2}}; },
      [](Json &j) { j["fluid"] = {{"compressibility", 2e-8}}; },
      [](Json &j) { j["fluid"] = {{"rho_ref", 1000.0}}; },
      [](Json &j) { j["fluid"] = {{"p_ref", 1e7}}; },
      [](Json &j) { j["boundary"]["x_hi"]["value"] = 1.9e7; },
      [](Json &j) { j["boundary"]["y_lo"] = {{"type", "dirichlet"}, {"value", 2e7}}; },
      [](Json &j) { j["initial"]["to"] = 2.01e7; },
      [](Json &j) { j["initial"] = {{"type", "constant"}, {"value", 2e7}}; },
      [](Json &j) { j["sources"] = {{"preset", "corners_and_center"}, {"rate", 1e-3}}; },
      [](Json &j) { j["sources"] = {{"cells", {{{"index", {3, 3}}, {"rate", 1e-3}}}}}; },
      [](Json &j) { j["time"]["dt_days"] = 6; },
      [](Json &j) { j["time"]["steps"] = 4; },
      [](Json &j) { j["method"]["basis"] = 4; },
      [](Json &j) { j["method"]["layers"] = 3; },
      [](Json &j) { j["method"]["newton_tol"] = 1e-8; },
      [](Json &j) { j["method"]["newton_max_iters"] = 9; },
      [](Json &j) { j["method"]["spare"] = 1; },
      [](Json &j) { j["method"]["indicators"] = false; },
      [](Json &j) {
        j["method"]["enrichment"] = {{"theta", 0.3}, {"rounds", 1}};
      },
      [](Json &j) { j["seed"] = 8; },
  };
  std::set<std::string> seen{base};
  for (std::size_t k = 0; k < edits.size(); ++k) {
    Json j = small_json();
    edits[k](j);
    const auto h = parse_config(j).hash();
    EXPECT_NE(h, base) << "edit " << k;
    seen.insert(h);
  }
  EXPECT_EQ(seen.size(), edits.size() + 1);
  // presentation-only fields leave the hash alone
  Json j = small_json();
  j["name"] = "renamed";
  j["output"] = {{"dir", "elsewhere"}, {"snapshots", {1}}, {"format", "vtk"}};
  EXPECT_EQ(parse_config(j).hash(), base);
}

TEST(Config, HashTracksRasterContents)
{
  const auto dir = scratch("raster_hash");
  Json j = small_json();
  j["field"] = {{"type", "raster"}, {"path", "k.bin"}};
  write_f64_le_file((dir / "k.bin").string(), std::vector<double>(256, 1e5));
  const auto h1 = parse_config(j, dir).hash();
  auto v = std::vector<double>(256, 1e5);
  v[17] = 2e5;
  write_f64_le_file((dir / "k.bin").string(), v);
  EXPECT_NE(parse_config(j, dir).hash(), h1);
}

TEST(Config, CommentsAllowedInFiles)
{
  const auto dir = scratch("comments");
  std::ofstream(dir / "c.json") << "{\n  // comment\n" << small_json().dump(2).substr(1);
  EXPECT_EQ(load_config((dir / "c.json").string()).hash(), parse_config(small_json()).hash());
}

TEST(Sources, PresetPlacesCornersAndCenter)
{
  Json j = small_json();
  j["sources"] = {{"preset", "corners_and_center"}, {"rate", 2e-3}, {"sink_rate", 5e-3}};
  const auto c = parse_config(j);
  const auto g = build_fine_grid<2>({16, 16}, 20.0);
  const auto s = build_sources(c, g);
  double sum = 0.0;
  for (double r : s.cell_rates)
    sum += r;
  EXPECT_DOUBLE_EQ(sum, 4 * 2e-3 - 5e-3);
  EXPECT_EQ(s.cell_rates[g.cell_index({0, 0})], 2e-3);
  EXPECT_EQ(s.cell_rates[g.cell_index({15, 15})], 2e-3);
  EXPECT_EQ(s.cell_rates[g.cell_index({8, 8})], -5e-3);
  // 3D: injector columns over the full height
  const auto g3 = build_fine_grid<3>({4, 4, 4}, 20.0);
  Json j3 = j;
  j3["dim"] = 3;
  j3["grid"] = {{"dims", {4, 4, 4}}, {"spacing", 20.0}, {"coarse_factor", 2}};
  j3["field"] = {{"type", "uniform"}, {"value", 1e5}};
  const auto s3 = build_sources(parse_config(j3), g3);
  for (int z = 0; z < 4; ++z)
    EXPECT_EQ(s3.cell_rates[g3.cell_index({3, 0, z})], 2e-3);
}

TEST(Norms, IdenticalSolutionsGiveZero)
{
  const auto g = build_fine_grid<2>({8, 8}, 20.0);
  const auto perm = gen_inclusions<2>(g.dims(), 1e5, 1e9, {{{1, 1}, {4, 6}}});
  const Vector p0 = Vector::Constant(81, 2.1e7);
  const auto ops = norm_operators(g, perm, FluidProps{}, p0);
  std::vector<Vector> a;
  for (int n = 0; n < 4; ++n)
    a.push_back(p0 + Vector::LinSpaced(81, 0.0, 1e4 * (n + 1)));
  const auto e = error_norms(a, a, ops);
  EXPECT_EQ(e.eps0, 0.0);
  EXPECT_EQ(e.eps1, 0.0);
  EXPECT_EQ(e.eps1_energy, 0.0);
}

TEST(Norms, ScalingBothSolutionsLeavesRatiosUnchanged)
{
  const auto g = build_fine_grid<2>({8, 8}, 20.0);
  const auto perm = gen_inclusions<2>(g.dims(), 1e5, 1e9, {{{1, 1}, {4, 6}}});
  const Vector p0 = Vector::Constant(81, 2.1e7);
  const auto ops = norm_operators(g, perm, FluidProps{}, p0);
  std::vector<Vector> a, b, a2, b2;
  for (int n = 0; n < 4; ++n) {
    a.push_back(p0 + Vector::LinSpaced(81, 0.0, 1e4 * (n + 1)));
    b.push_back(a.back() + 1e3 * Vector::LinSpaced(81, -1.0, 1.0).array().sin().matrix());
    a2.push_back(2.0 * a.back());
    b2.push_back(2.0 * b.back());
  }
  const auto e = error_norms(a, b, ops), e2 = error_norms(a2, b2, ops);
  EXPECT_GT(e.eps0, 0.0);
  EXPECT_NEAR(e2.eps0, e.eps0, 1e-14 * e.eps0);
  EXPECT_NEAR(e2.eps1, e.eps1, 1e-14 * e.eps1);
  EXPECT_NEAR(e2.eps1_energy, e.eps1_energy, 1e-14 * e.eps1_energy);
}

TEST(Norms, MatchDenseQuadrature)
{
  const auto g = build_fine_grid<2>({6, 5}, 20.0);
  const auto perm = gen_inclusions<2>(g.dims(), 1e5, 1e8, {{{1, 1}, {3, 4}}});
  const FluidProps fl;
  Vector p0(static_cast<Eigen::Index>(g.node_count()));
  for (Index n = 0; n < g.node_count(); ++n)
    p0[static_cast<Eigen::Index>(n)] = 2.0e7 + 1e5 * g.node_point(n)[0] / 120.0;
  const auto ops = norm_operators(g, perm, fl, p0);
  const auto mass = oracle::dense_form<2>(g, [](Index, const Point<2> &) { return 1.0; }, false, 3);
  const auto energy = oracle::dense_form<2>(
      g, [&](Index c, const Point<2> &x) { return perm.si(c) * density(oracle::interpolate(g, p0, c, x), fl) / fl.viscosity; }, true, 2);
  std::vector<Vector> a, b;
  double n0 = 0, d0 = 0, n1 = 0, d1 = 0;
  for (int n = 0; n < 3; ++n) {
    Vector f(p0.size()), c(p0.size());
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      f[i] = p0[i] + 1e4 * std::sin(0.3 * static_cast<double>(i) + n);
      c[i] = f[i] + 50.0 * std::cos(0.7 * static_cast<double>(i) * (n + 1));
    }
    // the initial state does not enter the sums
    a.push_back(n == 0 ? p0 : f);
    b.push_back(n == 0 ? Vector(p0 * 1.01) : c);
    if (n > 0) {
      const Vector e = f - c;
      n0 += e.dot(mass * e);
      d0 += f.dot(mass * f);
      n1 += e.dot(energy * e);
      d1 += f.dot(energy * f);
    }
  }
  const auto e = error_norms(a, b, ops);
  EXPECT_NEAR(e.eps0, std::sqrt(n0 / d0), 1e-12 * e.eps0);
  EXPECT_NEAR(e.eps1, std::sqrt(n1 / d0), 1e-10 * e.eps1);
  EXPECT_NEAR(e.eps1_energy, std::sqrt(n1 / d1), 1e-10 * e.eps1_energy);
}

TEST(Norms, MismatchedTimeGridsThrow)
{
  const auto g = build_fine_grid<2>({4, 4}, 20.0);
  const auto ops = norm_operators(g, uniform_field<2>(g.dims(), 1e5), FluidProps{}, Vector::Constant(25, 2e7));
  std::vector<Vector> a(3, Vector::Constant(25, 2e7)), b(2, Vector::Constant(25, 2e7));
  EXPECT_THROW(error_norms(a, b, ops), ConfigError);
}

TEST(Export, VtkConstantField)
{
  const auto dir = scratch("vtk");
  const auto g = build_fine_grid<3>({2, 2, 2}, 20.0);
  const Vector v = Vector::Constant(27, 2.16e7);
  export_field(v, g, (dir / "c.vtk").string(), ExportFormat::Vtk);
  std::ifstream in(dir / "c.vtk");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line))
    lines.push_back(line);
  ASSERT_GE(lines.size(), 10u);
  EXPECT_EQ(lines[0], "# vtk DataFile Version 3.0");
  EXPECT_EQ(lines[3], "DATASET STRUCTURED_POINTS");
  EXPECT_EQ(lines[4], "DIMENSIONS 3 3 3");
  EXPECT_EQ(lines[7], "POINT_DATA 27");
  const std::vector<std::string> values(lines.begin() + 10, lines.end());
  ASSERT_EQ(values.size(), 27u);
  for (const auto &s : values)
    EXPECT_EQ(s, "21600000");
}

TEST(Export, CsvRoundTripIsBitwise)
{
  const auto dir = scratch("csv");
  const auto g = build_fine_grid<2>({5, 3}, 7.3);
  Vector v(24);
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = 2.0e7 + std::exp(0.37 * static_cast<double>(i)) / 3.0 - 1e-300 * static_cast<double>(i);
  export_field(v, g, (dir / "f.csv").string(), ExportFormat::Csv);
  const auto back = read_csv_values((dir / "f.csv").string());
  ASSERT_EQ(back.size(), 24u);
  for (Eigen::Index i = 0; i < v.size(); ++i)
    EXPECT_EQ(back[static_cast<std::size_t>(i)], v[i]);
}

TEST(Export, ErrorsAreSurfaced)
{
  const auto g = build_fine_grid<2>({2, 2}, 1.0);
  EXPECT_THROW(export_format_for("field.png"), ConfigError);
  EXPECT_THROW(export_field(Vector::Zero(9), g, "/nonexistent-dir/x.vtk", ExportFormat::Vtk), IoError);
  EXPECT_THROW(export_field(Vector::Zero(4), g, "/tmp/x.vtk", ExportFormat::Vtk), ConfigError);
}

TEST(Run, SnapshotCadenceWritesExactlyThoseFiles)
{
  // 7-day steps: steps 11 and 21 are days 77 and 147
  Json j = small_json();
  j["time"] = {{"dt_days", 7}, {"steps", 21}};
  j["output"] = {{"snapshots", {11, 21}}, {"format", "vtk"}};
  const auto c = parse_config(j);
  const auto root = scratch("cadence");
  const auto res = run_experiment(c, root);
  for (const char *sub : {"fine", "coarse"}) {
    std::set<std::string> vtk;
    for (const auto &e : fs::directory_iterator(root / "small" / sub))
      if (e.path().extension() == ".vtk")
        vtk.insert(e.path().filename().string());
    EXPECT_EQ(vtk, (std::set<std::string>{"step_0011.vtk", "step_0021.vtk"})) << sub;
  }
  EXPECT_NEAR(c.dt * 11 / 86400.0, 77.0, 1e-12);
  EXPECT_NEAR(c.dt * 21 / 86400.0, 147.0, 1e-12);
  EXPECT_TRUE(fs::exists(root / "small" / "report.json"));
  EXPECT_TRUE(fs::exists(root / "small" / "timings.json"));
  EXPECT_TRUE(fs::exists(root / "small" / "config.json"));
}

TEST(Run, ReportListsEveryStage)
{
  Json j = small_json();
  j["method"]["indicators"] = true;
  j["method"]["enrichment"] = {{"theta", 0.3}, {"rounds", 1}};
  const auto root = scratch("stages");
  const auto res = run_experiment(parse_config(j), root);
  const auto rep = Json::parse(slurp(root / "small" / "report.json"));
  const auto tm = Json::parse(slurp(root / "small" / "timings.json"));
  for (const char *s : {"setup", "fine", "spectral", "basis", "coarse", "norms", "indicators", "enrich_round1", "basis_round1",
                        "coarse_round1", "norms_round1", "indicators_round1", "write"}) {
    EXPECT_EQ(rep["stages"][s], "ok") << s;
    EXPECT_TRUE(tm["seconds"].contains(s)) << s;
  }
  EXPECT_EQ(rep["runs"].size(), 2u);
  EXPECT_TRUE(rep.contains("enrichment"));
  EXPECT_EQ(rep["newton"]["fine"].size(), 3u);
  EXPECT_EQ(rep["version"], kVersion);
  EXPECT_EQ(rep["config_hash"], parse_config(j).hash());
  EXPECT_GE(rep["eps0"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(root / "small" / "indicators.csv"));
  EXPECT_TRUE(fs::exists(root / "small" / "indicators_round1.csv"));
}

TEST(Run, ReportIsByteIdenticalAcrossRunsAndThreads)
{
  const auto c = parse_config(small_json());
  std::vector<std::string> reports;
  for (int threads : {1, 1, 3}) {
    set_thread_count(threads);
    const auto root = scratch("det" + std::to_string(reports.size()));
    run_experiment(c, root);
    reports.push_back(slurp(root / "small" / "report.json"));
  }
  set_thread_count(0);
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(reports[0], reports[2]);
}

TEST(Run, StoredSolutionsReproduceNorms)
{
  const auto root = scratch("stored");
  const auto res = run_experiment(parse_config(small_json()), root);
  const auto fine = read_solution_dir(root / "small" / "fine");
  const auto coarse = read_solution_dir(root / "small" / "coarse");
  ASSERT_EQ(fine.snapshots.size(), 4u);
  const auto n = stored_norms<2>(fine, coarse);
  EXPECT_EQ(n.eps0, res.report.final_run().norms.eps0);
  EXPECT_EQ(n.eps1, res.report.final_run().norms.eps1);
  const auto same = stored_norms<2>(fine, fine);
  EXPECT_EQ(same.eps0, 0.0);
}

TEST(Run, StageErrorsCarryTheirLabel)
{
  Json j = small_json();
  j["method"]["newton_tol"] = 1e-15;
  j["method"]["newton_max_iters"] = 1;
  try {
    run_experiment(parse_config(j), {});
    FAIL() << "expected a solver error";
  }
  catch (const SolverError &e) {
    EXPECT_EQ(std::string(e.what()).rfind("fine: ", 0), 0u) << e.what();
  }
}

TEST(Raster, SynthIsDeterministicAndLogNormal)
{
  const auto a = synth_raster({20, 20, 10}, 9, 2.0, 0.5), b = synth_raster({20, 20, 10}, 9, 2.0, 0.5);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, synth_raster({20, 20, 10}, 10, 2.0, 0.5));
  double m = 0.0, s = 0.0;
  for (double v : a)
    m += std::log10(v);
  m /= static_cast<double>(a.size());
  for (double v : a)
    s += (std::log10(v) - m) * (std::log10(v) - m);
  s = std::sqrt(s / static_cast<double>(a.size() - 1));
  EXPECT_NEAR(m, 2.0, 0.05);
  EXPECT_NEAR(s, 0.5, 0.05);
}

TEST(Cli, ExitCodes)
{
  const auto dir = scratch("cli");
  std::ofstream(dir / "good.json") << small_json().dump();
  Json bad = small_json();
  bad["unknown"] = 1;
  std::ofstream(dir / "bad.json") << bad.dump();
  Json stiff = small_json();
  stiff["method"]["newton_tol"] = 1e-15;
  stiff["method"]["newton_max_iters"] = 1;
  std::ofstream(dir / "stiff.json") << stiff.dump();
  const std::string d = dir.string();
  EXPECT_EQ(run_cli("validate " + d + "/good.json"), 0);
  EXPECT_EQ(run_cli("validate " + d + "/bad.json"), 2);
  EXPECT_EQ(run_cli("validate " + d + "/missing.json"), 4);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("run " + d + "/stiff.json --out " + d + "/o"), 3);
  EXPECT_EQ(run_cli("run " + d + "/good.json --out " + d + "/o"), 0);
  EXPECT_EQ(run_cli("norms " + d + "/o/small/fine " + d + "/o/small/coarse"), 0);
  EXPECT_EQ(run_cli("norms " + d + "/o/small/fine " + d + "/nothing"), 4);
  EXPECT_EQ(run_cli("export " + d + "/o/small/fine/step_0002.bin " + d + "/s2.csv"), 0);
  const auto vals = read_csv_values(d + "/s2.csv");
  const auto raw = read_f64_le_file(d + "/o/small/fine/step_0002.bin");
  EXPECT_EQ(vals, raw);
  EXPECT_EQ(run_cli("export " + d + "/o/small/fine/step_0002.bin " + d + "/s2.png"), 2);
  EXPECT_EQ(run_cli("synth-raster --dims 4 4 2 --seed 3 " + d + "/r.bin"), 0);
  EXPECT_EQ(read_f64_le_file(d + "/r.bin"), synth_raster({4, 4, 2}, 3, 2.0, 1.0));
}
