#include <random>
#include <set>

#include <gtest/gtest.h>

#include <cemgms/cem.hpp>

#include "cem_reference.hpp"

using namespace cemgms;
using namespace cemref;

TEST(Layers, DefaultPairing)
{
  EXPECT_EQ(default_layers(4), 3);
  EXPECT_EQ(default_layers(8), 4);
  EXPECT_EQ(default_layers(16), 5);
  EXPECT_EQ(default_layers(2), 2);
  // 64 x 32 fine grid, factor 8: 8 x 4 coarse cells
  const auto g = build_fine_grid<2>({64, 32}, 20.0);
  EXPECT_EQ(default_layers(build_coarse_partition(g, 8)), 4);
  EXPECT_EQ(default_layers(build_coarse_partition(g, 4)), 5);
}

TEST(CemBasis, WholeDomainMatchesDenseKkt)
{
  for (auto tags : {all_neumann<2>(), x_dirichlet()}) {
    const auto s = make(8, 4, tags);
    const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
    const auto basis = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 2);
    ASSERT_EQ(basis.size(), 12u);
    EXPECT_LE(rel_col_error(basis.R, dense_global_basis(s, aux)), 1e-8);
  }
}

TEST(CemBasis, ConstraintOrthogonality)
{
  const auto s = make(24, 4, x_dirichlet());
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
  const auto basis = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 1);
  for (Index col = 0; col < basis.size(); ++col) {
    const auto [i, j] = basis.columns[col];
    const auto region = oversample_region(s.part, i, 1);
    const auto psi = to_broken(aux, basis_column(basis, col));
    for (Index e : region.contained_coarse)
      for (int jj = 0; jj < aux.elements[e].L; ++jj) {
        const double v = s_inner(aux, psi, auxiliary_function(aux, e, jj));
        EXPECT_NEAR(v, (e == i && jj == j) ? 1.0 : 0.0, 1e-8) << col << " " << e << " " << jj;
      }
  }
}

TEST(CemBasis, ZeroTraceSupport)
{
  const auto s = make(24, 4, x_dirichlet());
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 2);
  const auto basis = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 1);
  for (Index col = 0; col < basis.size(); ++col) {
    const auto region = oversample_region(s.part, basis.columns[col].element, 1);
    const std::set<Index> inside(region.interior_nodes.begin(), region.interior_nodes.end());
    for (SparseMatrix::InnerIterator it(basis.R, static_cast<Eigen::Index>(col)); it; ++it)
      EXPECT_TRUE(inside.count(static_cast<Index>(it.row()))) << col;
  }
}

TEST(CemBasis, ColumnCountIsElementsTimesL)
{
  const auto s = make(32, 4);
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 4);
  const auto basis = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 1);
  EXPECT_EQ(basis.size(), 64u * 4u);
  EXPECT_EQ(basis.R.cols(), 256);
  EXPECT_EQ(basis.element_offset.back(), 256u);
  EXPECT_THROW(build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 0), ConfigError);
}

TEST(CemBasis, DeterministicAcrossThreadCounts)
{
  const auto s = make(24, 4, x_dirichlet());
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
  set_thread_count(1);
  const auto a = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 2);
  set_thread_count(4);
  const auto b = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 2);
  set_thread_count(0);
  ASSERT_EQ(a.R.nonZeros(), b.R.nonZeros());
  EXPECT_EQ(Eigen::MatrixXd(a.R - b.R).cwiseAbs().maxCoeff(), 0.0);
}

TEST(CemBasis, ExponentialDecay)
{
  const auto s = make(48, 4, x_dirichlet(), 9, 14);
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 4);
  const auto d = decay_fits(s, aux, 4);
  ASSERT_GT(d.interior, 0);
  EXPECT_GE(d.good, 0.9 * d.interior) << d.good << " of " << d.interior;
}

TEST(CemBasis, LambdaMonotoneInL)
{
  const auto s = make(16, 4);
  double prev = 0.0;
  for (int L = 1; L <= 5; ++L) {
    const double lam = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, L).Lambda();
    EXPECT_GE(lam, prev);
    prev = lam;
  }
}

TEST(Lift, ReproducesLinearData)
{
  const auto g = build_fine_grid<2>({16, 8}, 10.0, x_dirichlet());
  const auto part = build_coarse_partition(g, 4);
  const auto pou = build_partition_of_unity(part);
  DirichletData<2> d;
  d.face_values[0] = 2.16e7;
  d.face_values[1] = 2.0e7;
  const Vector lift = dirichlet_lift(part, pou, d, 0.0);
  for (Index n = 0; n < g.node_count(); ++n)
    EXPECT_NEAR(lift[static_cast<Eigen::Index>(n)], 2.16e7 - 1.6e6 * g.node_point(n)[0] / 160.0, 1e-8 * 2.16e7);
  EXPECT_EQ(dirichlet_lift(part, pou, d, 0.0).size(), 153);
  const auto gn = build_fine_grid<2>({4, 4}, 1.0);
  const auto pn = build_coarse_partition(gn, 2);
  EXPECT_EQ(dirichlet_lift(pn, build_partition_of_unity(pn), d, 0.0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(LiftCorrection, WholeDomainMatchesDenseKkt)
{
  const auto s = make(8, 4, x_dirichlet());
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
  const Vector g = dirichlet_lift(s.part, s.pou, x_data(), 0.0);
  const auto basis = build_cem_basis(s.part, aux, kappa_rho_field(s.grid, s.perm, s.fluid, s.p0, false), 2, &g);
  const Vector ref = dense_lift_correction(s, aux, g);
  ASSERT_GT(ref.norm(), 0.0);
  EXPECT_LE((basis.lift_correction - ref).norm(), 1e-8 * ref.norm());
  const Vector alone = lift_correction(s.part, aux, kappa_rho_field(s.grid, s.perm, s.fluid, s.p0, false), 2, g);
  EXPECT_EQ((alone - basis.lift_correction).cwiseAbs().maxCoeff(), 0.0);
}

TEST(LiftCorrection, ZeroTraceAndNeumannCase)
{
  const auto s = make(16, 4, x_dirichlet());
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
  const auto stiff = kappa_rho_field(s.grid, s.perm, s.fluid, s.p0, false);
  const Vector g = dirichlet_lift(s.part, s.pou, x_data(), 0.0);
  const Vector z = lift_correction(s.part, aux, stiff, 2, g);
  for (auto [n, v] : x_data().values(s.grid, 0.0)) {
    (void)v;
    EXPECT_EQ(z[static_cast<Eigen::Index>(n)], 0.0);
  }
  // constant base: no load anywhere
  const Vector c = Vector::Constant(g.size(), 2.0e7);
  EXPECT_EQ(lift_correction(s.part, aux, stiff, 2, c).cwiseAbs().maxCoeff(), 0.0);
}

TEST(LiftCorrection, RemovesInclusionGradients)
{
  // coarse linear lift through high-kappa boxes: the elliptic projection error must drop by more than 10x
  const auto s = make(32, 4, x_dirichlet(), 11, 10);
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 4);
  const auto stiff = kappa_rho_field(s.grid, s.perm, s.fluid, s.p0, false);
  const Vector g = dirichlet_lift(s.part, s.pou, x_data(), 0.0);
  const auto basis = build_cem_basis(s.part, aux, stiff, 3, &g);
  const SparseMatrix A = assemble_stiffness(s.grid, stiff);
  // reference: kappa-harmonic with the same data
  std::vector<std::pair<Index, double>> bv;
  for (auto [n, v] : x_data().values(s.grid, 0.0))
    bv.emplace_back(n, v);
  const auto sys = apply_dirichlet(s.grid, A, Vector::Zero(g.size()), bv);
  Eigen::SparseLU<SparseMatrix> lu(sys.matrix);
  const Vector p = lu.solve(sys.rhs);
  auto energy_err = [&](const Vector &lift) {
    const Vector e = p - elliptic_projection(A, basis.R, p, lift).reconstruction;
    return std::sqrt(e.dot(A * e) / p.dot(A * p));
  };
  const double plain = energy_err(g);
  const double corrected = energy_err(g + basis.lift_correction);
  EXPECT_LT(corrected * 10.0, plain) << plain << " " << corrected;
  EXPECT_LT(corrected, 0.05);
}

TEST(CoarseSolver, WholeDomainMatchesDenseGalerkin)
{
  for (auto tags : {all_neumann<2>(), x_dirichlet()}) {
    auto s = make(8, 4, tags);
    s.p0 = Vector::Constant(s.p0.size(), 2.1e7);
    SourceTerm<2> src;
    src.cell_rates.assign(s.grid.cell_count(), 0.0);
    src.cell_rates[0] = 5e-4;
    src.cell_rates[s.grid.cell_count() - 1] = -5e-4;
    DirichletData<2> d;
    d.face_values[0] = 2.16e7;
    d.face_values[1] = 2.0e7;
    FlowDiscretization<2> disc(s.grid, s.perm, s.fluid, src, d);
    const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
    const auto stiff = kappa_rho_field(s.grid, s.perm, s.fluid, s.p0, false);
    const Vector g = dirichlet_lift(s.part, s.pou, d, 0.0);
    const auto basis = build_cem_basis(s.part, aux, stiff, 2, &g);
    const auto time = TimeGrid::uniform(7 * kSecondsPerDay, 4);
    NewtonConfig cfg;
    cfg.tol = 1e-13;
    const auto Psi = dense_global_basis(s, aux);
    const auto S = dense_s(s);
    for (bool corrected : {false, true}) {
      CoarseContext<2> ctx{&s.part, &s.pou, &basis, global_s_mass(s.grid, s.perm, s.fluid, s.p0, s.pou), {}};
      if (corrected)
        ctx.lift = corrected_lift(s.part, s.pou, aux, stiff, basis, d);
      const auto coarse = solve_transient_coarse(disc, ctx, s.p0, time, cfg);
      const Vector lift = corrected ? Vector(g + dense_lift_correction(s, aux, g)) : g;
      const auto ref = dense_constrained_galerkin(disc, Psi, S, lift, s.p0, time);
      ASSERT_EQ(ref.size(), coarse.fine.snapshots.size());
      for (Index n = 0; n < ref.size(); ++n)
        EXPECT_LE((coarse.fine.snapshots[n] - ref[n]).norm(), 1e-8 * ref[n].norm()) << n << " corrected " << corrected;
    }
  }
}

TEST(CoarseSolver, ConstantStateStationaryWithGlobalBasis)
{
  auto s = make(16, 4);
  s.p0 = Vector::Constant(s.p0.size(), 2.16e7);
  FlowDiscretization<2> disc(s.grid, s.perm, s.fluid);
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
  const auto basis = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 4);
  CoarseContext<2> ctx{&s.part, &s.pou, &basis, global_s_mass(s.grid, s.perm, s.fluid, s.p0, s.pou), {}};
  const auto sol = solve_transient_coarse(disc, ctx, s.p0, TimeGrid::uniform(7 * kSecondsPerDay, 3));
  // constants are a-orthogonal to everything, so they lie in the global CEM space
  EXPECT_LE(sol.initial_projection_error, 1e-10);
  for (const auto &p : sol.fine.snapshots)
    EXPECT_LE((p - s.p0).cwiseAbs().maxCoeff(), 1e-8 * 2.16e7);
}

TEST(CoarseSolver, ReconstructionMatchesDirichletData)
{
  const auto s = make(16, 4, x_dirichlet());
  DirichletData<2> d;
  d.face_values[0] = 2.16e7;
  d.face_values[1] = 2.0e7;
  FlowDiscretization<2> disc(s.grid, s.perm, s.fluid, {}, d);
  const auto aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
  const auto basis = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 2);
  CoarseContext<2> ctx{&s.part, &s.pou, &basis, global_s_mass(s.grid, s.perm, s.fluid, s.p0, s.pou), {}};
  const auto sol = solve_transient_coarse(disc, ctx, s.p0, TimeGrid::uniform(7 * kSecondsPerDay, 2));
  for (const auto &p : sol.fine.snapshots)
    for (auto [n, v] : d.values(s.grid, 0.0))
      EXPECT_EQ(p[static_cast<Eigen::Index>(n)], v);
  for (int it : sol.fine.newton_iters)
    EXPECT_LE(it, 6);
}

class Elliptic : public ::testing::Test {
protected:
  Problem<2> s = make(32, 4, x_dirichlet());
  AuxiliarySpace<2> aux = build_auxiliary_space(s.part, s.perm, s.fluid, s.p0, s.pou, 3);
  MultiscaleBasis basis = build_cem_basis(s.part, aux, s.perm, s.fluid, s.p0, 3);
  SparseMatrix A = assemble_stiffness(s.grid, kappa_rho_field(s.grid, s.perm, s.fluid, s.p0, true));
};

TEST_F(Elliptic, FixesMultiscaleFunctions)
{
  std::mt19937 rng(4);
  std::normal_distribution<double> nd;
  Vector c(static_cast<Eigen::Index>(basis.size()));
  for (auto &v : c)
    v = nd(rng);
  const Vector lift = Vector::Zero(static_cast<Eigen::Index>(s.grid.node_count()));
  const Vector p = basis.R * c;
  const auto proj = elliptic_projection(A, basis.R, p, lift);
  EXPECT_LE((proj.reconstruction - p).norm(), 1e-10 * p.norm());
}

TEST_F(Elliptic, GalerkinOrthogonality)
{
  DirichletData<2> d;
  d.face_values[0] = 2.16e7;
  d.face_values[1] = 2.0e7;
  const Vector lift = dirichlet_lift(s.part, s.pou, d, 0.0);
  Vector p = s.p0;
  for (Index n = 0; n < s.grid.node_count(); ++n)
    p[static_cast<Eigen::Index>(n)] += 1e5 * std::sin(0.02 * s.grid.node_point(n)[1]) * std::sin(std::numbers::pi * s.grid.node_point(n)[0] / 640.0);
  const auto proj = elliptic_projection(A, basis.R, p, lift);
  const SparseMatrix Rt = basis.R.transpose();
  EXPECT_LE((Rt * (A * (p - proj.reconstruction))).norm(), 1e-10 * (Rt * (A * p)).norm());
}

TEST(EllipticProjection, EnergyErrorHalvesWithH)
{
  // smooth p with homogeneous data on all sides, uniform coefficient; coarse grids 4^2, 8^2, 16^2 with m = 3, 4, 5
  std::array<BoundaryTag, 4> tags;
  tags.fill(BoundaryTag::Dirichlet);
  std::vector<double> err;
  for (int factor : {16, 8, 4}) {
    const auto g = build_fine_grid<2>({64, 64}, 5.0, tags);
    const auto part = build_coarse_partition(g, factor);
    const auto pou = build_partition_of_unity(part);
    const auto perm = uniform_field<2>(g.dims(), 1e3);
    const Vector p0 = Vector::Constant(static_cast<Eigen::Index>(g.node_count()), 2.0e7);
    const auto aux = build_auxiliary_space(part, perm, FluidProps{}, p0, pou, 3);
    const auto basis = build_cem_basis(part, aux, perm, FluidProps{}, p0, default_layers(part));
    const auto A = assemble_stiffness(g, kappa_rho_field(g, perm, FluidProps{}, p0, true));
    Vector p(static_cast<Eigen::Index>(g.node_count()));
    for (Index n = 0; n < g.node_count(); ++n) {
      const auto x = g.node_point(n);
      p[static_cast<Eigen::Index>(n)] = 1e6 * std::sin(std::numbers::pi * x[0] / 320.0) * std::sin(2.0 * std::numbers::pi * x[1] / 320.0);
    }
    const auto proj = elliptic_projection(A, basis.R, p, Vector::Zero(p.size()));
    const Vector e = p - proj.reconstruction;
    err.push_back(std::sqrt(e.dot(A * e)));
  }
  EXPECT_GE(err[0] / err[1], 2.0);
  EXPECT_GE(err[1] / err[2], 2.0);
}
