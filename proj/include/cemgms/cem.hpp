#pragma once

/** @file cem.hpp
    @brief Constraint energy minimizing basis on oversampling regions, Dirichlet lift and the coarse nonlinear transient solver.
*/

#include <functional>

#include "fine_solver.hpp"
#include "spectral.hpp"

namespace cemgms {

struct BasisColumn {
  Index element = 0;
  int j = 0;
};

/// R: fine nodes x coarse dofs, column (i, j) = psi_j^(i); columns ordered element-major.
struct MultiscaleBasis {
  SparseMatrix R;
  std::vector<BasisColumn> columns;
  std::vector<Index> element_offset; ///< first column of each element, plus a final end entry
  int layers = 0;
  Vector lift_correction; ///< sum of the local lift corrections, empty unless a base lift was given

  Index size() const { return columns.size(); }
};

/// Default oversampling layers from the coarse cell count per axis: 4 -> 3, 8 -> 4, 16 -> 5.
inline int default_layers(int coarse_cells)
{
  int l = 0;
  while ((1 << l) < coarse_cells)
    ++l;
  return l + 1;
}

/// Same, from the largest coarse cell count over the axes.
template <int Dim>
int default_layers(const CoarsePartition<Dim> &part)
{
  return default_layers(*std::max_element(part.coarse_dims().begin(), part.coarse_dims().end()));
}

namespace detail {

/// Saddle-point system of one oversampling region, factored once and reused for every j of its element.
template <int Dim>
struct RegionSaddle {
  OversampleRegion<Dim> region;
  std::vector<BasisColumn> constraints;
  SparseMatrix K;
  Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>> lu;
  Index n_primal = 0;
};

template <int Dim>
void build_region_saddle(RegionSaddle<Dim> &rs, const CoarsePartition<Dim> &part, const AuxiliarySpace<Dim> &aux,
                         const QuadratureField &stiffness)
{
  const auto &grid = part.grid();
  const auto &I = rs.region.interior_nodes;
  rs.n_primal = I.size();
  auto local_of = [&](Index g) -> long {
    auto it = std::lower_bound(I.begin(), I.end(), g);
    return (it != I.end() && *it == g) ? static_cast<long>(it - I.begin()) : -1;
  };
  constexpr int nc = corners_per_cell<Dim>();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(rs.region.cells.size() * nc * nc);
  for (Index c : rs.region.cells) {
    const auto nodes = grid.cell_nodes(c);
    std::array<long, nc> loc;
    for (int k = 0; k < nc; ++k)
      loc[k] = local_of(nodes[k]);
    const auto Ke = stiffness_element<Dim>(grid.spacing(), gather<Dim>(stiffness, c));
    for (int a = 0; a < nc; ++a)
      for (int b = 0; b < nc; ++b)
        if (loc[a] >= 0 && loc[b] >= 0)
          trip.emplace_back(static_cast<int>(loc[a]), static_cast<int>(loc[b]), Ke(a, b));
  }
  Index ncon = 0;
  for (Index e : rs.region.contained_coarse)
    for (int j = 0; j < aux.elements[e].L; ++j) {
      const auto &el = aux.elements[e];
      const Vector b = el.S * el.vectors.col(j);
      const auto col = static_cast<int>(rs.n_primal + ncon);
      for (Index k = 0; k < el.nodes.size(); ++k) {
        const long r = local_of(el.nodes[k]);
        const double v = b[static_cast<Eigen::Index>(k)];
        if (r >= 0 && v != 0.0) {
          trip.emplace_back(static_cast<int>(r), col, v);
          trip.emplace_back(col, static_cast<int>(r), v);
        }
      }
      rs.constraints.push_back({e, j});
      ++ncon;
    }
  const auto n = static_cast<Eigen::Index>(rs.n_primal + ncon);
  rs.K.resize(n, n);
  rs.K.setFromTriplets(trip.begin(), trip.end());
  rs.K.makeCompressed();
  rs.lu.compute(rs.K);
  if (rs.lu.info() != Eigen::Success)
    throw SolverError("cem: saddle system of element " + std::to_string(rs.region.center_element) +
                      " is singular (rank-deficient constraints)");
}

/// -a_{K_i}(base, .) on the interior nodes of the region; all zero when base is affine-free there.
template <int Dim>
Vector element_lift_load(const RegionSaddle<Dim> &rs, const CoarsePartition<Dim> &part, const QuadratureField &stiffness,
                         const Vector &base)
{
  const auto &grid = part.grid();
  const auto &I = rs.region.interior_nodes;
  Vector b = Vector::Zero(rs.K.rows());
  constexpr int nc = corners_per_cell<Dim>();
  for (Index c : part.element_cells(rs.region.center_element)) {
    const auto nodes = grid.cell_nodes(c);
    ElementVector<Dim> ge;
    for (int k = 0; k < nc; ++k)
      ge[k] = base[static_cast<Eigen::Index>(nodes[k])];
    const ElementVector<Dim> f = stiffness_element<Dim>(grid.spacing(), gather<Dim>(stiffness, c)) * ge;
    for (int k = 0; k < nc; ++k) {
      auto it = std::lower_bound(I.begin(), I.end(), nodes[k]);
      if (it != I.end() && *it == nodes[k])
        b[it - I.begin()] -= f[k];
    }
  }
  return b;
}

/// Adds the local correction of one region into out (fine numbering); returns false when the load vanishes.
template <int Dim>
bool add_lift_correction(const RegionSaddle<Dim> &rs, const CoarsePartition<Dim> &part, const QuadratureField &stiffness,
                         const Vector &base, std::vector<std::pair<Index, double>> &out)
{
  const Vector b = element_lift_load(rs, part, stiffness, base);
  if (b.cwiseAbs().maxCoeff() == 0.0)
    return false;
  const Vector x = rs.lu.solve(b);
  const double rel = (rs.K * x - b).norm() / b.norm();
  if (!std::isfinite(rel) || rel > 1e-10)
    throw SolverError("cem: lift correction of element " + std::to_string(rs.region.center_element) + " has relative residual " +
                      std::to_string(rel));
  for (Index k = 0; k < rs.n_primal; ++k)
    if (x[static_cast<Eigen::Index>(k)] != 0.0)
      out.emplace_back(rs.region.interior_nodes[k], x[static_cast<Eigen::Index>(k)]);
  return true;
}

template <int Dim>
Vector sum_corrections(Index n, const std::vector<std::vector<std::pair<Index, double>>> &parts)
{
  Vector out = Vector::Zero(static_cast<Eigen::Index>(n));
  for (const auto &p : parts)
    for (auto [node, v] : p)
      out[static_cast<Eigen::Index>(node)] += v;
  return out;
}

} // namespace detail

/**
 * @brief CEM basis: for every (i, j) the minimizer of the a-energy on V_0(K_{i,m})
 * subject to s(psi, phi_j'^(i')) = delta for all auxiliary functions of elements inside K_{i,m}.
 *
 * Element tasks run in parallel; column order and values do not depend on the worker count.
 */
template <int Dim>
MultiscaleBasis build_cem_basis(const CoarsePartition<Dim> &part, const AuxiliarySpace<Dim> &aux, const QuadratureField &stiffness,
                                int layers, const Vector *base_lift = nullptr)
{
  if (layers < 1)
    throw ConfigError("cem: oversampling layers must be >= 1");
  const Index ne = part.element_count();
  std::vector<std::vector<Eigen::Triplet<double>>> per_element(ne);
  std::vector<std::vector<std::pair<Index, double>>> corrections(base_lift ? ne : 0);
  parallel_for(ne, [&](Index i) {
    detail::RegionSaddle<Dim> rs;
    rs.region = oversample_region(part, i, layers);
    detail::build_region_saddle(rs, part, aux, stiffness);
    const auto n = rs.K.rows();
    Index col_base = 0;
    for (Index ii = 0; ii < i; ++ii)
      col_base += static_cast<Index>(aux.elements[ii].L);
    // constraint slot of (i, j) inside this region
    Index slot0 = 0;
    while (rs.constraints[slot0].element != i)
      ++slot0;
    for (int j = 0; j < aux.elements[i].L; ++j) {
      Vector rhs = Vector::Zero(n);
      rhs[static_cast<Eigen::Index>(rs.n_primal + slot0 + static_cast<Index>(j))] = 1.0;
      const Vector x = rs.lu.solve(rhs);
      const double rel = (rs.K * x - rhs).norm();
      if (!std::isfinite(rel) || rel > 1e-10)
        throw SolverError("cem: saddle solve for (i, j) = (" + std::to_string(i) + ", " + std::to_string(j) +
                          ") has relative residual " + std::to_string(rel));
      for (Index k = 0; k < rs.n_primal; ++k) {
        const double v = x[static_cast<Eigen::Index>(k)];
        if (v != 0.0)
          per_element[i].emplace_back(static_cast<int>(rs.region.interior_nodes[k]), static_cast<int>(col_base + j), v);
      }
    }
    if (base_lift)
      detail::add_lift_correction(rs, part, stiffness, *base_lift, corrections[i]);
  });
  MultiscaleBasis basis;
  basis.layers = layers;
  Index cols = 0;
  for (Index i = 0; i < ne; ++i) {
    basis.element_offset.push_back(cols);
    for (int j = 0; j < aux.elements[i].L; ++j)
      basis.columns.push_back({i, j});
    cols += static_cast<Index>(aux.elements[i].L);
  }
  basis.element_offset.push_back(cols);
  std::vector<Eigen::Triplet<double>> all;
  for (auto &t : per_element)
    all.insert(all.end(), t.begin(), t.end());
  basis.R.resize(static_cast<Eigen::Index>(part.grid().node_count()), static_cast<Eigen::Index>(cols));
  basis.R.setFromTriplets(all.begin(), all.end());
  basis.R.makeCompressed();
  if (base_lift)
    basis.lift_correction = detail::sum_corrections<Dim>(part.grid().node_count(), corrections);
  return basis;
}

/**
 * @brief Localized correction of a base lift g: sum over elements of the minimizer of
 * a(z, z) / 2 + a_{K_i}(g, z) on V_0(K_{i,m}) subject to s(z, phi) = 0 for every auxiliary function inside K_{i,m}.
 *
 * Removes the part of a(g, .) that V_ms cannot see, with the same exponential localization as the basis.
 * Regions whose element sees no load are skipped.
 */
template <int Dim>
Vector lift_correction(const CoarsePartition<Dim> &part, const AuxiliarySpace<Dim> &aux, const QuadratureField &stiffness, int layers,
                       const Vector &base)
{
  if (layers < 1)
    throw ConfigError("cem: oversampling layers must be >= 1");
  const Index ne = part.element_count();
  std::vector<std::vector<std::pair<Index, double>>> corrections(ne);
  parallel_for(ne, [&](Index i) {
    detail::RegionSaddle<Dim> rs;
    rs.region = oversample_region(part, i, layers);
    // cheap load check before factoring
    bool loaded = false;
    const auto &grid = part.grid();
    for (Index c : part.element_cells(i)) {
      const auto nodes = grid.cell_nodes(c);
      for (int k = 1; k < corners_per_cell<Dim>() && !loaded; ++k)
        loaded = base[static_cast<Eigen::Index>(nodes[k])] != base[static_cast<Eigen::Index>(nodes[0])];
      if (loaded)
        break;
    }
    if (!loaded)
      return;
    detail::build_region_saddle(rs, part, aux, stiffness);
    detail::add_lift_correction(rs, part, stiffness, base, corrections[i]);
  });
  return detail::sum_corrections<Dim>(part.grid().node_count(), corrections);
}

template <int Dim>
MultiscaleBasis build_cem_basis(const CoarsePartition<Dim> &part, const AuxiliarySpace<Dim> &aux, const PermeabilityField<Dim> &perm,
                                const FluidProps &fluid, const Vector &p0, int layers)
{
  return build_cem_basis(part, aux, kappa_rho_field(part.grid(), perm, fluid, p0, false), layers);
}

inline Vector basis_column(const MultiscaleBasis &b, Index col) { return Vector(b.R.col(static_cast<Eigen::Index>(col))); }

/**
 * @brief Fine field carrying Dirichlet data for the coarse solve.
 *
 * Coarse nodes on Dirichlet faces take the data value there, the remaining coarse
 * nodal values are the discrete harmonic extension on the coarse grid (Q1 Laplace,
 * natural elsewhere), the result is interpolated with the partition of unity and
 * finally overwritten with the exact data at fine Dirichlet nodes. Data linear in x
 * is reproduced exactly. Zero for pure Neumann problems.
 */
template <int Dim>
Vector dirichlet_lift(const CoarsePartition<Dim> &part, const PartitionOfUnity<Dim> &pou, const DirichletData<Dim> &data, double t)
{
  const auto &grid = part.grid();
  Vector lift = Vector::Zero(static_cast<Eigen::Index>(grid.node_count()));
  if (!grid.has_dirichlet())
    return lift;
  const StructuredGrid<Dim> cgrid(part.coarse_dims(), part.coarse_spacing(), grid.boundary_tags());
  const Index nc = cgrid.node_count();
  Vector g = Vector::Zero(static_cast<Eigen::Index>(nc));
  std::vector<std::pair<Index, double>> bv;
  for (auto [n, v] : data.values(cgrid, t))
    bv.emplace_back(n, v);
  const SparseMatrix K = assemble_stiffness(cgrid, cellwise(std::vector<double>(cgrid.cell_count(), 1.0)));
  const auto sys = apply_dirichlet(cgrid, K, Vector::Zero(static_cast<Eigen::Index>(nc)), bv);
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(sys.matrix);
  if (ldlt.info() != Eigen::Success)
    throw SolverError("lift: coarse harmonic extension failed");
  g = ldlt.solve(sys.rhs);
  for (auto [n, v] : bv)
    g[static_cast<Eigen::Index>(n)] = v;
  for (Index k = 0; k < nc; ++k)
    for (auto [node, val] : pou.chi[k])
      lift[static_cast<Eigen::Index>(node)] += g[static_cast<Eigen::Index>(k)] * val;
  data.impose(grid, lift, t);
  return lift;
}

struct CoarseSolution {
  TransientSolution fine;            ///< reconstructed pressures lift + R c, with Newton statistics
  std::vector<Vector> coefficients;  ///< coarse unknowns per time index
  double initial_projection_error = 0.0; ///< relative L2 misfit of the reconstructed initial state
};

/// Everything the coarse solver needs besides the fine discretization.
template <int Dim>
struct CoarseContext {
  const CoarsePartition<Dim> *part = nullptr;
  const PartitionOfUnity<Dim> *pou = nullptr;
  const MultiscaleBasis *basis = nullptr;
  SparseMatrix s_mass; ///< global s(.,.) on the fine grid (sum of the element S_i)
  std::function<Vector(double)> lift; ///< lift at time t; empty means the uncorrected dirichlet_lift
};

/**
 * @brief Corrected lift t -> g(t) + lift_correction(g(t)), g the coarse lift.
 *
 * Time-independent data reuses basis.lift_correction when present; a time-dependent profile
 * refactors the region systems at every call. part, pou and aux must outlive the function.
 */
template <int Dim>
std::function<Vector(double)> corrected_lift(const CoarsePartition<Dim> &part, const PartitionOfUnity<Dim> &pou,
                                             const AuxiliarySpace<Dim> &aux, const QuadratureField &stiffness,
                                             const MultiscaleBasis &basis, const DirichletData<Dim> &data)
{
  const int layers = basis.layers;
  if (!data.profile) {
    const Vector g = dirichlet_lift(part, pou, data, 0.0);
    const Vector full = g + (basis.lift_correction.size() == g.size() ? basis.lift_correction : lift_correction(part, aux, stiffness, layers, g));
    return [full](double) { return full; };
  }
  return [&part, &pou, &aux, stiffness, layers, data](double t) {
    const Vector g = dirichlet_lift(part, pou, data, t);
    return Vector(g + lift_correction(part, aux, stiffness, layers, g));
  };
}

template <int Dim>
SparseMatrix global_s_mass(const StructuredGrid<Dim> &grid, const PermeabilityField<Dim> &perm, const FluidProps &fluid,
                           const Vector &p0, const PartitionOfUnity<Dim> &pou)
{
  return assemble_weighted_mass(grid, spectral_weight_field(grid, perm, fluid, p0, pou));
}

/// s-projection of p0 - lift onto V_ms.
inline Vector coarse_initial_coefficients(const SparseMatrix &R, const SparseMatrix &S, const Vector &p0, const Vector &lift)
{
  const SparseMatrix RtS = SparseMatrix(R.transpose()) * S;
  const SparseMatrix G = RtS * R;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(G);
  if (ldlt.info() != Eigen::Success)
    throw SolverError("coarse initial state: projected s-mass is singular");
  return ldlt.solve(RtS * (p0 - lift));
}

/**
 * @brief Backward Euler / Newton on the multiscale space.
 *
 * Per step: F_c = R^T F(lift + R c), J_c = R^T J(lift + R c) R with the fine forms.
 * Newton stops as in newton_solve; the roundoff floor is measured against ||R^T a(p_old)||, a the accumulation vector.
 */
template <int Dim>
CoarseSolution solve_transient_coarse(const FlowDiscretization<Dim> &disc, const CoarseContext<Dim> &ctx, const Vector &p0,
                                      const TimeGrid &time, const NewtonConfig &cfg = {})
{
  cfg.validate();
  time.validate();
  const auto &grid = disc.grid();
  const SparseMatrix &R = ctx.basis->R;
  const SparseMatrix Rt = R.transpose();
  // heavily overlapping supports: the Galerkin product is cheaper with a dense copy of R
  const double fill = static_cast<double>(R.nonZeros()) / std::max<double>(1.0, static_cast<double>(R.rows()) * static_cast<double>(R.cols()));
  const bool dense_path = fill > 0.05 && static_cast<double>(R.rows()) * static_cast<double>(R.cols()) <= 4e7;
  const Eigen::MatrixXd Rd = dense_path ? Eigen::MatrixXd(R) : Eigen::MatrixXd();
  CoarseSolution sol;
  auto lift_at = [&](double t) { return ctx.lift ? ctx.lift(t) : dirichlet_lift(*ctx.part, *ctx.pou, disc.dirichlet(), t); };
  Vector lift = lift_at(0.0);
  Vector c = coarse_initial_coefficients(R, ctx.s_mass, p0, lift);
  Vector p = lift + R * c;
  {
    const auto mass = assemble_weighted_mass(grid, cellwise(std::vector<double>(grid.cell_count(), 1.0)));
    const Vector e = p - p0;
    const double den = p0.dot(mass * p0);
    sol.initial_projection_error = den > 0.0 ? std::sqrt(e.dot(mass * e) / den) : 0.0;
  }
  sol.fine.snapshots.push_back(p);
  sol.coefficients.push_back(c);
  LinearSolver solver(cfg.linear_tol, cfg.direct_limit);
  double t = 0.0;
  for (Index n = 0; n < time.steps(); ++n) {
    const double dt = time.dt[n];
    t += dt;
    lift = lift_at(t);
    const Vector p_old = sol.fine.snapshots.back();
    auto recon = [&](const Vector &x) -> Vector { return lift + R * x; };
    auto linearize = [&](const Vector &x) {
      const Vector pf = recon(x);
      auto [F, J] = disc.linearize(pf, p_old, dt, t);
      Vector Fc = Rt * F;
      SparseMatrix Jc = dense_path ? SparseMatrix((Rd.transpose() * (J * Rd)).sparseView()) : SparseMatrix(Rt * J * R);
      return std::pair<Vector, SparseMatrix>(std::move(Fc), std::move(Jc));
    };
    auto resid = [&](const Vector &x) -> Vector { return Rt * disc.residual(recon(x), p_old, dt, t, true); };
    Vector acc = disc.accumulation(p_old);
    for (Index d : disc.dirichlet_nodes())
      acc[static_cast<Eigen::Index>(d)] = 0.0;
    const double scale = (Rt * acc).norm();
    std::vector<double> hist;
    int iters = 0;
    c = newton_solve(linearize, resid, c, cfg, scale, solver, hist, iters, n + 1);
    sol.coefficients.push_back(c);
    sol.fine.snapshots.push_back(recon(c));
    sol.fine.newton_iters.push_back(iters);
    sol.fine.residual_norms.push_back(std::move(hist));
  }
  return sol;
}

struct EllipticProjection {
  Vector coefficients;
  Vector reconstruction;
};

/// p_hat in lift + V_ms with (kappa/mu rho(p0) grad(p - p_hat), grad w) = 0 for all w in V_ms.
inline EllipticProjection elliptic_projection(const SparseMatrix &A, const SparseMatrix &R, const Vector &p, const Vector &lift)
{
  const SparseMatrix Rt = R.transpose();
  const SparseMatrix Ac = Rt * A * R;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(Ac);
  if (ldlt.info() != Eigen::Success)
    throw SolverError("elliptic projection: projected stiffness is singular");
  EllipticProjection out;
  out.coefficients = ldlt.solve(Rt * (A * (p - lift)));
  out.reconstruction = lift + R * out.coefficients;
  return out;
}

} // namespace cemgms
