#pragma once

/** @file fem.hpp
    @brief Q1 finite elements on structured boxes: quadrature-point coefficients, stiffness/mass assembly,
    the nonlinear flow forms with their Newton linearization, Dirichlet elimination and sub-region restriction.
*/

#include <map>
#include <optional>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "fields.hpp"

namespace cemgms {

template <int Dim>
struct ReferenceCell {
  static constexpr int nc = corners_per_cell<Dim>();
  static constexpr int nq = CellQuadrature<Dim>::points;

  std::array<std::array<double, nc>, nq> N{};
  std::array<std::array<Point<Dim>, nc>, nq> dN{}; ///< gradient on the unit cell

  static const ReferenceCell &get()
  {
    static const ReferenceCell ref = [] {
      ReferenceCell r;
      for (int q = 0; q < nq; ++q) {
        Point<Dim> t;
        for (int a = 0; a < Dim; ++a)
          t[a] = CellQuadrature<Dim>::coordinate(q, a);
        Point<Dim> unit;
        unit.fill(1.0);
        for (int c = 0; c < nc; ++c)
          detail::corner_hat<Dim>(c, t, unit, r.N[q][c], r.dN[q][c]);
      }
      return r;
    }();
    return ref;
  }
};

template <int Dim>
using ElementMatrix = Eigen::Matrix<double, corners_per_cell<Dim>(), corners_per_cell<Dim>()>;

template <int Dim>
using ElementVector = Eigen::Matrix<double, corners_per_cell<Dim>(), 1>;

/// Scalar coefficient given per cell or per (cell, quadrature point).
struct QuadratureField {
  std::vector<double> values;
  bool per_point = false;

  template <int Dim>
  double at(Index cell, int q) const
  {
    return per_point ? values[cell * CellQuadrature<Dim>::points + static_cast<Index>(q)] : values[cell];
  }
};

inline QuadratureField cellwise(std::vector<double> v) { return {std::move(v), false}; }
inline QuadratureField pointwise(std::vector<double> v) { return {std::move(v), true}; }

/// Nodal field interpolated at every quadrature point (cell-major).
template <int Dim>
std::vector<double> values_at_points(const StructuredGrid<Dim> &grid, const Vector &p)
{
  const auto &ref = ReferenceCell<Dim>::get();
  constexpr int nq = ReferenceCell<Dim>::nq;
  std::vector<double> out(grid.cell_count() * nq);
  for (Index cell = 0; cell < grid.cell_count(); ++cell) {
    const auto nodes = grid.cell_nodes(cell);
    for (int q = 0; q < nq; ++q) {
      double s = 0.0;
      for (int c = 0; c < ReferenceCell<Dim>::nc; ++c)
        s += ref.N[q][c] * p[static_cast<Eigen::Index>(nodes[c])];
      out[cell * nq + q] = s;
    }
  }
  return out;
}

template <int Dim>
Point<Dim> quadrature_point(const StructuredGrid<Dim> &grid, Index cell, int q)
{
  auto x = grid.cell_origin(cell);
  for (int a = 0; a < Dim; ++a)
    x[a] += CellQuadrature<Dim>::coordinate(q, a) * grid.spacing()[a];
  return x;
}

/// kappa(SI) * rho(p0) at quadrature points, optionally divided by the viscosity.
template <int Dim>
QuadratureField kappa_rho_field(const StructuredGrid<Dim> &grid, const PermeabilityField<Dim> &perm,
                                const FluidProps &fluid, const Vector &p0, bool divide_by_viscosity)
{
  constexpr int nq = CellQuadrature<Dim>::points;
  auto p_at = values_at_points(grid, p0);
  const double scale = divide_by_viscosity ? 1.0 / fluid.viscosity : 1.0;
  for (Index cell = 0; cell < grid.cell_count(); ++cell)
    for (int q = 0; q < nq; ++q)
      p_at[cell * nq + q] = perm.si(cell) * density(p_at[cell * nq + q], fluid) * scale;
  return pointwise(std::move(p_at));
}

/// Spectral weight rho(p0) kappa sum_k |grad chi_k|^2 at quadrature points.
template <int Dim>
QuadratureField spectral_weight_field(const StructuredGrid<Dim> &grid, const PermeabilityField<Dim> &perm,
                                      const FluidProps &fluid, const Vector &p0, const PartitionOfUnity<Dim> &pou)
{
  constexpr int nq = CellQuadrature<Dim>::points;
  auto w = kappa_rho_field(grid, perm, fluid, p0, false);
  for (Index cell = 0; cell < grid.cell_count(); ++cell)
    for (int q = 0; q < nq; ++q)
      w.values[cell * nq + q] *= pou.grad_sq_at(cell, q);
  return w;
}

template <int Dim>
ElementMatrix<Dim> stiffness_element(const Point<Dim> &h, const std::array<double, CellQuadrature<Dim>::points> &coeff)
{
  const auto &ref = ReferenceCell<Dim>::get();
  constexpr int nc = ReferenceCell<Dim>::nc;
  double vol = 1.0;
  for (int a = 0; a < Dim; ++a)
    vol *= h[a];
  ElementMatrix<Dim> K = ElementMatrix<Dim>::Zero();
  for (int q = 0; q < ReferenceCell<Dim>::nq; ++q) {
    const double w = CellQuadrature<Dim>::weight() * vol * coeff[q];
    for (int i = 0; i < nc; ++i)
      for (int j = 0; j < nc; ++j) {
        double g = 0.0;
        for (int a = 0; a < Dim; ++a)
          g += ref.dN[q][i][a] * ref.dN[q][j][a] / (h[a] * h[a]);
        K(i, j) += w * g;
      }
  }
  return K;
}

template <int Dim>
ElementMatrix<Dim> mass_element(const Point<Dim> &h, const std::array<double, CellQuadrature<Dim>::points> &weight)
{
  const auto &ref = ReferenceCell<Dim>::get();
  constexpr int nc = ReferenceCell<Dim>::nc;
  double vol = 1.0;
  for (int a = 0; a < Dim; ++a)
    vol *= h[a];
  ElementMatrix<Dim> M = ElementMatrix<Dim>::Zero();
  for (int q = 0; q < ReferenceCell<Dim>::nq; ++q) {
    const double w = CellQuadrature<Dim>::weight() * vol * weight[q];
    for (int i = 0; i < nc; ++i)
      for (int j = 0; j < nc; ++j)
        M(i, j) += w * ref.N[q][i] * ref.N[q][j];
  }
  return M;
}

namespace detail {

template <int Dim>
std::array<double, CellQuadrature<Dim>::points> gather(const QuadratureField &f, Index cell)
{
  std::array<double, CellQuadrature<Dim>::points> out;
  for (int q = 0; q < CellQuadrature<Dim>::points; ++q)
    out[q] = f.at<Dim>(cell, q);
  return out;
}

template <int Dim>
void check_coefficient(const StructuredGrid<Dim> &grid, const QuadratureField &f, bool strictly_positive, const char *what)
{
  const Index expect = grid.cell_count() * (f.per_point ? CellQuadrature<Dim>::points : 1);
  if (f.values.size() != expect)
    throw ConfigError(std::string(what) + ": coefficient size does not match the grid");
  for (double v : f.values)
    if (!std::isfinite(v) || (strictly_positive ? !(v > 0.0) : v < 0.0))
      throw ValidationError(std::string(what) + (strictly_positive ? ": coefficient must be positive" : ": weight must be nonnegative"));
}

} // namespace detail

/**
 * @brief Global sparse matrix with the Q1 pattern of a structured grid and precomputed value slots.
 *
 * Refilling the values of a fixed pattern avoids re-sorting triplets on every Newton iteration
 * and keeps the summation order fixed.
 */
template <int Dim>
class CellAssembler {
public:
  static constexpr int nc = corners_per_cell<Dim>();

  explicit CellAssembler(const StructuredGrid<Dim> &grid) : grid_(grid)
  {
    const Index n = grid.node_count();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(grid.cell_count() * nc * nc);
    for (Index cell = 0; cell < grid.cell_count(); ++cell) {
      const auto nodes = grid.cell_nodes(cell);
      for (int i = 0; i < nc; ++i)
        for (int j = 0; j < nc; ++j)
          trip.emplace_back(static_cast<int>(nodes[i]), static_cast<int>(nodes[j]), 0.0);
    }
    pattern_.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    pattern_.setFromTriplets(trip.begin(), trip.end());
    pattern_.makeCompressed();
    slots_.resize(grid.cell_count() * nc * nc);
    const int *outer = pattern_.outerIndexPtr();
    const int *inner = pattern_.innerIndexPtr();
    for (Index cell = 0; cell < grid.cell_count(); ++cell) {
      const auto nodes = grid.cell_nodes(cell);
      for (int i = 0; i < nc; ++i)
        for (int j = 0; j < nc; ++j) {
          const int col = static_cast<int>(nodes[j]);
          const int *b = inner + outer[col];
          const int *e = inner + outer[col + 1];
          const int *it = std::lower_bound(b, e, static_cast<int>(nodes[i]));
          slots_[(cell * nc + i) * nc + j] = static_cast<int>(it - inner);
        }
    }
  }

  const StructuredGrid<Dim> &grid() const { return grid_; }

  SparseMatrix zero() const
  {
    SparseMatrix m = pattern_;
    std::fill(m.valuePtr(), m.valuePtr() + m.nonZeros(), 0.0);
    return m;
  }

  void add(SparseMatrix &m, Index cell, const ElementMatrix<Dim> &Ke) const
  {
    double *v = m.valuePtr();
    for (int i = 0; i < nc; ++i)
      for (int j = 0; j < nc; ++j)
        v[slots_[(cell * nc + i) * nc + j]] += Ke(i, j);
  }

  template <class Kernel>
  SparseMatrix assemble(Kernel &&kernel) const
  {
    SparseMatrix m = zero();
    for (Index cell = 0; cell < grid_.cell_count(); ++cell)
      add(m, cell, kernel(cell));
    return m;
  }

private:
  StructuredGrid<Dim> grid_;
  SparseMatrix pattern_;
  std::vector<int> slots_;
};

/// Global stiffness (coeff grad v . grad w); coeff must be positive.
template <int Dim>
SparseMatrix assemble_stiffness(const StructuredGrid<Dim> &grid, const QuadratureField &coeff)
{
  detail::check_coefficient(grid, coeff, true, "assemble_stiffness");
  CellAssembler<Dim> asm_(grid);
  return asm_.assemble([&](Index cell) { return stiffness_element<Dim>(grid.spacing(), detail::gather<Dim>(coeff, cell)); });
}

/// Global weighted mass (weight v w); weight must be nonnegative.
template <int Dim>
SparseMatrix assemble_weighted_mass(const StructuredGrid<Dim> &grid, const QuadratureField &weight)
{
  detail::check_coefficient(grid, weight, false, "assemble_weighted_mass");
  CellAssembler<Dim> asm_(grid);
  return asm_.assemble([&](Index cell) { return mass_element<Dim>(grid.spacing(), detail::gather<Dim>(weight, cell)); });
}

/// Dense matrix over a node box (local lexicographic numbering) from the given cells.
template <int Dim, class Kernel>
Eigen::MatrixXd assemble_dense_box(const StructuredGrid<Dim> &grid, const std::vector<Index> &cells, const NodeBox<Dim> &box,
                                   Kernel &&kernel)
{
  constexpr int nc = corners_per_cell<Dim>();
  const auto n = static_cast<Eigen::Index>(box.count());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  for (Index cell : cells) {
    const auto nodes = grid.cell_nodes(cell);
    std::array<Eigen::Index, nc> loc;
    for (int c = 0; c < nc; ++c)
      loc[c] = static_cast<Eigen::Index>(box.local(grid.node_multi(nodes[c])));
    const ElementMatrix<Dim> Ke = kernel(cell);
    for (int i = 0; i < nc; ++i)
      for (int j = 0; j < nc; ++j)
        A(loc[i], loc[j]) += Ke(i, j);
  }
  return A;
}

/// Per-cell energy integral of coeff |grad v|^2.
template <int Dim>
std::vector<double> cell_energies(const StructuredGrid<Dim> &grid, const QuadratureField &coeff, const Vector &v)
{
  std::vector<double> out(grid.cell_count());
  for (Index cell = 0; cell < grid.cell_count(); ++cell) {
    const auto nodes = grid.cell_nodes(cell);
    ElementVector<Dim> ve;
    for (int c = 0; c < corners_per_cell<Dim>(); ++c)
      ve[c] = v[static_cast<Eigen::Index>(nodes[c])];
    const auto K = stiffness_element<Dim>(grid.spacing(), detail::gather<Dim>(coeff, cell));
    out[cell] = ve.dot(K * ve);
  }
  return out;
}

/// Values prescribed on the Dirichlet faces of a grid.
template <int Dim>
struct DirichletData {
  std::array<double, 2 * Dim> face_values{}; ///< used for faces tagged Dirichlet, Pa
  std::function<double(const Point<Dim> &, double)> profile; ///< overrides face values when set

  /// (node, value) for every Dirichlet node at time t; a node on several Dirichlet faces takes the first face's value.
  std::vector<std::pair<Index, double>> values(const StructuredGrid<Dim> &grid, double t) const
  {
    std::vector<std::pair<Index, double>> out;
    if (!grid.has_dirichlet())
      return out;
    for (Index n = 0; n < grid.node_count(); ++n) {
      const auto m = grid.node_multi(n);
      for (int f = 0; f < 2 * Dim; ++f) {
        if (grid.boundary_tags()[f] == BoundaryTag::Dirichlet && grid.on_face(m, f)) {
          out.emplace_back(n, profile ? profile(grid.node_point(n), t) : face_values[f]);
          break;
        }
      }
    }
    return out;
  }

  double value_at(const StructuredGrid<Dim> &grid, const Point<Dim> &x, int face, double t) const
  {
    (void)grid;
    return profile ? profile(x, t) : face_values[face];
  }

  void impose(const StructuredGrid<Dim> &grid, Vector &p, double t) const
  {
    for (auto [n, v] : values(grid, t))
      p[static_cast<Eigen::Index>(n)] = v;
  }
};

/// Mass source q in kg/(m^3 s): per-cell rates plus an optional point function.
template <int Dim>
struct SourceTerm {
  std::vector<double> cell_rates;
  std::function<double(const Point<Dim> &, double)> field;

  bool empty() const { return cell_rates.empty() && !field; }

  double at(const StructuredGrid<Dim> &grid, Index cell, int q, double t) const
  {
    double v = cell_rates.empty() ? 0.0 : cell_rates[cell];
    if (field)
      v += field(quadrature_point(grid, cell, q), t);
    return v;
  }
};

/// Operators whose combination mass + dt (stiffness + convective) is the Newton Jacobian.
struct NonlinearForms {
  SparseMatrix stiffness;  ///< (kappa/mu rho(p) grad eta_i, grad eta_j)
  SparseMatrix mass;       ///< (phi rho'(p) eta_i, eta_j)
  SparseMatrix convective; ///< (kappa/mu rho'(p) eta_i grad p, grad eta_j), row j column i
};

/**
 * @brief Fine-grid discretization of the compressible flow equation.
 *
 * Residual of one backward Euler step:
 *   F_j = (phi rho(p), eta_j) - (phi rho(p_old), eta_j) + dt (kappa/mu rho(p) grad p, grad eta_j) - dt (q, eta_j),
 * with rho evaluated at quadrature points of the nodal interpolant.
 */
template <int Dim>
class FlowDiscretization {
public:
  static constexpr int nc = corners_per_cell<Dim>();
  static constexpr int nq = CellQuadrature<Dim>::points;

  FlowDiscretization(const StructuredGrid<Dim> &grid, const PermeabilityField<Dim> &perm, const FluidProps &fluid,
                     SourceTerm<Dim> source = {}, DirichletData<Dim> dirichlet = {})
    : grid_(grid), fluid_(fluid), source_(std::move(source)), dirichlet_(std::move(dirichlet)), assembler_(grid)
  {
    perm.validate();
    fluid.validate();
    for (int a = 0; a < Dim; ++a)
      if (perm.dims[a] != grid.dims()[a])
        throw ConfigError("flow: permeability dims do not match the grid");
    if (!source_.cell_rates.empty() && source_.cell_rates.size() != grid.cell_count())
      throw ConfigError("flow: source rate count does not match the grid");
    mobility_.resize(grid.cell_count());
    for (Index c = 0; c < grid.cell_count(); ++c)
      mobility_[c] = perm.si(c) / fluid.viscosity;
    dirichlet_nodes_ = grid.dirichlet_nodes();
    perm_ = perm;
  }

  const StructuredGrid<Dim> &grid() const { return grid_; }
  const FluidProps &fluid() const { return fluid_; }
  const PermeabilityField<Dim> &permeability() const { return perm_; }
  const SourceTerm<Dim> &source() const { return source_; }
  const DirichletData<Dim> &dirichlet() const { return dirichlet_; }
  const std::vector<Index> &dirichlet_nodes() const { return dirichlet_nodes_; }
  const CellAssembler<Dim> &assembler() const { return assembler_; }
  double mobility(Index cell) const { return mobility_[cell]; }

  /// Step residual on all rows; zero_dirichlet clears the constrained rows.
  Vector residual(const Vector &p, const Vector &p_old, double dt, double t, bool zero_dirichlet = true) const
  {
    Vector F;
    evaluate(p, &p_old, dt, t, &F, nullptr);
    if (zero_dirichlet)
      for (Index n : dirichlet_nodes_)
        F[static_cast<Eigen::Index>(n)] = 0.0;
    return F;
  }

  /// Residual and Jacobian in one sweep, Dirichlet rows/columns replaced by identity.
  std::pair<Vector, SparseMatrix> linearize(const Vector &p, const Vector &p_old, double dt, double t) const
  {
    Vector F;
    SparseMatrix J;
    evaluate(p, &p_old, dt, t, &F, &J);
    constrain_identity(J);
    for (Index n : dirichlet_nodes_)
      F[static_cast<Eigen::Index>(n)] = 0.0;
    return {std::move(F), std::move(J)};
  }

  /// Raw (unconstrained) Jacobian of the step residual.
  SparseMatrix jacobian(const Vector &p, double dt) const
  {
    SparseMatrix J;
    evaluate(p, nullptr, dt, 0.0, nullptr, &J);
    return J;
  }

  /// Steady residual (flux minus source) without the accumulation term.
  Vector steady_residual(const Vector &p, double t, bool zero_dirichlet = true) const
  {
    Vector F;
    evaluate(p, nullptr, 1.0, t, &F, nullptr, false);
    if (zero_dirichlet)
      for (Index n : dirichlet_nodes_)
        F[static_cast<Eigen::Index>(n)] = 0.0;
    return F;
  }

  std::pair<Vector, SparseMatrix> linearize_steady(const Vector &p, double t) const
  {
    Vector F;
    SparseMatrix J;
    evaluate(p, nullptr, 1.0, t, &F, &J, false);
    constrain_identity(J);
    for (Index n : dirichlet_nodes_)
      F[static_cast<Eigen::Index>(n)] = 0.0;
    return {std::move(F), std::move(J)};
  }

  NonlinearForms forms(const Vector &p) const
  {
    const auto &ref = ReferenceCell<Dim>::get();
    NonlinearForms out{assembler_.zero(), assembler_.zero(), assembler_.zero()};
    const auto &h = grid_.spacing();
    const double vol = grid_.cell_volume();
    for (Index cell = 0; cell < grid_.cell_count(); ++cell) {
      const auto nodes = grid_.cell_nodes(cell);
      ElementMatrix<Dim> Ks = ElementMatrix<Dim>::Zero(), Ms = ElementMatrix<Dim>::Zero(), Cs = ElementMatrix<Dim>::Zero();
      for (int q = 0; q < nq; ++q) {
        double pq = 0.0;
        Point<Dim> gp{};
        for (int c = 0; c < nc; ++c) {
          const double pc = p[static_cast<Eigen::Index>(nodes[c])];
          pq += ref.N[q][c] * pc;
          // differences against corner 0 so that a constant state has an exactly zero gradient
          for (int a = 0; a < Dim; ++a)
            gp[a] += ref.dN[q][c][a] / h[a] * (pc - p[static_cast<Eigen::Index>(nodes[0])]);
        }
        const double w = CellQuadrature<Dim>::weight() * vol;
        const double rho = density(pq, fluid_);
        const double drho = fluid_.compressibility * rho;
        const double lam = mobility_[cell];
        for (int j = 0; j < nc; ++j) {
          double gpj = 0.0;
          for (int a = 0; a < Dim; ++a)
            gpj += gp[a] * ref.dN[q][j][a] / h[a];
          for (int i = 0; i < nc; ++i) {
            double gij = 0.0;
            for (int a = 0; a < Dim; ++a)
              gij += ref.dN[q][i][a] * ref.dN[q][j][a] / (h[a] * h[a]);
            Ks(j, i) += w * lam * rho * gij;
            Ms(j, i) += w * fluid_.porosity * drho * ref.N[q][i] * ref.N[q][j];
            Cs(j, i) += w * lam * drho * ref.N[q][i] * gpj;
          }
        }
      }
      assembler_.add(out.stiffness, cell, Ks);
      assembler_.add(out.mass, cell, Ms);
      assembler_.add(out.convective, cell, Cs);
    }
    return out;
  }

  /// (phi rho(p), eta_j) for every node.
  Vector accumulation(const Vector &p) const
  {
    const auto &ref = ReferenceCell<Dim>::get();
    Vector out = Vector::Zero(static_cast<Eigen::Index>(grid_.node_count()));
    const double vol = grid_.cell_volume();
    for (Index cell = 0; cell < grid_.cell_count(); ++cell) {
      const auto nodes = grid_.cell_nodes(cell);
      for (int q = 0; q < nq; ++q) {
        double pq = 0.0;
        for (int c = 0; c < nc; ++c)
          pq += ref.N[q][c] * p[static_cast<Eigen::Index>(nodes[c])];
        const double w = CellQuadrature<Dim>::weight() * vol * fluid_.porosity * density(pq, fluid_);
        for (int c = 0; c < nc; ++c)
          out[static_cast<Eigen::Index>(nodes[c])] += w * ref.N[q][c];
      }
    }
    return out;
  }

  /// Total fluid mass integral phi rho(p).
  double total_mass(const Vector &p) const { return accumulation(p).sum(); }

  void constrain_identity(SparseMatrix &J) const
  {
    if (dirichlet_nodes_.empty())
      return;
    std::vector<char> is_d(grid_.node_count(), 0);
    for (Index n : dirichlet_nodes_)
      is_d[n] = 1;
    for (int k = 0; k < J.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(J, k); it; ++it)
        if (is_d[static_cast<Index>(it.row())] || is_d[static_cast<Index>(it.col())])
          it.valueRef() = (it.row() == it.col()) ? 1.0 : 0.0;
  }

private:
  void evaluate(const Vector &p, const Vector *p_old, double dt, double t, Vector *F, SparseMatrix *J,
                bool with_accumulation = true) const
  {
    const auto &ref = ReferenceCell<Dim>::get();
    const auto &h = grid_.spacing();
    const double vol = grid_.cell_volume();
    if (F)
      *F = Vector::Zero(static_cast<Eigen::Index>(grid_.node_count()));
    if (J)
      *J = assembler_.zero();
    for (Index cell = 0; cell < grid_.cell_count(); ++cell) {
      const auto nodes = grid_.cell_nodes(cell);
      ElementVector<Dim> Fe = ElementVector<Dim>::Zero();
      ElementMatrix<Dim> Je = ElementMatrix<Dim>::Zero();
      const double lam = mobility_[cell];
      for (int q = 0; q < nq; ++q) {
        double pq = 0.0, pq_old = 0.0;
        Point<Dim> gp{};
        const double p0 = p[static_cast<Eigen::Index>(nodes[0])];
        for (int c = 0; c < nc; ++c) {
          const auto id = static_cast<Eigen::Index>(nodes[c]);
          pq += ref.N[q][c] * p[id];
          if (p_old)
            pq_old += ref.N[q][c] * (*p_old)[id];
          for (int a = 0; a < Dim; ++a)
            gp[a] += ref.dN[q][c][a] / h[a] * (p[id] - p0);
        }
        const double w = CellQuadrature<Dim>::weight() * vol;
        const double rho = density(pq, fluid_);
        const double drho = fluid_.compressibility * rho;
        const double phi = fluid_.porosity;
        const double acc = with_accumulation && p_old ? phi * (rho - density(pq_old, fluid_)) : 0.0;
        const double qv = (F && !source_.empty()) ? source_.at(grid_, cell, q, t) : 0.0;
        for (int j = 0; j < nc; ++j) {
          double gpj = 0.0;
          for (int a = 0; a < Dim; ++a)
            gpj += gp[a] * ref.dN[q][j][a] / h[a];
          if (F)
            Fe[j] += w * (acc * ref.N[q][j] + dt * lam * rho * gpj - dt * qv * ref.N[q][j]);
          if (J) {
            for (int i = 0; i < nc; ++i) {
              double gij = 0.0;
              for (int a = 0; a < Dim; ++a)
                gij += ref.dN[q][i][a] * ref.dN[q][j][a] / (h[a] * h[a]);
              const double m = with_accumulation ? phi * drho * ref.N[q][i] * ref.N[q][j] : 0.0;
              Je(j, i) += w * (m + dt * lam * (rho * gij + drho * ref.N[q][i] * gpj));
            }
          }
        }
      }
      if (F)
        for (int c = 0; c < nc; ++c)
          (*F)[static_cast<Eigen::Index>(nodes[c])] += Fe[c];
      if (J)
        assembler_.add(*J, cell, Je);
    }
  }

  StructuredGrid<Dim> grid_;
  PermeabilityField<Dim> perm_;
  FluidProps fluid_;
  SourceTerm<Dim> source_;
  DirichletData<Dim> dirichlet_;
  CellAssembler<Dim> assembler_;
  std::vector<double> mobility_;
  std::vector<Index> dirichlet_nodes_;
};

template <int Dim>
NonlinearForms assemble_nonlinear_forms(const StructuredGrid<Dim> &grid, const PermeabilityField<Dim> &perm,
                                        const FluidProps &fluid, const Vector &p)
{
  return FlowDiscretization<Dim>(grid, perm, fluid).forms(p);
}

struct ConstrainedSystem {
  SparseMatrix matrix;
  Vector rhs;
};

/**
 * @brief Symmetric elimination of prescribed nodal values.
 *
 * rhs is lifted by the eliminated columns, constrained rows and columns are
 * cleared with a unit diagonal and the prescribed value as right-hand side.
 */
template <int Dim>
ConstrainedSystem apply_dirichlet(const StructuredGrid<Dim> &grid, const SparseMatrix &op, const Vector &rhs,
                                  const std::vector<std::pair<Index, double>> &boundary_values)
{
  const Index n = grid.node_count();
  std::vector<char> is_d(n, 0);
  Vector g = Vector::Zero(static_cast<Eigen::Index>(n));
  for (auto [node, val] : boundary_values) {
    if (node >= n || !grid.is_dirichlet_node(node))
      throw ConfigError("apply_dirichlet: node " + std::to_string(node) + " is not on a Dirichlet face");
    is_d[node] = 1;
    g[static_cast<Eigen::Index>(node)] = val;
  }
  ConstrainedSystem out{op, rhs - op * g};
  for (int k = 0; k < out.matrix.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(out.matrix, k); it; ++it)
      if (is_d[static_cast<Index>(it.row())] || is_d[static_cast<Index>(it.col())])
        it.valueRef() = 0.0;
  out.matrix.prune(0.0);
  for (auto [node, val] : boundary_values) {
    out.matrix.coeffRef(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(node)) = 1.0;
    out.rhs[static_cast<Eigen::Index>(node)] = val;
  }
  out.matrix.makeCompressed();
  return out;
}

/// Principal submatrix on a sorted node list.
inline SparseMatrix restrict_to(const SparseMatrix &op, const std::vector<Index> &nodes)
{
  const auto m = static_cast<Eigen::Index>(nodes.size());
  std::vector<Eigen::Triplet<double>> trip;
  for (Eigen::Index lc = 0; lc < m; ++lc) {
    const auto col = static_cast<Eigen::Index>(nodes[static_cast<Index>(lc)]);
    for (SparseMatrix::InnerIterator it(op, col); it; ++it) {
      const auto r = static_cast<Index>(it.row());
      auto pos = std::lower_bound(nodes.begin(), nodes.end(), r);
      if (pos != nodes.end() && *pos == r)
        trip.emplace_back(static_cast<int>(pos - nodes.begin()), static_cast<int>(lc), it.value());
    }
  }
  SparseMatrix out(m, m);
  out.setFromTriplets(trip.begin(), trip.end());
  return out;
}

template <int Dim>
SparseMatrix restrict(const SparseMatrix &op, const Region<Dim> &region)
{
  return restrict_to(op, region.interior_nodes);
}

/// Max |A - A^T| relative to max |A|.
inline double symmetry_defect(const SparseMatrix &A)
{
  const SparseMatrix At = A.transpose();
  const SparseMatrix D = A - At;
  double dmax = 0.0, amax = 0.0;
  for (int k = 0; k < D.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(D, k); it; ++it)
      dmax = std::max(dmax, std::abs(it.value()));
  for (int k = 0; k < A.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(A, k); it; ++it)
      amax = std::max(amax, std::abs(it.value()));
  return amax > 0.0 ? dmax / amax : 0.0;
}

} // namespace cemgms
