#pragma once

/** @file spectral.hpp
    @brief Local generalized eigenproblems on coarse elements, the auxiliary space, the s-inner product and its projector.
*/

#include <Eigen/Eigenvalues>

#include "fem.hpp"

namespace cemgms {

/// Eigenpairs of one coarse element in the element's local node numbering.
struct ElementEigen {
  std::vector<Index> nodes;  ///< global ids, local lexicographic order
  SparseMatrix S;            ///< local weighted mass s_i
  Vector eigenvalues;        ///< ascending, retained count
  Eigen::MatrixXd vectors;   ///< S-orthonormal columns
  int L = 0;                 ///< functions used in the auxiliary space
  bool regularized = false;

  Index retained() const { return static_cast<Index>(eigenvalues.size()); }
};

/// Per-element auxiliary functions phi_j^(i); a function is stored only on its element (discontinuous across elements).
template <int Dim>
struct AuxiliarySpace {
  std::vector<ElementEigen> elements;

  Index element_count() const { return elements.size(); }

  Index size() const
  {
    Index n = 0;
    for (const auto &e : elements)
      n += static_cast<Index>(e.L);
    return n;
  }

  std::vector<int> counts() const
  {
    std::vector<int> out;
    for (const auto &e : elements)
      out.push_back(e.L);
    return out;
  }

  /// min over elements of the first excluded eigenvalue.
  double Lambda() const
  {
    double m = std::numeric_limits<double>::infinity();
    for (const auto &e : elements)
      m = std::min(m, e.eigenvalues[e.L]);
    return m;
  }

  /// Copy with new counts; counts must stay below the retained eigenpair count.
  AuxiliarySpace with_counts(const std::vector<int> &L) const
  {
    if (L.size() != elements.size())
      throw ConfigError("auxiliary space: count list size does not match the element count");
    AuxiliarySpace out = *this;
    for (Index i = 0; i < elements.size(); ++i) {
      if (L[i] < 1 || static_cast<Index>(L[i]) + 1 > elements[i].retained())
        throw ConfigError("auxiliary space: L = " + std::to_string(L[i]) + " on element " + std::to_string(i) +
                          " needs more eigenpairs than retained");
      out.elements[i].L = L[i];
    }
    return out;
  }
};

struct SpectralConfig {
  int spare = 2; ///< eigenpairs retained beyond L_i + 1 for later enrichment
};

namespace detail {

inline SparseMatrix dense_to_sparse(const Eigen::MatrixXd &A)
{
  SparseMatrix S = A.sparseView(0.0, 0.0);
  S.makeCompressed();
  return S;
}

} // namespace detail

/// Coefficient fields of the local pencil: stiffness kappa rho(p0) and weight rho(p0) kappa sum |grad chi|^2.
template <int Dim>
struct SpectralForms {
  QuadratureField stiffness;
  QuadratureField weight;
};

template <int Dim>
SpectralForms<Dim> spectral_forms(const StructuredGrid<Dim> &grid, const PermeabilityField<Dim> &perm, const FluidProps &fluid,
                                  const Vector &p0, const PartitionOfUnity<Dim> &pou)
{
  return {kappa_rho_field(grid, perm, fluid, p0, false), spectral_weight_field(grid, perm, fluid, p0, pou)};
}

/// Dense local stiffness and weighted mass of element i (natural boundary).
template <int Dim>
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> element_pencil(const CoarsePartition<Dim> &part, Index i, const SpectralForms<Dim> &forms)
{
  const auto &grid = part.grid();
  const auto box = part.element_node_box(i);
  const auto &cells = part.element_cells(i);
  auto A = assemble_dense_box(grid, cells, box, [&](Index c) {
    return stiffness_element<Dim>(grid.spacing(), detail::gather<Dim>(forms.stiffness, c));
  });
  auto S = assemble_dense_box(grid, cells, box, [&](Index c) {
    return mass_element<Dim>(grid.spacing(), detail::gather<Dim>(forms.weight, c));
  });
  return {std::move(A), std::move(S)};
}

/// Solves A_i phi = lambda S_i phi densely and keeps the `retain` smallest pairs.
template <int Dim>
ElementEigen local_eigenproblem(const CoarsePartition<Dim> &part, Index i, const SpectralForms<Dim> &forms, Index retain, int L)
{
  auto [A, S] = element_pencil(part, i, forms);
  const auto n = static_cast<Index>(A.rows());
  if (retain > n)
    throw ConfigError("spectral: element " + std::to_string(i) + " has " + std::to_string(n) + " dofs, fewer than the " +
                      std::to_string(retain) + " eigenpairs requested");
  ElementEigen out;
  out.nodes = part.element_nodes(i);
  out.L = L;
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) {
    const double eps = 1e-12 * S.trace() / static_cast<double>(n);
    S.diagonal().array() += eps;
    out.regularized = true;
    warn("spectral: weighted mass of element " + std::to_string(i) + " is singular, shifted by " + std::to_string(eps));
  }
  A = 0.5 * (A + A.transpose()).eval();
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(A, S, Eigen::ComputeEigenvectors | Eigen::Ax_lBx);
  if (es.info() != Eigen::Success)
    throw SolverError("spectral: eigensolver failed on element " + std::to_string(i));
  const auto r = static_cast<Eigen::Index>(retain);
  out.eigenvalues = es.eigenvalues().head(r);
  out.vectors = es.eigenvectors().leftCols(r);
  // the constant-kernel eigenvalue comes out as roundoff of either sign
  for (Eigen::Index k = 0; k < r; ++k)
    out.eigenvalues[k] = std::max(0.0, out.eigenvalues[k]);
  // fix the sign of each eigenvector for reproducibility: largest-magnitude entry positive
  for (Eigen::Index k = 0; k < r; ++k) {
    Eigen::Index arg;
    out.vectors.col(k).cwiseAbs().maxCoeff(&arg);
    if (out.vectors(arg, k) < 0.0)
      out.vectors.col(k) *= -1.0;
  }
  out.S = detail::dense_to_sparse(S);
  return out;
}

/// Auxiliary space with uniform or per-element counts; eigenproblems run in parallel over elements.
template <int Dim>
AuxiliarySpace<Dim> build_auxiliary_space(const CoarsePartition<Dim> &part, const SpectralForms<Dim> &forms,
                                          const std::vector<int> &L, const SpectralConfig &cfg = {})
{
  const Index ne = part.element_count();
  if (L.size() != ne && L.size() != 1)
    throw ConfigError("spectral: expected one count or one count per element");
  AuxiliarySpace<Dim> aux;
  aux.elements.resize(ne);
  parallel_for(ne, [&](Index i) {
    const int Li = L.size() == 1 ? L[0] : L[i];
    if (Li < 1)
      throw ConfigError("spectral: L_i must be >= 1");
    const Index dofs = part.element_node_box(i).count();
    if (static_cast<Index>(Li) + 1 > dofs)
      throw ConfigError("spectral: L_i + 1 = " + std::to_string(Li + 1) + " exceeds the " + std::to_string(dofs) +
                        " dofs of element " + std::to_string(i));
    const Index retain = std::min<Index>(dofs, static_cast<Index>(Li + 1 + std::max(0, cfg.spare)));
    aux.elements[i] = local_eigenproblem(part, i, forms, retain, Li);
  });
  return aux;
}

template <int Dim>
AuxiliarySpace<Dim> build_auxiliary_space(const CoarsePartition<Dim> &part, const PermeabilityField<Dim> &perm,
                                          const FluidProps &fluid, const Vector &p0, const PartitionOfUnity<Dim> &pou, int L,
                                          const SpectralConfig &cfg = {})
{
  return build_auxiliary_space(part, spectral_forms(part.grid(), perm, fluid, p0, pou), std::vector<int>{L}, cfg);
}

/// Field stored separately on every coarse element (element-local numbering), discontinuous across elements.
using BrokenField = std::vector<Vector>;

template <int Dim>
BrokenField to_broken(const AuxiliarySpace<Dim> &aux, const Vector &v)
{
  BrokenField out(aux.element_count());
  for (Index i = 0; i < aux.element_count(); ++i) {
    const auto &nodes = aux.elements[i].nodes;
    out[i].resize(static_cast<Eigen::Index>(nodes.size()));
    for (Index k = 0; k < nodes.size(); ++k)
      out[i][static_cast<Eigen::Index>(k)] = v[static_cast<Eigen::Index>(nodes[k])];
  }
  return out;
}

/// phi_j^(i) as a broken field (zero on every other element).
template <int Dim>
BrokenField auxiliary_function(const AuxiliarySpace<Dim> &aux, Index i, int j)
{
  BrokenField out(aux.element_count());
  for (Index e = 0; e < aux.element_count(); ++e)
    out[e] = Vector::Zero(static_cast<Eigen::Index>(aux.elements[e].nodes.size()));
  out[i] = aux.elements[i].vectors.col(j);
  return out;
}

/// s(u, v) = sum_i s_i(u|K_i, v|K_i).
template <int Dim>
double s_inner(const AuxiliarySpace<Dim> &aux, const BrokenField &u, const BrokenField &v)
{
  double s = 0.0;
  for (Index i = 0; i < aux.element_count(); ++i)
    s += u[i].dot(aux.elements[i].S * v[i]);
  return s;
}

/// pi(v) = sum_i sum_{j < L_i} s_i(v, phi_j) phi_j.
template <int Dim>
BrokenField pi_project(const AuxiliarySpace<Dim> &aux, const BrokenField &v)
{
  BrokenField out(aux.element_count());
  for (Index i = 0; i < aux.element_count(); ++i) {
    const auto &el = aux.elements[i];
    const auto Phi = el.vectors.leftCols(el.L);
    const Vector coeff = Phi.transpose() * (el.S * v[i]);
    out[i] = Phi * coeff;
  }
  return out;
}

template <int Dim>
BrokenField pi_project(const AuxiliarySpace<Dim> &aux, const Vector &v)
{
  return pi_project(aux, to_broken(aux, v));
}

} // namespace cemgms
