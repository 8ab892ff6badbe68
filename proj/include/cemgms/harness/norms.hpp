#pragma once

/** @file norms.hpp
    @brief Time-aggregated relative L2 and energy errors between fine and multiscale solutions.
*/

#include "../fine_solver.hpp"

namespace cemgms {

struct ErrorNorms {
  double eps0 = 0.0;        ///< relative L2
  double eps1 = 0.0;        ///< weighted energy of the error over the L2 norm of the reference
  double eps1_energy = 0.0; ///< weighted energy of the error over the weighted energy of the reference
};

/// Mass matrix and kappa/mu rho(p0) stiffness used by the norms.
template <int Dim>
struct NormOperators {
  SparseMatrix mass;
  SparseMatrix energy;
};

template <int Dim>
NormOperators<Dim> norm_operators(const StructuredGrid<Dim> &grid, const PermeabilityField<Dim> &perm, const FluidProps &fluid,
                                  const Vector &p0)
{
  return {assemble_weighted_mass(grid, cellwise(std::vector<double>(grid.cell_count(), 1.0))),
          assemble_stiffness(grid, kappa_rho_field(grid, perm, fluid, p0, true))};
}

/// Sums run over time indices 1..N_t; the initial state is excluded.
template <int Dim>
ErrorNorms error_norms(const std::vector<Vector> &fine, const std::vector<Vector> &coarse, const NormOperators<Dim> &ops)
{
  if (fine.size() != coarse.size())
    throw ConfigError("error_norms: time grids differ (" + std::to_string(fine.size()) + " vs " + std::to_string(coarse.size()) +
                      " snapshots)");
  double num0 = 0.0, num1 = 0.0, den0 = 0.0, den1 = 0.0;
  for (Index n = 1; n < fine.size(); ++n) {
    if (fine[n].size() != coarse[n].size() || static_cast<Eigen::Index>(fine[n].size()) != ops.mass.rows())
      throw ConfigError("error_norms: snapshot size mismatch");
    const Vector e = fine[n] - coarse[n];
    num0 += e.dot(ops.mass * e);
    num1 += e.dot(ops.energy * e);
    den0 += fine[n].dot(ops.mass * fine[n]);
    den1 += fine[n].dot(ops.energy * fine[n]);
  }
  ErrorNorms out;
  if (den0 > 0.0) {
    out.eps0 = std::sqrt(std::max(0.0, num0) / den0);
    out.eps1 = std::sqrt(std::max(0.0, num1) / den0);
  }
  if (den1 > 0.0)
    out.eps1_energy = std::sqrt(std::max(0.0, num1) / den1);
  return out;
}

template <int Dim>
ErrorNorms error_norms(const TransientSolution &fine, const TransientSolution &coarse, const StructuredGrid<Dim> &grid,
                       const PermeabilityField<Dim> &perm, const FluidProps &fluid, const Vector &p0)
{
  return error_norms(fine.snapshots, coarse.snapshots, norm_operators(grid, perm, fluid, p0));
}

} // namespace cemgms
