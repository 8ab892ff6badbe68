#pragma once

// Manufactured solutions for the fine solver on the unit-length square, Dirichlet on every side.
//   p(x, y, t) = p_ref + A g(t) (x / L + sin(pi x / L) sin(pi y / L)),  g(t) = exp(-t / T0) (g = 1 when steady).
// With rho grad p = grad rho / c the source is
//   q = phi rho c dp/dt - lambda rho (lap p + c |grad p|^2).

#include <cmath>
#include <numbers>

#include <cemgms/fine_solver.hpp>

namespace mms {

using namespace cemgms;

struct Case {
  double L = 100.0;  // m
  double A = 5.0e6;  // Pa
  double T0 = 0.0;   // s; 0 means steady
  double kappa_md = 100.0;
  FluidProps fluid{};

  double lambda() const { return kappa_md * kMilliDarcy / fluid.viscosity; }
  double g(double t) const { return T0 > 0.0 ? std::exp(-t / T0) : 1.0; }
  double dg(double t) const { return T0 > 0.0 ? -std::exp(-t / T0) / T0 : 0.0; }

  double shape(const Point<2> &x) const
  {
    const double k = std::numbers::pi / L;
    return x[0] / L + std::sin(k * x[0]) * std::sin(k * x[1]);
  }

  double exact(const Point<2> &x, double t) const { return fluid.p_ref + A * g(t) * shape(x); }

  double source(const Point<2> &x, double t) const
  {
    const double k = std::numbers::pi / L;
    const double sx = std::sin(k * x[0]), cx = std::cos(k * x[0]);
    const double sy = std::sin(k * x[1]), cy = std::cos(k * x[1]);
    const double a = A * g(t);
    const double px = a * (1.0 / L + k * cx * sy), py = a * (k * sx * cy);
    const double lap = -2.0 * k * k * a * sx * sy;
    const double p = exact(x, t);
    const double rho = density(p, fluid);
    const double c = fluid.compressibility;
    const double dpdt = A * dg(t) * shape(x);
    return fluid.porosity * rho * c * dpdt - lambda() * rho * (lap + c * (px * px + py * py));
  }

  StructuredGrid<2> grid(int n) const
  {
    std::array<BoundaryTag, 4> tags;
    tags.fill(BoundaryTag::Dirichlet);
    return build_fine_grid<2>({n, n}, L / n, tags);
  }

  FlowDiscretization<2> discretization(const StructuredGrid<2> &g) const
  {
    SourceTerm<2> src;
    src.field = [c = *this](const Point<2> &x, double t) { return c.source(x, t); };
    DirichletData<2> bc;
    bc.profile = [c = *this](const Point<2> &x, double t) { return c.exact(x, t); };
    return FlowDiscretization<2>(g, uniform_field<2>(g.dims(), kappa_md), fluid, std::move(src), std::move(bc));
  }

  Vector interpolant(const StructuredGrid<2> &g, double t) const
  {
    Vector v(static_cast<Eigen::Index>(g.node_count()));
    for (Index n = 0; n < g.node_count(); ++n)
      v[static_cast<Eigen::Index>(n)] = exact(g.node_point(n), t);
    return v;
  }
};

inline double l2_norm(const StructuredGrid<2> &g, const Vector &v)
{
  const SparseMatrix M = assemble_weighted_mass(g, cellwise(std::vector<double>(g.cell_count(), 1.0)));
  return std::sqrt(v.dot(M * v));
}

inline NewtonConfig tight()
{
  NewtonConfig cfg;
  cfg.tol = 1e-12;
  cfg.max_iters = 30;
  return cfg;
}

/// L2 error of the steady discrete solution on an n x n grid.
inline double steady_error(const Case &c, int n)
{
  const auto g = c.grid(n);
  const auto disc = c.discretization(g);
  const Vector guess = Vector::Constant(static_cast<Eigen::Index>(g.node_count()), c.fluid.p_ref);
  const Vector p = solve_steady(disc, guess, tight());
  return l2_norm(g, p - c.interpolant(g, 0.0));
}

/// L2 error at the final time T after `steps` uniform backward Euler steps on an n x n grid.
inline double transient_error(const Case &c, int n, int steps, double T)
{
  const auto g = c.grid(n);
  const auto disc = c.discretization(g);
  const auto sol = solve_transient(disc, c.interpolant(g, 0.0), TimeGrid::uniform(T / steps, steps), tight());
  return l2_norm(g, sol.snapshots.back() - c.interpolant(g, T));
}

inline double rate(double coarse, double fine) { return std::log2(coarse / fine); }

} // namespace mms
