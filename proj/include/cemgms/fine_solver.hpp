#pragma once

/** @file fine_solver.hpp
    @brief Backward Euler / Newton-Raphson reference solver on the fine grid.
*/

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseLU>

#include "fem.hpp"

namespace cemgms {

struct TimeGrid {
  std::vector<double> dt; ///< seconds, one per step

  static TimeGrid uniform(double step, int steps)
  {
    if (!(step > 0.0) || steps < 0)
      throw ConfigError("time grid: step must be positive and step count nonnegative");
    return TimeGrid{std::vector<double>(static_cast<Index>(steps), step)};
  }

  Index steps() const { return dt.size(); }

  /// Time at the end of step n (t_0 = 0).
  double time(Index n) const
  {
    double t = 0.0;
    for (Index k = 0; k < n; ++k)
      t += dt[k];
    return t;
  }

  double total() const { return time(dt.size()); }

  void validate() const
  {
    for (double d : dt)
      if (!(d > 0.0) || !std::isfinite(d))
        throw ConfigError("time grid: every step must be positive");
  }

  bool operator==(const TimeGrid &) const = default;
};

inline constexpr double kSecondsPerDay = 86400.0;

struct NewtonConfig {
  double tol = 1.0e-6;        ///< reduction of the step's initial residual
  double roundoff = 1.0e-14;  ///< residual floor relative to the step's accumulation scale
  double stagnation = 1.0e-13; ///< stop once a correction moves the iterate less than this, relatively
  int max_iters = 20;
  double damping = 1.0;
  int max_halvings = 5;
  double linear_tol = 1.0e-10;
  Index direct_limit = 60000; ///< larger systems use preconditioned BiCGSTAB

  void validate() const
  {
    if (!(tol > 0.0))
      throw ConfigError("newton: tol must be positive");
    if (!(roundoff >= 0.0) || !(stagnation >= 0.0))
      throw ConfigError("newton: roundoff and stagnation must be nonnegative");
    if (max_iters < 1)
      throw ConfigError("newton: max_iters must be >= 1");
    if (!(damping > 0.0 && damping <= 1.0))
      throw ConfigError("newton: damping must lie in (0, 1]");
  }
};

struct TransientSolution {
  std::vector<Vector> snapshots;                   ///< index 0 is the initial state
  std::vector<int> newton_iters;                   ///< per step
  std::vector<std::vector<double>> residual_norms; ///< per step, one entry per iterate

  Index steps() const { return newton_iters.size(); }
};

/// Newton diverged or stalled; carries the last iterate.
class NewtonFailure : public SolverError {
public:
  NewtonFailure(const std::string &msg, Vector last, Index step) : SolverError(msg), last_iterate(std::move(last)), step(step) {}
  Vector last_iterate;
  Index step;
};

/// Sparse linear solve with relative residual check; direct LU up to a size limit.
class LinearSolver {
public:
  explicit LinearSolver(double tol = 1e-10, Index direct_limit = 60000) : tol_(tol), direct_limit_(direct_limit) {}

  Vector solve(const SparseMatrix &A, const Vector &b)
  {
    if (b.norm() == 0.0)
      return Vector::Zero(b.size());
    Vector x;
    if (static_cast<Index>(A.rows()) <= direct_limit_) {
      if (!analyzed_ || pattern_rows_ != A.rows() || pattern_nnz_ != A.nonZeros()) {
        lu_.analyzePattern(A);
        analyzed_ = true;
        pattern_rows_ = A.rows();
        pattern_nnz_ = A.nonZeros();
      }
      lu_.factorize(A);
      if (lu_.info() != Eigen::Success)
        throw SolverError("linear solve: sparse LU factorization failed (singular Jacobian?) n = " + std::to_string(A.rows()));
      x = lu_.solve(b);
    }
    else {
      Eigen::BiCGSTAB<SparseMatrix, Eigen::IncompleteLUT<double>> it;
      it.setTolerance(tol_ * 0.1);
      it.setMaxIterations(5000);
      it.compute(A);
      if (it.info() != Eigen::Success)
        throw SolverError("linear solve: preconditioner setup failed");
      x = it.solve(b);
    }
    const double rel = (A * x - b).norm() / b.norm();
    if (!std::isfinite(rel) || rel > tol_)
      throw SolverError("linear solve: relative residual " + std::to_string(rel) + " exceeds " + std::to_string(tol_));
    return x;
  }

private:
  double tol_;
  Index direct_limit_;
  Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>> lu_;
  bool analyzed_ = false;
  Eigen::Index pattern_rows_ = 0, pattern_nnz_ = 0;
};

/**
 * @brief Damped Newton iteration driven by callbacks.
 *
 * linearize(x) returns (F, J) and residual(x) returns F. Iterates until
 * ||F|| <= max(tol * ||F(x0)||, roundoff * scale), or until a correction no longer moves
 * the iterate (residual at roundoff). A step whose residual grows is halved
 * up to max_halvings times. Returns the iterate; fills the residual history.
 */
template <class Linearize, class Residual>
Vector newton_solve(Linearize &&linearize, Residual &&residual, Vector x, const NewtonConfig &cfg, double scale,
                    LinearSolver &solver, std::vector<double> &history, int &iterations, Index step_label = 0)
{
  history.clear();
  iterations = 0;
  double r = residual(x).norm();
  history.push_back(r);
  const double target = std::max(cfg.tol * r, cfg.roundoff * scale);
  while (!(r <= target)) {
    // the Jacobian is formed only when another correction is needed
    auto [F, J] = linearize(x);
    if (iterations >= cfg.max_iters)
      throw NewtonFailure("newton: no convergence in " + std::to_string(cfg.max_iters) + " iterations at step " +
                              std::to_string(step_label) + " (residual " + std::to_string(r) + ", target " +
                              std::to_string(target) + ")",
                          x, step_label);
    const Vector dx = solver.solve(J, -F);
    double alpha = cfg.damping;
    Vector trial = x + alpha * dx;
    double r_trial = residual(trial).norm();
    for (int h = 0; h < cfg.max_halvings && !(r_trial < r); ++h) {
      alpha *= 0.5;
      trial = x + alpha * dx;
      r_trial = residual(trial).norm();
    }
    if (!std::isfinite(r_trial))
      throw NewtonFailure("newton: non-finite residual at step " + std::to_string(step_label), x, step_label);
    const double step = alpha * dx.norm();
    x = std::move(trial);
    ++iterations;
    r = r_trial;
    history.push_back(r);
    // the residual sits at roundoff once corrections stop moving the iterate
    if (step <= cfg.stagnation * x.norm())
      break;
  }
  return x;
}

/// Step residual (Dirichlet rows zeroed).
template <int Dim>
Vector residual(const FlowDiscretization<Dim> &disc, const Vector &p_new, const Vector &p_old, double dt, double t)
{
  return disc.residual(p_new, p_old, dt, t, true);
}

struct NewtonStep {
  Vector delta;
  double residual_norm = 0.0;
};

/// One undamped Newton correction for the backward Euler step.
template <int Dim>
NewtonStep newton_step(const FlowDiscretization<Dim> &disc, const Vector &p_guess, const Vector &p_old, double dt, double t,
                       const NewtonConfig &cfg = {})
{
  auto [F, J] = disc.linearize(p_guess, p_old, dt, t);
  LinearSolver solver(cfg.linear_tol, cfg.direct_limit);
  return {solver.solve(J, -F), F.norm()};
}

/// Residual scale of a step: the accumulation term (phi rho(p_old), eta) without the constrained rows.
template <int Dim>
double step_scale(const FlowDiscretization<Dim> &disc, const Vector &p_old)
{
  Vector a = disc.accumulation(p_old);
  for (Index n : disc.dirichlet_nodes())
    a[static_cast<Eigen::Index>(n)] = 0.0;
  return a.norm();
}

template <int Dim>
TransientSolution solve_transient(const FlowDiscretization<Dim> &disc, const Vector &p0, const TimeGrid &time,
                                  const NewtonConfig &cfg = {})
{
  cfg.validate();
  time.validate();
  const auto &grid = disc.grid();
  if (static_cast<Index>(p0.size()) != grid.node_count())
    throw ConfigError("solve_transient: initial state size does not match the grid");
  TransientSolution sol;
  sol.snapshots.push_back(p0);
  LinearSolver solver(cfg.linear_tol, cfg.direct_limit);
  double t = 0.0;
  for (Index n = 0; n < time.steps(); ++n) {
    const double dt = time.dt[n];
    t += dt;
    const Vector &p_old = sol.snapshots.back();
    Vector guess = p_old;
    disc.dirichlet().impose(grid, guess, t);
    std::vector<double> hist;
    int iters = 0;
    Vector p = newton_solve([&](const Vector &x) { return disc.linearize(x, p_old, dt, t); },
                            [&](const Vector &x) { return disc.residual(x, p_old, dt, t, true); }, std::move(guess), cfg,
                            step_scale(disc, p_old), solver, hist, iters, n + 1);
    sol.snapshots.push_back(std::move(p));
    sol.newton_iters.push_back(iters);
    sol.residual_norms.push_back(std::move(hist));
  }
  return sol;
}

/// Steady state of the flux/source balance; scale is the norm of the source load or the guess's flux residual.
template <int Dim>
Vector solve_steady(const FlowDiscretization<Dim> &disc, const Vector &guess, const NewtonConfig &cfg = {}, double t = 0.0,
                    int *iterations = nullptr)
{
  cfg.validate();
  const auto &grid = disc.grid();
  if (static_cast<Index>(guess.size()) != grid.node_count())
    throw ConfigError("solve_steady: guess size does not match the grid");
  Vector x = guess;
  disc.dirichlet().impose(grid, x, t);
  LinearSolver solver(cfg.linear_tol, cfg.direct_limit);
  std::vector<double> hist;
  int iters = 0;
  // load scale: the flux term of the constant state is zero, so this is the source load alone
  const Vector constant = Vector::Constant(x.size(), x.mean());
  const double scale = disc.steady_residual(constant, t, true).norm();
  x = newton_solve([&](const Vector &v) { return disc.linearize_steady(v, t); },
                   [&](const Vector &v) { return disc.steady_residual(v, t, true); }, std::move(x), cfg, scale, solver, hist,
                   iters);
  if (iterations)
    *iterations = iters;
  return x;
}

/// Observed order of convergence log(r_{k+1}/r_k) / log(r_k/r_{k-1}) on the last three entries of a history.
inline double convergence_order(const std::vector<double> &h)
{
  if (h.size() < 3)
    return std::numeric_limits<double>::quiet_NaN();
  const double a = h[h.size() - 3], b = h[h.size() - 2], c = h[h.size() - 1];
  return std::log(c / b) / std::log(b / a);
}

} // namespace cemgms
