#pragma once

#include <memory>

/** @file estimator.hpp
    @brief Residual functional of the multiscale solution, local dual-norm indicators on coarse neighborhoods and Dörfler enrichment.
*/

#include <map>
#include <numeric>

#include <Eigen/SparseCholesky>

#include "cem.hpp"

namespace cemgms {

/**
 * @brief R_n(v) = (phi rho(p_n), v) - (phi rho(p_{n-1}), v) + dt (kappa/mu rho(p_n) grad p_n, grad v) - dt (q, v).
 *
 * Returned as the vector r with R_n(v) = r . v; rows of Dirichlet nodes are zero (test functions vanish there).
 */
template <int Dim>
Vector residual_functional(const FlowDiscretization<Dim> &disc, const Vector &p_n, const Vector &p_prev, double dt, double t)
{
  return disc.residual(p_n, p_prev, dt, t, true);
}

/// Riesz solver on one neighborhood: G = M + dt K_{kappa/mu} on the interior nodes of omega_k.
struct NeighborhoodNorm {
  std::vector<Index> nodes;
  std::vector<double> chi; ///< chi_k at the nodes
  SparseMatrix G;
  Eigen::SimplicialLLT<SparseMatrix> llt;
};

struct LocalIndicator {
  double value = 0.0; ///< ||r_k||_{V_k*}
  Vector z;           ///< Riesz representer on the neighborhood nodes
  Vector load;        ///< r_k(eta_j) on the neighborhood nodes
};

template <int Dim>
class IndicatorContext {
public:
  IndicatorContext(const FlowDiscretization<Dim> &disc, const CoarsePartition<Dim> &part, const PartitionOfUnity<Dim> &pou)
    : disc_(disc), part_(part), pou_(pou)
  {
    const auto &grid = disc.grid();
    mass_ = assemble_weighted_mass(grid, cellwise(std::vector<double>(grid.cell_count(), 1.0)));
    std::vector<double> mob(grid.cell_count());
    for (Index c = 0; c < grid.cell_count(); ++c)
      mob[c] = disc.mobility(c);
    stiff_ = assemble_stiffness(grid, cellwise(std::move(mob)));
  }

  Index neighborhood_count() const { return part_.coarse_node_count(); }

  /// Factorizations are cached per distinct dt.
  const std::vector<NeighborhoodNorm> &norms(double dt) const
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(dt);
    if (it != cache_.end())
      return *it->second;
    auto v = std::make_unique<std::vector<NeighborhoodNorm>>(neighborhood_count());
    const SparseMatrix G = mass_ + dt * stiff_;
    parallel_for(neighborhood_count(), [&](Index k) {
      auto &nn = (*v)[k];
      const auto region = neighborhood_region(part_, k);
      nn.nodes = region.interior_nodes;
      const auto &chi = pou_.chi[k];
      nn.chi.resize(nn.nodes.size());
      for (Index a = 0; a < nn.nodes.size(); ++a) {
        auto pos = std::lower_bound(chi.begin(), chi.end(), std::make_pair(nn.nodes[a], -1.0));
        nn.chi[a] = (pos != chi.end() && pos->first == nn.nodes[a]) ? pos->second : 0.0;
      }
      if (!nn.nodes.empty()) {
        nn.G = restrict_to(G, nn.nodes);
        nn.llt.compute(nn.G);
        if (nn.llt.info() != Eigen::Success)
          throw SolverError("indicator: neighborhood norm matrix is not SPD at coarse node " + std::to_string(k));
      }
    });
    auto &ref = *v;
    cache_.emplace(dt, std::move(v));
    return ref;
  }

  /// Local functional r_k(v) = R(I_h(chi_k v)) for v supported on the neighborhood, as a load on its nodes.
  Vector local_load(const Vector &r, Index k, double dt) const
  {
    const auto &nn = norms(dt)[k];
    Vector b(static_cast<Eigen::Index>(nn.nodes.size()));
    for (Index a = 0; a < nn.nodes.size(); ++a)
      b[static_cast<Eigen::Index>(a)] = nn.chi[a] * r[static_cast<Eigen::Index>(nn.nodes[a])];
    return b;
  }

  LocalIndicator local(const Vector &r, Index k, double dt) const
  {
    const auto &nn = norms(dt)[k];
    LocalIndicator out;
    out.load = local_load(r, k, dt);
    if (nn.nodes.empty()) {
      warn("indicator: neighborhood " + std::to_string(k) + " has no interior nodes");
      return out;
    }
    out.z = nn.llt.solve(out.load);
    out.value = std::sqrt(std::max(0.0, out.z.dot(nn.G * out.z)));
    return out;
  }

  const FlowDiscretization<Dim> &disc() const { return disc_; }
  const SparseMatrix &l2_mass() const { return mass_; }
  const SparseMatrix &mobility_stiffness() const { return stiff_; }

private:
  const FlowDiscretization<Dim> &disc_;
  const CoarsePartition<Dim> &part_;
  const PartitionOfUnity<Dim> &pou_;
  SparseMatrix mass_, stiff_;
  mutable std::mutex mutex_;
  mutable std::map<double, std::unique_ptr<std::vector<NeighborhoodNorm>>> cache_;
};

/// Indicator for step n of a coarse solution.
template <int Dim>
double local_indicator(const IndicatorContext<Dim> &ctx, const TransientSolution &coarse, const TimeGrid &time, Index n, Index k)
{
  if (n < 1 || n > time.steps())
    throw ConfigError("local_indicator: step index out of range");
  const double dt = time.dt[n - 1];
  const Vector r = residual_functional(ctx.disc(), coarse.snapshots[n], coarse.snapshots[n - 1], dt, time.time(n));
  return ctx.local(r, k, dt).value;
}

struct IndicatorReport {
  std::vector<std::vector<double>> values; ///< [step-1][neighborhood]
  std::vector<double> aggregated;          ///< sum over steps of squared indicators, per neighborhood
  double total = 0.0;                      ///< sum over steps and neighborhoods of squared indicators
};

template <int Dim>
IndicatorReport compute_indicators(const IndicatorContext<Dim> &ctx, const TransientSolution &coarse, const TimeGrid &time)
{
  IndicatorReport rep;
  const Index nk = ctx.neighborhood_count();
  rep.values.assign(time.steps(), std::vector<double>(nk, 0.0));
  rep.aggregated.assign(nk, 0.0);
  for (Index n = 1; n <= time.steps(); ++n) {
    const double dt = time.dt[n - 1];
    const Vector r = residual_functional(ctx.disc(), coarse.snapshots[n], coarse.snapshots[n - 1], dt, time.time(n));
    ctx.norms(dt);
    parallel_for(nk, [&](Index k) { rep.values[n - 1][k] = ctx.local(r, k, dt).value; });
  }
  for (Index n = 0; n < rep.values.size(); ++n)
    for (Index k = 0; k < nk; ++k)
      rep.aggregated[k] += rep.values[n][k] * rep.values[n][k];
  for (double a : rep.aggregated)
    rep.total += a;
  return rep;
}

struct EnrichmentResult {
  std::vector<int> counts;        ///< new L_i per element
  std::vector<Index> marked;      ///< marked neighborhoods, in marking order
  bool capped = false;            ///< some element could not grow for lack of retained eigenpairs
};

/// Dörfler marking on aggregated indicators: largest first, ties by index, until theta of the total is reached.
inline std::vector<Index> dorfler_mark(const std::vector<double> &eta_sq, double theta)
{
  if (!(theta > 0.0 && theta <= 1.0))
    throw ConfigError("enrich: theta must lie in (0, 1]");
  std::vector<Index> order(eta_sq.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return eta_sq[a] > eta_sq[b]; });
  double total = 0.0;
  for (Index k : order)
    total += eta_sq[k];
  std::vector<Index> marked;
  if (!(total > 0.0))
    return marked;
  const double target = theta * total;
  double acc = 0.0;
  for (Index k : order) {
    if (acc >= target || !(eta_sq[k] > 0.0))
      break;
    acc += eta_sq[k];
    marked.push_back(k);
  }
  return marked;
}

template <int Dim>
EnrichmentResult enrich(const CoarsePartition<Dim> &part, const AuxiliarySpace<Dim> &aux, const IndicatorReport &report, double theta)
{
  EnrichmentResult out;
  out.counts = aux.counts();
  out.marked = dorfler_mark(report.aggregated, theta);
  std::vector<char> touched(aux.element_count(), 0);
  for (Index k : out.marked)
    for (Index e : part.neighborhood_elements(k))
      touched[e] = 1;
  for (Index e = 0; e < aux.element_count(); ++e) {
    if (!touched[e])
      continue;
    if (static_cast<Index>(out.counts[e]) + 2 > aux.elements[e].retained()) {
      out.capped = true;
      continue;
    }
    ++out.counts[e];
  }
  if (out.capped)
    warn("enrich: some elements lack retained eigenpairs and were not enriched");
  return out;
}

} // namespace cemgms
