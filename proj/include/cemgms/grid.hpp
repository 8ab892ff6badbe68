#pragma once

/** @file grid.hpp
    @brief Structured tensor-product fine grids, coarse agglomeration, oversampling windows and the coarse partition of unity.

    Nodes and cells are numbered lexicographically with the x index running fastest.
    Boundary face f = 2*a is the lower face of axis a, f = 2*a + 1 the upper one.
*/

#include <cmath>
#include <numeric>
#include <string>

#include "core.hpp"

namespace cemgms {

enum class BoundaryTag { Neumann, Dirichlet };

template <int Dim>
using BoundaryTags = std::array<BoundaryTag, 2 * Dim>;

template <int Dim>
inline BoundaryTags<Dim> all_neumann()
{
  BoundaryTags<Dim> t;
  t.fill(BoundaryTag::Neumann);
  return t;
}

/// Inclusive box of node multi-indices with its own lexicographic numbering.
template <int Dim>
struct NodeBox {
  MultiIndex<Dim> lo{};
  MultiIndex<Dim> hi{};

  int extent(int a) const { return hi[a] - lo[a] + 1; }

  Index count() const
  {
    Index n = 1;
    for (int a = 0; a < Dim; ++a)
      n *= static_cast<Index>(extent(a));
    return n;
  }

  bool contains(const MultiIndex<Dim> &m) const
  {
    for (int a = 0; a < Dim; ++a)
      if (m[a] < lo[a] || m[a] > hi[a])
        return false;
    return true;
  }

  Index local(const MultiIndex<Dim> &m) const
  {
    Index idx = 0;
    for (int a = Dim - 1; a >= 0; --a)
      idx = idx * static_cast<Index>(extent(a)) + static_cast<Index>(m[a] - lo[a]);
    return idx;
  }
};

template <int Dim>
class StructuredGrid {
public:
  StructuredGrid() = default;

  StructuredGrid(MultiIndex<Dim> dims, Point<Dim> spacing, BoundaryTags<Dim> tags)
    : dims_(dims), spacing_(spacing), tags_(tags)
  {
    for (int a = 0; a < Dim; ++a) {
      if (dims_[a] < 1)
        throw ConfigError("grid: cell count must be >= 1 on every axis");
      if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a]))
        throw ConfigError("grid: spacing must be positive and finite");
    }
  }

  const MultiIndex<Dim> &dims() const { return dims_; }
  const Point<Dim> &spacing() const { return spacing_; }
  const BoundaryTags<Dim> &boundary_tags() const { return tags_; }

  int nodes_along(int a) const { return dims_[a] + 1; }

  Index node_count() const
  {
    Index n = 1;
    for (int a = 0; a < Dim; ++a)
      n *= static_cast<Index>(dims_[a] + 1);
    return n;
  }

  Index cell_count() const
  {
    Index n = 1;
    for (int a = 0; a < Dim; ++a)
      n *= static_cast<Index>(dims_[a]);
    return n;
  }

  double cell_volume() const
  {
    double v = 1.0;
    for (int a = 0; a < Dim; ++a)
      v *= spacing_[a];
    return v;
  }

  double extent(int a) const { return dims_[a] * spacing_[a]; }

  Index node_index(const MultiIndex<Dim> &m) const
  {
    Index idx = 0;
    for (int a = Dim - 1; a >= 0; --a)
      idx = idx * static_cast<Index>(dims_[a] + 1) + static_cast<Index>(m[a]);
    return idx;
  }

  MultiIndex<Dim> node_multi(Index idx) const
  {
    MultiIndex<Dim> m;
    for (int a = 0; a < Dim; ++a) {
      const auto n = static_cast<Index>(dims_[a] + 1);
      m[a] = static_cast<int>(idx % n);
      idx /= n;
    }
    return m;
  }

  Point<Dim> node_point(Index idx) const
  {
    const auto m = node_multi(idx);
    Point<Dim> x;
    for (int a = 0; a < Dim; ++a)
      x[a] = m[a] * spacing_[a];
    return x;
  }

  Index cell_index(const MultiIndex<Dim> &m) const
  {
    Index idx = 0;
    for (int a = Dim - 1; a >= 0; --a)
      idx = idx * static_cast<Index>(dims_[a]) + static_cast<Index>(m[a]);
    return idx;
  }

  MultiIndex<Dim> cell_multi(Index idx) const
  {
    MultiIndex<Dim> m;
    for (int a = 0; a < Dim; ++a) {
      const auto n = static_cast<Index>(dims_[a]);
      m[a] = static_cast<int>(idx % n);
      idx /= n;
    }
    return m;
  }

  Point<Dim> cell_origin(Index cell) const
  {
    const auto m = cell_multi(cell);
    Point<Dim> x;
    for (int a = 0; a < Dim; ++a)
      x[a] = m[a] * spacing_[a];
    return x;
  }

  /// Global node ids of a cell's corners; bit a of the local corner id selects the upper side of axis a.
  std::array<Index, corners_per_cell<Dim>()> cell_nodes(Index cell) const
  {
    const auto m = cell_multi(cell);
    std::array<Index, corners_per_cell<Dim>()> out;
    for (int c = 0; c < corners_per_cell<Dim>(); ++c) {
      MultiIndex<Dim> n = m;
      for (int a = 0; a < Dim; ++a)
        n[a] += (c >> a) & 1;
      out[c] = node_index(n);
    }
    return out;
  }

  bool on_face(const MultiIndex<Dim> &m, int face) const
  {
    const int a = face / 2;
    return (face % 2 == 0) ? m[a] == 0 : m[a] == dims_[a];
  }

  bool is_boundary_node(Index idx) const
  {
    const auto m = node_multi(idx);
    for (int f = 0; f < 2 * Dim; ++f)
      if (on_face(m, f))
        return true;
    return false;
  }

  bool is_dirichlet_node(Index idx) const { return is_dirichlet_node(node_multi(idx)); }

  bool is_dirichlet_node(const MultiIndex<Dim> &m) const
  {
    for (int f = 0; f < 2 * Dim; ++f)
      if (tags_[f] == BoundaryTag::Dirichlet && on_face(m, f))
        return true;
    return false;
  }

  bool has_dirichlet() const
  {
    return std::any_of(tags_.begin(), tags_.end(), [](BoundaryTag t) { return t == BoundaryTag::Dirichlet; });
  }

  std::vector<Index> dirichlet_nodes() const
  {
    std::vector<Index> out;
    if (!has_dirichlet())
      return out;
    for (Index i = 0; i < node_count(); ++i)
      if (is_dirichlet_node(i))
        out.push_back(i);
    return out;
  }

  bool operator==(const StructuredGrid &) const = default;

private:
  MultiIndex<Dim> dims_{};
  Point<Dim> spacing_{};
  BoundaryTags<Dim> tags_{};
};

template <int Dim>
StructuredGrid<Dim> build_fine_grid(const MultiIndex<Dim> &dims, const Point<Dim> &spacing,
                                    const BoundaryTags<Dim> &tags = all_neumann<Dim>())
{
  return StructuredGrid<Dim>(dims, spacing, tags);
}

template <int Dim>
StructuredGrid<Dim> build_fine_grid(const MultiIndex<Dim> &dims, double spacing,
                                    const BoundaryTags<Dim> &tags = all_neumann<Dim>())
{
  Point<Dim> s;
  s.fill(spacing);
  return StructuredGrid<Dim>(dims, s, tags);
}

template <int Dim>
class CoarsePartition {
public:
  CoarsePartition() = default;

  CoarsePartition(const StructuredGrid<Dim> &grid, MultiIndex<Dim> factor) : grid_(grid), factor_(factor)
  {
    for (int a = 0; a < Dim; ++a) {
      if (factor_[a] < 2)
        throw ConfigError("coarse partition: factor must be >= 2");
      if (grid.dims()[a] % factor_[a] != 0)
        throw ConfigError("coarse partition: factor " + std::to_string(factor_[a]) + " does not divide " +
                          std::to_string(grid.dims()[a]) + " cells on axis " + std::to_string(a));
      coarse_dims_[a] = grid.dims()[a] / factor_[a];
      coarse_spacing_[a] = factor_[a] * grid.spacing()[a];
    }
    element_cells_.resize(element_count());
    for (Index c = 0; c < grid.cell_count(); ++c)
      element_cells_[element_of_cell(c)].push_back(c);
  }

  const StructuredGrid<Dim> &grid() const { return grid_; }
  const MultiIndex<Dim> &factor() const { return factor_; }
  const MultiIndex<Dim> &coarse_dims() const { return coarse_dims_; }
  const Point<Dim> &coarse_spacing() const { return coarse_spacing_; }

  Index element_count() const
  {
    Index n = 1;
    for (int a = 0; a < Dim; ++a)
      n *= static_cast<Index>(coarse_dims_[a]);
    return n;
  }

  Index coarse_node_count() const
  {
    Index n = 1;
    for (int a = 0; a < Dim; ++a)
      n *= static_cast<Index>(coarse_dims_[a] + 1);
    return n;
  }

  const std::vector<Index> &element_cells(Index e) const { return element_cells_[e]; }

  Index element_index(const MultiIndex<Dim> &m) const
  {
    Index idx = 0;
    for (int a = Dim - 1; a >= 0; --a)
      idx = idx * static_cast<Index>(coarse_dims_[a]) + static_cast<Index>(m[a]);
    return idx;
  }

  MultiIndex<Dim> element_multi(Index idx) const
  {
    MultiIndex<Dim> m;
    for (int a = 0; a < Dim; ++a) {
      const auto n = static_cast<Index>(coarse_dims_[a]);
      m[a] = static_cast<int>(idx % n);
      idx /= n;
    }
    return m;
  }

  Index element_of_cell(Index cell) const
  {
    auto m = grid_.cell_multi(cell);
    for (int a = 0; a < Dim; ++a)
      m[a] /= factor_[a];
    return element_index(m);
  }

  Index coarse_node_index(const MultiIndex<Dim> &m) const
  {
    Index idx = 0;
    for (int a = Dim - 1; a >= 0; --a)
      idx = idx * static_cast<Index>(coarse_dims_[a] + 1) + static_cast<Index>(m[a]);
    return idx;
  }

  MultiIndex<Dim> coarse_node_multi(Index idx) const
  {
    MultiIndex<Dim> m;
    for (int a = 0; a < Dim; ++a) {
      const auto n = static_cast<Index>(coarse_dims_[a] + 1);
      m[a] = static_cast<int>(idx % n);
      idx /= n;
    }
    return m;
  }

  Point<Dim> coarse_node_point(Index idx) const
  {
    const auto m = coarse_node_multi(idx);
    Point<Dim> x;
    for (int a = 0; a < Dim; ++a)
      x[a] = m[a] * coarse_spacing_[a];
    return x;
  }

  /// Fine node box of a coarse element (closed).
  NodeBox<Dim> element_node_box(Index e) const
  {
    const auto m = element_multi(e);
    NodeBox<Dim> b;
    for (int a = 0; a < Dim; ++a) {
      b.lo[a] = m[a] * factor_[a];
      b.hi[a] = (m[a] + 1) * factor_[a];
    }
    return b;
  }

  /// Global ids of the fine nodes of a coarse element in the element's local lexicographic order.
  std::vector<Index> element_nodes(Index e) const
  {
    const auto box = element_node_box(e);
    std::vector<Index> out(box.count());
    for_each_in_box(box, [&](const MultiIndex<Dim> &m) { out[box.local(m)] = grid_.node_index(m); });
    return out;
  }

  /// Coarse elements sharing coarse node k (the neighborhood omega_k), ascending.
  std::vector<Index> neighborhood_elements(Index k) const
  {
    const auto nm = coarse_node_multi(k);
    std::vector<Index> out;
    for (int c = 0; c < corners_per_cell<Dim>(); ++c) {
      MultiIndex<Dim> e;
      bool ok = true;
      for (int a = 0; a < Dim; ++a) {
        e[a] = nm[a] - 1 + ((c >> a) & 1);
        ok = ok && e[a] >= 0 && e[a] < coarse_dims_[a];
      }
      if (ok)
        out.push_back(element_index(e));
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Coarse node ids at the corners of element e, local corner order as in StructuredGrid::cell_nodes.
  std::array<Index, corners_per_cell<Dim>()> element_coarse_nodes(Index e) const
  {
    const auto m = element_multi(e);
    std::array<Index, corners_per_cell<Dim>()> out;
    for (int c = 0; c < corners_per_cell<Dim>(); ++c) {
      MultiIndex<Dim> n = m;
      for (int a = 0; a < Dim; ++a)
        n[a] += (c >> a) & 1;
      out[c] = coarse_node_index(n);
    }
    return out;
  }

  template <class F>
  static void for_each_in_box(const NodeBox<Dim> &box, F &&f)
  {
    MultiIndex<Dim> m = box.lo;
    const Index n = box.count();
    for (Index i = 0; i < n; ++i) {
      f(m);
      for (int a = 0; a < Dim; ++a) {
        if (++m[a] <= box.hi[a])
          break;
        m[a] = box.lo[a];
      }
    }
  }

private:
  StructuredGrid<Dim> grid_;
  MultiIndex<Dim> factor_{};
  MultiIndex<Dim> coarse_dims_{};
  Point<Dim> coarse_spacing_{};
  std::vector<std::vector<Index>> element_cells_;
};

template <int Dim>
CoarsePartition<Dim> build_coarse_partition(const StructuredGrid<Dim> &grid, int factor)
{
  MultiIndex<Dim> f;
  f.fill(factor);
  return CoarsePartition<Dim>(grid, f);
}

template <int Dim>
CoarsePartition<Dim> build_coarse_partition(const StructuredGrid<Dim> &grid, const MultiIndex<Dim> &factor)
{
  return CoarsePartition<Dim>(grid, factor);
}

/**
 * @brief A box of coarse elements together with its fine-grid description.
 *
 * interior_nodes spans the zero-trace space: nodes on the box boundary are dropped
 * where that boundary lies inside the domain, Dirichlet nodes of the domain boundary
 * are dropped, Neumann nodes of the domain boundary are kept.
 */
template <int Dim>
struct Region {
  MultiIndex<Dim> coarse_lo{}; ///< first coarse element index per axis
  MultiIndex<Dim> coarse_hi{}; ///< one past the last
  std::vector<Index> contained_coarse;
  std::vector<Index> cells;
  std::vector<Index> fine_nodes;
  std::vector<Index> interior_nodes;

  bool contains_element(Index e) const { return std::binary_search(contained_coarse.begin(), contained_coarse.end(), e); }
};

template <int Dim>
struct OversampleRegion : Region<Dim> {
  Index center_element = 0;
  int layers = 0;
};

template <int Dim>
Region<Dim> coarse_block_region(const CoarsePartition<Dim> &part, const MultiIndex<Dim> &lo, const MultiIndex<Dim> &hi)
{
  const auto &grid = part.grid();
  Region<Dim> r;
  r.coarse_lo = lo;
  r.coarse_hi = hi;

  NodeBox<Dim> ebox;
  for (int a = 0; a < Dim; ++a) {
    if (lo[a] < 0 || hi[a] > part.coarse_dims()[a] || lo[a] >= hi[a])
      throw ConfigError("region: coarse block outside the domain");
    ebox.lo[a] = lo[a];
    ebox.hi[a] = hi[a] - 1;
  }
  CoarsePartition<Dim>::for_each_in_box(ebox, [&](const MultiIndex<Dim> &m) { r.contained_coarse.push_back(part.element_index(m)); });
  std::sort(r.contained_coarse.begin(), r.contained_coarse.end());

  NodeBox<Dim> cbox;
  NodeBox<Dim> nbox;
  for (int a = 0; a < Dim; ++a) {
    cbox.lo[a] = lo[a] * part.factor()[a];
    cbox.hi[a] = hi[a] * part.factor()[a] - 1;
    nbox.lo[a] = cbox.lo[a];
    nbox.hi[a] = cbox.hi[a] + 1;
  }
  CoarsePartition<Dim>::for_each_in_box(cbox, [&](const MultiIndex<Dim> &m) { r.cells.push_back(grid.cell_index(m)); });
  std::sort(r.cells.begin(), r.cells.end());

  CoarsePartition<Dim>::for_each_in_box(nbox, [&](const MultiIndex<Dim> &m) {
    const Index id = grid.node_index(m);
    r.fine_nodes.push_back(id);
    bool interior = true;
    for (int a = 0; a < Dim && interior; ++a) {
      if (m[a] == nbox.lo[a] && nbox.lo[a] != 0)
        interior = false;
      if (m[a] == nbox.hi[a] && nbox.hi[a] != grid.dims()[a])
        interior = false;
    }
    if (interior && grid.is_dirichlet_node(m))
      interior = false;
    if (interior)
      r.interior_nodes.push_back(id);
  });
  std::sort(r.fine_nodes.begin(), r.fine_nodes.end());
  std::sort(r.interior_nodes.begin(), r.interior_nodes.end());
  return r;
}

/// K_{i,m}: element i grown by m coarse layers in Chebyshev distance, clipped at the domain boundary.
template <int Dim>
OversampleRegion<Dim> oversample_region(const CoarsePartition<Dim> &part, Index element, int layers)
{
  if (element >= part.element_count())
    throw ConfigError("oversample_region: element index out of range");
  if (layers < 0)
    throw ConfigError("oversample_region: layers must be >= 0");
  const auto m = part.element_multi(element);
  MultiIndex<Dim> lo, hi;
  for (int a = 0; a < Dim; ++a) {
    lo[a] = std::max(0, m[a] - layers);
    hi[a] = std::min(part.coarse_dims()[a], m[a] + layers + 1);
  }
  OversampleRegion<Dim> r;
  static_cast<Region<Dim> &>(r) = coarse_block_region(part, lo, hi);
  r.center_element = element;
  r.layers = layers;
  return r;
}

/// omega_k: the coarse elements around coarse node k.
template <int Dim>
Region<Dim> neighborhood_region(const CoarsePartition<Dim> &part, Index coarse_node)
{
  const auto nm = part.coarse_node_multi(coarse_node);
  MultiIndex<Dim> lo, hi;
  for (int a = 0; a < Dim; ++a) {
    lo[a] = std::max(0, nm[a] - 1);
    hi[a] = std::min(part.coarse_dims()[a], nm[a] + 1);
  }
  return coarse_block_region(part, lo, hi);
}

/// Two-point Gauss rule per axis on the unit cell; point q uses bit a for axis a.
template <int Dim>
struct CellQuadrature {
  static constexpr int points = 1 << Dim;

  static double coordinate(int q, int a)
  {
    static const double g = 0.5 / std::sqrt(3.0);
    return ((q >> a) & 1) ? 0.5 + g : 0.5 - g;
  }

  static double weight() { return 1.0 / points; }
};

namespace detail {

/// Value and gradient of the multilinear hat of corner c on a box of size H at local point t in [0,1]^Dim.
template <int Dim>
inline void corner_hat(int c, const Point<Dim> &t, const Point<Dim> &H, double &value, Point<Dim> &grad)
{
  std::array<double, Dim> f, df;
  for (int a = 0; a < Dim; ++a) {
    const bool upper = (c >> a) & 1;
    f[a] = upper ? t[a] : 1.0 - t[a];
    df[a] = (upper ? 1.0 : -1.0) / H[a];
  }
  value = 1.0;
  for (int a = 0; a < Dim; ++a)
    value *= f[a];
  for (int a = 0; a < Dim; ++a) {
    double g = df[a];
    for (int b = 0; b < Dim; ++b)
      if (b != a)
        g *= f[b];
    grad[a] = g;
  }
}

} // namespace detail

/**
 * @brief Coarse multilinear hats sampled on the fine grid.
 *
 * chi[k] lists (fine node, value) pairs with nonzero value. grad_sq_sum holds
 * sum_k |grad chi_k|^2 at the CellQuadrature points of every fine cell
 * (cell-major); cell_sup holds its maximum over the cell, attained at a vertex
 * because the sum is convex along every axis.
 */
template <int Dim>
struct PartitionOfUnity {
  std::vector<std::vector<std::pair<Index, double>>> chi;
  std::vector<double> grad_sq_sum;
  std::vector<double> cell_sup;
  std::vector<double> max_grad_norm; ///< per coarse node, sup over its support

  double grad_sq_at(Index cell, int q) const { return grad_sq_sum[cell * CellQuadrature<Dim>::points + q]; }

  /// chi_k as a dense fine nodal vector.
  Vector dense(Index k, Index node_count) const
  {
    Vector v = Vector::Zero(static_cast<Eigen::Index>(node_count));
    for (auto [n, val] : chi[k])
      v[static_cast<Eigen::Index>(n)] = val;
    return v;
  }
};

template <int Dim>
PartitionOfUnity<Dim> build_partition_of_unity(const CoarsePartition<Dim> &part)
{
  const auto &grid = part.grid();
  const auto &H = part.coarse_spacing();
  constexpr int nq = CellQuadrature<Dim>::points;
  constexpr int nc = corners_per_cell<Dim>();

  PartitionOfUnity<Dim> pou;
  pou.chi.resize(part.coarse_node_count());
  pou.max_grad_norm.assign(part.coarse_node_count(), 0.0);
  pou.grad_sq_sum.assign(grid.cell_count() * nq, 0.0);
  pou.cell_sup.assign(grid.cell_count(), 0.0);

  // nodal values: product of 1D hats around every coarse node
  for (Index n = 0; n < grid.node_count(); ++n) {
    const auto m = grid.node_multi(n);
    // owning element (upper-clamped) and local coordinate in it
    MultiIndex<Dim> em;
    Point<Dim> t;
    for (int a = 0; a < Dim; ++a) {
      em[a] = std::min(m[a] / part.factor()[a], part.coarse_dims()[a] - 1);
      t[a] = static_cast<double>(m[a] - em[a] * part.factor()[a]) / part.factor()[a];
    }
    const auto e = part.element_index(em);
    const auto corners = part.element_coarse_nodes(e);
    for (int c = 0; c < nc; ++c) {
      double v;
      Point<Dim> g;
      detail::corner_hat<Dim>(c, t, H, v, g);
      if (v > 0.0)
        pou.chi[corners[c]].emplace_back(n, v);
    }
  }
  for (auto &list : pou.chi)
    std::sort(list.begin(), list.end());

  for (Index cell = 0; cell < grid.cell_count(); ++cell) {
    const Index e = part.element_of_cell(cell);
    const auto em = part.element_multi(e);
    const auto cm = grid.cell_multi(cell);
    const auto corners = part.element_coarse_nodes(e);
    auto local = [&](const Point<Dim> &ref) {
      Point<Dim> t;
      for (int a = 0; a < Dim; ++a)
        t[a] = (cm[a] - em[a] * part.factor()[a] + ref[a]) / part.factor()[a];
      return t;
    };
    auto sum_at = [&](const Point<Dim> &t, bool track) {
      double s = 0.0;
      for (int c = 0; c < nc; ++c) {
        double v;
        Point<Dim> g;
        detail::corner_hat<Dim>(c, t, H, v, g);
        double gg = 0.0;
        for (int a = 0; a < Dim; ++a)
          gg += g[a] * g[a];
        s += gg;
        if (track)
          pou.max_grad_norm[corners[c]] = std::max(pou.max_grad_norm[corners[c]], std::sqrt(gg));
      }
      return s;
    };
    for (int q = 0; q < nq; ++q) {
      Point<Dim> ref;
      for (int a = 0; a < Dim; ++a)
        ref[a] = CellQuadrature<Dim>::coordinate(q, a);
      pou.grad_sq_sum[cell * nq + q] = sum_at(local(ref), false);
    }
    double sup = 0.0;
    for (int v = 0; v < nc; ++v) {
      Point<Dim> ref;
      for (int a = 0; a < Dim; ++a)
        ref[a] = (v >> a) & 1;
      sup = std::max(sup, sum_at(local(ref), true));
    }
    pou.cell_sup[cell] = sup;
  }
  return pou;
}

} // namespace cemgms
