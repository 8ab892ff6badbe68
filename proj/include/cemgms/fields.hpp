#pragma once

/** @file fields.hpp
    @brief Compressible fluid law and heterogeneous permeability fields (inclusions, fractures, raster data).
*/

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <string>

#include "grid.hpp"

namespace cemgms {

/// One millidarcy in square meters.
inline constexpr double kMilliDarcy = 9.869233e-16;

struct FluidProps {
  double rho_ref = 850.0;          ///< kg/m^3
  double p_ref = 2.0e7;            ///< Pa
  double compressibility = 1.0e-8; ///< 1/Pa
  double viscosity = 5.0e-3;       ///< Pa s
  double porosity = 500.0;

  void validate() const
  {
    if (!(rho_ref > 0.0))
      throw ConfigError("fluid: rho_ref must be positive");
    if (!(compressibility >= 0.0))
      throw ConfigError("fluid: compressibility must be nonnegative");
    if (!(viscosity > 0.0))
      throw ConfigError("fluid: viscosity must be positive");
    if (!(porosity > 0.0))
      throw ConfigError("fluid: porosity must be positive");
    if (!std::isfinite(p_ref))
      throw ConfigError("fluid: p_ref must be finite");
  }

  bool operator==(const FluidProps &) const = default;
};

/// rho(p) = rho_ref exp(c (p - p_ref)).
inline double density(double p, const FluidProps &f)
{
  const double e = f.compressibility * (p - f.p_ref);
  if (!std::isfinite(e) || e > 700.0)
    throw SolverError("density: exponent overflow at p = " + std::to_string(p));
  return f.rho_ref * std::exp(e);
}

inline double density_derivative(double p, const FluidProps &f) { return f.compressibility * density(p, f); }

inline double density_second_derivative(double p, const FluidProps &f)
{
  return f.compressibility * f.compressibility * density(p, f);
}

/// Cellwise scalar permeability in millidarcy.
template <int Dim>
struct PermeabilityField {
  MultiIndex<Dim> dims{};
  std::vector<double> values;

  double min() const { return *std::min_element(values.begin(), values.end()); }
  double max() const { return *std::max_element(values.begin(), values.end()); }
  std::pair<double, double> bounds() const { return {min(), max()}; }

  /// Value in m^2.
  double si(Index cell) const { return values[cell] * kMilliDarcy; }

  void validate() const
  {
    Index n = 1;
    for (int a = 0; a < Dim; ++a)
      n *= static_cast<Index>(dims[a]);
    if (values.size() != n)
      throw ValidationError("permeability: value count does not match dims");
    for (double v : values)
      if (!(v > 0.0) || !std::isfinite(v))
        throw ValidationError("permeability: values must be positive and finite");
  }

  PermeabilityField scaled(double alpha) const
  {
    PermeabilityField out = *this;
    for (auto &v : out.values)
      v *= alpha;
    return out;
  }
};

template <int Dim>
PermeabilityField<Dim> uniform_field(const MultiIndex<Dim> &dims, double value)
{
  Index n = 1;
  for (int a = 0; a < Dim; ++a)
    n *= static_cast<Index>(dims[a]);
  PermeabilityField<Dim> f{dims, std::vector<double>(n, value)};
  f.validate();
  return f;
}

/// Box of fine cells, lo inclusive, hi exclusive.
template <int Dim>
struct CellBox {
  MultiIndex<Dim> lo{};
  MultiIndex<Dim> hi{};

  Index volume() const
  {
    Index v = 1;
    for (int a = 0; a < Dim; ++a)
      v *= static_cast<Index>(std::max(0, hi[a] - lo[a]));
    return v;
  }

  bool within(const MultiIndex<Dim> &dims) const
  {
    for (int a = 0; a < Dim; ++a)
      if (lo[a] < 0 || hi[a] > dims[a] || lo[a] >= hi[a])
        return false;
    return true;
  }

  bool contains(const MultiIndex<Dim> &m) const
  {
    for (int a = 0; a < Dim; ++a)
      if (m[a] < lo[a] || m[a] >= hi[a])
        return false;
    return true;
  }

  bool operator==(const CellBox &) const = default;
};

namespace detail {

template <int Dim, class F>
void for_each_cell_in(const MultiIndex<Dim> &dims, const CellBox<Dim> &box, F &&f)
{
  MultiIndex<Dim> m = box.lo;
  const Index n = box.volume();
  for (Index i = 0; i < n; ++i) {
    Index idx = 0;
    for (int a = Dim - 1; a >= 0; --a)
      idx = idx * static_cast<Index>(dims[a]) + static_cast<Index>(m[a]);
    f(idx);
    for (int a = 0; a < Dim; ++a) {
      if (++m[a] < box.hi[a])
        break;
      m[a] = box.lo[a];
    }
  }
}

} // namespace detail

/// Background field with high-permeability boxes; bounds are (background, inclusion) whenever a box is present.
template <int Dim>
PermeabilityField<Dim> gen_inclusions(const MultiIndex<Dim> &dims, double background, double inclusion,
                                      const std::vector<CellBox<Dim>> &shapes)
{
  if (!(background > 0.0) || !(inclusion > 0.0))
    throw ConfigError("inclusions: permeability values must be positive");
  auto f = uniform_field<Dim>(dims, background);
  for (const auto &b : shapes) {
    if (!b.within(dims))
      throw ConfigError("inclusions: box outside the domain");
    detail::for_each_cell_in<Dim>(dims, b, [&](Index c) { f.values[c] = inclusion; });
  }
  return f;
}

/**
 * @brief Deterministic random boxes for inclusion fields.
 *
 * Uses the raw 64-bit Mersenne Twister stream (fully specified by the standard)
 * with modular reduction, so the boxes are identical on every platform for a seed.
 */
template <int Dim>
std::vector<CellBox<Dim>> random_boxes(const MultiIndex<Dim> &dims, int count, const MultiIndex<Dim> &min_size,
                                       const MultiIndex<Dim> &max_size, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  auto draw = [&](int lo, int hi) { // inclusive
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(rng() % span);
  };
  std::vector<CellBox<Dim>> out;
  for (int k = 0; k < count; ++k) {
    CellBox<Dim> b;
    for (int a = 0; a < Dim; ++a) {
      const int hi_size = std::min(max_size[a], dims[a]);
      const int lo_size = std::min(std::max(1, min_size[a]), hi_size);
      const int s = draw(lo_size, hi_size);
      b.lo[a] = draw(0, dims[a] - s);
      b.hi[a] = b.lo[a] + s;
    }
    out.push_back(b);
  }
  return out;
}

template <int Dim>
struct Fracture {
  CellBox<Dim> box;
  double value = 0.0; ///< mD
};

template <int Dim>
struct FractureGeometry {
  double matrix_value = 0.0;
  std::vector<Fracture<Dim>> fractures;
};

/// Matrix field with one-cell-thick fracture boxes painted in order (later fractures win).
template <int Dim>
PermeabilityField<Dim> rasterize_fractures(const FractureGeometry<Dim> &geom, const MultiIndex<Dim> &dims)
{
  if (!(geom.matrix_value > 0.0))
    throw ConfigError("fractures: matrix permeability must be positive");
  auto f = uniform_field<Dim>(dims, geom.matrix_value);
  for (const auto &fr : geom.fractures) {
    if (!fr.box.within(dims))
      throw ConfigError("fractures: fracture outside the domain");
    if (!(fr.value > 0.0))
      throw ConfigError("fractures: fracture permeability must be positive");
    int thin = 0;
    for (int a = 0; a < Dim; ++a)
      thin += (fr.box.hi[a] - fr.box.lo[a] == 1);
    if (thin == 0)
      throw ConfigError("fractures: fracture must be one fine cell thick along some axis");
    detail::for_each_cell_in<Dim>(dims, fr.box, [&](Index c) { f.values[c] = fr.value; });
  }
  return f;
}

/// Little-endian IEEE-754 binary64 stream helpers.
inline void write_f64_le(std::ostream &os, const double *data, Index n)
{
  std::vector<unsigned char> buf(n * 8);
  for (Index i = 0; i < n; ++i) {
    const auto u = std::bit_cast<std::uint64_t>(data[i]);
    for (int b = 0; b < 8; ++b)
      buf[i * 8 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xffu);
  }
  os.write(reinterpret_cast<const char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_f64_le_file(const std::string &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0)
    throw IoError(path + ": size is not a multiple of 8 bytes");
  std::vector<double> out(bytes.size() / 8);
  for (Index i = 0; i < out.size(); ++i) {
    std::uint64_t u = 0;
    for (int b = 7; b >= 0; --b)
      u = (u << 8) | bytes[i * 8 + b];
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

inline void write_f64_le_file(const std::string &path, const std::vector<double> &values)
{
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path);
  write_f64_le(out, values.data(), values.size());
  if (!out)
    throw IoError("write failed: " + path);
}

template <int Dim>
PermeabilityField<Dim> load_raster_field(const std::string &path, const MultiIndex<Dim> &dims)
{
  auto values = read_f64_le_file(path);
  Index n = 1;
  for (int a = 0; a < Dim; ++a)
    n *= static_cast<Index>(dims[a]);
  if (values.size() != n)
    throw IoError(path + ": expected " + std::to_string(n) + " values, found " + std::to_string(values.size()));
  PermeabilityField<Dim> f{dims, std::move(values)};
  f.validate();
  return f;
}

} // namespace cemgms
