#pragma once

/** @file export.hpp
    @brief Nodal field export as legacy VTK structured points or CSV, 17 significant digits.
*/

#include <cstdio>
#include <fstream>
#include <sstream>

#include "../grid.hpp"

namespace cemgms {

enum class ExportFormat { Vtk, Csv };

inline std::string format_g17(double v)
{
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline ExportFormat export_format_for(const std::string &path)
{
  auto ends = [&](const char *s) {
    const std::string suf(s);
    return path.size() >= suf.size() && path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends(".vtk"))
    return ExportFormat::Vtk;
  if (ends(".csv"))
    return ExportFormat::Csv;
  throw ConfigError("export: unknown format for " + path + " (expected .vtk or .csv)");
}

template <int Dim>
void export_field(const Vector &field, const StructuredGrid<Dim> &grid, const std::string &path, ExportFormat format,
                  const std::string &name = "pressure")
{
  if (static_cast<Index>(field.size()) != grid.node_count())
    throw ConfigError("export: field size does not match the grid");
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw IoError("export: cannot write " + path);
  if (format == ExportFormat::Vtk) {
    out << "# vtk DataFile Version 3.0\n" << name << "\nASCII\nDATASET STRUCTURED_POINTS\n";
    out << "DIMENSIONS";
    for (int a = 0; a < 3; ++a)
      out << ' ' << (a < Dim ? grid.nodes_along(a) : 1);
    out << "\nORIGIN 0 0 0\nSPACING";
    for (int a = 0; a < 3; ++a)
      out << ' ' << (a < Dim ? format_g17(grid.spacing()[a]) : std::string("1"));
    out << "\nPOINT_DATA " << grid.node_count() << "\nSCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
    for (Eigen::Index i = 0; i < field.size(); ++i)
      out << format_g17(field[i]) << '\n';
  }
  else {
    out << "node,x,y,z,value\n";
    for (Index i = 0; i < grid.node_count(); ++i) {
      const auto x = grid.node_point(i);
      out << i;
      for (int a = 0; a < 3; ++a)
        out << ',' << (a < Dim ? format_g17(x[a]) : std::string("0"));
      out << ',' << format_g17(field[static_cast<Eigen::Index>(i)]) << '\n';
    }
  }
  if (!out)
    throw IoError("export: write failed for " + path);
}

/// Values column of a CSV written by export_field.
inline std::vector<double> read_csv_values(const std::string &path)
{
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    const auto pos = line.rfind(',');
    if (pos == std::string::npos)
      throw IoError(path + ": malformed row");
    out.push_back(std::strtod(line.c_str() + pos + 1, nullptr));
  }
  return out;
}

} // namespace cemgms
