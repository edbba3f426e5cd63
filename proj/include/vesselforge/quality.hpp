#pragma once

#include "vesselforge/mesh.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vf {

/// Scaled Jacobian of a hexahedron: at each of the 8 corners, the determinant
/// of the three normalized edge vectors leaving that corner; the cell value
/// is the minimum over corners. Ranges over [-1, 1]; negative iff some corner
/// frame is inverted. Coincident corner vertices yield -1 (and set
/// *degenerate if given).
double scaled_jacobian_hex(const std::array<Vec3, 8>& v, bool* degenerate = nullptr);

/// Quad analogue: corners are projected into the best-fit plane of the four
/// vertices (oriented by the diagonal cross product) and the 2x2 determinant
/// of the normalized edge pair is taken at each corner; the value is the
/// minimum over 4 corners.
double scaled_jacobian_quad(const std::array<Vec3, 4>& v, bool* degenerate = nullptr);

/// Scaled-Jacobian distribution of a mesh.
struct QualityReport {
  static constexpr int kBins = 40;  // uniform over [-1, 1]

  std::vector<double> cell_sj;              // one value per cell
  std::array<std::int64_t, kBins> histogram{};
  std::map<std::int64_t, bool> branch_ok;   // branch id -> no cell with SJ < 0
  double fraction_above_09 = 0.0;
  double min_sj = 0.0;                      // 0 for an empty mesh
  double mean_sj = 0.0;                     // 0 for an empty mesh

  bool all_ok() const;
  nlohmann::json to_json() const;
};

QualityReport quality_report(const HexMesh& mesh);
QualityReport quality_report(const SurfaceMesh& mesh);

/// Histogram as CSV with columns bin_lo,bin_hi,count.
void write_histogram_csv(const QualityReport& report, const std::string& path);

}  // namespace vf
