#include "vesselforge/quality.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace vf {

namespace {

// Edge neighbors of each hex corner, ordered so the reference cell
// (unit cube, bottom quad 0-3 CCW, top quad 4-7) gives determinant +1.
constexpr int kHexCorner[8][3] = {
    {1, 3, 4}, {2, 0, 5}, {3, 1, 6}, {0, 2, 7},
    {7, 5, 0}, {4, 6, 1}, {5, 7, 2}, {6, 4, 3},
};

double cell_diameter(const Vec3* v, int n) {
  double d = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) d = std::max(d, (v[i] - v[j]).norm());
  return d;
}

}  // namespace

double scaled_jacobian_hex(const std::array<Vec3, 8>& v, bool* degenerate) {
  if (degenerate) *degenerate = false;
  const double diam = cell_diameter(v.data(), 8);
  const double tiny = 1e-14 * diam;

  double sj = std::numeric_limits<double>::infinity();
  for (int c = 0; c < 8; ++c) {
    Eigen::Matrix3d frame;
    for (int k = 0; k < 3; ++k) {
      Vec3 e = v[kHexCorner[c][k]] - v[c];
      double len = e.norm();
      if (!(len > tiny)) {
        if (degenerate) *degenerate = true;
        return -1.0;
      }
      frame.col(k) = e / len;
    }
    sj = std::min(sj, frame.determinant());
  }
  return std::clamp(sj, -1.0, 1.0);
}

double scaled_jacobian_quad(const std::array<Vec3, 4>& v, bool* degenerate) {
  if (degenerate) *degenerate = false;
  const double diam = cell_diameter(v.data(), 4);
  const double tiny = 1e-14 * diam;

  // Best-fit plane through the centroid, oriented by the diagonal cross
  // product so a properly wound quad comes out positive.
  Vec3 centroid = (v[0] + v[1] + v[2] + v[3]) / 4.0;
  Eigen::Matrix<double, 4, 3> centered;
  for (int i = 0; i < 4; ++i) centered.row(i) = (v[i] - centroid).transpose();
  Eigen::JacobiSVD<Eigen::Matrix<double, 4, 3>> svd(centered, Eigen::ComputeFullV);
  Vec3 axis_u = svd.matrixV().col(0);
  Vec3 axis_v = svd.matrixV().col(1);
  Vec3 orient = (v[2] - v[0]).cross(v[3] - v[1]);
  if (axis_u.cross(axis_v).dot(orient) < 0.0) axis_v = -axis_v;

  Eigen::Vector2d p[4];
  for (int i = 0; i < 4; ++i)
    p[i] = {axis_u.dot(v[i] - centroid), axis_v.dot(v[i] - centroid)};

  double sj = std::numeric_limits<double>::infinity();
  for (int c = 0; c < 4; ++c) {
    Eigen::Vector2d next = p[(c + 1) % 4] - p[c];
    Eigen::Vector2d prev = p[(c + 3) % 4] - p[c];
    double ln = next.norm(), lp = prev.norm();
    if (!(ln > tiny) || !(lp > tiny)) {
      if (degenerate) *degenerate = true;
      return -1.0;
    }
    sj = std::min(sj, (next.x() * prev.y() - next.y() * prev.x()) / (ln * lp));
  }
  return std::clamp(sj, -1.0, 1.0);
}

namespace {

QualityReport build_report(std::vector<double> sj, const std::vector<std::int64_t>& branch) {
  QualityReport rep;
  rep.cell_sj = std::move(sj);
  if (rep.cell_sj.empty()) return rep;

  double sum = 0.0;
  rep.min_sj = std::numeric_limits<double>::infinity();
  std::int64_t above = 0;
  for (std::size_t i = 0; i < rep.cell_sj.size(); ++i) {
    double s = rep.cell_sj[i];
    sum += s;
    rep.min_sj = std::min(rep.min_sj, s);
    if (s > 0.9) ++above;
    int bin = std::clamp(static_cast<int>((s + 1.0) / 2.0 * QualityReport::kBins), 0,
                         QualityReport::kBins - 1);
    ++rep.histogram[bin];
    std::int64_t b = branch[i];
    auto [it, _] = rep.branch_ok.try_emplace(b, true);
    if (s < 0.0) it->second = false;
  }
  rep.mean_sj = sum / static_cast<double>(rep.cell_sj.size());
  rep.fraction_above_09 = static_cast<double>(above) / static_cast<double>(rep.cell_sj.size());
  return rep;
}

}  // namespace

QualityReport quality_report(const HexMesh& mesh) {
  std::vector<double> sj(mesh.hexes.size());
  for (std::size_t i = 0; i < mesh.hexes.size(); ++i) {
    std::array<Vec3, 8> cell;
    for (int k = 0; k < 8; ++k) cell[k] = mesh.vertices[mesh.hexes[i][k]];
    sj[i] = scaled_jacobian_hex(cell);
  }
  return build_report(std::move(sj), mesh.hex_branch);
}

QualityReport quality_report(const SurfaceMesh& mesh) {
  std::vector<double> sj(mesh.quads.size());
  for (std::size_t i = 0; i < mesh.quads.size(); ++i) {
    std::array<Vec3, 4> cell;
    for (int k = 0; k < 4; ++k) cell[k] = mesh.vertices[mesh.quads[i][k]];
    sj[i] = scaled_jacobian_quad(cell);
  }
  return build_report(std::move(sj), mesh.quad_branch);
}

bool QualityReport::all_ok() const {
  for (const auto& [id, ok] : branch_ok)
    if (!ok) return false;
  return true;
}

nlohmann::json QualityReport::to_json() const {
  nlohmann::json branches = nlohmann::json::object();
  for (const auto& [id, ok] : branch_ok)
    branches[std::to_string(id)] = ok ? "ok" : "failed";
  return {
      {"cell_count", cell_sj.size()},
      {"min", min_sj},
      {"mean", mean_sj},
      {"fraction_above_0.9", fraction_above_09},
      {"histogram", histogram},
      {"branches", branches},
  };
}

void write_histogram_csv(const QualityReport& report, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw mesh_error("cannot open " + tmp + " for writing");
    out << "bin_lo,bin_hi,count\n";
    const double w = 2.0 / QualityReport::kBins;
    for (int b = 0; b < QualityReport::kBins; ++b)
      out << (-1.0 + b * w) << "," << (-1.0 + (b + 1) * w) << "," << report.histogram[b]
          << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw mesh_error("cannot rename " + tmp + " to " + path);
}

void MeshParams::validate() const {
  if (nodes_per_section < 4 || nodes_per_section % 4 != 0)
    throw mesh_error("nodes_per_section must be a positive multiple of 4");
  if (!(density > 0.0)) throw mesh_error("density must be positive");
  if (relax_iters < 0) throw mesh_error("relax_iters must be nonnegative");
  if (!(relax_factor > 0.0) || relax_factor > 1.0)
    throw mesh_error("relax_factor must be in (0, 1]");
  if (apex_R < 0.0) throw mesh_error("apex_R must be nonnegative");
  if (!(alpha > 0.0) || !(beta > 0.0) || !(gamma > 0.0))
    throw mesh_error("O-grid layer fractions must be positive");
  if (std::abs(alpha + beta + gamma - 1.0) > 1e-12)
    throw mesh_error("O-grid layer fractions must sum to 1");
  if (n_alpha < 1 || n_beta < 1) throw mesh_error("layer counts must be >= 1");
}

}  // namespace vf
