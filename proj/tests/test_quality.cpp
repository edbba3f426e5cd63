#include "vesselforge/quality.hpp"

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

using namespace vf;

namespace {

std::array<Vec3, 8> unit_cube() {
  return {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{1, 1, 0}, Vec3{0, 1, 0},
          Vec3{0, 0, 1}, Vec3{1, 0, 1}, Vec3{1, 1, 1}, Vec3{0, 1, 1}};
}

// Independent corner enumeration: for every choice of three edges leaving a
// corner, take the determinant orientation directly from the cube topology.
double brute_force_hex_sj(const std::array<Vec3, 8>& v) {
  // Adjacency of the cube graph; orientation signs fixed by checking the
  // reference cube (det must come out +1 at every corner).
  static const int adj[8][3] = {{1, 3, 4}, {2, 0, 5}, {3, 1, 6}, {0, 2, 7},
                                {7, 5, 0}, {4, 6, 1}, {5, 7, 2}, {6, 4, 3}};
  double worst = 2.0;
  for (int c = 0; c < 8; ++c) {
    Eigen::Matrix3d m;
    for (int k = 0; k < 3; ++k) m.col(k) = (v[adj[c][k]] - v[c]).normalized();
    worst = std::min(worst, m.determinant());
  }
  return worst;
}

std::array<Vec3, 8> transform(const std::array<Vec3, 8>& v, const Eigen::Matrix3d& rot,
                              double scale, const Vec3& shift) {
  std::array<Vec3, 8> out;
  for (int i = 0; i < 8; ++i) out[i] = scale * (rot * v[i]) + shift;
  return out;
}

HexMesh two_branch_mesh() {
  // Two unit cubes side by side, one per branch.
  HexMesh mesh;
  auto add_cube = [&](const Vec3& origin, std::int64_t branch) {
    int base = static_cast<int>(mesh.vertices.size());
    for (const Vec3& p : unit_cube()) mesh.vertices.push_back(p + origin);
    mesh.hexes.push_back({base, base + 1, base + 2, base + 3, base + 4, base + 5,
                          base + 6, base + 7});
    mesh.hex_branch.push_back(branch);
    mesh.hex_layer.push_back(LayerClass::core);
  };
  add_cube({0, 0, 0}, 1);
  add_cube({2, 0, 0}, 2);
  return mesh;
}

}  // namespace

TEST_CASE("unit cube scores exactly 1") {
  bool degenerate = true;
  CHECK(scaled_jacobian_hex(unit_cube(), &degenerate) == 1.0);
  CHECK_FALSE(degenerate);
}

TEST_CASE("sheared cube matches the closed form and the corner enumeration") {
  // Top face slid along +x so vertical edges make a 60-degree angle with the
  // base: every corner determinant is sin(60deg).
  const double angle = M_PI / 3.0;
  std::array<Vec3, 8> v = unit_cube();
  const Vec3 slide{std::cos(angle), 0.0, std::sin(angle) - 1.0};
  for (int i = 4; i < 8; ++i) v[i] += slide;

  double sj = scaled_jacobian_hex(v);
  CHECK(std::abs(sj - std::sin(angle)) <= 1e-12);
  CHECK(std::abs(sj - brute_force_hex_sj(v)) <= 1e-12);
}

TEST_CASE("random hexes agree with the corner enumeration") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> jitter(-0.35, 0.35);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<Vec3, 8> v = unit_cube();
    for (auto& p : v) p += Vec3{jitter(rng), jitter(rng), jitter(rng)};
    CHECK(std::abs(scaled_jacobian_hex(v) - brute_force_hex_sj(v)) <= 1e-12);
  }
}

TEST_CASE("inverted cell is negative") {
  std::array<Vec3, 8> v = unit_cube();
  std::swap(v[1], v[3]);  // reverses the bottom quad winding
  CHECK(scaled_jacobian_hex(v) < 0.0);
}

TEST_CASE("coincident vertices give -1 and the degenerate flag") {
  std::array<Vec3, 8> v = unit_cube();
  v[1] = v[0];
  bool degenerate = false;
  CHECK(scaled_jacobian_hex(v, &degenerate) == -1.0);
  CHECK(degenerate);
}

TEST_CASE("rigid motion and uniform scaling leave SJ unchanged") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::uniform_real_distribution<double> scales(0.05, 50.0);
  for (int trial = 0; trial < 30; ++trial) {
    std::array<Vec3, 8> v = unit_cube();
    for (auto& p : v) p += Vec3{jitter(rng), jitter(rng), jitter(rng)};

    Eigen::Quaterniond q(unif(rng), unif(rng), unif(rng), unif(rng));
    q.normalize();
    Vec3 shift{10 * unif(rng), 10 * unif(rng), 10 * unif(rng)};
    auto w = transform(v, q.toRotationMatrix(), scales(rng), shift);
    CHECK(std::abs(scaled_jacobian_hex(v) - scaled_jacobian_hex(w)) < 1e-12);
  }
}

TEST_CASE("quad scaled Jacobian") {
  std::array<Vec3, 4> square = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{1, 1, 0},
                                Vec3{0, 1, 0}};
  CHECK(std::abs(scaled_jacobian_quad(square) - 1.0) <= 1e-12);

  SUBCASE("parallelogram equals the sine of the corner angle") {
    const double angle = M_PI / 5.0;
    const Vec3 e{std::cos(angle), std::sin(angle), 0.0};
    std::array<Vec3, 4> para = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{1, 0, 0} + e, e};
    CHECK(std::abs(scaled_jacobian_quad(para) - std::sin(angle)) <= 1e-12);
  }

  SUBCASE("concave (chevron) corner is negative") {
    std::array<Vec3, 4> chevron = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0.2, 0.2, 0},
                                   Vec3{0, 1, 0}};
    CHECK(scaled_jacobian_quad(chevron) < 0.0);
  }

  SUBCASE("coincident vertices degenerate") {
    std::array<Vec3, 4> bad = square;
    bad[2] = bad[1];
    bool degenerate = false;
    CHECK(scaled_jacobian_quad(bad, &degenerate) == -1.0);
    CHECK(degenerate);
  }

  SUBCASE("rigid + scale invariance") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::array<Vec3, 4> warped = {Vec3{0, 0, 0.05}, Vec3{1.1, 0, -0.02},
                                  Vec3{0.9, 1.2, 0.03}, Vec3{-0.1, 0.8, 0}};
    double base = scaled_jacobian_quad(warped);
    for (int trial = 0; trial < 20; ++trial) {
      Eigen::Quaterniond q(unif(rng), unif(rng), unif(rng), unif(rng));
      q.normalize();
      Eigen::Matrix3d rot = q.toRotationMatrix();
      double s = 0.1 + 5.0 * (unif(rng) + 1.0);
      Vec3 shift{unif(rng), 4, -2};
      std::array<Vec3, 4> moved;
      for (int i = 0; i < 4; ++i) moved[i] = s * (rot * warped[i]) + shift;
      CHECK(std::abs(scaled_jacobian_quad(moved) - base) < 1e-12);
    }
  }
}

TEST_CASE("report flags only the branch containing an inverted cell") {
  HexMesh mesh = two_branch_mesh();
  auto& cell = mesh.hexes[1];
  std::swap(cell[1], cell[3]);

  QualityReport rep = quality_report(mesh);
  REQUIRE(rep.cell_sj.size() == 2);
  CHECK(rep.branch_ok.at(1));
  CHECK_FALSE(rep.branch_ok.at(2));
  CHECK_FALSE(rep.all_ok());
  CHECK(rep.min_sj < 0.0);

  std::int64_t mass = 0;
  for (auto c : rep.histogram) mass += c;
  CHECK(mass == 2);
}

TEST_CASE("report aggregates on a clean mesh") {
  QualityReport rep = quality_report(two_branch_mesh());
  CHECK(rep.min_sj == 1.0);
  CHECK(rep.mean_sj == 1.0);
  CHECK(rep.fraction_above_09 == 1.0);
  CHECK(rep.all_ok());
  CHECK(rep.histogram[QualityReport::kBins - 1] == 2);

  auto j = rep.to_json();
  CHECK(j.at("cell_count") == 2);
  CHECK(j.at("branches").at("1") == "ok");
}

TEST_CASE("empty mesh yields an empty report") {
  QualityReport rep = quality_report(HexMesh{});
  CHECK(rep.cell_sj.empty());
  CHECK(rep.branch_ok.empty());
  CHECK(rep.min_sj == 0.0);
  CHECK(rep.mean_sj == 0.0);
  CHECK(rep.fraction_above_09 == 0.0);
  std::int64_t mass = 0;
  for (auto c : rep.histogram) mass += c;
  CHECK(mass == 0);
}

TEST_CASE("histogram CSV round trips counts") {
  QualityReport rep = quality_report(two_branch_mesh());
  std::string path = "quality_hist_test.csv";
  write_histogram_csv(rep, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header == "bin_lo,bin_hi,count");
  int lines = 0;
  std::int64_t mass = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lines;
    mass += std::stoll(line.substr(line.rfind(',') + 1));
  }
  CHECK(lines == QualityReport::kBins);
  CHECK(mass == 2);
  std::remove(path.c_str());
}

TEST_CASE("mesh params validation") {
  MeshParams p;
  CHECK_NOTHROW(p.validate());
  SUBCASE("N not a multiple of 4") {
    p.nodes_per_section = 10;
    CHECK_THROWS_AS(p.validate(), mesh_error);
  }
  SUBCASE("fractions must sum to 1") {
    p.gamma = 0.6;
    CHECK_THROWS_AS(p.validate(), mesh_error);
  }
  SUBCASE("layer counts positive") {
    p.n_alpha = 0;
    CHECK_THROWS_AS(p.validate(), mesh_error);
  }
}
