#include <doctest.h>

#include "vesselforge/fitting.hpp"
#include "vesselforge/mesher.hpp"
#include "vesselforge/quality.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <vector>

using namespace vf;

namespace {

Spline4 straight_tube(const Vec3& a, const Vec3& b, double r, int n = 8) {
  Eigen::MatrixXd p(n, 4);
  for (int i = 0; i < n; ++i) {
    double w = static_cast<double>(i) / (n - 1);
    p.row(i) << (a + w * (b - a)).transpose(), r;
  }
  return Spline4(p);
}

/// Interpolating tube along a circular arc of radius Rc in the xy plane,
/// tube radius r, sweeping `arc` radians.
Spline4 arc_tube(double Rc, double r, double arc, int m = 40) {
  Eigen::MatrixXd data(m, 4);
  std::vector<double> t(m);
  for (int i = 0; i < m; ++i) {
    double a = arc * i / (m - 1);
    data.row(i) << Rc * std::cos(a), Rc * std::sin(a), 0.0, r;
    t[i] = static_cast<double>(i) / (m - 1);
  }
  return Spline4(solve_penalized(data, t, m, 0.0));
}

CenterlineNetwork make_fan(const std::vector<double>& angles_deg,
                           const std::vector<double>& radii, double r_in = 1.0,
                           double step = 0.5, double leg = 20.0) {
  std::vector<CenterlinePoint> pts;
  std::int64_t id = 1, parent = -1;
  int n_in = static_cast<int>(std::lround(20.0 / step));
  for (int i = 0; i <= n_in; ++i) {
    double x = -20.0 + 20.0 * i / n_in;
    pts.push_back({id, 1, Vec3(x, 0, 0), r_in, parent});
    parent = id++;
  }
  std::int64_t junc = parent;
  int n_leg = static_cast<int>(std::lround(leg / step));
  for (std::size_t k = 0; k < angles_deg.size(); ++k) {
    double a = angles_deg[k] * M_PI / 180.0;
    Vec3 dir(std::cos(a), std::sin(a), 0.0);
    std::int64_t p = junc;
    for (int i = 1; i <= n_leg; ++i) {
      pts.push_back({id, 1, Vec3(leg * i / n_leg * dir), radii[k], p});
      p = id++;
    }
  }
  return CenterlineNetwork(pts);
}

NetworkModel y_model() {
  static NetworkModel model = assemble_network(make_fan({30.0, -30.0}, {1.0, 1.0}), FitConfig{});
  return model;
}

std::array<int, 4> sorted_face(int a, int b, int c, int d) {
  std::array<int, 4> f{a, b, c, d};
  std::sort(f.begin(), f.end());
  return f;
}

/// Face incidence of a hex mesh: every face must be shared by 1 or 2 cells.
struct FaceCount {
  std::map<std::array<int, 4>, int> count;
  int interior = 0, boundary = 0;
};
FaceCount count_faces(const HexMesh& m) {
  static const int F[6][4] = {{0, 1, 2, 3}, {4, 5, 6, 7}, {0, 1, 5, 4},
                              {1, 2, 6, 5}, {2, 3, 7, 6}, {3, 0, 4, 7}};
  FaceCount fc;
  for (const auto& h : m.hexes)
    for (const auto& f : F) ++fc.count[sorted_face(h[f[0]], h[f[1]], h[f[2]], h[f[3]])];
  for (const auto& [f, c] : fc.count) {
    REQUIRE(c <= 2);
    (c == 2 ? fc.interior : fc.boundary)++;
  }
  return fc;
}

int per_pattern_cells(const MeshParams& p) {
  int N = p.nodes_per_section, M = N / 4;
  return N * (p.n_alpha + p.n_beta) + M * M;
}

}  // namespace

TEST_CASE("cylinder sweep: exact circles, zero twist, hex count formula") {
  Spline4 tube = straight_tube(Vec3(0, 0, 0), Vec3(0, 0, 10), 1.0);
  MeshParams params;
  auto patch = mesh_vessel_surface(tube, params, 7);

  const int S = static_cast<int>(patch.sections.size());
  CHECK(S == 2);  // d*L/r = 0.2*10/1
  for (const auto& sec : patch.sections) {
    REQUIRE(static_cast<int>(sec.size()) == params.nodes_per_section);
    Vec3 c = Vec3::Zero();
    for (const auto& p : sec) c += p;
    c /= sec.size();
    for (const auto& p : sec) CHECK((p - c).norm() == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Zero twist: node 0 keeps its azimuth along the sweep.
  Vec3 d0 = patch.sections[0][0] - Vec3(0, 0, patch.sections[0][0].z());
  Vec3 d1 = patch.sections[S - 1][0] - Vec3(0, 0, patch.sections[S - 1][0].z());
  CHECK((d0.normalized() - d1.normalized()).norm() < 1e-9);

  StructuredSurfaceMesh surf;
  surf.N = params.nodes_per_section;
  surf.patches.push_back(patch);
  HexMesh vol = build_ogrid_volume(surf, params);
  CHECK(static_cast<int>(vol.hexes.size()) == (S - 1) * per_pattern_cells(params));
  CHECK(per_pattern_cells(params) == 516);

  auto fc = count_faces(vol);
  // Boundary = lateral surface quads plus the two end caps.
  CHECK(fc.boundary == (S - 1) * params.nodes_per_section + 2 * per_pattern_cells(params));

  QualityReport rep = quality_report(vol);
  CHECK(rep.min_sj > 0.5);
}

TEST_CASE("torus segment kr=0.5 meshes with positive cells, inner side tighter") {
  Spline4 tube = arc_tube(2.0, 1.0, M_PI / 2.0);
  MeshParams params;
  auto patch = mesh_vessel_surface(tube, params, 0);
  StructuredSurfaceMesh surf;
  surf.N = params.nodes_per_section;
  surf.patches.push_back(patch);
  HexMesh vol = build_ogrid_volume(surf, params);

  QualityReport rep = quality_report(vol);
  CHECK(rep.min_sj > 0.0);
  count_faces(vol);

  // Axial edges on the inner side of the bend are shorter than outside.
  const auto& secs = patch.sections;
  for (std::size_t s = 0; s + 1 < secs.size(); ++s) {
    int inner = 0, outer = 0;
    double din = std::numeric_limits<double>::infinity(), dout = 0.0;
    for (int i = 0; i < surf.N; ++i) {
      double rho = secs[s][i].head<2>().norm();  // distance from torus axis
      if (rho < din) {
        din = rho;
        inner = i;
      }
      if (rho > dout) {
        dout = rho;
        outer = i;
      }
    }
    CHECK((secs[s + 1][inner] - secs[s][inner]).norm() <
          (secs[s + 1][outer] - secs[s][outer]).norm());
  }
}

TEST_CASE("fold-over kr >= 1 is a recorded failure mode") {
  Spline4 tube = arc_tube(1.0 / 1.2, 1.0, M_PI / 2.0);
  MeshParams params;
  CHECK_THROWS_AS(mesh_vessel_surface(tube, params, 0), mesh_error);
}

TEST_CASE("decompose symmetric Y") {
  NetworkModel model = y_model();
  const auto& [junction, furc] = *model.furcations.begin();
  SeparationGeometry sep = decompose_furcation(furc, junction, 24);

  CHECK(std::abs(sep.X.y()) < 1e-6);
  REQUIRE(sep.boundary.size() == 3);
  CHECK(std::abs((sep.X - sep.boundary[0]).norm() - (sep.X - sep.boundary[2]).norm()) < 1e-6);

  // Everything lies on the union tube surface.
  std::vector<TubeSurface> tubes;
  for (int i = 0; i < furc.n_out; ++i) tubes.push_back(TubeSurface::from_furcation(furc, i));
  auto depth = [&](const Vec3& p) {
    double best = -1e300;
    for (const auto& t : tubes) best = std::max(best, t.signed_depth(p));
    return best;
  };
  CHECK(std::abs(depth(sep.ct0)) < 1e-6);
  CHECK(std::abs(depth(sep.ct1)) < 1e-6);
  CHECK(std::abs(depth(sep.boundary[0])) < 1e-6);
  CHECK(std::abs(depth(sep.boundary[2])) < 1e-6);
  for (const auto& pair : sep.arcs)
    for (const auto& arc : pair)
      for (const auto& p : arc) CHECK(std::abs(depth(p)) < 1e-6);

  // Asymmetric Y: X moves toward the small vessel.
  NetworkModel thin = assemble_network(make_fan({30.0, -30.0}, {1.0, 0.4}), FitConfig{});
  const auto& [j2, f2] = *thin.furcations.begin();
  SeparationGeometry sep2 = decompose_furcation(f2, j2, 24);
  CHECK(sep2.X.y() < -1e-3);  // daughter 1 (small) lies at -30 degrees
}

TEST_CASE("trifurcation decomposition produces n+1 separation plans") {
  NetworkModel model =
      assemble_network(make_fan({50.0, 0.0, -50.0}, {0.8, 0.9, 0.8}), FitConfig{});
  const auto& [junction, furc] = *model.furcations.begin();
  SeparationGeometry sep = decompose_furcation(furc, junction, 24);
  CHECK(sep.boundary.size() == 4);
  CHECK(sep.arcs.size() == 4);
  StructuredSurfaceMesh surf = mesh_furcation_surface(furc, sep, MeshParams{});
  CHECK(surf.patches.size() == 4);
}

TEST_CASE("furcation surface: node budget and mirror symmetry") {
  NetworkModel model = y_model();
  const auto& [junction, furc] = *model.furcations.begin();
  MeshParams params;
  params.nodes_per_section = 8;
  SeparationGeometry sep = decompose_furcation(furc, junction, 8);
  StructuredSurfaceMesh surf = mesh_furcation_surface(furc, sep, params);

  REQUIRE(surf.patches.size() == 3);
  for (const auto& patch : surf.patches)
    for (const auto& sec : patch.sections) CHECK(sec.size() == 8);
  // Half-loops carry N/2+1 nodes.
  CHECK(sep.half_loop(0).size() == 5);

  // Mirror symmetry about y=0: every node has a mirrored counterpart.
  std::vector<Vec3> all;
  for (const auto& patch : surf.patches)
    for (const auto& sec : patch.sections)
      for (const auto& p : sec) all.push_back(p);
  for (const auto& p : all) {
    Vec3 m(p.x(), -p.y(), p.z());
    double best = 1e300;
    for (const auto& q : all) best = std::min(best, (q - m).norm());
    CHECK(best < 1e-6);
  }
}

TEST_CASE("relaxation: perfect cylinder is a fixed point") {
  Spline4 tube = straight_tube(Vec3(0, 0, 0), Vec3(0, 0, 10), 1.0);
  MeshParams params;
  auto patch = mesh_vessel_surface(tube, params, 0);
  StructuredSurfaceMesh surf;
  surf.N = params.nodes_per_section;
  surf.patches.push_back(patch);

  relax_surface(surf, params);
  double moved = 0.0;
  for (std::size_t s = 0; s < patch.sections.size(); ++s)
    for (int i = 0; i < surf.N; ++i)
      moved = std::max(moved, (surf.patches[0].sections[s][i] - patch.sections[s][i]).norm());
  CHECK(moved < 1e-6);
}

TEST_CASE("relaxation: improves quad quality on the Y and stays on the surface") {
  NetworkModel model = y_model();
  const auto& [junction, furc] = *model.furcations.begin();
  MeshParams params;
  SeparationGeometry sep = decompose_furcation(furc, junction, params.nodes_per_section);
  StructuredSurfaceMesh surf = mesh_furcation_surface(furc, sep, params);

  StructuredSurfaceMesh one = surf, five = surf;
  MeshParams p1 = params;
  p1.relax_iters = 1;
  relax_surface(one, p1);
  relax_surface(five, params);

  CHECK(quality_report(five.to_quads()).mean_sj >= quality_report(one.to_quads()).mean_sj);

  // Every node must sit on the model surface: the composite of the furcation
  // path tubes and the adjoining vessel tubes (the end rings lie on the
  // latter). Deviation is the distance to the nearest tube surface.
  for (const auto& patch : five.patches)
    for (const auto& sec : patch.sections)
      for (const auto& p : sec) {
        double dev = 1e300, r = 1e300;
        auto probe = [&](const TubeSurface& t) {
          auto proj = t.spline.project_point(p);
          dev = std::min(dev, std::abs(t.radius_at(proj.u) - proj.distance));
          r = std::min(r, t.radius_at(proj.u));
        };
        for (const auto& t : patch.surfaces) probe(t);
        for (const auto& v : model.vessels) probe(TubeSurface{v});
        CHECK(dev < 1e-3 * r);
      }
}

TEST_CASE("2D rolling-circle fillet oracle") {
  // V with interior angle 60 degrees, opening toward +y; R = 1.
  const double half = M_PI / 6.0;  // flank angle from the y axis
  Vec3 unused;
  (void)unused;
  std::vector<Eigen::Vector2d> pts;
  const int per_side = 20;
  const double L = 4.0, ds = L / per_side;
  for (int i = per_side; i >= 1; --i)
    pts.emplace_back(-std::sin(half) * ds * i, std::cos(half) * ds * i);
  pts.emplace_back(0.0, 0.0);
  int apex = static_cast<int>(pts.size()) - 1;
  for (int i = 1; i <= per_side; ++i)
    pts.emplace_back(std::sin(half) * ds * i, std::cos(half) * ds * i);
  auto orig = pts;

  REQUIRE(fillet_polyline(pts, apex, 1.0));

  // Closed form: center on the bisector at distance R/sin(half); feet at
  // arc length R/tan(half) from the vertex.
  Eigen::Vector2d center(0.0, 1.0 / std::sin(half));
  double foot = 1.0 / std::tan(half);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double s = ds * std::abs(static_cast<int>(i) - apex);
    if (s < foot - 1e-9) {
      CHECK(std::abs((pts[i] - center).norm() - 1.0) < 1e-9);  // on the fillet arc
    } else {
      CHECK((pts[i] - orig[i]).norm() < 1e-12);  // untouched beyond the feet
    }
  }
}

TEST_CASE("apex smoothing: identity at R=0 and locality at 3R") {
  NetworkModel model = y_model();
  const auto& [junction, furc] = *model.furcations.begin();
  MeshParams params;
  SeparationGeometry sep = decompose_furcation(furc, junction, params.nodes_per_section);
  StructuredSurfaceMesh surf = mesh_furcation_surface(furc, sep, params);
  relax_surface(surf, params);

  StructuredSurfaceMesh zero = surf;
  smooth_apex(zero, sep, 0.0);
  for (std::size_t pi = 0; pi < surf.patches.size(); ++pi)
    for (std::size_t s = 0; s < surf.patches[pi].sections.size(); ++s)
      for (int i = 0; i < surf.N; ++i)
        CHECK((zero.patches[pi].sections[s][i] - surf.patches[pi].sections[s][i]).norm() ==
              0.0);

  const double R = 0.2 * furc.apical[0].radius;
  StructuredSurfaceMesh smoothed = surf;
  smooth_apex(smoothed, sep, R);
  bool any_moved = false;
  for (std::size_t pi = 0; pi < surf.patches.size(); ++pi)
    for (std::size_t s = 0; s < surf.patches[pi].sections.size(); ++s)
      for (int i = 0; i < surf.N; ++i) {
        double moved =
            (smoothed.patches[pi].sections[s][i] - surf.patches[pi].sections[s][i]).norm();
        if (moved > 1e-12) any_moved = true;
        double dist = 1e300;
        for (const auto& ap : furc.apexes)
          dist = std::min(dist, (surf.patches[pi].sections[s][i] - ap).norm());
        if (dist > 3.0 * R) CHECK(moved < 1e-9);
      }
  CHECK(any_moved);
}

TEST_CASE("full network mesh: conformity, quality, determinism") {
  NetworkModel model = y_model();
  MeshParams params;
  MeshResult res = mesh_network(model, params);
  CHECK(res.failures.empty());

  auto fc = count_faces(res.volume);
  CHECK(fc.interior > 0);

  QualityReport rep = quality_report(res.volume);
  CHECK(rep.min_sj > 0.0);

  // Quality distribution: furcation cells vs vessel cells.
  const auto& furc = model.furcations.begin()->second;
  double reach = 0.0;
  Vec3 jc = furc.inlet.center;
  for (const auto& o : furc.outlets) reach = std::max(reach, (o.center - jc).norm());
  for (const auto& o : furc.outlets) reach = std::max(reach, (furc.inlet.center - o.center).norm());
  reach = std::max(reach, (furc.inlet.center - jc).norm()) + 1.0;
  Vec3 origin = Vec3::Zero();
  int f_cells = 0, f_good = 0, v_cells = 0, v_good = 0;
  for (std::size_t h = 0; h < res.volume.hexes.size(); ++h) {
    Vec3 c = Vec3::Zero();
    for (int k = 0; k < 8; ++k) c += res.volume.vertices[res.volume.hexes[h][k]];
    c /= 8.0;
    bool in_furc = (c - origin).norm() < reach;
    double sj = rep.cell_sj[h];
    if (in_furc) {
      ++f_cells;
      f_good += sj > 0.9;
    } else {
      ++v_cells;
      v_good += sj > 0.9;
    }
  }
  REQUIRE(f_cells > 0);
  REQUIRE(v_cells > 0);
  CHECK(static_cast<double>(f_good) / f_cells >= 0.71);
  CHECK(static_cast<double>(v_good) / v_cells >= 0.95);

  // Mirror symmetry of the volume about y=0 within 1e-6 (hash grid lookup).
  auto key3 = [](const Vec3& p, double cell) {
    return std::make_tuple(static_cast<long long>(std::floor(p.x() / cell)),
                           static_cast<long long>(std::floor(p.y() / cell)),
                           static_cast<long long>(std::floor(p.z() / cell)));
  };
  const double cell = 1e-3;
  std::map<std::tuple<long long, long long, long long>, std::vector<int>> grid;
  for (std::size_t v = 0; v < res.volume.vertices.size(); ++v)
    grid[key3(res.volume.vertices[v], cell)].push_back(static_cast<int>(v));
  double worst = 0.0;
  for (const auto& p : res.volume.vertices) {
    Vec3 m(p.x(), -p.y(), p.z());
    double best = 1e300;
    auto [kx, ky, kz] = key3(m, cell);
    for (long long dx = -1; dx <= 1; ++dx)
      for (long long dy = -1; dy <= 1; ++dy)
        for (long long dz = -1; dz <= 1; ++dz) {
          auto it = grid.find(std::make_tuple(kx + dx, ky + dy, kz + dz));
          if (it == grid.end()) continue;
          for (int v : it->second) best = std::min(best, (res.volume.vertices[v] - m).norm());
        }
    worst = std::max(worst, best);
  }
  CHECK(worst < 1e-6);

  // Determinism: identical reruns.
  MeshResult res2 = mesh_network(model, params);
  REQUIRE(res2.volume.vertices.size() == res.volume.vertices.size());
  for (std::size_t v = 0; v < res.volume.vertices.size(); ++v)
    CHECK(std::memcmp(res.volume.vertices[v].data(), res2.volume.vertices[v].data(),
                      3 * sizeof(double)) == 0);
  CHECK(res2.volume.hexes == res.volume.hexes);
}

TEST_CASE("trifurcation network volume conforms") {
  NetworkModel model =
      assemble_network(make_fan({50.0, 0.0, -50.0}, {0.8, 0.9, 0.8}), FitConfig{});
  MeshParams params;
  MeshResult res = mesh_network(model, params);
  CHECK(res.failures.empty());
  count_faces(res.volume);
  QualityReport rep = quality_report(res.volume);
  CHECK(rep.min_sj > 0.0);
}

TEST_CASE("failed vessel is isolated; the rest is meshed") {
  NetworkModel model;
  model.vessels.push_back(straight_tube(Vec3(0, 0, 0), Vec3(0, 0, 10), 1.0));
  model.vessels.push_back(arc_tube(1.0 / 1.2, 1.0, M_PI / 2.0));  // kr = 1.2
  MeshParams params;
  MeshResult res = mesh_network(model, params);
  REQUIRE(res.failures.size() == 1);
  CHECK(res.failures[0].kind == "vessel");
  CHECK(res.failures[0].id == 1);
  CHECK(!res.volume.hexes.empty());
  for (auto b : res.volume.hex_branch) CHECK(b == 0);
}
