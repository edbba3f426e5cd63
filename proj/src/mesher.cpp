#include "vesselforge/mesher.hpp"

#include "vesselforge/quality.hpp"

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace vf {

namespace {

constexpr double kPi = 3.14159265358979323846;

Vec3 any_perp(const Vec3& t) {
  Vec3 a = std::abs(t.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return (a - a.dot(t) * t).normalized();
}

/// Exact-bits vertex key for merging shared nodes.
struct VecKey {
  std::uint64_t b[3];
  explicit VecKey(const Vec3& v) {
    std::memcpy(b, v.data(), sizeof(b));
  }
  bool operator==(const VecKey& o) const {
    return b[0] == o.b[0] && b[1] == o.b[1] && b[2] == o.b[2];
  }
};
struct VecKeyHash {
  std::size_t operator()(const VecKey& k) const {
    std::size_t h = 1469598103934665603ull;
    for (std::uint64_t w : k.b) h = (h ^ w) * 1099511628211ull;
    return h;
  }
};

/// Local projection of a point onto a spline with a warm start: golden
/// section around the guess, sliding the window while the minimum sits on
/// its edge.
double local_project(const SplineD& s, const Vec3& q, double u_guess) {
  double w = 0.05;
  double lo = std::max(0.0, u_guess - w), hi = std::min(1.0, u_guess + w);
  auto dist = [&](double u) { return (s.position(u) - q).squaredNorm(); };
  for (int slide = 0; slide < 40; ++slide) {
    const double gr = 0.6180339887498949;
    double a = lo, b = hi;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = dist(c), fd = dist(d);
    for (int it = 0; it < 40; ++it) {
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - gr * (b - a);
        fc = dist(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + gr * (b - a);
        fd = dist(d);
      }
    }
    double u = 0.5 * (a + b);
    bool at_lo = u - lo < 1e-3 && lo > 0.0;
    bool at_hi = hi - u < 1e-3 && hi < 1.0;
    if (!at_lo && !at_hi) return u;
    double mid = at_lo ? lo : hi;
    lo = std::max(0.0, mid - w);
    hi = std::min(1.0, mid + w);
  }
  return 0.5 * (lo + hi);
}

/// Depth of a point in the union of tubes, with warm-started projections.
struct RayProjector {
  const std::vector<TubeSurface>& tubes;
  std::vector<double> guess;

  explicit RayProjector(const std::vector<TubeSurface>& t) : tubes(t), guess(t.size(), -1.0) {}

  double depth(const Vec3& p) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < tubes.size(); ++i) {
      double u = guess[i] < 0.0 ? tubes[i].spline.project_point(p).u
                                : local_project(tubes[i].spline, p, guess[i]);
      guess[i] = u;
      double d = tubes[i].radius_at(u) - (tubes[i].spline.position(u) - p).norm();
      best = std::max(best, d);
    }
    return best;
  }
};

double union_depth(const std::vector<TubeSurface>& tubes, const Vec3& p) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& t : tubes) best = std::max(best, t.signed_depth(p));
  return best;
}

/// Circular mean of angle residuals.
double circular_mean(const std::vector<double>& angles) {
  double s = 0.0, c = 0.0;
  for (double a : angles) {
    s += std::sin(a);
    c += std::cos(a);
  }
  return std::atan2(s, c);
}

Vec3 ring_orientation(const std::vector<Vec3>& ring) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : ring) c += p;
  c /= static_cast<double>(ring.size());
  Vec3 n = Vec3::Zero();
  for (std::size_t i = 0; i < ring.size(); ++i)
    n += (ring[i] - c).cross(ring[(i + 1) % ring.size()] - c);
  return n;
}

/// Cubic Hermite point.
Vec3 hermite(const Vec3& p0, const Vec3& m0, const Vec3& p1, const Vec3& m1, double s) {
  double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * p0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * p1 +
         (s3 - s2) * m1;
}

Vec3 hermite_tangent(const Vec3& p0, const Vec3& m0, const Vec3& p1, const Vec3& m1,
                     double s) {
  double s2 = s * s;
  return (6 * s2 - 6 * s) * p0 + (3 * s2 - 4 * s + 1) * m0 + (-6 * s2 + 6 * s) * p1 +
         (3 * s2 - 2 * s) * m1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tube surface

TubeSurface TubeSurface::from_furcation(const FurcationModel& model, int daughter) {
  TubeSurface ts;
  ts.spline = model.splines[daughter];
  ts.has_profile = true;
  ts.u_in = model.inlet_u[daughter];
  ts.u_ap = model.apex_u[daughter];
  ts.u_out = model.outlet_u[daughter];
  ts.r_in = model.inlet.radius;
  ts.r_ap = model.apical[daughter].radius;
  ts.r_out = model.outlets[daughter].radius;
  return ts;
}

double TubeSurface::radius_at(double u) const {
  if (!has_profile || u <= u_in || u >= u_out) return spline.radius(u);
  // Piecewise linear in arc length between the inlet, apical and outlet
  // sections, matching the model's radius profile.
  if (u <= u_ap) {
    double s = spline.arc_length(u_in, u), L = spline.arc_length(u_in, u_ap);
    return L > 0.0 ? r_in + (r_ap - r_in) * (s / L) : r_ap;
  }
  double s = spline.arc_length(u_ap, u), L = spline.arc_length(u_ap, u_out);
  return L > 0.0 ? r_ap + (r_out - r_ap) * (s / L) : r_out;
}

double TubeSurface::signed_depth(const Vec3& p) const {
  auto proj = spline.project_point(p);
  return radius_at(proj.u) - proj.distance;
}

Vec3 project_ray_to_surface(const std::vector<TubeSurface>& tubes, const Vec3& origin,
                            const Vec3& dir) {
  Vec3 d = dir.normalized();
  RayProjector proj(tubes);
  double f0 = proj.depth(origin);
  if (f0 < 0.0) throw mesh_error("surface projection: ray origin outside the model");
  // Bracket the FIRST inside->outside crossing with a fine march, then
  // bisect.  The union of tubes need not be star-shaped from the origin: a
  // ray can leave one tube, cross a gap near a crotch, and re-enter a
  // neighbouring tube, so a coarse doubling search may bracket a much later
  // crossing and place the node far downstream.
  double step = 0.0;
  for (const auto& t : tubes) step = std::max(step, t.spline.radius(0.5));
  if (step <= 0.0) step = 1.0;
  const double h = step / 32.0;
  // Ignore dips shallower than delta: a ray grazing a tube can dip a hair
  // outside and back, and rounding noise in such a dip would make the choice
  // of crossing unstable (breaking e.g. mirror symmetry of symmetric models).
  const double delta = 1e-7 * step;
  double lo = 0.0, hi = h;
  int steps = 0;
  while (proj.depth(origin + hi * d) > -delta) {
    lo = hi;
    hi += h;
    if (++steps > 4096) throw mesh_error("surface projection: no exit along ray");
  }
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    (proj.depth(origin + mid * d) > -delta ? lo : hi) = mid;
  }
  return origin + 0.5 * (lo + hi) * d;
}

// ---------------------------------------------------------------------------
// Furcation decomposition

std::vector<Vec3> SeparationGeometry::half_loop(int j) const {
  const auto& up = arcs[j][0];    // B_j -> CT0
  const auto& down = arcs[j][1];  // B_j -> CT1
  const int stride = std::max(arc_refine, 1);
  std::vector<Vec3> loop;
  loop.reserve((up.size() + down.size()) / stride + 1);
  for (int k = static_cast<int>(up.size()) - 1; k >= 0; k -= stride)
    loop.push_back(up[k]);  // CT0 -> B_j
  for (int k = stride; k < static_cast<int>(down.size()); k += stride)
    loop.push_back(down[k]);  // B_j -> CT1
  return loop;
}

SeparationGeometry decompose_furcation(const FurcationModel& model, std::int64_t junction,
                                       int N) {
  if (N < 8 || N % 8 != 0)
    throw mesh_error("furcation meshing requires a section node count divisible by 8");
  const int n = model.n_out;
  std::vector<TubeSurface> tubes;
  for (int i = 0; i < n; ++i) tubes.push_back(TubeSurface::from_furcation(model, i));

  SeparationGeometry sep;
  sep.junction = junction;

  // Barycenter X of the apexes and the centerline points closest to them.
  Vec3 mean_ap = Vec3::Zero();
  for (const auto& ap : model.apexes) mean_ap += ap;
  mean_ap /= static_cast<double>(model.apexes.size());
  Vec3 acc = Vec3::Zero();
  int count = 0;
  for (const auto& ap : model.apexes) {
    acc += ap;
    ++count;
  }
  for (int i = 0; i < n; ++i) {
    double u = model.splines[i].project_point(mean_ap).u;
    acc += model.splines[i].position(u);
    ++count;
  }
  sep.X = acc / static_cast<double>(count);

  // Furcation plane normal from the section normals.
  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  scatter += model.inlet.normal * model.inlet.normal.transpose();
  for (int i = 0; i < n; ++i)
    scatter += model.outlets[i].normal * model.outlets[i].normal.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
  Vec3 nrm = eig.eigenvectors().col(0).normalized();

  // In-plane angles of the daughters measured from the upstream inlet
  // direction; flip the normal if the stored daughter order runs clockwise.
  Vec3 up_dir = -model.inlet.normal;
  Vec3 ref = (up_dir - up_dir.dot(nrm) * nrm).normalized();
  Vec3 ref_perp = nrm.cross(ref);
  auto angle_of = [&](const Vec3& v) {
    double a = std::atan2(v.dot(ref_perp), v.dot(ref));
    if (a < 1e-12) a += 2.0 * kPi;
    return a;
  };
  std::vector<double> theta(n);
  for (int i = 0; i < n; ++i) theta[i] = angle_of(model.outlets[i].center - sep.X);
  if (n > 1 && theta[0] > theta[n - 1]) {
    nrm = -nrm;
    ref_perp = -ref_perp;
    for (int i = 0; i < n; ++i) theta[i] = angle_of(model.outlets[i].center - sep.X);
  }
  sep.plane_normal = nrm;

  auto in_plane_dir = [&](double ang) { return std::cos(ang) * ref + std::sin(ang) * ref_perp; };

  // Equator points: SP_1, the apexes, SP_2.
  sep.boundary.resize(n + 1);
  sep.boundary[0] = project_ray_to_surface(tubes, sep.X, in_plane_dir(0.5 * theta[0]));
  for (int k = 0; k + 1 < n; ++k) sep.boundary[k + 1] = model.apexes[k];
  sep.boundary[n] =
      project_ray_to_surface(tubes, sep.X, in_plane_dir(0.5 * (theta[n - 1] + 2.0 * kPi)));

  sep.ct0 = project_ray_to_surface(tubes, sep.X, nrm);
  sep.ct1 = project_ray_to_surface(tubes, sep.X, -nrm);

  // Surface arcs from each equator point to each center point, sampled by
  // projecting the chord from X; oversampled so relaxation can slide nodes
  // along the arc without leaving the surface.
  sep.arc_refine = 8;
  const int segs = sep.arc_refine * (N / 4);
  sep.arcs.resize(n + 1);
  for (int j = 0; j <= n; ++j) {
    for (int side = 0; side < 2; ++side) {
      const Vec3& ct = side == 0 ? sep.ct0 : sep.ct1;
      auto& arc = sep.arcs[j][side];
      arc.resize(segs + 1);
      arc[0] = sep.boundary[j];
      arc[segs] = ct;
      for (int s = 1; s < segs; ++s) {
        Vec3 chord = sep.boundary[j] + (ct - sep.boundary[j]) * (static_cast<double>(s) / segs);
        arc[s] = project_ray_to_surface(tubes, sep.X, chord - sep.X);
      }
    }
  }
  return sep;
}

// ---------------------------------------------------------------------------
// Furcation surface meshing

namespace {

/// End-section ring whose node 0 points toward the loop's CT0 corner and
/// whose rotation to all four loop corners is least-squares minimal.
std::vector<Vec3> aligned_ring(const CrossSection& cs, int N, const std::vector<Vec3>& loop) {
  Vec3 e1 = any_perp(cs.normal);
  Vec3 e2 = cs.normal.cross(e1);
  std::vector<double> residuals;
  const int corners[4] = {0, N / 4, N / 2, 3 * N / 4};
  for (int k = 0; k < 4; ++k) {
    Vec3 d = loop[corners[k]] - cs.center;
    double ang = std::atan2(d.dot(e2), d.dot(e1));
    residuals.push_back(ang - 2.0 * kPi * corners[k] / N);
  }
  double phi = circular_mean(residuals);
  std::vector<Vec3> ring(N);
  for (int i = 0; i < N; ++i) {
    double a = phi + 2.0 * kPi * i / N;
    ring[i] = cs.center + cs.radius * (std::cos(a) * e1 + std::sin(a) * e2);
  }
  return ring;
}

/// Total direction change along a sampled curve.
double polyline_bend(const std::vector<Vec3>& pts) {
  double bend = 0.0;
  for (std::size_t i = 0; i + 2 < pts.size(); ++i) {
    Vec3 a = pts[i + 1] - pts[i], b = pts[i + 2] - pts[i + 1];
    double na = a.norm(), nb = b.norm();
    if (na > 0 && nb > 0)
      bend += std::acos(std::clamp(a.dot(b) / (na * nb), -1.0, 1.0));
  }
  return bend;
}

struct PatchSpec {
  CrossSection end;        // model cross section at the open end
  std::vector<Vec3> loop;  // separation loop, CT0 at index 0
  int iface_first = -1, iface_second = -1;
  Vec3 flow;               // downstream direction at the separation end
  bool loop_in_front;      // daughter patches start at the loop
  std::int64_t branch_tag;
};

}  // namespace

StructuredSurfaceMesh mesh_furcation_surface(const FurcationModel& model,
                                             const SeparationGeometry& sep,
                                             const MeshParams& params) {
  params.validate();
  const int N = params.nodes_per_section;
  if (N % 8 != 0)
    throw mesh_error("furcation meshing requires a section node count divisible by 8");
  const int n = model.n_out;

  std::vector<TubeSurface> tubes;
  for (int i = 0; i < n; ++i) tubes.push_back(TubeSurface::from_furcation(model, i));

  auto build_loop = [&](int ifa, int ifb, const Vec3& downstream, PatchSpec& spec) {
    auto assemble = [&](int L, int R) {
      std::vector<Vec3> loop(N);
      auto hl = sep.half_loop(L), hr = sep.half_loop(R);
      for (int i = 0; i <= N / 2; ++i) loop[i % N] = hl[i];
      for (int t = 1; t < N / 2; ++t) loop[N / 2 + t] = hr[N / 2 - t];
      return loop;
    };
    std::vector<Vec3> loop = assemble(ifa, ifb);
    if (ring_orientation(loop).dot(downstream) < 0.0) {
      std::swap(ifa, ifb);
      loop = assemble(ifa, ifb);
    }
    spec.loop = std::move(loop);
    spec.iface_first = ifa;
    spec.iface_second = ifb;
    spec.flow = downstream;
  };

  std::vector<PatchSpec> specs(n + 1);
  // Inlet patch: from C0 downstream to the separation loop.
  specs[0].end = model.inlet;
  specs[0].loop_in_front = false;
  specs[0].branch_tag = -1;
  build_loop(0, n, model.inlet.normal, specs[0]);
  // Daughter patches: from the separation loop downstream to C_i.
  for (int k = 0; k < n; ++k) {
    specs[k + 1].end = model.outlets[k];
    specs[k + 1].loop_in_front = true;
    specs[k + 1].branch_tag = -2 - k;
    build_loop(k, k + 1, (model.outlets[k].center - sep.X).normalized(), specs[k + 1]);
  }

  StructuredSurfaceMesh mesh;
  mesh.N = N;
  mesh.separations.emplace(sep.junction, sep);

  for (auto& spec : specs) {
    std::vector<Vec3> ring = aligned_ring(spec.end, N, spec.loop);

    // Projection targets for interior trajectory nodes.  A daughter patch
    // covers the part of its own tube downstream of the separation loop,
    // where that tube IS the union boundary; projecting onto the single tube
    // keeps the projection continuous (the full union is non-convex near the
    // crotch, where a first-crossing ray projection jumps between sheets).
    // The inlet patch spans all tubes upstream of the loop and keeps the
    // full union.
    const std::vector<TubeSurface> proj_tubes =
        spec.branch_tag == -1
            ? tubes
            : std::vector<TubeSurface>{tubes[static_cast<std::size_t>(-2 - spec.branch_tag)]};

    // Connecting spline from the end-section center to X: cubic Hermite
    // leaving the section along its normal.
    Vec3 c0 = spec.end.center;
    Vec3 into = spec.loop_in_front ? -spec.end.normal : spec.end.normal;
    double chord = (sep.X - c0).norm();
    Vec3 m0 = into * chord, m1 = (sep.X - c0).normalized() * chord;
    const int probe = 32;
    std::vector<Vec3> tspl(probe + 1);
    for (int s = 0; s <= probe; ++s)
      tspl[s] = hermite(c0, m0, sep.X, m1, static_cast<double>(s) / probe);
    double tlen = 0.0;
    for (int s = 0; s < probe; ++s) tlen += (tspl[s + 1] - tspl[s]).norm();

    // Trajectories end ring -> loop. Interior nodes are found by rotating the
    // outgoing ray direction from the ring node's toward the loop node's
    // (spherical interpolation about the moving origin) and projecting onto
    // the model surface; this lets sections pivot smoothly toward the saddle
    // of the separation loop instead of staying perpendicular to the axis.
    //
    // Each trajectory is first sampled finely, then re-stationed uniformly by
    // its own arc length: the union surface bends hardest right where a
    // branch starts to flare into the junction, and uniform parameter
    // stations leave that knee covered by a single long chord.
    // Ray origins must stay inside the union: a near-straight origin curve
    // can cut the inside corner of a strongly bent daughter. Outside or too
    // shallow origins are pulled toward the nearest tube centreline.
    auto tuck_inside = [&](Vec3 o) {
      auto depth_of = [&](const Vec3& p) {
        double best = -1e300;
        for (const auto& t : tubes) best = std::max(best, t.signed_depth(p));
        return best;
      };
      // Pull target: centreline point of the nearest tube.  Average the
      // candidates of tubes tied for nearest (e.g. on the symmetry plane of
      // a symmetric furcation, where the crotch is equidistant from two
      // daughters) so the pull direction does not depend on tube order.
      std::vector<Vec3> cand_c;
      std::vector<double> cand_m;
      double dist = 1e300;
      for (const auto& t : tubes) {
        auto proj = t.spline.project_point(o);
        double tol = 1e-6 * (1.0 + proj.distance);
        if (proj.distance < dist - tol) {
          dist = proj.distance;
          cand_c.assign(1, t.spline.position(proj.u));
          cand_m.assign(1, 0.2 * t.radius_at(proj.u));
        } else if (proj.distance < dist + tol) {
          cand_c.push_back(t.spline.position(proj.u));
          cand_m.push_back(0.2 * t.radius_at(proj.u));
        }
      }
      Vec3 c = Vec3::Zero();
      double margin = 0.0;
      for (std::size_t k = 0; k < cand_c.size(); ++k) {
        c += cand_c[k];
        margin += cand_m[k];
      }
      c /= static_cast<double>(cand_c.size());
      margin /= static_cast<double>(cand_m.size());
      if (depth_of(o) >= margin) return o;
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 40; ++it) {
        double mid = 0.5 * (lo + hi);
        (depth_of(o + mid * (c - o)) < margin ? lo : hi) = mid;
      }
      return Vec3(o + hi * (c - o));
    };

    auto point_at = [&](const Vec3& p, const Vec3& q, const Vec3& d0, const Vec3& d1,
                        double omega, double f) {
      if (f <= 0.0) return p;
      if (f >= 1.0) return q;
      Vec3 origin = tuck_inside(hermite(c0, m0, sep.X, m1, f));
      Vec3 dir;
      if (params.init_mode == MeshParams::InitMode::linear) {
        dir = p + f * (q - p) - origin;
      } else if (omega < 1e-9) {
        dir = d0;
      } else {
        dir = (std::sin((1.0 - f) * omega) * d0 + std::sin(f * omega) * d1) /
              std::sin(omega);
      }
      return project_ray_to_surface(tubes, origin, dir);
    };

    const int F = 64;  // fine stations per trajectory
    std::vector<std::vector<Vec3>> fine(N, std::vector<Vec3>(F + 1));
    double max_bend = 0.0;
    for (int i = 0; i < N; ++i) {
      const Vec3& p = ring[i];
      const Vec3& q = spec.loop[i];
      Vec3 d0 = (p - c0).normalized();
      Vec3 d1 = (q - sep.X).normalized();
      double omega = std::acos(std::clamp(d0.dot(d1), -1.0, 1.0));
      for (int s = 0; s <= F; ++s)
        fine[i][s] = point_at(p, q, d0, d1, omega, static_cast<double>(s) / F);
      max_bend = std::max(max_bend, polyline_bend(fine[i]));
    }

    int S = std::max<int>(
        {6, static_cast<int>(std::lround(2.0 * params.density * tlen / spec.end.radius)) + 1,
         static_cast<int>(std::ceil(std::max(polyline_bend(tspl), max_bend) / 0.3)) + 1});

    std::vector<std::vector<Vec3>> sections(S, std::vector<Vec3>(N));
    sections[0] = ring;
    sections[S - 1] = spec.loop;
    for (int i = 0; i < N; ++i) {
      const Vec3& p = ring[i];
      const Vec3& q = spec.loop[i];
      Vec3 d0 = (p - c0).normalized();
      Vec3 d1 = (q - sep.X).normalized();
      double omega = std::acos(std::clamp(d0.dot(d1), -1.0, 1.0));
      std::vector<double> cum(F + 1, 0.0);
      for (int s = 0; s < F; ++s) cum[s + 1] = cum[s] + (fine[i][s + 1] - fine[i][s]).norm();
      int seg = 0;
      for (int s = 1; s + 1 < S; ++s) {
        double want = cum[F] * s / (S - 1);
        while (seg + 1 < F && cum[seg + 1] < want) ++seg;
        double span = cum[seg + 1] - cum[seg];
        double ff = (seg + (span > 0.0 ? (want - cum[seg]) / span : 0.0)) / F;
        sections[s][i] = point_at(p, q, d0, d1, omega, ff);
      }
    }

    StructuredSurfaceMesh::Patch patch;
    patch.branch = spec.branch_tag;
    patch.surfaces = tubes;
    StructuredSurfaceMesh::SepEnd se{sep.junction, spec.iface_first, spec.iface_second};
    if (spec.loop_in_front) {
      patch.sections.assign(sections.rbegin(), sections.rend());
      patch.sep_front = se;
    } else {
      patch.sections = std::move(sections);
      patch.sep_back = se;
    }
    mesh.patches.push_back(std::move(patch));
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// Relaxation

namespace {

enum class NodeKind { free_surface, slide_arc, slide_ring, fixed };

struct RelaxNode {
  Vec3 pos;
  NodeKind kind = NodeKind::free_surface;
  std::vector<int> neighbors;
  std::vector<std::pair<int, std::pair<int, int>>> slots;  // (patch, (section, i))
  int patch = -1;                  // projection context
  int section = -1;                // for the ray origin
  const std::vector<Vec3>* arc = nullptr;  // slide target
  Vec3 arc_origin = Vec3::Zero();          // projection center for the arc
  Vec3 ring_center = Vec3::Zero();
  Vec3 ring_normal = Vec3::UnitZ();
  double ring_radius = 0.0;
};

Vec3 closest_on_polyline(const std::vector<Vec3>& poly, const Vec3& p) {
  double best = std::numeric_limits<double>::infinity();
  Vec3 out = poly.front();
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
    Vec3 a = poly[i], d = poly[i + 1] - poly[i];
    double t = std::clamp((p - a).dot(d) / std::max(d.squaredNorm(), 1e-300), 0.0, 1.0);
    Vec3 q = a + t * d;
    double dist = (q - p).squaredNorm();
    if (dist < best) {
      best = dist;
      out = q;
    }
  }
  return out;
}

}  // namespace

void relax_surface(StructuredSurfaceMesh& mesh, const MeshParams& params) {
  params.validate();
  const int N = mesh.N;
  if (N == 0 || mesh.patches.empty()) return;

  // Merge coincident nodes into a single relaxation graph.
  std::unordered_map<VecKey, int, VecKeyHash> ids;
  std::vector<RelaxNode> nodes;
  auto node_id = [&](const Vec3& p) {
    auto [it, fresh] = ids.try_emplace(VecKey(p), static_cast<int>(nodes.size()));
    if (fresh) {
      nodes.emplace_back();
      nodes.back().pos = p;
    }
    return it->second;
  };

  for (std::size_t pi = 0; pi < mesh.patches.size(); ++pi) {
    auto& patch = mesh.patches[pi];
    const int S = static_cast<int>(patch.sections.size());
    for (int s = 0; s < S; ++s) {
      for (int i = 0; i < N; ++i) {
        // node_id may grow `nodes`; collect neighbor ids before touching nd.
        int id = node_id(patch.sections[s][i]);
        std::vector<int> nbs;
        nbs.push_back(node_id(patch.sections[s][(i + 1) % N]));
        nbs.push_back(node_id(patch.sections[s][(i + N - 1) % N]));
        if (s > 0) nbs.push_back(node_id(patch.sections[s - 1][i]));
        if (s + 1 < S) nbs.push_back(node_id(patch.sections[s + 1][i]));

        RelaxNode& nd = nodes[id];
        nd.slots.push_back({static_cast<int>(pi), {s, i}});
        if (nd.patch < 0) {
          nd.patch = static_cast<int>(pi);
          nd.section = s;
        }
        nd.neighbors.insert(nd.neighbors.end(), nbs.begin(), nbs.end());

        bool sep_here = (s == 0 && patch.sep_front) || (s == S - 1 && patch.sep_back);
        bool end_here = (s == 0 && !patch.sep_front) || (s == S - 1 && !patch.sep_back);
        if (sep_here) {
          const auto& se = s == 0 ? *patch.sep_front : *patch.sep_back;
          const auto& sep = mesh.separations.at(se.junction);
          bool corner = i == 0 || i == N / 4 || i == N / 2 || i == 3 * N / 4;
          if (corner) {
            nd.kind = NodeKind::fixed;
          } else if (nd.kind != NodeKind::fixed) {
            nd.kind = NodeKind::slide_arc;
            int iface = i < N / 2 ? se.iface_first : se.iface_second;
            int local = i < N / 2 ? i : N - i;
            nd.arc = local < N / 4 ? &sep.arcs[iface][0] : &sep.arcs[iface][1];
            nd.arc_origin = sep.X;
          }
        } else if (end_here && nd.kind == NodeKind::free_surface) {
          nd.kind = NodeKind::slide_ring;
          Vec3 c = Vec3::Zero();
          for (const auto& p : patch.sections[s]) c += p;
          c /= N;
          nd.ring_center = c;
          nd.ring_normal = ring_orientation(patch.sections[s]).normalized();
          nd.ring_radius = (patch.sections[s][i] - c).norm();
        }
      }
    }
  }
  for (auto& nd : nodes) {
    std::sort(nd.neighbors.begin(), nd.neighbors.end());
    nd.neighbors.erase(std::unique(nd.neighbors.begin(), nd.neighbors.end()),
                       nd.neighbors.end());
  }

  for (int iter = 0; iter < params.relax_iters; ++iter) {
    std::vector<Vec3> next(nodes.size());
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      RelaxNode& nd = nodes[k];
      if (nd.kind == NodeKind::fixed || nd.neighbors.empty()) {
        next[k] = nd.pos;
        continue;
      }
      Vec3 avg = Vec3::Zero();
      for (int nb : nd.neighbors) avg += nodes[nb].pos;
      avg /= static_cast<double>(nd.neighbors.size());
      Vec3 target = nd.pos + params.relax_factor * (avg - nd.pos);

      switch (nd.kind) {
        case NodeKind::slide_arc: {
          // The arcs are central projections of their chords from the
          // junction point, so re-projecting the polyline foot restores the
          // exact surface curve.
          Vec3 q = closest_on_polyline(*nd.arc, target);
          const auto& patch = mesh.patches[nd.patch];
          try {
            next[k] = patch.surfaces.empty()
                          ? q
                          : project_ray_to_surface(patch.surfaces, nd.arc_origin,
                                                   q - nd.arc_origin);
          } catch (const mesh_error&) {
            next[k] = q;
          }
          break;
        }
        case NodeKind::slide_ring: {
          Vec3 d = target - nd.ring_center;
          d -= d.dot(nd.ring_normal) * nd.ring_normal;
          double len = d.norm();
          next[k] = len > 1e-300 ? Vec3(nd.ring_center + nd.ring_radius * d / len) : nd.pos;
          break;
        }
        case NodeKind::free_surface: {
          const auto& patch = mesh.patches[nd.patch];
          if (patch.surfaces.empty()) {
            next[k] = target;
            break;
          }
          Vec3 origin = Vec3::Zero();
          for (const auto& p : patch.sections[nd.section]) origin += p;
          origin /= N;
          try {
            next[k] = project_ray_to_surface(patch.surfaces, origin, target - origin);
          } catch (const mesh_error&) {
            next[k] = target;
          }
          break;
        }
        default:
          next[k] = nd.pos;
      }
    }
    for (std::size_t k = 0; k < nodes.size(); ++k) nodes[k].pos = next[k];
  }

  for (const auto& nd : nodes)
    for (const auto& [pi, si] : nd.slots)
      mesh.patches[pi].sections[si.first][si.second] = nd.pos;
}

// ---------------------------------------------------------------------------
// Apex smoothing

/// Rolling-circle fillet of a 2D polyline (x: along the curve, y: toward the
/// rolling side). Returns true if a fillet was applied.
bool fillet_polyline(std::vector<Eigen::Vector2d>& pts, int apex_idx, double R) {
  const int m = static_cast<int>(pts.size());
  auto seg_dir = [&](int i) { return Eigen::Vector2d(pts[i + 1] - pts[i]).normalized(); };
  auto up_normal = [&](int i) {
    Eigen::Vector2d t = seg_dir(i);
    Eigen::Vector2d nrm(-t.y(), t.x());
    return nrm.y() >= 0.0 ? nrm : Eigen::Vector2d(-nrm);
  };

  for (int li = apex_idx - 1; li >= 0; --li) {
    for (int rj = apex_idx; rj + 1 < m; ++rj) {
      if (li == rj) continue;
      Eigen::Vector2d n1 = up_normal(li), n2 = up_normal(rj);
      // Center at distance R from both segment lines, on the upper side.
      Eigen::Matrix2d A;
      A.row(0) = n1.transpose();
      A.row(1) = n2.transpose();
      if (std::abs(A.determinant()) < 1e-12) continue;
      Eigen::Vector2d rhs(n1.dot(pts[li]) + R, n2.dot(pts[rj]) + R);
      Eigen::Vector2d center = A.inverse() * rhs;
      Eigen::Vector2d f1 = center - R * n1, f2 = center - R * n2;
      // Contact feet must lie inside their segments.
      auto inside = [&](int i, const Eigen::Vector2d& f) {
        Eigen::Vector2d d = pts[i + 1] - pts[i];
        double t = (f - pts[i]).dot(d) / d.squaredNorm();
        return t >= -1e-9 && t <= 1.0 + 1e-9;
      };
      if (!inside(li, f1) || !inside(rj, f2)) continue;
      // The circle must clear the whole polyline.
      bool clear = true;
      for (const auto& p : pts)
        if ((p - center).norm() < R - 1e-9) {
          clear = false;
          break;
        }
      if (!clear) continue;

      // Replace the span between the feet by the circular arc, preserving
      // the relative arc-length positions of the original samples.
      std::vector<double> s(1, 0.0);
      std::vector<Eigen::Vector2d> span;
      span.push_back(f1);
      for (int i = li + 1; i <= rj; ++i) span.push_back(pts[i]);
      span.push_back(f2);
      for (std::size_t i = 1; i < span.size(); ++i)
        s.push_back(s.back() + (span[i] - span[i - 1]).norm());
      double total = s.back();
      if (total <= 0.0) return false;

      double a1 = std::atan2(f1.y() - center.y(), f1.x() - center.x());
      double a2 = std::atan2(f2.y() - center.y(), f2.x() - center.x());
      // Take the arc passing under the center (through the lowest point).
      double low = -kPi / 2.0;
      auto wrap = [](double a) {
        while (a <= -kPi) a += 2.0 * kPi;
        while (a > kPi) a -= 2.0 * kPi;
        return a;
      };
      double d1 = wrap(low - a1), d2 = wrap(a2 - low);
      // Walk from f1 through the low point to f2 by arc-length fraction.
      for (int i = li + 1; i <= rj; ++i) {
        double t = (s[i - li] / total) * (std::abs(d1) + std::abs(d2));
        double angle;
        if (t <= std::abs(d1))
          angle = a1 + (d1 >= 0 ? t : -t);
        else
          angle = low + (d2 >= 0 ? (t - std::abs(d1)) : -(t - std::abs(d1)));
        pts[i] = center + R * Eigen::Vector2d(std::cos(angle), std::sin(angle));
      }
      return true;
    }
  }
  return false;
}

void smooth_apex(StructuredSurfaceMesh& mesh, const SeparationGeometry& sep, double apex_R) {
  if (apex_R <= 0.0) return;
  const int N = mesh.N;
  const int n = static_cast<int>(sep.boundary.size()) - 1;

  // Ring index of interface node h within a patch's separation section.
  auto ring_index = [&](const StructuredSurfaceMesh::SepEnd& se, int iface, int h) -> int {
    if (se.iface_first == iface) return h;
    if (se.iface_second == iface) return (N - h) % N;
    return -1;
  };

  for (int iface = 1; iface < n; ++iface) {  // apex interfaces only
    // Collect the two patches adjacent to this interface.
    struct Side {
      int patch;
      bool loop_front;
      int ring;
    };
    for (int h = 1; h < N / 2; ++h) {
      std::vector<Side> sides;
      for (std::size_t pi = 0; pi < mesh.patches.size(); ++pi) {
        const auto& p = mesh.patches[pi];
        if (p.sep_front && p.sep_front->junction == sep.junction) {
          int r = ring_index(*p.sep_front, iface, h);
          if (r >= 0) sides.push_back({static_cast<int>(pi), true, r});
        }
        if (p.sep_back && p.sep_back->junction == sep.junction) {
          int r = ring_index(*p.sep_back, iface, h);
          if (r >= 0) sides.push_back({static_cast<int>(pi), false, r});
        }
      }
      if (sides.size() != 2) continue;

      // Build the crossing polyline: through patch A from its far end to the
      // separation loop, then through patch B away from it.
      std::vector<Vec3> poly;
      std::vector<std::pair<int, std::pair<int, int>>> slots;
      std::pair<int, std::pair<int, int>> twin_slot{-1, {0, 0}};
      auto append = [&](const Side& sd, bool toward_loop) {
        const auto& secs = mesh.patches[sd.patch].sections;
        const int S = static_cast<int>(secs.size());
        for (int k = 0; k < S; ++k) {
          int s;
          if (toward_loop)
            s = sd.loop_front ? S - 1 - k : k;  // end -> loop
          else
            s = sd.loop_front ? k : S - 1 - k;  // loop -> end
          if (!toward_loop && k == 0) {
            // Shared loop node: remember its duplicate storage slot.
            twin_slot = {sd.patch, {s, sd.ring}};
            continue;
          }
          poly.push_back(secs[s][sd.ring]);
          slots.push_back({sd.patch, {s, sd.ring}});
        }
      };
      append(sides[0], true);
      int apex_poly_idx = static_cast<int>(poly.size()) - 1;
      append(sides[1], false);
      if (poly.size() < 4) continue;

      // Local 2D frame at the crossing node.
      Vec3 origin = poly[apex_poly_idx];
      Vec3 e1 = (poly.back() - poly.front()).normalized();
      // Outward direction: from the nearest centerline to the node.
      Vec3 outward = Vec3::Zero();
      const auto& surfaces = mesh.patches[sides[0].patch].surfaces;
      double best = std::numeric_limits<double>::infinity();
      for (const auto& tube : surfaces) {
        auto proj = tube.spline.project_point(origin);
        if (proj.distance < best) {
          best = proj.distance;
          outward = origin - tube.spline.position(proj.u);
        }
      }
      Vec3 e2 = outward - outward.dot(e1) * e1;
      if (e2.norm() < 1e-12) continue;
      e2.normalize();

      std::vector<Eigen::Vector2d> flat(poly.size());
      std::vector<Vec3> off(poly.size());
      for (std::size_t i = 0; i < poly.size(); ++i) {
        Vec3 d = poly[i] - origin;
        flat[i] = {d.dot(e1), d.dot(e2)};
        off[i] = d - flat[i].x() * e1 - flat[i].y() * e2;
      }
      if (!fillet_polyline(flat, apex_poly_idx, apex_R)) continue;

      // Lift back, also updating the duplicate slot of the shared loop node.
      for (std::size_t i = 0; i < poly.size(); ++i) {
        Vec3 p = origin + flat[i].x() * e1 + flat[i].y() * e2 + off[i];
        auto [pi, si] = slots[i];
        mesh.patches[pi].sections[si.first][si.second] = p;
        if (static_cast<int>(i) == apex_poly_idx && twin_slot.first >= 0)
          mesh.patches[twin_slot.first]
              .sections[twin_slot.second.first][twin_slot.second.second] = p;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Vessel sweep

StructuredSurfaceMesh::Patch mesh_vessel_surface(
    const Spline4& spline, const MeshParams& params, std::int64_t branch,
    const std::optional<std::vector<Vec3>>& start_ring,
    const std::optional<std::vector<Vec3>>& end_ring) {
  params.validate();
  const int N = params.nodes_per_section;

  const double length = spline.arc_length();
  if (length <= 0.0) throw mesh_error("vessel has zero length");

  // Fold-over and curvature scan. Curvature is measured discretely from
  // circumscribed circles of samples a fixed arc apart: the inner ring folds
  // when the centreline bends tighter than the radius over the scale of a
  // mesh cell, while sub-resolution parametrisation wiggles of the fitted
  // spline are harmless.
  const int probe = 200;
  double mean_r = 0.0, bend = 0.0;
  for (int i = 0; i <= probe; ++i) mean_r += spline.radius(static_cast<double>(i) / probe);
  mean_r /= probe + 1;
  {
    const int m = 256;
    std::vector<double> pu(m + 1);
    std::vector<Vec3> pp(m + 1);
    for (int i = 0; i <= m; ++i) {
      pu[i] = spline.length_to_u(0.0, length * i / m);
      pp[i] = spline.position(pu[i]);
    }
    for (int i = 1; i < m; ++i) {
      Vec3 a = pp[i - 1] - pp[i], b = pp[i + 1] - pp[i];
      double denom = a.norm() * b.norm() * (a - b).norm();
      if (denom < 1e-300) continue;
      double kappa = 2.0 * a.cross(b).norm() / denom;
      if (kappa * spline.radius(pu[i]) >= 1.0)
        throw mesh_error("vessel fold-over: curvature x radius >= 1 at u=" +
                         std::to_string(pu[i]));
    }
  }
  {
    Vec3 prev = spline.tangent(0.0);
    for (int i = 1; i <= probe; ++i) {
      Vec3 t = spline.tangent(static_cast<double>(i) / probe);
      bend += std::acos(std::clamp(prev.dot(t), -1.0, 1.0));
      prev = t;
    }
  }

  int S = std::max<int>({2, static_cast<int>(std::lround(params.density * length / mean_r)),
                         static_cast<int>(std::ceil(bend / 0.3)) + 1});

  // Uniform arc-length stations.
  std::vector<double> us(S);
  us[0] = 0.0;
  for (int s = 1; s < S; ++s) us[s] = spline.length_to_u(0.0, length * s / (S - 1));
  us[S - 1] = 1.0;

  // Rotation-minimizing frames (double reflection).
  std::vector<Vec3> centers(S), tangents(S);
  for (int s = 0; s < S; ++s) {
    centers[s] = spline.position(us[s]);
    tangents[s] = spline.tangent(us[s]);
  }
  Vec3 e1;
  if (start_ring) {
    Vec3 d = (*start_ring)[0] - centers[0];
    e1 = (d - d.dot(tangents[0]) * tangents[0]).normalized();
  } else {
    e1 = any_perp(tangents[0]);
  }
  std::vector<Vec3> frames(S);
  frames[0] = e1;
  for (int s = 0; s + 1 < S; ++s) {
    Vec3 v1 = centers[s + 1] - centers[s];
    double c1 = v1.squaredNorm();
    Vec3 rl = frames[s] - (2.0 / std::max(c1, 1e-300)) * v1.dot(frames[s]) * v1;
    Vec3 tl = tangents[s] - (2.0 / std::max(c1, 1e-300)) * v1.dot(tangents[s]) * v1;
    Vec3 v2 = tangents[s + 1] - tl;
    double c2 = v2.squaredNorm();
    frames[s + 1] = rl - (2.0 / std::max(c2, 1e-300)) * v2.dot(rl) * v2;
    frames[s + 1] = (frames[s + 1] - frames[s + 1].dot(tangents[s + 1]) * tangents[s + 1])
                        .normalized();
  }

  // Angular mismatch to a prescribed end ring. With a free start the whole
  // frame field is rotated rigidly (zero twist); when both ends are pinned
  // the mismatch is distributed linearly in arc length.
  double twist = 0.0;
  bool rigid_twist = false;
  if (end_ring) {
    Vec3 d = (*end_ring)[0] - centers[S - 1];
    Vec3 w = (d - d.dot(tangents[S - 1]) * tangents[S - 1]).normalized();
    Vec3 f2 = tangents[S - 1].cross(frames[S - 1]);
    twist = std::atan2(w.dot(f2), w.dot(frames[S - 1]));
    rigid_twist = !start_ring;
  }

  StructuredSurfaceMesh::Patch patch;
  patch.branch = branch;
  TubeSurface ts;
  ts.spline = spline;
  patch.surfaces.push_back(std::move(ts));
  patch.sections.assign(S, std::vector<Vec3>(N));
  for (int s = 0; s < S; ++s) {
    if (s == 0 && start_ring) {
      patch.sections[0] = *start_ring;
      continue;
    }
    if (s == S - 1 && end_ring) {
      patch.sections[S - 1] = *end_ring;
      continue;
    }
    double frac = S > 1 ? static_cast<double>(s) / (S - 1) : 0.0;
    double phi = rigid_twist ? twist : twist * frac;
    Vec3 a = std::cos(phi) * frames[s] + std::sin(phi) * tangents[s].cross(frames[s]);
    Vec3 b = tangents[s].cross(a);
    double r = spline.radius(us[s]);
    for (int i = 0; i < N; ++i) {
      double ang = 2.0 * kPi * i / N;
      patch.sections[s][i] = centers[s] + r * (std::cos(ang) * a + std::sin(ang) * b);
    }
  }
  return patch;
}

// ---------------------------------------------------------------------------
// Flattening

SurfaceMesh StructuredSurfaceMesh::to_quads() const {
  SurfaceMesh out;
  std::unordered_map<VecKey, int, VecKeyHash> ids;
  auto vid = [&](const Vec3& p) {
    auto [it, fresh] = ids.try_emplace(VecKey(p), static_cast<int>(out.vertices.size()));
    if (fresh) out.vertices.push_back(p);
    return it->second;
  };
  for (const auto& patch : patches) {
    const int S = static_cast<int>(patch.sections.size());
    for (int s = 0; s + 1 < S; ++s) {
      for (int i = 0; i < N; ++i) {
        int j = (i + 1) % N;
        out.quads.push_back({vid(patch.sections[s][i]), vid(patch.sections[s][j]),
                             vid(patch.sections[s + 1][j]), vid(patch.sections[s + 1][i])});
        out.quad_branch.push_back(patch.branch);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network driver

MeshResult mesh_network(const NetworkModel& model, const MeshParams& params) {
  params.validate();
  MeshResult result;
  result.failures = model.failures;
  result.surface.N = params.nodes_per_section;

  // Furcation surfaces.
  std::map<std::int64_t, std::vector<std::size_t>> junction_patches;
  for (const auto& [junction, furc] : model.furcations) {
    try {
      SeparationGeometry sep = decompose_furcation(furc, junction, params.nodes_per_section);
      StructuredSurfaceMesh part = mesh_furcation_surface(furc, sep, params);
      for (auto& patch : part.patches) {
        junction_patches[junction].push_back(result.surface.patches.size());
        result.surface.patches.push_back(std::move(patch));
      }
      result.surface.separations.emplace(junction, std::move(sep));
    } catch (const mesh_error& e) {
      result.failures.push_back({"furcation", junction, e.what()});
    }
  }

  relax_surface(result.surface, params);
  for (const auto& [junction, sep] : result.surface.separations) {
    double R = params.apex_R > 0.0 ? params.apex_R
                                   : model.furcations.at(junction).rounding_radius;
    smooth_apex(result.surface, sep, R);
  }

  // Assign real branch ids to furcation patches and collect end rings.
  // Patch order per junction: inlet patch first, then daughter k patches.
  std::vector<std::optional<std::vector<Vec3>>> start_rings(model.vessels.size());
  std::vector<std::optional<std::vector<Vec3>>> end_rings(model.vessels.size());
  for (const auto& joint : model.joints) {
    auto it = junction_patches.find(joint.junction);
    if (it == junction_patches.end()) continue;  // furcation failed
    const auto& indices = it->second;
    if (joint.at_start && joint.section >= 0) {
      // Branch starts at outlet `section`: daughter patch section+1.
      std::size_t pi = indices[joint.section + 1];
      result.surface.patches[pi].branch = joint.branch;
      start_rings[joint.branch] = result.surface.patches[pi].sections.back();
    } else if (!joint.at_start) {
      // Branch ends at the furcation inlet: inlet patch.
      std::size_t pi = indices[0];
      result.surface.patches[pi].branch = joint.branch;
      end_rings[joint.branch] = result.surface.patches[pi].sections.front();
    }
  }

  // Vessel sweeps.
  for (std::size_t b = 0; b < model.vessels.size(); ++b) {
    if (model.vessels[b].num_control() == 0) continue;  // fit failed upstream
    try {
      result.surface.patches.push_back(mesh_vessel_surface(
          model.vessels[b], params, static_cast<std::int64_t>(b), start_rings[b],
          end_rings[b]));
    } catch (const mesh_error& e) {
      result.failures.push_back({"vessel", static_cast<std::int64_t>(b), e.what()});
    }
  }

  // Fold-over scan: any inverted surface quad marks its element failed.
  for (const auto& patch : result.surface.patches) {
    const int S = static_cast<int>(patch.sections.size());
    bool folded = false;
    for (int s = 0; s + 1 < S && !folded; ++s)
      for (int i = 0; i < result.surface.N && !folded; ++i) {
        int j = (i + 1) % result.surface.N;
        std::array<Vec3, 4> q = {patch.sections[s][i], patch.sections[s][j],
                                 patch.sections[s + 1][j], patch.sections[s + 1][i]};
        if (scaled_jacobian_quad(q) < 0.0) folded = true;
      }
    if (folded)
      result.failures.push_back(
          {patch.sep_front || patch.sep_back ? "furcation" : "vessel", patch.branch,
           "surface fold-over: inverted quad detected"});
  }

  result.volume = build_ogrid_volume(result.surface, params);
  return result;
}

}  // namespace vf
