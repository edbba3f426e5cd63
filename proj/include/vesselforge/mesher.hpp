#pragma once

#include "vesselforge/mesh.hpp"
#include "vesselforge/vascular.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

namespace vf {

/// One tube of the model surface: a centerline spline with an optional
/// linear radius override (the furcation profile between inlet, apical and
/// outlet sections). Used for projections onto the union-of-tubes surface.
struct TubeSurface {
  Spline4 spline;
  bool has_profile = false;
  double u_in = 0.0, u_ap = 0.0, u_out = 1.0;
  double r_in = 0.0, r_ap = 0.0, r_out = 0.0;

  static TubeSurface from_furcation(const FurcationModel& model, int daughter);

  double radius_at(double u) const;
  /// r(u*) - |p - c(u*)|: positive inside the tube.
  double signed_depth(const Vec3& p) const;
};

/// Intersection of the ray origin + t*dir (t > 0) with the union surface of
/// the given tubes. The origin is expected inside; returns the exit point.
/// Throws mesh_error when no crossing is bracketed.
Vec3 project_ray_to_surface(const std::vector<TubeSurface>& tubes, const Vec3& origin,
                            const Vec3& dir);

/// Furcation split geometry: equator points around the junction (separation
/// points at the inlet side, apexes between adjacent daughters), the two
/// center points above/below the furcation plane, and the surface arcs
/// connecting them. boundary[0] and boundary[n] are the separation points,
/// boundary[1..n-1] the apexes; arcs[j][0] runs B_j -> CT0 and arcs[j][1]
/// runs B_j -> CT1, each sampled with arc_refine * N/4 + 1 nodes so that the
/// polylines also serve as accurate sliding constraints during relaxation.
struct SeparationGeometry {
  std::int64_t junction = -1;
  Vec3 X = Vec3::Zero();              // interior barycenter
  std::vector<Vec3> boundary;          // n+1 equator points
  Vec3 ct0 = Vec3::Zero(), ct1 = Vec3::Zero();
  Vec3 plane_normal = Vec3::UnitZ();   // unit; CT0 lies on the + side
  int arc_refine = 1;                  // arc samples per mesh edge
  std::vector<std::array<std::vector<Vec3>, 2>> arcs;  // per equator point

  /// Interface half-loop j as one polyline CT0 -> B_j -> CT1 (N/2+1 nodes),
  /// subsampling the arcs at the mesh resolution.
  std::vector<Vec3> half_loop(int j) const;
};

/// Structured surface mesh of a network: per-patch ordered sections of N
/// nodes each, quads implicit between consecutive sections with wraparound.
struct StructuredSurfaceMesh {
  /// A patch end lying on a separation surface: the loop is composed of two
  /// interface half-loops, iface_first on ring indices 0..N/2 (CT0 at 0) and
  /// iface_second on N/2..N traversed back from CT1 to CT0.
  struct SepEnd {
    std::int64_t junction = -1;
    int iface_first = -1;
    int iface_second = -1;
  };
  struct Patch {
    std::int64_t branch = -1;
    std::vector<std::vector<Vec3>> sections;  // each of size N, downstream order
    std::optional<SepEnd> sep_front;          // sections.front() is a separation loop
    std::optional<SepEnd> sep_back;           // sections.back() is a separation loop
    std::vector<TubeSurface> surfaces;        // projection targets for relaxation
  };

  int N = 0;
  std::vector<Patch> patches;
  std::map<std::int64_t, SeparationGeometry> separations;

  /// Flatten to quads, merging coincident nodes (exact equality).
  SurfaceMesh to_quads() const;
};

/// Splits a furcation into n+1 branch patches: barycenter X, separation and
/// center points projected from X onto the model surface, and the sampled
/// separation arcs. N is the section node budget (multiple of 8 here).
SeparationGeometry decompose_furcation(const FurcationModel& model, std::int64_t junction,
                                       int N);

/// Surface mesh of one furcation: inlet patch plus one patch per daughter,
/// each running between a model cross section and its separation loop.
StructuredSurfaceMesh mesh_furcation_surface(const FurcationModel& model,
                                             const SeparationGeometry& sep,
                                             const MeshParams& params);

/// Laplacian relaxation with back-projection to the model surface along the
/// ray from the section center through the node. Separation-arc and end-ring
/// nodes slide along their curves; arc endpoints stay fixed.
void relax_surface(StructuredSurfaceMesh& mesh, const MeshParams& params);

/// Rolling-circle apex smoothing: every mesh polyline crossing an apex is
/// filleted in its local 2D plane with a circle of the given radius.
void smooth_apex(StructuredSurfaceMesh& mesh, const SeparationGeometry& sep,
                 double apex_R);

/// 2D building block of the apex smoothing: rolls a circle of radius R along
/// the polyline (y points toward the rolling side) across the kink at
/// apex_idx and moves covered samples onto the circle, preserving their
/// relative arc-length positions. Returns false when no tangent placement
/// fits (feature smaller than R).
bool fillet_polyline(std::vector<Eigen::Vector2d>& pts, int apex_idx, double R);

/// Sweep of one vessel spline with rotation-minimizing frames. Optional end
/// rings pin the first/last section exactly (alignment to a furcation patch);
/// the angular mismatch is distributed linearly in arc length.
/// Throws mesh_error on fold-over (curvature x radius >= 1).
StructuredSurfaceMesh::Patch mesh_vessel_surface(
    const Spline4& spline, const MeshParams& params, std::int64_t branch = -1,
    const std::optional<std::vector<Vec3>>& start_ring = std::nullopt,
    const std::optional<std::vector<Vec3>>& end_ring = std::nullopt);

/// O-grid hexahedral volume for a structured surface mesh. Patches of the
/// same branch are chained; at separation loops the cross-section pattern is
/// assembled from per-interface half-grids shared between adjacent branches,
/// so the volume conforms across the junction.
HexMesh build_ogrid_volume(const StructuredSurfaceMesh& surface, const MeshParams& params);

/// Full pipeline: furcation surfaces, relaxation, apex smoothing, vessel
/// sweeps, volume. Per-element failures (fold-over, decomposition) are
/// collected per branch/junction; surviving branches are still meshed.
struct MeshResult {
  StructuredSurfaceMesh surface;
  HexMesh volume;
  std::vector<NetworkModel::Failure> failures;
};
MeshResult mesh_network(const NetworkModel& model, const MeshParams& params);

}  // namespace vf
