#pragma once

#include "vesselforge/bspline.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace vf {

class mesh_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Parameters steering surface and volume mesh generation.
struct MeshParams {
  int nodes_per_section = 24;   // N, must be a multiple of 4
  double density = 0.2;         // d, sections per (length / radius) unit
  int relax_iters = 5;
  double relax_factor = 0.8;
  double apex_R = 0.0;          // 0: use the model's rounding radius

  // O-grid radial layout: boundary / intermediate / core fractions.
  double alpha = 0.2;
  double beta = 0.3;
  double gamma = 0.5;
  int n_alpha = 10;  // boundary layer count
  int n_beta = 10;   // intermediate layer count

  enum class InitMode { linear, normal_preserving };
  InitMode init_mode = InitMode::normal_preserving;

  /// Throws mesh_error on invalid settings.
  void validate() const;
};

/// Quad surface mesh with per-quad branch labels.
struct SurfaceMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 4>> quads;       // CCW seen from outside
  std::vector<std::int64_t> quad_branch;       // one label per quad
};

/// Radial position class of a hex cell inside the O-grid pattern.
enum class LayerClass : std::uint8_t { boundary = 0, intermediate = 1, core = 2 };

/// Hexahedral volume mesh. Cells use the usual ordering: vertices 0-3 form
/// the bottom quad (CCW seen from above), 4-7 the matching top quad, so the
/// reference cell has positive volume.
struct HexMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 8>> hexes;
  std::vector<std::int64_t> hex_branch;   // one label per cell
  std::vector<LayerClass> hex_layer;      // one class per cell
};

}  // namespace vf
