#include "vesselforge/mesher.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdlib>
#include <map>
#include <unordered_map>
#include <vector>

namespace vf {

namespace {

struct VecKey {
  std::uint64_t b[3];
  explicit VecKey(const Vec3& v) { std::memcpy(b, v.data(), sizeof(b)); }
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

Vec3 lerp(const Vec3& a, const Vec3& b, double t) { return a + t * (b - a); }

/// Blend of the central block sides from straight chords (0) toward the
/// gamma-scaled boundary ring (1). At 2/3 the block corner angle opens to
/// roughly 120 degrees, balancing the quality of the three cells that meet
/// at each corner.
constexpr double kCoreBulge = 2.0 / 3.0;

/// Canonical 2D O-grid node layout for one cross section: R full rings of N
/// nodes (ring 0 = the section boundary) around an (M+1)x(M+1) central grid,
/// M = N/4. The central square's corners sit at boundary angular indices
/// N/8, 3N/8, 5N/8, 7N/8, so the index-0 / index-N/2 diameter crosses the
/// square mid-side to mid-side.
struct PatternLayout {
  int N, M, R, n_alpha, n_beta;
  double alpha, beta, gamma;

  static PatternLayout make(int N, const MeshParams& p) {
    return {N, N / 4, p.n_alpha + p.n_beta, p.n_alpha, p.n_beta, p.alpha, p.beta, p.gamma};
  }

  int node_count() const { return R * N + (M + 1) * (M + 1); }
  int ring_id(int r, int i) const { return r * N + ((i % N) + N) % N; }
  int core_id(int a, int b) const { return R * N + b * (M + 1) + a; }

  /// Boundary index -> central grid perimeter coordinates.
  std::pair<int, int> perim(int i) const {
    i = ((i % N) + N) % N;
    if (i >= 7 * N / 8 || i <= N / 8) return {M, (i + N / 8) % N};      // right edge
    if (i <= 3 * N / 8) return {M - (i - N / 8), M};                    // top edge
    if (i <= 5 * N / 8) return {0, M - (i - 3 * N / 8)};                // left edge
    return {i - 5 * N / 8, 0};                                          // bottom edge
  }

  int node_id(int r, int i) const {
    if (r < R) return ring_id(r, i);
    auto [a, b] = perim(i);
    return core_id(a, b);
  }

  /// Blend fraction from the boundary (0) to the central grid perimeter (1)
  /// at ring layer r; boundary layers span alpha, intermediate layers beta.
  double w(int r) const {
    double t = r <= n_alpha ? 1.0 - alpha * r / n_alpha
                            : 1.0 - alpha - beta * (r - n_alpha) / n_beta;
    return (1.0 - t) / (1.0 - gamma);
  }

  struct Cell {
    std::array<int, 4> n;
    LayerClass layer;
  };
  std::vector<Cell> cells() const {
    std::vector<Cell> out;
    out.reserve(N * R + M * M);
    for (int r = 0; r < R; ++r)
      for (int i = 0; i < N; ++i)
        out.push_back({{node_id(r, i), node_id(r, i + 1), node_id(r + 1, i + 1),
                        node_id(r + 1, i)},
                       r < n_alpha ? LayerClass::boundary : LayerClass::intermediate});
    for (int b = 0; b < M; ++b)
      for (int a = 0; a < M; ++a)
        out.push_back({{core_id(a, b), core_id(a + 1, b), core_id(a + 1, b + 1),
                        core_id(a, b + 1)},
                       LayerClass::core});
    return out;
  }
};

/// Full O-grid pattern for an interior cross section. When inward surface
/// normals are supplied, the ring layers leave the boundary along them on a
/// quadratic Bezier toward the core target, so near-wall cells stay
/// orthogonal to the vessel surface even where the tube widens.
std::vector<Vec3> full_pattern(const PatternLayout& L, const std::vector<Vec3>& ring,
                               const std::vector<Vec3>* normals = nullptr) {
  const int N = L.N, M = L.M;
  Vec3 c = Vec3::Zero();
  for (const auto& p : ring) c += p;
  c /= static_cast<double>(N);

  std::vector<Vec3> nodes(L.node_count());
  const int ci[4] = {N / 8, 3 * N / 8, 5 * N / 8, 7 * N / 8};
  Vec3 Q[4];
  for (int k = 0; k < 4; ++k) Q[k] = c + L.gamma * (ring[ci[k]] - c);

  // Central grid perimeter: sides between the gamma-scaled corners, bowed
  // outward toward the scaled boundary ring.
  for (int i = 0; i < N; ++i) {
    int side, base;
    if (i >= ci[3] || i < ci[0]) {
      side = 3;
      base = i >= ci[3] ? i - ci[3] : i + N - ci[3];
    } else {
      side = i < ci[1] ? 0 : (i < ci[2] ? 1 : 2);
      base = i - ci[side];
    }
    auto [a, b] = L.perim(i);
    Vec3 straight = lerp(Q[side], Q[(side + 1) % 4], static_cast<double>(base) / M);
    Vec3 scaled = c + L.gamma * (ring[i] - c);
    nodes[L.core_id(a, b)] = lerp(straight, scaled, kCoreBulge);
  }
  // Central grid interior: transfinite (Coons) interpolation.
  for (int a = 1; a < M; ++a)
    for (int b = 1; b < M; ++b) {
      double u = static_cast<double>(a) / M, v = static_cast<double>(b) / M;
      nodes[L.core_id(a, b)] =
          (1 - u) * nodes[L.core_id(0, b)] + u * nodes[L.core_id(M, b)] +
          (1 - v) * nodes[L.core_id(a, 0)] + v * nodes[L.core_id(a, M)] -
          ((1 - u) * (1 - v) * nodes[L.core_id(0, 0)] + u * (1 - v) * nodes[L.core_id(M, 0)] +
           (1 - u) * v * nodes[L.core_id(0, M)] + u * v * nodes[L.core_id(M, M)]);
    }
  // Ring layers.
  for (int i = 0; i < N; ++i) {
    nodes[L.ring_id(0, i)] = ring[i];
    auto [a, b] = L.perim(i);
    const Vec3& target = nodes[L.core_id(a, b)];
    if (normals) {
      static const double beta_blend = [] {
        const char* e = getenv("VF_NBLEND");
        return e ? atof(e) : 0.3;
      }();
      Vec3 d = (target - ring[i]).normalized();
      Vec3 u = ((1.0 - beta_blend) * d + beta_blend * (*normals)[i]).normalized();
      Vec3 ctrl = ring[i] + 0.5 * (target - ring[i]).norm() * u;
      if (getenv("VF_DBG") && std::abs(ring[i].x() + 0.26) < 0.02 &&
          std::abs(ring[i].y() + 1.0) < 0.05 && std::abs(ring[i].z()) < 0.05)
        fprintf(stderr, "node i=%d ring=(%.3f,%.3f,%.3f) n=(%.2f,%.2f,%.2f) u=(%.2f,%.2f,%.2f) w1=%.4f\n",
                i, ring[i].x(), ring[i].y(), ring[i].z(),
                (*normals)[i].x(), (*normals)[i].y(), (*normals)[i].z(),
                u.x(), u.y(), u.z(), L.w(1));
      for (int r = 1; r < L.R; ++r) {
        double t = L.w(r);
        nodes[L.ring_id(r, i)] =
            (1 - t) * (1 - t) * ring[i] + 2 * t * (1 - t) * ctrl + t * t * target;
      }
    } else {
      for (int r = 1; r < L.R; ++r) nodes[L.ring_id(r, i)] = lerp(ring[i], target, L.w(r));
    }
  }
  return nodes;
}

/// Shared diameter node line of a separation plane: CT0 -> X -> CT1 with the
/// same radial layering as a pattern. 2R + M + 1 nodes.
std::vector<Vec3> diameter_nodes(const PatternLayout& L, const Vec3& ct0, const Vec3& ct1,
                                 const Vec3& X) {
  const int M = L.M, R = L.R;
  Vec3 d_right = X + L.gamma * (ct0 - X);
  Vec3 d_left = X + L.gamma * (ct1 - X);
  std::vector<Vec3> D(2 * R + M + 1);
  for (int r = 0; r < R; ++r) {
    D[r] = lerp(ct0, d_right, L.w(r));
    D[2 * R + M - r] = lerp(ct1, d_left, L.w(r));
  }
  for (int k = 0; k <= M; ++k) D[R + k] = lerp(d_right, d_left, static_cast<double>(k) / M);
  return D;
}

/// Half of a separation pattern, shared by the two branches adjacent to one
/// interface. ring[r][i] for i = 0..N/2 along the half-loop (CT0 at 0), core
/// rows b = M/2..M stored as core[b - M/2][a].
struct HalfGrid {
  std::vector<std::vector<Vec3>> ring;  // R x (N/2+1)
  std::vector<std::vector<Vec3>> core;  // (M/2+1) x (M+1)
};

HalfGrid build_half_grid(const PatternLayout& L, const std::vector<Vec3>& H,
                         const std::vector<Vec3>& D, const Vec3& X) {
  const int N = L.N, M = L.M, R = L.R;
  HalfGrid hg;
  hg.ring.assign(R, std::vector<Vec3>(N / 2 + 1));
  hg.core.assign(M / 2 + 1, std::vector<Vec3>(M + 1));

  Vec3 Qa = X + L.gamma * (H[N / 8] - X);
  Vec3 Qb = X + L.gamma * (H[3 * N / 8] - X);

  // Core boundary: mid-row from D; the other sides bow outward toward the
  // scaled half-loop, matching the full-pattern bulge.
  auto scaled = [&](int i) { return Vec3(X + L.gamma * (H[i] - X)); };
  for (int a = 0; a <= M; ++a) hg.core[0][a] = D[R + (M - a)];
  for (int a = 0; a <= M; ++a) {
    Vec3 straight = lerp(Qa, Qb, static_cast<double>(M - a) / M);
    hg.core[M / 2][a] = a == 0 || a == M
                            ? straight
                            : lerp(straight, scaled(N / 8 + (M - a)), kCoreBulge);
  }
  for (int b = M / 2 + 1; b < M; ++b) {
    double f = static_cast<double>(b - M / 2) / (M / 2);
    hg.core[b - M / 2][M] = lerp(lerp(D[R], Qa, f), scaled(b - M / 2), kCoreBulge);
    hg.core[b - M / 2][0] = lerp(lerp(D[R + M], Qb, f), scaled(N / 2 - (b - M / 2)), kCoreBulge);
  }
  // Interior by transfinite interpolation over the half square.
  for (int a = 1; a < M; ++a)
    for (int b = M / 2 + 1; b < M; ++b) {
      double u = static_cast<double>(a) / M;
      double v = static_cast<double>(b - M / 2) / (M / 2);
      hg.core[b - M / 2][a] =
          (1 - u) * hg.core[b - M / 2][0] + u * hg.core[b - M / 2][M] +
          (1 - v) * hg.core[0][a] + v * hg.core[M / 2][a] -
          ((1 - u) * (1 - v) * hg.core[0][0] + u * (1 - v) * hg.core[0][M] +
           (1 - u) * v * hg.core[M / 2][0] + u * v * hg.core[M / 2][M]);
    }

  // Ring layers toward the (bulged) core perimeter targets.
  for (int i = 0; i <= N / 2; ++i) {
    hg.ring[0][i] = H[i];
    Vec3 target;
    if (i <= N / 8)
      target = hg.core[i][M];
    else if (i <= 3 * N / 8)
      target = hg.core[M / 2][M - (i - N / 8)];
    else
      target = hg.core[N / 2 - i][0];
    for (int r = 1; r < R; ++r) hg.ring[r][i] = lerp(H[i], target, L.w(r));
  }
  // Pin the shared diameter columns exactly.
  for (int r = 0; r < R; ++r) {
    hg.ring[r][0] = D[r];
    hg.ring[r][N / 2] = D[2 * R + M - r];
  }
  return hg;
}

/// Separation pattern assembled from the two interface half-grids. The
/// second interface occupies boundary indices N/2..N, traversed back from
/// CT1, which mirrors its half onto core rows b <= M/2.
std::vector<Vec3> separation_pattern(const PatternLayout& L, const HalfGrid& F,
                                     const HalfGrid& S) {
  const int N = L.N, M = L.M;
  std::vector<Vec3> nodes(L.node_count());
  for (int r = 0; r < L.R; ++r) {
    for (int i = 0; i <= N / 2; ++i) nodes[L.ring_id(r, i)] = F.ring[r][i];
    for (int i = N / 2 + 1; i < N; ++i) nodes[L.ring_id(r, i)] = S.ring[r][N - i];
  }
  for (int a = 0; a <= M; ++a) {
    for (int b = M / 2; b <= M; ++b) nodes[L.core_id(a, b)] = F.core[b - M / 2][a];
    for (int b = 0; b < M / 2; ++b) nodes[L.core_id(a, b)] = S.core[M / 2 - b][a];
  }
  return nodes;
}

}  // namespace

HexMesh build_ogrid_volume(const StructuredSurfaceMesh& surface, const MeshParams& params) {
  params.validate();
  const int N = surface.N;
  HexMesh mesh;
  if (N == 0 || surface.patches.empty()) return mesh;
  if (N != params.nodes_per_section)
    throw mesh_error("surface mesh node count does not match the parameters");
  if (!surface.separations.empty() && N % 8 != 0)
    throw mesh_error("separation patterns require a node count divisible by 8");
  PatternLayout L = PatternLayout::make(N, params);

  // Shared per-junction geometry.
  std::map<std::int64_t, std::vector<Vec3>> diameters;
  std::map<std::pair<std::int64_t, int>, HalfGrid> half_grids;
  auto get_half = [&](const StructuredSurfaceMesh::SepEnd& se, int iface,
                      const std::vector<Vec3>& loop) -> const HalfGrid& {
    auto key = std::make_pair(se.junction, iface);
    auto it = half_grids.find(key);
    if (it != half_grids.end()) return it->second;
    // Half-loop in canonical order CT0 -> B -> CT1.
    std::vector<Vec3> H(N / 2 + 1);
    if (se.iface_first == iface)
      for (int i = 0; i <= N / 2; ++i) H[i] = loop[i];
    else
      for (int i = 0; i <= N / 2; ++i) H[i] = loop[(N - i) % N];
    auto dit = diameters.find(se.junction);
    if (dit == diameters.end()) {
      const auto& sep = surface.separations.at(se.junction);
      dit = diameters.emplace(se.junction, diameter_nodes(L, loop[0], loop[N / 2], sep.X))
                .first;
    }
    return half_grids.emplace(key, build_half_grid(L, H, dit->second,
                                                   surface.separations.at(se.junction).X))
        .first->second;
  };

  // Inward surface normals of a ring from its in-surface tangents; the axial
  // tangent uses the neighbouring rings (one-sided at chain ends).
  auto ring_normals = [&](const std::vector<Vec3>& ring, const std::vector<Vec3>& prev,
                          const std::vector<Vec3>& next) {
    Vec3 c = Vec3::Zero();
    for (const auto& p : ring) c += p;
    c /= static_cast<double>(N);
    std::vector<Vec3> out(N);
    for (int i = 0; i < N; ++i) {
      Vec3 az = ring[(i + 1) % N] - ring[(i + N - 1) % N];
      Vec3 ax = next[i] - prev[i];
      Vec3 m = az.cross(ax);
      double len = m.norm();
      Vec3 fallback = (c - ring[i]).normalized();
      if (len < 1e-12) {
        out[i] = fallback;
        continue;
      }
      m /= len;
      if (m.dot(c - ring[i]) < 0.0) m = -m;
      // Guard against grazing normals on strongly warped sections.
      out[i] = m.dot(fallback) > 0.1 ? m : fallback;
    }
    return out;
  };

  auto pattern_for = [&](const std::vector<Vec3>& ring,
                         const std::optional<StructuredSurfaceMesh::SepEnd>& se,
                         const std::vector<Vec3>* normals) {
    if (!se) return full_pattern(L, ring, normals);
    const HalfGrid& F = get_half(*se, se->iface_first, ring);
    const HalfGrid& S = get_half(*se, se->iface_second, ring);
    return separation_pattern(L, F, S);
  };

  // Group patches per branch and chain them front-to-back.
  std::map<std::int64_t, std::vector<int>> groups;
  for (std::size_t pi = 0; pi < surface.patches.size(); ++pi)
    groups[surface.patches[pi].branch].push_back(static_cast<int>(pi));

  std::unordered_map<VecKey, int, VecKeyHash> vids;
  auto vid = [&](const Vec3& p) {
    auto [it, fresh] = vids.try_emplace(VecKey(p), static_cast<int>(mesh.vertices.size()));
    if (fresh) mesh.vertices.push_back(p);
    return it->second;
  };
  const auto cells = L.cells();

  for (const auto& [branch, indices] : groups) {
    // Order the chain: a patch follows the one whose back ring equals its
    // front ring (exact node identity).
    std::vector<int> chain;
    if (indices.size() == 1) {
      chain = indices;
    } else {
      auto front_of = [&](int pi) -> const std::vector<Vec3>& {
        return surface.patches[pi].sections.front();
      };
      auto back_of = [&](int pi) -> const std::vector<Vec3>& {
        return surface.patches[pi].sections.back();
      };
      auto same_ring = [&](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
        for (int i = 0; i < N; ++i)
          if (a[i] != b[i]) return false;
        return true;
      };
      std::vector<bool> used(indices.size(), false);
      int start = -1;
      for (std::size_t i = 0; i < indices.size() && start < 0; ++i) {
        bool has_pred = false;
        for (std::size_t j = 0; j < indices.size(); ++j)
          if (i != j && same_ring(front_of(indices[i]), back_of(indices[j]))) has_pred = true;
        if (!has_pred) start = static_cast<int>(i);
      }
      if (start < 0) throw mesh_error("cannot chain surface patches of branch " +
                                      std::to_string(branch));
      chain.push_back(indices[start]);
      used[start] = true;
      for (std::size_t step = 1; step < indices.size(); ++step) {
        int next = -1;
        for (std::size_t j = 0; j < indices.size(); ++j)
          if (!used[j] && same_ring(back_of(chain.back()), front_of(indices[j])))
            next = static_cast<int>(j);
        if (next < 0) throw mesh_error("cannot chain surface patches of branch " +
                                       std::to_string(branch));
        chain.push_back(indices[next]);
        used[next] = true;
      }
    }

    // Concatenated section list with separation markers.
    std::vector<const std::vector<Vec3>*> rings;
    std::vector<std::optional<StructuredSurfaceMesh::SepEnd>> marks;
    for (std::size_t c = 0; c < chain.size(); ++c) {
      const auto& patch = surface.patches[chain[c]];
      const int S = static_cast<int>(patch.sections.size());
      for (int s = c == 0 ? 0 : 1; s < S; ++s) {
        rings.push_back(&patch.sections[s]);
        if (s == 0 && patch.sep_front)
          marks.push_back(patch.sep_front);
        else if (s == S - 1 && patch.sep_back)
          marks.push_back(patch.sep_back);
        else
          marks.push_back(std::nullopt);
      }
    }

    // Patterns and hexes.
    std::vector<std::vector<int>> ids(rings.size());
    for (std::size_t s = 0; s < rings.size(); ++s) {
      std::vector<Vec3> normals;
      if (!marks[s]) {
        const auto& prev = *rings[s > 0 ? s - 1 : s];
        const auto& next = *rings[s + 1 < rings.size() ? s + 1 : s];
        normals = ring_normals(*rings[s], prev, next);
      }
      std::vector<Vec3> nodes = pattern_for(*rings[s], marks[s], marks[s] ? nullptr : &normals);
      ids[s].reserve(nodes.size());
      for (const auto& p : nodes) ids[s].push_back(vid(p));
    }
    for (std::size_t s = 0; s + 1 < rings.size(); ++s) {
      for (const auto& cell : cells) {
        mesh.hexes.push_back({ids[s][cell.n[0]], ids[s][cell.n[1]], ids[s][cell.n[2]],
                              ids[s][cell.n[3]], ids[s + 1][cell.n[0]], ids[s + 1][cell.n[1]],
                              ids[s + 1][cell.n[2]], ids[s + 1][cell.n[3]]});
        mesh.hex_branch.push_back(branch);
        mesh.hex_layer.push_back(cell.layer);
      }
    }
  }
  return mesh;
}

}  // namespace vf
