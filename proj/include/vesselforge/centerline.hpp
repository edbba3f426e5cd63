#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace vf {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;

/// Error raised on malformed centerline input. Carries the offending line
/// number when it comes from a file.
class centerline_error : public std::runtime_error {
public:
  centerline_error(const std::string& msg, int line = -1)
      : std::runtime_error(line >= 0 ? msg + " (line " + std::to_string(line) + ")" : msg),
        line_(line) {}
  int line() const { return line_; }

private:
  int line_;
};

struct CenterlinePoint {
  std::int64_t id = 0;
  int type = 0;  // swc type column, preserved but unused
  Vec3 position = Vec3::Zero();
  double radius = 0.0;
  std::int64_t parent_id = -1;  // -1 means root

  Vec4 as_vec4() const { return Vec4(position.x(), position.y(), position.z(), radius); }
};

/// Forest of centerline points. Immutable once built; topology queries are
/// safe to call from concurrent readers.
class CenterlineNetwork {
public:
  CenterlineNetwork() = default;
  explicit CenterlineNetwork(std::vector<CenterlinePoint> points);

  const std::vector<CenterlinePoint>& points() const { return points_; }
  const CenterlinePoint& point(std::int64_t id) const;
  bool has_point(std::int64_t id) const { return index_.count(id) > 0; }

  const std::vector<std::int64_t>& children(std::int64_t id) const;
  const std::vector<std::int64_t>& roots() const { return roots_; }

  /// Junctions: points with >= 2 successors. A point with k successors is a
  /// (k+1)-furcation.
  std::vector<std::int64_t> junctions() const;
  std::size_t edge_count() const;

private:
  void build();

  std::vector<CenterlinePoint> points_;
  std::map<std::int64_t, std::size_t> index_;
  std::map<std::int64_t, std::vector<std::int64_t>> children_;
  std::vector<std::int64_t> roots_;
  static const std::vector<std::int64_t> empty_;
};

/// Maximal junction-free path. Endpoints are roots, leaves or junctions;
/// interior points have exactly one successor.
struct Branch {
  std::vector<std::int64_t> point_ids;
  std::optional<std::int64_t> inlet_junction;   // upstream endpoint if it is a junction
  std::optional<std::int64_t> outlet_junction;  // downstream endpoint if it is a junction
};

CenterlineNetwork parse_swc(std::istream& in);
CenterlineNetwork parse_swc_file(const std::string& path);
void write_swc(const CenterlineNetwork& net, std::ostream& out);
void write_swc_file(const CenterlineNetwork& net, const std::string& path);

/// Fixture format: one CSV per branch (x,y,z,r rows) plus a JSON topology
/// index mapping branch files to their shared junction ids.
void write_fixture(const CenterlineNetwork& net, const std::string& dir, const std::string& name);
CenterlineNetwork read_fixture(const std::string& dir, const std::string& name);

/// Branches partition the edge set of the network.
std::vector<Branch> extract_branches(const CenterlineNetwork& net);

/// Points per unit polyline length, 1/mm.
double point_density(const Branch& branch, const CenterlineNetwork& net);

double branch_length(const Branch& branch, const CenterlineNetwork& net);

}  // namespace vf
