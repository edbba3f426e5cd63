#pragma once

#include "vesselforge/centerline.hpp"
#include "vesselforge/fitting.hpp"

#include <nlohmann/json_fwd.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vf {

class model_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Circular vessel cross section.
struct CrossSection {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
  Vec3 normal = Vec3::UnitX();  // unit, points downstream
};

/// Planar n-furcation: merged daughter tubes sharing one inlet section.
/// A bifurcation has 5 cross sections, 1 apex and 2 daughter splines; in
/// general 2n+1 sections and n-1 apexes for n outlets.
struct FurcationModel {
  int n_out = 0;
  CrossSection inlet;                  // C0
  std::vector<CrossSection> apical;    // AC_i, one per daughter
  std::vector<CrossSection> outlets;   // C_i, one per daughter
  std::vector<Vec3> apexes;            // AP_k between daughters k and k+1
  std::vector<Spline4> splines;        // spl_i, merged inlet+daughter fits
  std::vector<double> apex_u;          // apical parameter on spl_i
  std::vector<double> inlet_u;         // C0 parameter on spl_i
  std::vector<double> outlet_u;        // C_i parameter on spl_i
  std::vector<std::int64_t> daughter_first_ids;  // first point id of daughter i
  double rounding_radius = 0.0;        // apex smoothing radius R

  /// Radius along daughter i at spline parameter u, linear C0 -> AC_i -> C_i
  /// as the furcation model prescribes (outside [inlet_u, outlet_u] the
  /// spline's own radius applies).
  double profile_radius(int i, double u) const;
};

/// Parametric network: vessel splines plus furcation models with the
/// adjacency needed to walk from a vessel end into a furcation section.
struct NetworkModel {
  struct Joint {
    int branch = -1;            // index into vessels
    bool at_start = true;       // which vessel end
    std::int64_t junction = -1;
    int section = -1;           // -1: furcation inlet C0, k >= 0: outlet k
  };
  struct Failure {
    std::string kind;  // "furcation" | "vessel"
    std::int64_t id = -1;
    std::string message;
  };

  std::vector<Spline4> vessels;                    // by branch index
  std::map<std::int64_t, FurcationModel> furcations;  // by junction id
  std::vector<Joint> joints;
  std::vector<Failure> failures;
};

/// Signed penetration depth of sA's surface into sB's tube at parameter u:
/// |cA(u) - cB(v*)| - (rA(u) + rB(v*)), v* the closest-point parameter.
/// Negative while the tubes overlap.
double tube_surface_distance(const Spline4& sA, const Spline4& sB, double u);

/// Zakaria-style bifurcation estimated from the raw points around a
/// 2-successor junction. rounding_radius <= 0 selects the default
/// 0.2 x min apical radius.
FurcationModel estimate_bifurcation(const CenterlineNetwork& net, std::int64_t junction,
                                    const FitConfig& config, double rounding_radius = 0.0);

/// Planar n-furcation (k >= 2 successors). k == 2 falls through to
/// estimate_bifurcation. Non-planar outlet fans are rejected.
FurcationModel build_nfurcation(const CenterlineNetwork& net, std::int64_t junction,
                                const FitConfig& config, double rounding_radius = 0.0);

/// Two-phase assembly: all furcations first, then each connecting vessel
/// re-fit with end constraints from the adjacent furcation sections.
/// Per-element failures are collected, not fatal.
NetworkModel assemble_network(const CenterlineNetwork& net, const FitConfig& config,
                              double rounding_radius = 0.0);

nlohmann::json network_to_json(const NetworkModel& model);
NetworkModel network_from_json(const nlohmann::json& j);
void write_network_json(const NetworkModel& model, const std::string& path);
NetworkModel read_network_json(const std::string& path);

}  // namespace vf
