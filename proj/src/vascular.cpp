#include "vesselforge/vascular.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace vf {

namespace {

// Downstream-ordered chain ending at `id`, starting at the nearest upstream
// junction or root (inclusive).
std::vector<std::int64_t> upstream_chain(const CenterlineNetwork& net, std::int64_t id) {
  std::vector<std::int64_t> chain{id};
  std::int64_t cur = id;
  while (true) {
    std::int64_t parent = net.point(cur).parent_id;
    if (parent < 0) break;
    chain.push_back(parent);
    if (net.children(parent).size() >= 2) break;
    cur = parent;
  }
  std::reverse(chain.begin(), chain.end());
  return chain;
}

// Chain from `first` downstream to the next junction or leaf (inclusive).
std::vector<std::int64_t> downstream_chain(const CenterlineNetwork& net, std::int64_t first) {
  std::vector<std::int64_t> chain{first};
  std::int64_t cur = first;
  while (net.children(cur).size() == 1) {
    cur = net.children(cur)[0];
    chain.push_back(cur);
  }
  return chain;
}

Eigen::MatrixXd rows_for(const CenterlineNetwork& net, const std::vector<std::int64_t>& ids) {
  Eigen::MatrixXd d(static_cast<int>(ids.size()), 4);
  for (std::size_t i = 0; i < ids.size(); ++i) d.row(static_cast<int>(i)) = net.point(ids[i]).as_vec4();
  return d;
}

CrossSection section_at(const Spline4& s, double u) {
  CrossSection c;
  c.center = s.position(u);
  c.radius = s.radius(u);
  c.normal = s.tangent(u);
  return c;
}

struct ApexHit {
  Vec3 point;
  double u_a;  // apical parameter on spline a
};

// Alternating projection onto the two tube surfaces; converges to a point on
// their intersection curve when started near it.
Vec3 project_to_intersection(const Spline4& a, const Spline4& b, Vec3 p, int iters = 200) {
  for (int it = 0; it < iters; ++it) {
    auto pa = a.project_point(p);
    Vec3 ca = a.position(pa.u);
    Vec3 da = p - ca;
    if (da.norm() < 1e-14) break;
    p = ca + a.radius(pa.u) * da.normalized();
    auto pb = b.project_point(p);
    Vec3 cb = b.position(pb.u);
    Vec3 db = p - cb;
    if (db.norm() < 1e-14) break;
    p = cb + b.radius(pb.u) * db.normalized();
    double res = std::abs((p - ca).norm() - a.radius(pa.u));
    if (res < 1e-10) break;
  }
  return p;
}

// First zero of penetration depth marching downstream from u_start on `a`,
// then refined to the most upstream point of the surface intersection curve
// (the point where the two tube surfaces first intersect).
ApexHit find_apex(const Spline4& a, const Spline4& b, double u_start) {
  const int kSamples = 200;
  double prev_u = u_start;
  double prev_d = tube_surface_distance(a, b, prev_u);
  if (prev_d >= 0.0)
    throw model_error("tubes do not intersect at the junction: no apex");
  double lo = -1.0, hi = -1.0;
  for (int i = 1; i <= kSamples; ++i) {
    double u = u_start + (1.0 - u_start) * i / kSamples;
    double d = tube_surface_distance(a, b, u);
    if (prev_d < 0.0 && d >= 0.0) {
      lo = prev_u;
      hi = u;
      break;
    }
    prev_u = u;
    prev_d = d;
  }
  if (lo < 0.0)
    throw model_error("tube separation not reached before the spline end: apex truncated");
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    double d = tube_surface_distance(a, b, mid);
    if (std::abs(d) < 1e-8) {
      lo = hi = mid;
      break;
    }
    (d < 0.0 ? lo : hi) = mid;
  }
  double u = 0.5 * (lo + hi);
  Vec3 ca = a.position(u);
  auto pb = b.project_point(ca);
  Vec3 cb = b.position(pb.u);
  Vec3 dir = cb - ca;
  double nrm = dir.norm();
  if (nrm < 1e-14) throw model_error("coincident centerlines at the apex");
  Vec3 p = project_to_intersection(a, b, ca + a.radius(u) * dir / nrm);

  // Slide along the intersection curve (tangent = cross of surface normals)
  // to the crotch point: coming from the separated outlets, the wedge
  // between the tubes closes where the smaller of the two arc positions is
  // largest. Upstream of the junction both merged tubes nearly coincide, so
  // a downstream extreme is the only well-posed one.
  double u_ja = u_start;
  double u_jb = b.project_point(a.position(u_start)).u;
  auto arc_pos = [&](const Vec3& q) {
    double ua = a.project_point(q).u;
    double ub = b.project_point(q).u;
    return std::min(ua > u_ja ? a.arc_length(u_ja, ua) : -a.arc_length(ua, u_ja),
                    ub > u_jb ? b.arc_length(u_jb, ub) : -b.arc_length(ub, u_jb));
  };
  double cost = arc_pos(p);
  double step = 0.25 * std::min(a.radius(u), b.radius(b.project_point(p).u));
  while (step > 1e-9) {
    Vec3 n1 = (p - a.position(a.project_point(p).u)).normalized();
    Vec3 n2 = (p - b.position(b.project_point(p).u)).normalized();
    Vec3 t = n1.cross(n2);
    if (t.norm() < 1e-12) break;
    t.normalize();
    bool moved = false;
    for (double sgn : {1.0, -1.0}) {
      Vec3 q = project_to_intersection(a, b, p + sgn * step * t);
      double cq = arc_pos(q);
      if (cq > cost + 1e-14) {
        p = q;
        cost = cq;
        moved = true;
        break;
      }
    }
    if (!moved) step *= 0.5;
  }
  return {p, a.project_point(p).u};
}

// C0 parameter on `s`: one inlet diameter of arc upstream of both the
// junction projection and the apical parameter (clamped at the spline
// start). The upstream clearance from the junction matters because the
// merged spline smooths the centreline kink, so the daughter tubes bulge
// sideways before the junction point itself.
double inlet_param(const Spline4& s, const Vec3& junction_pos, double u_apical) {
  double uj = std::min(s.project_point(junction_pos).u, u_apical);
  double r_in = s.radius(uj);
  double target = s.arc_length(0.0, uj) - 2.0 * r_in;
  if (target <= 0.0) return 0.0;
  return s.length_to_u(0.0, target);
}

FurcationModel assemble_furcation(const CenterlineNetwork& net, std::int64_t junction,
                                  std::vector<Spline4> splines,
                                  std::vector<std::int64_t> daughter_first_ids,
                                  const Eigen::MatrixXd& inlet_data, const FitConfig& config,
                                  double rounding_radius) {
  const int k = static_cast<int>(splines.size());
  const Vec3 jpos = net.point(junction).position;
  FurcationModel f;
  f.n_out = k;
  f.splines = std::move(splines);
  f.daughter_first_ids = std::move(daughter_first_ids);

  // pairwise apexes between (angularly) adjacent daughters
  std::vector<double> apical_u(k, 0.0);
  for (int i = 0; i + 1 < k; ++i) {
    const Spline4& a = f.splines[i];
    const Spline4& b = f.splines[i + 1];
    double u_start = a.project_point(jpos).u;
    ApexHit hit = find_apex(a, b, u_start);
    f.apexes.push_back(hit.point);
    // apical parameter of each adjacent daughter: where its own surface is
    // touched, i.e. the projection of AP
    apical_u[i] = std::max(apical_u[i], a.project_point(hit.point).u);
    apical_u[i + 1] = std::max(apical_u[i + 1], b.project_point(hit.point).u);
  }

  for (int i = 0; i < k; ++i) {
    const Spline4& s = f.splines[i];
    f.apex_u.push_back(apical_u[i]);
    f.apical.push_back(section_at(s, apical_u[i]));
    double r_ap = f.apical.back().radius;
    if (s.arc_length(apical_u[i], 1.0) + 1e-12 < 2.0 * r_ap)
      throw model_error("outlet section beyond the fitted spline extent");
    double u_out = s.length_to_u(apical_u[i], 2.0 * r_ap);
    f.outlet_u.push_back(u_out);
    f.outlets.push_back(section_at(s, u_out));
  }

  // shared inlet section. A fit of the common upstream points alone keeps
  // C0 free of the kink-smoothing bias the merged splines carry through the
  // junction; short inlets fall back to averaging the merged fits.
  if (inlet_data.rows() >= 5) {
    Spline4 inlet_spline = fit_vessel(inlet_data, config).spline;
    double r_in = inlet_spline.radius(1.0);
    // One inlet diameter of clearance upstream of the junction: the merged
    // splines smooth the centreline kink, so the daughter tubes bulge
    // sideways before the junction point itself.
    double arc_in = inlet_spline.arc_length(0.0, 1.0);
    double back = (jpos - inlet_spline.position(1.0)).norm() >= 2.0 * r_in
                      ? 0.0
                      : 2.0 * r_in - (jpos - inlet_spline.position(1.0)).norm();
    double u0 = inlet_spline.length_to_u(0.0, std::max(0.0, arc_in - back));
    f.inlet = section_at(inlet_spline, u0);
  } else {
    Vec3 c0 = Vec3::Zero(), n0 = Vec3::Zero();
    double r0 = 0.0;
    for (int i = 0; i < k; ++i) {
      CrossSection ci = section_at(f.splines[i], inlet_param(f.splines[i], jpos, apical_u[i]));
      c0 += ci.center;
      n0 += ci.normal;
      r0 += ci.radius;
    }
    f.inlet.center = c0 / k;
    f.inlet.radius = r0 / k;
    if (n0.norm() < 1e-12) throw model_error("degenerate inlet normal");
    f.inlet.normal = n0.normalized();
  }
  for (int i = 0; i < k; ++i)
    f.inlet_u.push_back(std::min(f.splines[i].project_point(f.inlet.center).u, apical_u[i]));

  double r_min = f.apical[0].radius;
  for (const auto& s : f.apical) r_min = std::min(r_min, s.radius);
  f.rounding_radius = rounding_radius > 0.0 ? rounding_radius : 0.2 * r_min;
  return f;
}

}  // namespace

double FurcationModel::profile_radius(int i, double u) const {
  const Spline4& s = splines.at(i);
  double ui = inlet_u.at(i), ua = apex_u.at(i), uo = outlet_u.at(i);
  if (u < ui || u > uo) return s.radius(u);
  if (u == ui) return inlet.radius;
  if (u == uo) return outlets.at(i).radius;
  double r_ap = apical.at(i).radius;
  if (u <= ua) {
    double span = s.arc_length(ui, ua);
    double w = span > 1e-14 ? s.arc_length(ui, u) / span : 1.0;
    return inlet.radius + w * (r_ap - inlet.radius);
  }
  double span = s.arc_length(ua, uo);
  double w = span > 1e-14 ? s.arc_length(ua, u) / span : 1.0;
  return r_ap + w * (outlets.at(i).radius - r_ap);
}

double tube_surface_distance(const Spline4& sA, const Spline4& sB, double u) {
  Vec3 ca = sA.position(u);
  auto p = sB.project_point(ca);
  return p.distance - (sA.radius(u) + sB.radius(p.u));
}

FurcationModel estimate_bifurcation(const CenterlineNetwork& net, std::int64_t junction,
                                    const FitConfig& config, double rounding_radius) {
  const auto& kids = net.children(junction);
  if (kids.size() != 2) throw model_error("estimate_bifurcation requires exactly 2 successors");
  auto inlet_ids = upstream_chain(net, junction);
  std::vector<Spline4> splines;
  std::vector<std::int64_t> first_ids;
  for (std::int64_t kid : kids) {
    auto ids = inlet_ids;
    auto down = downstream_chain(net, kid);
    ids.insert(ids.end(), down.begin(), down.end());
    splines.push_back(fit_vessel(rows_for(net, ids), config).spline);
    first_ids.push_back(kid);
  }
  return assemble_furcation(net, junction, std::move(splines), std::move(first_ids),
                            rows_for(net, inlet_ids), config, rounding_radius);
}

FurcationModel build_nfurcation(const CenterlineNetwork& net, std::int64_t junction,
                                const FitConfig& config, double rounding_radius) {
  const auto kids = net.children(junction);
  const int k = static_cast<int>(kids.size());
  if (k < 2) throw model_error("junction has fewer than 2 successors");
  if (k == 2) return estimate_bifurcation(net, junction, config, rounding_radius);

  const Vec3 jpos = net.point(junction).position;
  auto inlet_ids = upstream_chain(net, junction);
  Vec3 updir = Vec3::UnitX();
  if (inlet_ids.size() >= 2) {
    Vec3 d = jpos - net.point(inlet_ids.front()).position;
    if (d.norm() > 1e-12) updir = d.normalized();
  }

  // outlet directions: a couple of points into each daughter
  std::vector<Vec3> dirs(k);
  std::vector<std::vector<std::int64_t>> downs(k);
  for (int i = 0; i < k; ++i) {
    downs[i] = downstream_chain(net, kids[i]);
    std::size_t pick = std::min<std::size_t>(downs[i].size() - 1, 2);
    Vec3 d = net.point(downs[i][pick]).position - jpos;
    if (d.norm() < 1e-12) throw model_error("outlet coincides with the junction");
    dirs[i] = d.normalized();
  }

  // planarity: best-fit plane (through the junction) of outlet + inlet
  // directions, residual angle < 0.2 rad
  Eigen::Matrix3d cov = updir * updir.transpose();
  for (const Vec3& d : dirs) cov += d * d.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Vec3 pn = eig.eigenvectors().col(0);
  for (const Vec3& d : dirs)
    if (std::abs(std::asin(std::clamp(d.dot(pn), -1.0, 1.0))) > 0.2)
      throw model_error("non-planar furcation: unsupported topology");

  // angular order within the plane, around the forward (inlet) axis
  Vec3 fwd = (updir - updir.dot(pn) * pn).normalized();
  std::vector<int> order(k);
  for (int i = 0; i < k; ++i) order[i] = i;
  auto angle = [&](const Vec3& d) {
    Vec3 p = d - d.dot(pn) * pn;
    return std::atan2(pn.cross(fwd).dot(p), fwd.dot(p));
  };
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return angle(dirs[a]) < angle(dirs[b]); });

  std::vector<Spline4> splines;
  std::vector<std::int64_t> first_ids;
  for (int oi : order) {
    auto ids = inlet_ids;
    ids.insert(ids.end(), downs[oi].begin(), downs[oi].end());
    splines.push_back(fit_vessel(rows_for(net, ids), config).spline);
    first_ids.push_back(kids[oi]);
  }
  return assemble_furcation(net, junction, std::move(splines), std::move(first_ids),
                            rows_for(net, inlet_ids), config, rounding_radius);
}

NetworkModel assemble_network(const CenterlineNetwork& net, const FitConfig& config,
                              double rounding_radius) {
  NetworkModel model;
  for (std::int64_t j : net.junctions()) {
    try {
      model.furcations.emplace(j, build_nfurcation(net, j, config, rounding_radius));
    } catch (const std::exception& e) {
      model.failures.push_back({"furcation", j, e.what()});
    }
  }

  auto branches = extract_branches(net);
  model.vessels.resize(branches.size());
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const Branch& br = branches[b];
    try {
      Eigen::MatrixXd data = rows_for(net, br.point_ids);

      std::optional<CrossSection> sec0, sec1;
      if (br.inlet_junction) {
        auto it = model.furcations.find(*br.inlet_junction);
        if (it != model.furcations.end() && br.point_ids.size() >= 2) {
          const FurcationModel& f = it->second;
          for (int i = 0; i < f.n_out; ++i)
            if (f.daughter_first_ids[i] == br.point_ids[1]) sec0 = f.outlets[i];
        }
      }
      if (br.outlet_junction) {
        auto it = model.furcations.find(*br.outlet_junction);
        if (it != model.furcations.end()) sec1 = it->second.inlet;
      }

      // drop data inside the furcation regions
      std::vector<int> keep;
      for (int r = 0; r < data.rows(); ++r) {
        Vec3 p = data.row(r).head<3>().transpose();
        if (sec0 && (p - sec0->center).dot(sec0->normal) < 0.0) continue;
        if (sec1 && (p - sec1->center).dot(sec1->normal) > 0.0) continue;
        keep.push_back(r);
      }
      if (static_cast<int>(keep.size()) < 4) {
        keep.resize(data.rows());
        for (int r = 0; r < data.rows(); ++r) keep[r] = r;
      }
      Eigen::MatrixXd trimmed(static_cast<int>(keep.size()), 4);
      for (std::size_t r = 0; r < keep.size(); ++r) trimmed.row(static_cast<int>(r)) = data.row(keep[r]);

      if (!sec0 && !sec1) {
        model.vessels[b] = fit_vessel(trimmed, config).spline;
      } else {
        // free ends borrow their constraint from an unconstrained pre-fit,
        // which leaves them effectively unconstrained
        Spline4 pre = fit_vessel(trimmed, config).spline;
        auto as_constraint = [](const CrossSection& s) {
          EndConstraint c;
          c.point << s.center, s.radius;
          c.tangent_direction << s.normal, 0.0;
          return c;
        };
        EndConstraint c0, c1;
        if (sec0) {
          c0 = as_constraint(*sec0);
        } else {
          c0.point = pre.point4(0.0);
          Eigen::VectorXd d = pre.evaluate(0.0, 1);
          c0.tangent_direction = Eigen::Vector4d(d[0], d[1], d[2], d[3]).normalized();
        }
        if (sec1) {
          c1 = as_constraint(*sec1);
        } else {
          c1.point = pre.point4(1.0);
          Eigen::VectorXd d = pre.evaluate(1.0, 1);
          c1.tangent_direction = Eigen::Vector4d(d[0], d[1], d[2], d[3]).normalized();
        }
        model.vessels[b] = fit_vessel(trimmed, config, std::make_pair(c0, c1)).spline;
      }

      if (br.inlet_junction)
        model.joints.push_back({static_cast<int>(b), true, *br.inlet_junction, [&] {
                                  auto it = model.furcations.find(*br.inlet_junction);
                                  if (it == model.furcations.end() || br.point_ids.size() < 2)
                                    return -2;
                                  const FurcationModel& f = it->second;
                                  for (int i = 0; i < f.n_out; ++i)
                                    if (f.daughter_first_ids[i] == br.point_ids[1]) return i;
                                  return -2;
                                }()});
      if (br.outlet_junction)
        model.joints.push_back({static_cast<int>(b), false, *br.outlet_junction, -1});
    } catch (const std::exception& e) {
      model.failures.push_back({"vessel", static_cast<std::int64_t>(b), e.what()});
    }
  }
  return model;
}

// ---- JSON serialization ----

namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  int rows = static_cast<int>(j.size());
  int cols = rows > 0 ? static_cast<int>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  return m;
}

nlohmann::json vec3_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 vec3_from_json(const nlohmann::json& j) { return Vec3(j[0], j[1], j[2]); }

nlohmann::json section_json(const CrossSection& s) {
  return {{"center", vec3_json(s.center)}, {"radius", s.radius}, {"normal", vec3_json(s.normal)}};
}

CrossSection section_from_json(const nlohmann::json& j) {
  CrossSection s;
  s.center = vec3_from_json(j["center"]);
  s.radius = j["radius"];
  s.normal = vec3_from_json(j["normal"]);
  return s;
}

}  // namespace

nlohmann::json network_to_json(const NetworkModel& model) {
  nlohmann::json j;
  j["vessels"] = nlohmann::json::array();
  for (const auto& v : model.vessels)
    j["vessels"].push_back(v.num_control() > 0 ? matrix_json(v.control_points())
                                               : nlohmann::json::array());
  j["furcations"] = nlohmann::json::object();
  for (const auto& [id, f] : model.furcations) {
    nlohmann::json fj;
    fj["n_out"] = f.n_out;
    fj["inlet"] = section_json(f.inlet);
    fj["apical"] = nlohmann::json::array();
    for (const auto& s : f.apical) fj["apical"].push_back(section_json(s));
    fj["outlets"] = nlohmann::json::array();
    for (const auto& s : f.outlets) fj["outlets"].push_back(section_json(s));
    fj["apexes"] = nlohmann::json::array();
    for (const auto& a : f.apexes) fj["apexes"].push_back(vec3_json(a));
    fj["splines"] = nlohmann::json::array();
    for (const auto& s : f.splines) fj["splines"].push_back(matrix_json(s.control_points()));
    fj["apex_u"] = f.apex_u;
    fj["inlet_u"] = f.inlet_u;
    fj["outlet_u"] = f.outlet_u;
    fj["daughter_first_ids"] = f.daughter_first_ids;
    fj["rounding_radius"] = f.rounding_radius;
    j["furcations"][std::to_string(id)] = std::move(fj);
  }
  j["joints"] = nlohmann::json::array();
  for (const auto& jt : model.joints)
    j["joints"].push_back({{"branch", jt.branch},
                           {"at_start", jt.at_start},
                           {"junction", jt.junction},
                           {"section", jt.section}});
  j["failures"] = nlohmann::json::array();
  for (const auto& fl : model.failures)
    j["failures"].push_back({{"kind", fl.kind}, {"id", fl.id}, {"message", fl.message}});
  return j;
}

NetworkModel network_from_json(const nlohmann::json& j) {
  NetworkModel model;
  for (const auto& v : j.at("vessels")) {
    if (v.empty())
      model.vessels.emplace_back();
    else
      model.vessels.emplace_back(matrix_from_json(v));
  }
  for (const auto& [key, fj] : j.at("furcations").items()) {
    FurcationModel f;
    f.n_out = fj.at("n_out");
    f.inlet = section_from_json(fj.at("inlet"));
    for (const auto& s : fj.at("apical")) f.apical.push_back(section_from_json(s));
    for (const auto& s : fj.at("outlets")) f.outlets.push_back(section_from_json(s));
    for (const auto& a : fj.at("apexes")) f.apexes.push_back(vec3_from_json(a));
    for (const auto& s : fj.at("splines")) f.splines.emplace_back(matrix_from_json(s));
    f.apex_u = fj.at("apex_u").get<std::vector<double>>();
    f.inlet_u = fj.at("inlet_u").get<std::vector<double>>();
    f.outlet_u = fj.at("outlet_u").get<std::vector<double>>();
    f.daughter_first_ids = fj.at("daughter_first_ids").get<std::vector<std::int64_t>>();
    f.rounding_radius = fj.at("rounding_radius");
    model.furcations.emplace(std::stoll(key), std::move(f));
  }
  for (const auto& jt : j.at("joints"))
    model.joints.push_back({jt.at("branch"), jt.at("at_start"), jt.at("junction"), jt.at("section")});
  for (const auto& fl : j.at("failures"))
    model.failures.push_back({fl.at("kind"), fl.at("id"), fl.at("message")});
  return model;
}

void write_network_json(const NetworkModel& model, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw model_error("cannot open " + tmp + " for writing");
    out << network_to_json(model).dump(2) << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw model_error("cannot rename " + tmp + " to " + path);
}

NetworkModel read_network_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw model_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return network_from_json(j);
}

}  // namespace vf
