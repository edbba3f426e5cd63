#include "vesselforge/centerline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vf {

const std::vector<std::int64_t> CenterlineNetwork::empty_{};

CenterlineNetwork::CenterlineNetwork(std::vector<CenterlinePoint> points)
    : points_(std::move(points)) {
  build();
}

void CenterlineNetwork::build() {
  index_.clear();
  children_.clear();
  roots_.clear();
  for (std::size_t i = 0; i < points_.size(); ++i) {
    const auto& p = points_[i];
    if (p.radius <= 0.0)
      throw centerline_error("nonpositive radius for point " + std::to_string(p.id));
    if (!index_.emplace(p.id, i).second)
      throw centerline_error("duplicate id " + std::to_string(p.id));
  }
  for (const auto& p : points_) {
    if (p.parent_id < 0) {
      roots_.push_back(p.id);
    } else {
      if (!index_.count(p.parent_id))
        throw centerline_error("dangling parent " + std::to_string(p.parent_id) +
                               " of point " + std::to_string(p.id));
      children_[p.parent_id].push_back(p.id);
    }
  }
  // cycle check: every point must reach a root through the parent chain
  for (const auto& p : points_) {
    std::int64_t cur = p.id;
    std::size_t steps = 0;
    while (true) {
      const auto& cp = points_[index_.at(cur)];
      if (cp.parent_id < 0) break;
      cur = cp.parent_id;
      if (++steps > points_.size())
        throw centerline_error("cycle detected through point " + std::to_string(p.id));
    }
  }
}

const CenterlinePoint& CenterlineNetwork::point(std::int64_t id) const {
  auto it = index_.find(id);
  if (it == index_.end())
    throw centerline_error("unknown point id " + std::to_string(id));
  return points_[it->second];
}

const std::vector<std::int64_t>& CenterlineNetwork::children(std::int64_t id) const {
  auto it = children_.find(id);
  return it == children_.end() ? empty_ : it->second;
}

std::vector<std::int64_t> CenterlineNetwork::junctions() const {
  std::vector<std::int64_t> out;
  for (const auto& [id, kids] : children_)
    if (kids.size() >= 2) out.push_back(id);
  return out;
}

std::size_t CenterlineNetwork::edge_count() const {
  std::size_t n = 0;
  for (const auto& [id, kids] : children_) n += kids.size();
  return n;
}

CenterlineNetwork parse_swc(std::istream& in) {
  std::vector<CenterlinePoint> pts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    CenterlinePoint p;
    if (!(ls >> p.id)) continue;  // blank line
    if (!(ls >> p.type >> p.position.x() >> p.position.y() >> p.position.z() >> p.radius >>
          p.parent_id))
      throw centerline_error("malformed swc record", lineno);
    if (p.radius <= 0.0) throw centerline_error("nonpositive radius", lineno);
    pts.push_back(p);
  }
  return CenterlineNetwork(std::move(pts));
}

CenterlineNetwork parse_swc_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw centerline_error("cannot open " + path);
  return parse_swc(in);
}

void write_swc(const CenterlineNetwork& net, std::ostream& out) {
  out << std::setprecision(12);
  for (const auto& p : net.points()) {
    out << p.id << ' ' << p.type << ' ' << p.position.x() << ' ' << p.position.y() << ' '
        << p.position.z() << ' ' << p.radius << ' ' << p.parent_id << '\n';
  }
}

void write_swc_file(const CenterlineNetwork& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw centerline_error("cannot open " + path + " for writing");
  write_swc(net, out);
}

std::vector<Branch> extract_branches(const CenterlineNetwork& net) {
  std::vector<Branch> branches;
  // walk from every root and every junction down each child edge
  auto is_junction = [&](std::int64_t id) { return net.children(id).size() >= 2; };
  std::vector<std::int64_t> starts = net.roots();
  for (auto j : net.junctions()) starts.push_back(j);
  std::sort(starts.begin(), starts.end());
  starts.erase(std::unique(starts.begin(), starts.end()), starts.end());

  for (auto start : starts) {
    for (auto child : net.children(start)) {
      Branch b;
      b.point_ids.push_back(start);
      if (is_junction(start)) b.inlet_junction = start;
      std::int64_t cur = child;
      while (true) {
        b.point_ids.push_back(cur);
        const auto& kids = net.children(cur);
        if (kids.size() == 1 && !is_junction(cur)) {
          cur = kids[0];
        } else {
          if (is_junction(cur)) b.outlet_junction = cur;
          break;
        }
      }
      branches.push_back(std::move(b));
    }
  }
  return branches;
}

double branch_length(const Branch& branch, const CenterlineNetwork& net) {
  double len = 0.0;
  for (std::size_t i = 1; i < branch.point_ids.size(); ++i)
    len += (net.point(branch.point_ids[i]).position - net.point(branch.point_ids[i - 1]).position)
               .norm();
  return len;
}

double point_density(const Branch& branch, const CenterlineNetwork& net) {
  if (branch.point_ids.size() < 2) throw centerline_error("branch has fewer than 2 points");
  double len = branch_length(branch, net);
  if (len <= 0.0) throw centerline_error("zero-length branch polyline");
  return static_cast<double>(branch.point_ids.size()) / len;
}

void write_fixture(const CenterlineNetwork& net, const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto branches = extract_branches(net);
  nlohmann::json topo;
  topo["name"] = name;
  topo["branches"] = nlohmann::json::array();
  for (std::size_t bi = 0; bi < branches.size(); ++bi) {
    const auto& b = branches[bi];
    std::string csv = name + "_branch" + std::to_string(bi) + ".csv";
    std::ofstream out(fs::path(dir) / csv);
    out << std::setprecision(12);
    out << "x,y,z,r\n";
    for (auto id : b.point_ids) {
      const auto& p = net.point(id);
      out << p.position.x() << ',' << p.position.y() << ',' << p.position.z() << ',' << p.radius
          << '\n';
    }
    nlohmann::json jb;
    jb["file"] = csv;
    jb["point_ids"] = b.point_ids;
    if (b.inlet_junction) jb["inlet_junction"] = *b.inlet_junction;
    if (b.outlet_junction) jb["outlet_junction"] = *b.outlet_junction;
    topo["branches"].push_back(jb);
  }
  std::ofstream jout(fs::path(dir) / (name + ".json"));
  jout << topo.dump(2) << '\n';
}

CenterlineNetwork read_fixture(const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  std::ifstream jin(fs::path(dir) / (name + ".json"));
  if (!jin) throw centerline_error("cannot open fixture index for " + name);
  nlohmann::json topo;
  jin >> topo;

  std::map<std::int64_t, CenterlinePoint> pts;
  for (const auto& jb : topo["branches"]) {
    std::ifstream in(fs::path(dir) / jb["file"].get<std::string>());
    if (!in) throw centerline_error("cannot open fixture csv " + jb["file"].get<std::string>());
    std::vector<std::int64_t> ids = jb["point_ids"].get<std::vector<std::int64_t>>();
    std::string line;
    std::getline(in, line);  // header
    std::size_t k = 0;
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      if (k >= ids.size()) throw centerline_error("more rows than point ids in fixture", lineno);
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ls(line);
      CenterlinePoint p;
      p.id = ids[k];
      if (!(ls >> p.position.x() >> p.position.y() >> p.position.z() >> p.radius))
        throw centerline_error("malformed fixture row", lineno);
      p.parent_id = (k == 0) ? -1 : ids[k - 1];
      auto [it, inserted] = pts.emplace(p.id, p);
      if (!inserted && k > 0) it->second.parent_id = it->second.parent_id;  // keep first
      if (inserted && k == 0) it->second.parent_id = -1;
      ++k;
    }
    // stitch branch head to its recorded parent if the head already exists as
    // the tail of another branch (shared junction)
    if (!ids.empty()) {
      // nothing extra: shared junction rows carry identical data in each csv
    }
  }
  // rebuild parent links: branch order in json gives parentage; heads of
  // non-first branches keep the parent assigned when first seen
  // Re-walk to set parents along each branch explicitly.
  for (const auto& jb : topo["branches"]) {
    std::vector<std::int64_t> ids = jb["point_ids"].get<std::vector<std::int64_t>>();
    for (std::size_t k = 1; k < ids.size(); ++k) pts.at(ids[k]).parent_id = ids[k - 1];
  }
  std::vector<CenterlinePoint> flat;
  flat.reserve(pts.size());
  for (auto& [id, p] : pts) flat.push_back(p);
  return CenterlineNetwork(std::move(flat));
}

}  // namespace vf
