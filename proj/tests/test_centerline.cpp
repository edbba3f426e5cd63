#include <doctest.h>

#include "vesselforge/centerline.hpp"

#include <filesystem>
#include <sstream>

using namespace vf;

namespace {

CenterlineNetwork y_network() {
  // root chain into a junction with two leaves
  std::vector<CenterlinePoint> pts;
  auto add = [&](std::int64_t id, double x, double y, double z, double r, std::int64_t parent) {
    CenterlinePoint p;
    p.id = id;
    p.position = Vec3(x, y, z);
    p.radius = r;
    p.parent_id = parent;
    pts.push_back(p);
  };
  add(1, 0, 0, 0, 1.0, -1);
  add(2, 0, 0, 1, 1.0, 1);
  add(3, 0, 0, 2, 1.0, 2);
  add(4, 0.5, 0, 3, 0.8, 3);
  add(5, -0.5, 0, 3, 0.8, 3);
  return CenterlineNetwork(std::move(pts));
}

}  // namespace

TEST_CASE("parse_swc minimal chain") {
  std::istringstream in("1 2 0 0 0 1.0 -1\n2 2 0 0 1 1.0 1\n");
  auto net = parse_swc(in);
  CHECK(net.points().size() == 2);
  CHECK(net.roots().size() == 1);
  CHECK(net.children(1).size() == 1);
  CHECK(net.children(1)[0] == 2);
}

TEST_CASE("parse_swc comments and blank lines") {
  std::istringstream in("# header\n\n1 2 0 0 0 1.0 -1\n2 2 0 0 1 1.0 1 # trailing\n");
  auto net = parse_swc(in);
  CHECK(net.points().size() == 2);
}

TEST_CASE("parse_swc nonpositive radius reports line") {
  std::istringstream in("1 2 0 0 0 1.0 -1\n2 2 0 0 1 1.0 1\n3 2 0 0 2 -0.5 2\n");
  try {
    parse_swc(in);
    FAIL("expected centerline_error");
  } catch (const centerline_error& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("radius") != std::string::npos);
  }
}

TEST_CASE("parse_swc dangling parent") {
  std::istringstream in("1 2 0 0 0 1 -1\n2 2 0 0 1 1 1\n3 2 0 0 2 1 7\n");
  CHECK_THROWS_WITH_AS(parse_swc(in), doctest::Contains("dangling"), centerline_error);
}

TEST_CASE("duplicate id rejected") {
  std::istringstream in("1 2 0 0 0 1 -1\n1 2 0 0 1 1 1\n");
  CHECK_THROWS_WITH_AS(parse_swc(in), doctest::Contains("duplicate"), centerline_error);
}

TEST_CASE("cycle detected") {
  std::vector<CenterlinePoint> pts(2);
  pts[0].id = 1;
  pts[0].radius = 1;
  pts[0].parent_id = 2;
  pts[1].id = 2;
  pts[1].radius = 1;
  pts[1].parent_id = 1;
  CHECK_THROWS_WITH_AS(CenterlineNetwork(std::move(pts)), doctest::Contains("cycle"),
                       centerline_error);
}

TEST_CASE("swc round trip preserves everything") {
  auto net = y_network();
  std::ostringstream out;
  write_swc(net, out);
  std::istringstream in(out.str());
  auto net2 = parse_swc(in);
  REQUIRE(net2.points().size() == net.points().size());
  for (const auto& p : net.points()) {
    const auto& q = net2.point(p.id);
    CHECK(q.position == p.position);
    CHECK(q.radius == p.radius);
    CHECK(q.parent_id == p.parent_id);
  }
}

TEST_CASE("extract_branches on Y network") {
  auto net = y_network();
  auto branches = extract_branches(net);
  REQUIRE(branches.size() == 3);
  // every branch touches the junction (id 3)
  for (const auto& b : branches) {
    bool touches = b.point_ids.front() == 3 || b.point_ids.back() == 3;
    CHECK(touches);
  }
  // edge partition
  std::size_t edges = 0;
  for (const auto& b : branches) edges += b.point_ids.size() - 1;
  CHECK(edges == net.edge_count());
}

TEST_CASE("extract_branches single chain") {
  std::vector<CenterlinePoint> pts;
  for (int i = 0; i < 10; ++i) {
    CenterlinePoint p;
    p.id = i + 1;
    p.position = Vec3(0, 0, i);
    p.radius = 1;
    p.parent_id = i == 0 ? -1 : i;
    pts.push_back(p);
  }
  auto net = CenterlineNetwork(std::move(pts));
  auto branches = extract_branches(net);
  REQUIRE(branches.size() == 1);
  CHECK(branches[0].point_ids.size() == 10);
  CHECK(!branches[0].inlet_junction);
  CHECK(!branches[0].outlet_junction);
}

TEST_CASE("trifurcation yields four branches") {
  std::vector<CenterlinePoint> pts;
  auto add = [&](std::int64_t id, double x, double z, std::int64_t parent) {
    CenterlinePoint p;
    p.id = id;
    p.position = Vec3(x, 0, z);
    p.radius = 1;
    p.parent_id = parent;
    pts.push_back(p);
  };
  add(1, 0, 0, -1);
  add(2, 0, 1, 1);
  add(3, -1, 2, 2);
  add(4, 0, 2, 2);
  add(5, 1, 2, 2);
  auto net = CenterlineNetwork(std::move(pts));
  auto branches = extract_branches(net);
  CHECK(branches.size() == 4);
  int sharing = 0;
  for (const auto& b : branches)
    if (b.point_ids.front() == 2 || b.point_ids.back() == 2) ++sharing;
  CHECK(sharing == 4);
}

TEST_CASE("point_density") {
  std::vector<CenterlinePoint> pts;
  for (int i = 0; i < 11; ++i) {
    CenterlinePoint p;
    p.id = i + 1;
    p.position = Vec3(0, 0, i);  // 1 mm spacing
    p.radius = 1;
    p.parent_id = i == 0 ? -1 : i;
    pts.push_back(p);
  }
  auto net = CenterlineNetwork(std::move(pts));
  auto branches = extract_branches(net);
  CHECK(point_density(branches[0], net) == doctest::Approx(1.1));

  std::vector<CenterlinePoint> two;
  for (int i = 0; i < 2; ++i) {
    CenterlinePoint p;
    p.id = i + 1;
    p.position = Vec3(0, 0, 4.0 * i);
    p.radius = 1;
    p.parent_id = i == 0 ? -1 : 1;
    two.push_back(p);
  }
  auto net2 = CenterlineNetwork(std::move(two));
  auto b2 = extract_branches(net2);
  CHECK(point_density(b2[0], net2) == doctest::Approx(0.5));
}

TEST_CASE("engineered BraVa-like density") {
  // 10 points over 20 mm -> 0.45/mm when spacing is 20/9 mm
  std::vector<CenterlinePoint> pts;
  int n = 10;
  double len = n / 0.45;
  for (int i = 0; i < n; ++i) {
    CenterlinePoint p;
    p.id = i + 1;
    p.position = Vec3(0, 0, len * i / (n - 1));
    p.radius = 1;
    p.parent_id = i == 0 ? -1 : i;
    pts.push_back(p);
  }
  auto net = CenterlineNetwork(std::move(pts));
  auto b = extract_branches(net);
  CHECK(point_density(b[0], net) == doctest::Approx(0.45).epsilon(0.01));
}

TEST_CASE("fixture round trip") {
  auto net = y_network();
  auto dir = std::filesystem::temp_directory_path() / "vf_fixture_test";
  write_fixture(net, dir.string(), "y");
  auto net2 = read_fixture(dir.string(), "y");
  REQUIRE(net2.points().size() == net.points().size());
  for (const auto& p : net.points()) {
    const auto& q = net2.point(p.id);
    CHECK(q.position == p.position);
    CHECK(q.radius == p.radius);
    CHECK(q.parent_id == p.parent_id);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("multiple roots accepted") {
  std::istringstream in("1 2 0 0 0 1 -1\n2 2 0 0 1 1 1\n10 2 5 0 0 1 -1\n11 2 5 0 1 1 10\n");
  auto net = parse_swc(in);
  CHECK(net.roots().size() == 2);
  CHECK(extract_branches(net).size() == 2);
}
