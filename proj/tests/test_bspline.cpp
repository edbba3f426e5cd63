#include <doctest.h>

#include "vesselforge/bspline.hpp"
#include "vesselforge/fitting.hpp"

#include <cmath>
#include <random>

using namespace vf;

namespace {

SplineD random_spline(std::mt19937_64& rng, int n, int dim) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  Eigen::MatrixXd p(n, dim);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < dim; ++d) p(i, d) = u(rng);
  return SplineD(p);
}

// least-squares fit of samples of an analytic curve, for oracle geometry
SplineD fit_samples(const Eigen::MatrixXd& samples, int n) {
  ChordParam cp = chord_length_parametrize(samples);
  Eigen::MatrixXd data(cp.kept_rows.size(), samples.cols());
  for (std::size_t i = 0; i < cp.kept_rows.size(); ++i) data.row(i) = samples.row(cp.kept_rows[i]);
  return SplineD(solve_penalized(data, cp.t, n, 0.0));
}

}  // namespace

TEST_CASE("constant control polygon evaluates to the point, derivative zero") {
  Eigen::MatrixXd p(6, 3);
  for (int i = 0; i < 6; ++i) p.row(i) = Eigen::RowVector3d(1, 2, 3);
  SplineD s(p);
  for (double u : {0.0, 0.31, 0.77, 1.0}) {
    CHECK((s.evaluate(u, 0) - Eigen::Vector3d(1, 2, 3)).norm() < 1e-13);
    CHECK(s.evaluate(u, 1).norm() < 1e-12);
  }
}

TEST_CASE("clamped end identities") {
  std::mt19937_64 rng(7);
  auto s = random_spline(rng, 9, 3);
  const auto& P = s.control_points();
  CHECK((s.evaluate(0.0) - P.row(0).transpose()).norm() < 1e-14);
  CHECK((s.evaluate(1.0) - P.row(P.rows() - 1).transpose()).norm() < 1e-14);
  // end tangents parallel to control-polygon legs
  Eigen::VectorXd d0 = s.evaluate(0.0, 1);
  Eigen::VectorXd leg0 = (P.row(1) - P.row(0)).transpose();
  CHECK(d0.normalized().dot(leg0.normalized()) == doctest::Approx(1.0).epsilon(1e-12));
  Eigen::VectorXd d1 = s.evaluate(1.0, 1);
  Eigen::VectorXd leg1 = (P.row(P.rows() - 1) - P.row(P.rows() - 2)).transpose();
  CHECK(d1.normalized().dot(leg1.normalized()) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("partition of unity") {
  auto knots = SplineD::clamped_uniform_knots(11);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uu(0.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    double u = uu(rng);
    CHECK(std::abs(SplineD::basis_row(knots, 11, u).sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("derivatives match finite differences") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uu(0.01, 0.99);
  for (int trial = 0; trial < 5; ++trial) {
    auto s = random_spline(rng, 5 + 3 * trial, 4);
    for (int k = 0; k < 200; ++k) {
      double u = uu(rng);
      double h1 = 1e-6, h2 = 1e-4;
      Eigen::VectorXd fd1 = (s.evaluate(u + h1) - s.evaluate(u - h1)) / (2 * h1);
      Eigen::VectorXd fd2 =
          (s.evaluate(u + h2) - 2 * s.evaluate(u) + s.evaluate(u - h2)) / (h2 * h2);
      CHECK((s.evaluate(u, 1) - fd1).cwiseAbs().maxCoeff() < 1e-5);
      CHECK((s.evaluate(u, 2) - fd2).cwiseAbs().maxCoeff() < 1e-3);
    }
  }
}

TEST_CASE("locality of control points") {
  std::mt19937_64 rng(23);
  auto s = random_spline(rng, 12, 3);
  Eigen::MatrixXd p2 = s.control_points();
  int moved = 5;
  p2.row(moved) += Eigen::RowVector3d(1, 0, 0);
  SplineD s2(p2);
  const auto& knots = s.knots();
  double lo = knots[moved], hi = knots[moved + SplineD::kDegree + 1];
  for (int k = 0; k <= 100; ++k) {
    double u = k / 100.0;
    double diff = (s.evaluate(u) - s2.evaluate(u)).norm();
    if (u < lo - 1e-9 || u > hi + 1e-9) CHECK(diff < 1e-13);
  }
}

TEST_CASE("parameter outside domain throws") {
  std::mt19937_64 rng(1);
  auto s = random_spline(rng, 6, 3);
  CHECK_THROWS_AS(s.evaluate(-0.01), std::domain_error);
  CHECK_THROWS_AS(s.evaluate(1.01), std::domain_error);
}

TEST_CASE("curvature of a circle") {
  // dense circle samples, radius 5
  int m = 200;
  Eigen::MatrixXd samples(m, 3);
  for (int i = 0; i < m; ++i) {
    double a = 2.0 * M_PI * 0.75 * i / (m - 1);
    samples.row(i) = Eigen::RowVector3d(5 * std::cos(a), 5 * std::sin(a), 0);
  }
  auto s = fit_samples(samples, 60);
  for (double u : {0.1, 0.3, 0.5, 0.7, 0.9})
    CHECK(s.curvature(u) == doctest::Approx(0.2).epsilon(5e-3));
}

TEST_CASE("curvature of a straight control polygon is zero") {
  Eigen::MatrixXd p(7, 3);
  for (int i = 0; i < 7; ++i) p.row(i) = Eigen::RowVector3d(i, 2.0 * i, -i);
  SplineD s(p);
  for (double u : {0.05, 0.33, 0.5, 0.85}) CHECK(s.curvature(u) < 1e-10);
}

TEST_CASE("curvature of a helix") {
  // helix a=1, b=0.5: kappa = a/(a^2+b^2) = 0.8
  int m = 400;
  Eigen::MatrixXd samples(m, 3);
  for (int i = 0; i < m; ++i) {
    double a = 4.0 * M_PI * i / (m - 1);
    samples.row(i) = Eigen::RowVector3d(std::cos(a), std::sin(a), 0.5 * a);
  }
  auto s = fit_samples(samples, 100);
  for (double u : {0.2, 0.4, 0.6, 0.8})
    CHECK(s.curvature(u) == doctest::Approx(0.8).epsilon(1e-2 / 0.8));
}

TEST_CASE("project_point recovers on-curve points") {
  std::mt19937_64 rng(5);
  auto s = random_spline(rng, 10, 3);
  Vec3 q = s.position(0.37);
  auto pr = s.project_point(q);
  CHECK(std::abs(pr.u - 0.37) < 1e-6);
  CHECK(pr.distance < 1e-8);
}

TEST_CASE("project_point matches brute force") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> uq(-6.0, 6.0);
  auto s = random_spline(rng, 8, 3);
  for (int k = 0; k < 100; ++k) {
    Vec3 q(uq(rng), uq(rng), uq(rng));
    auto pr = s.project_point(q);
    double bu = 0, bd = 1e30;
    const int B = 100000;
    for (int i = 0; i <= B; ++i) {
      double u = static_cast<double>(i) / B;
      double d = (s.position(u) - q).norm();
      if (d < bd) {
        bd = d;
        bu = u;
      }
    }
    bool ok = std::abs(pr.u - bu) < 1e-3 || std::abs(pr.distance - bd) < 1e-8;
    CHECK(ok);
  }
}

TEST_CASE("project_point tie breaks to the smaller parameter") {
  // symmetric arc: control polygon symmetric about x=0
  Eigen::MatrixXd p(4, 3);
  p << -2, 0, 0, -1, 2, 0, 1, 2, 0, 2, 0, 0;
  SplineD s(p);
  Vec3 q(0, -3, 0);  // equidistant from both ends of the symmetric arc
  auto pr = s.project_point(q);
  CHECK(pr.u <= 0.5 + 1e-9);
  double other = (s.position(1.0 - pr.u) - q).norm();
  CHECK(std::abs(other - pr.distance) < 1e-8);
}

TEST_CASE("chord length parametrization") {
  Eigen::MatrixXd p(3, 3);
  p << 0, 0, 0, 1, 0, 0, 4, 0, 0;
  auto cp = chord_length_parametrize(p);
  REQUIRE(cp.t.size() == 3);
  CHECK(cp.t[0] == 0.0);
  CHECK(cp.t[1] == doctest::Approx(0.25));
  CHECK(cp.t[2] == 1.0);

  // uniform spacing -> uniform t
  Eigen::MatrixXd q(5, 3);
  for (int i = 0; i < 5; ++i) q.row(i) = Eigen::RowVector3d(i, 0, 0);
  auto cq = chord_length_parametrize(q);
  for (int i = 0; i < 5; ++i) CHECK(cq.t[i] == doctest::Approx(i / 4.0));
}

TEST_CASE("chord length parametrization collapses duplicates") {
  Eigen::MatrixXd p(4, 3);
  p << 0, 0, 0, 1, 0, 0, 1, 0, 0, 3, 0, 0;
  auto cp = chord_length_parametrize(p);
  CHECK(cp.had_duplicates);
  REQUIRE(cp.t.size() == 3);
  for (std::size_t i = 1; i < cp.t.size(); ++i) CHECK(cp.t[i] > cp.t[i - 1]);
}

TEST_CASE("all-coincident points rejected") {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(3, 3);
  CHECK_THROWS_AS(chord_length_parametrize(p), std::invalid_argument);
}

TEST_CASE("arc length of straight segment") {
  Eigen::MatrixXd p(5, 3);
  for (int i = 0; i < 5; ++i) p.row(i) = Eigen::RowVector3d(0, 0, 2.5 * i);  // length 10
  SplineD s(p);
  CHECK(s.arc_length(0, 0.5) == doctest::Approx(5.0).epsilon(1e-7));
  CHECK(s.arc_length(0, 1) == doctest::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("arc length of a circle radius 2") {
  int m = 600;
  Eigen::MatrixXd samples(m, 3);
  for (int i = 0; i < m; ++i) {
    double a = 2.0 * M_PI * i / (m - 1.0);
    samples.row(i) = Eigen::RowVector3d(2 * std::cos(a), 2 * std::sin(a), 0);
  }
  auto s = fit_samples(samples, 120);
  CHECK(s.arc_length(0, 1) == doctest::Approx(4.0 * M_PI).epsilon(1e-5 / (4 * M_PI)));
}

TEST_CASE("length_to_u round trip") {
  std::mt19937_64 rng(31);
  auto s = random_spline(rng, 9, 3);
  double total = s.arc_length(0, 1);
  for (double f : {0.1, 0.35, 0.62, 0.9}) {
    double L = f * total;
    double u = s.length_to_u(0.0, L);
    CHECK(std::abs(s.arc_length(0.0, u) - L) < 1e-8 * std::max(total, 1.0));
  }
}
