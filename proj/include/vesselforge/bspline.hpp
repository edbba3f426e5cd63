#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <vector>

namespace vf {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;

/// Clamped B-spline over [0,1] with uniform interior knots and control
/// points of arbitrary coordinate dimension. Degree is cubic throughout.
/// The first three coordinates are spatial (mm); geometric queries
/// (curvature, projection, arc length) ignore any further coordinates.
class SplineD {
public:
  static constexpr int kDegree = 3;

  SplineD() = default;
  /// Control points as an n x D matrix; knots generated clamped-uniform.
  explicit SplineD(Eigen::MatrixXd control_points);

  int dim() const { return static_cast<int>(control_.cols()); }
  int num_control() const { return static_cast<int>(control_.rows()); }
  const Eigen::MatrixXd& control_points() const { return control_; }
  const std::vector<double>& knots() const { return knots_; }

  /// order 0: position, 1: first derivative, 2: second derivative.
  Eigen::VectorXd evaluate(double u, int order = 0) const;
  Vec3 position(double u) const { return evaluate(u, 0).head<3>(); }
  Vec3 tangent(double u) const;  // normalized spatial first derivative
  double radius(double u) const;

  /// kappa = |s' x s''| / |s'|^3 on the spatial coordinates.
  double curvature(double u) const;

  /// Closest point on the spatial curve; dense sampling plus local
  /// refinement; tie broken toward smaller u.
  struct Projection {
    double u;
    double distance;
  };
  Projection project_point(const Vec3& q, int samples = 200) const;

  /// Spatial arc length of [u0,u1] by adaptive quadrature (rel tol 1e-8).
  double arc_length(double u0 = 0.0, double u1 = 1.0) const;
  /// Smallest u >= u0 with arc_length(u0,u) = length; clamps at 1.
  double length_to_u(double u0, double length) const;

  /// Greville abscissae, one per control point.
  std::vector<double> greville() const;

  static std::vector<double> clamped_uniform_knots(int n, int degree = kDegree);

  /// Basis function values N_{i,p}(u), i = 0..n-1 (dense row).
  static Eigen::VectorXd basis_row(const std::vector<double>& knots, int n, double u);
  /// m x n collocation matrix at parameters t.
  static Eigen::MatrixXd basis_matrix(int n, const std::vector<double>& t);

private:
  void ders_basis(double u, int order, int& span, double out[3][kDegree + 1]) const;

  Eigen::MatrixXd control_;  // n x D
  std::vector<double> knots_;
};

/// Vessel model: (x, y, z, r) spline.
class Spline4 : public SplineD {
public:
  Spline4() = default;
  explicit Spline4(Eigen::MatrixXd control_points) : SplineD(std::move(control_points)) {
    if (dim() != 4) throw std::invalid_argument("Spline4 requires 4 coordinates");
  }
  Vec4 point4(double u) const {
    Eigen::VectorXd v = evaluate(u, 0);
    return Vec4(v[0], v[1], v[2], v[3]);
  }
};

/// Chord-length parametrization on the first three coordinates.
/// Consecutive duplicates are collapsed; returns the parameters and the
/// surviving row indices.
struct ChordParam {
  std::vector<double> t;
  std::vector<int> kept_rows;
  bool had_duplicates = false;
};
ChordParam chord_length_parametrize(const Eigen::MatrixXd& points);

}  // namespace vf
