#include "vesselforge/bspline.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <functional>

namespace vf {

namespace {

int find_span(const std::vector<double>& knots, int n, int p, double u) {
  // index i with knots[i] <= u < knots[i+1], clamped to [p, n-1]
  if (u >= knots[n]) return n - 1;
  if (u <= knots[p]) return p;
  int lo = p, hi = n;
  while (hi - lo > 1) {
    int mid = (lo + hi) / 2;
    if (u < knots[mid])
      hi = mid;
    else
      lo = mid;
  }
  return lo;
}

// Basis functions and derivatives at u (NURBS-book style, fixed degree 3).
void ders_basis_funs(const std::vector<double>& knots, int span, double u, int p, int order,
                     double ders[3][4]) {
  double ndu[5][5];
  double left[5], right[5];
  ndu[0][0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = u - knots[span + 1 - j];
    right[j] = knots[span + j] - u;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu[j][r] = right[r + 1] + left[j - r];
      double temp = ndu[r][j - 1] / ndu[j][r];
      ndu[r][j] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    ndu[j][j] = saved;
  }
  for (int j = 0; j <= p; ++j) ders[0][j] = ndu[j][p];
  if (order == 0) return;

  double a[2][5];
  for (int r = 0; r <= p; ++r) {
    int s1 = 0, s2 = 1;
    a[0][0] = 1.0;
    for (int k = 1; k <= order; ++k) {
      double d = 0.0;
      int rk = r - k, pk = p - k;
      if (r >= k) {
        a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
        d = a[s2][0] * ndu[rk][pk];
      }
      int j1 = (rk >= -1) ? 1 : -rk;
      int j2 = (r - 1 <= pk) ? k - 1 : p - r;
      for (int j = j1; j <= j2; ++j) {
        a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][rk + j];
        d += a[s2][j] * ndu[rk + j][pk];
      }
      if (r <= pk) {
        a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
        d += a[s2][k] * ndu[r][pk];
      }
      ders[k][r] = d;
      std::swap(s1, s2);
    }
  }
  int r = p;
  for (int k = 1; k <= order; ++k) {
    for (int j = 0; j <= p; ++j) ders[k][j] *= r;
    r *= (p - k);
  }
}

}  // namespace

std::vector<double> SplineD::clamped_uniform_knots(int n, int degree) {
  if (n < degree + 1) throw std::invalid_argument("need at least degree+1 control points");
  std::vector<double> knots(n + degree + 1);
  int interior = n - degree - 1;
  for (int i = 0; i <= degree; ++i) {
    knots[i] = 0.0;
    knots[n + i] = 1.0;
  }
  for (int i = 1; i <= interior; ++i)
    knots[degree + i] = static_cast<double>(i) / (interior + 1);
  return knots;
}

SplineD::SplineD(Eigen::MatrixXd control_points) : control_(std::move(control_points)) {
  knots_ = clamped_uniform_knots(num_control());
}

void SplineD::ders_basis(double u, int order, int& span, double out[3][kDegree + 1]) const {
  if (u < 0.0 || u > 1.0) throw std::domain_error("spline parameter outside [0,1]");
  span = find_span(knots_, num_control(), kDegree, u);
  ders_basis_funs(knots_, span, u, kDegree, order, out);
}

Eigen::VectorXd SplineD::evaluate(double u, int order) const {
  if (order < 0 || order > 2) throw std::invalid_argument("derivative order must be 0, 1 or 2");
  double ders[3][kDegree + 1];
  int span;
  ders_basis(u, order, span, ders);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim());
  for (int j = 0; j <= kDegree; ++j) out += ders[order][j] * control_.row(span - kDegree + j).transpose();
  return out;
}

Vec3 SplineD::tangent(double u) const {
  Vec3 d = evaluate(u, 1).head<3>();
  double n = d.norm();
  if (n == 0.0) throw std::domain_error("vanishing first derivative");
  return d / n;
}

double SplineD::radius(double u) const {
  if (dim() < 4) throw std::logic_error("spline has no radius coordinate");
  return evaluate(u, 0)[3];
}

double SplineD::curvature(double u) const {
  Vec3 d1 = evaluate(u, 1).head<3>();
  Vec3 d2 = evaluate(u, 2).head<3>();
  double n1 = d1.norm();
  if (n1 < 1e-14) throw std::domain_error("vanishing first derivative in curvature");
  return d1.cross(d2).norm() / (n1 * n1 * n1);
}

SplineD::Projection SplineD::project_point(const Vec3& q, int samples) const {
  samples = std::max(samples, 200);
  auto dist2 = [&](double u) { return (position(u) - q).squaredNorm(); };

  double best_u = 0.0, best_d = dist2(0.0);
  for (int i = 1; i <= samples; ++i) {
    double u = static_cast<double>(i) / samples;
    double d = dist2(u);
    if (d < best_d - 1e-15) {
      best_d = d;
      best_u = u;
    }
  }
  // local refinement: Newton on g(u) = d/du dist^2, golden-section fallback
  double lo = std::max(0.0, best_u - 1.5 / samples);
  double hi = std::min(1.0, best_u + 1.5 / samples);
  double u = best_u;
  for (int it = 0; it < 60; ++it) {
    Vec3 s0 = position(u);
    Vec3 s1 = evaluate(u, 1).head<3>();
    Vec3 s2 = evaluate(u, 2).head<3>();
    Vec3 r = s0 - q;
    double g = 2.0 * r.dot(s1);
    double gp = 2.0 * (s1.squaredNorm() + r.dot(s2));
    if (std::abs(g) < 1e-12) break;
    double step = (gp > 1e-300 || gp < -1e-300) ? g / gp : 0.0;
    double un = u - step;
    if (!(un >= lo && un <= hi) || step == 0.0) break;
    u = un;
  }
  // golden-section to polish / guard against Newton divergence
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = lo, b = hi;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = dist2(c), fd = dist2(d);
  for (int it = 0; it < 80 && (b - a) > 1e-13; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = dist2(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = dist2(d);
    }
  }
  double ug = 0.5 * (a + b);
  if (dist2(ug) < dist2(u)) u = ug;
  u = std::clamp(u, 0.0, 1.0);
  return {u, std::sqrt(dist2(u))};
}

namespace {
// adaptive Simpson on f over [a,b]
double simpson(double a, double fa, double fm, double b, double fb) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double adapt(const std::function<double(double)>& f, double a, double fa, double b, double fb,
             double m, double fm, double whole, double tol, int depth) {
  double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  double flm = f(lm), frm = f(rm);
  double left = simpson(a, fa, flm, m, fm);
  double right = simpson(m, fm, frm, b, fb);
  if (depth <= 0 || std::abs(left + right - whole) < 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return adapt(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) +
         adapt(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1);
}
}  // namespace

double SplineD::arc_length(double u0, double u1) const {
  if (u0 > u1) throw std::invalid_argument("arc_length requires u0 <= u1");
  if (u0 == u1) return 0.0;
  std::function<double(double)> f = [&](double u) { return evaluate(u, 1).head<3>().norm(); };
  // split at knots so the integrand is smooth on each panel
  std::vector<double> cuts{u0};
  for (double k : knots_)
    if (k > u0 + 1e-15 && k < u1 - 1e-15) cuts.push_back(k);
  cuts.push_back(u1);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  double total = 0.0;
  for (std::size_t i = 1; i < cuts.size(); ++i) {
    double a = cuts[i - 1], b = cuts[i];
    double m = 0.5 * (a + b);
    double fa = f(a), fb = f(b), fm = f(m);
    double whole = simpson(a, fa, fm, b, fb);
    total += adapt(f, a, fa, b, fb, m, fm, whole, 1e-8 * std::max(whole, 1e-12), 40);
  }
  return total;
}

double SplineD::length_to_u(double u0, double length) const {
  if (length <= 0.0) return u0;
  double total = arc_length(u0, 1.0);
  if (length >= total) return 1.0;
  double lo = u0, hi = 1.0;
  // bisection on the monotone map u -> arc_length(u0, u)
  for (int it = 0; it < 80 && hi - lo > 1e-13; ++it) {
    double mid = 0.5 * (lo + hi);
    if (arc_length(u0, mid) < length)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> SplineD::greville() const {
  std::vector<double> g(num_control());
  for (int i = 0; i < num_control(); ++i) {
    double s = 0.0;
    for (int j = 1; j <= kDegree; ++j) s += knots_[i + j];
    g[i] = s / kDegree;
  }
  return g;
}

Eigen::VectorXd SplineD::basis_row(const std::vector<double>& knots, int n, double u) {
  if (u < 0.0 || u > 1.0) throw std::domain_error("spline parameter outside [0,1]");
  int span = find_span(knots, n, kDegree, u);
  double ders[3][4];
  ders_basis_funs(knots, span, u, kDegree, 0, ders);
  Eigen::VectorXd row = Eigen::VectorXd::Zero(n);
  for (int j = 0; j <= kDegree; ++j) row[span - kDegree + j] = ders[0][j];
  return row;
}

Eigen::MatrixXd SplineD::basis_matrix(int n, const std::vector<double>& t) {
  auto knots = clamped_uniform_knots(n);
  Eigen::MatrixXd N(t.size(), n);
  for (std::size_t k = 0; k < t.size(); ++k) N.row(k) = basis_row(knots, n, t[k]).transpose();
  return N;
}

ChordParam chord_length_parametrize(const Eigen::MatrixXd& points) {
  if (points.rows() < 2) throw std::invalid_argument("need at least 2 points");
  ChordParam out;
  out.kept_rows.push_back(0);
  std::vector<double> cum{0.0};
  for (int i = 1; i < points.rows(); ++i) {
    double d = (points.row(i).head(3) - points.row(out.kept_rows.back()).head(3)).norm();
    if (d <= 0.0) {
      out.had_duplicates = true;
      continue;
    }
    out.kept_rows.push_back(i);
    cum.push_back(cum.back() + d);
  }
  if (cum.back() <= 0.0) throw std::invalid_argument("all points coincident");
  out.t.resize(cum.size());
  for (std::size_t i = 0; i < cum.size(); ++i) out.t[i] = cum[i] / cum.back();
  out.t.front() = 0.0;
  out.t.back() = 1.0;
  return out;
}

}  // namespace vf
