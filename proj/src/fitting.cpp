#include "vesselforge/fitting.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace vf {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::GNP: return "GNP";
    case Strategy::GNP_AIC: return "GNP-AIC";
    case Strategy::GP_AIC: return "GP-AIC";
    case Strategy::SRP_AIC: return "SRP-AIC";
  }
  return "?";
}

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::AIC: return "AIC";
    case Criterion::AICc: return "AICc";
    case Criterion::BIC: return "BIC";
    case Criterion::CV: return "CV";
    case Criterion::GCV: return "GCV";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "GNP") return Strategy::GNP;
  if (s == "GNP-AIC" || s == "GNP_AIC") return Strategy::GNP_AIC;
  if (s == "GP-AIC" || s == "GP_AIC") return Strategy::GP_AIC;
  if (s == "SRP-AIC" || s == "SRP_AIC") return Strategy::SRP_AIC;
  throw fit_error("unknown strategy: " + s);
}

Criterion criterion_from_string(const std::string& s) {
  if (s == "AIC") return Criterion::AIC;
  if (s == "AICc") return Criterion::AICc;
  if (s == "BIC") return Criterion::BIC;
  if (s == "CV") return Criterion::CV;
  if (s == "GCV") return Criterion::GCV;
  throw fit_error("unknown criterion: " + s);
}

Eigen::MatrixXd penalty_matrix(int n) {
  if (n < 3) throw fit_error("penalty matrix requires n >= 3");
  Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(n - 2, n);
  for (int i = 0; i < n - 2; ++i) {
    d2(i, i) = 1.0;
    d2(i, i + 1) = -2.0;
    d2(i, i + 2) = 1.0;
  }
  return d2.transpose() * d2;
}

namespace {

Eigen::MatrixXd solve_unconstrained(const Eigen::MatrixXd& data, const std::vector<double>& t,
                                    int n, double lambda) {
  const int m = static_cast<int>(t.size());
  if (m < n && lambda == 0.0) throw fit_error("underdetermined system (m < n with lambda = 0)");
  Eigen::MatrixXd N = SplineD::basis_matrix(n, t);
  if (m == n && lambda == 0.0) {
    // square collocation: direct solve is better conditioned than the
    // normal equations
    Eigen::MatrixXd P = N.partialPivLu().solve(data);
    if (!P.allFinite()) throw fit_error("singular collocation system");
    return P;
  }
  Eigen::MatrixXd A = N.transpose() * N;
  if (lambda > 0.0 && n >= 3) A += lambda * penalty_matrix(n);
  Eigen::MatrixXd P = A.ldlt().solve(N.transpose() * data);
  if (!P.allFinite()) throw fit_error("singular penalized system");
  return P;
}

}  // namespace

Eigen::MatrixXd solve_penalized(
    const Eigen::MatrixXd& data, const std::vector<double>& t, int n, double lambda,
    const std::optional<std::pair<EndConstraint, EndConstraint>>& constraints) {
  if (static_cast<int>(t.size()) != data.rows()) throw fit_error("data/parameter size mismatch");
  if (!constraints) return solve_unconstrained(data, t, n, lambda);

  const int dim = static_cast<int>(data.cols());
  if (n < 4) throw fit_error("constrained fit requires n >= 4");
  Eigen::VectorXd s0 = constraints->first.point.head(dim);
  Eigen::VectorXd s1 = constraints->second.point.head(dim);
  Eigen::VectorXd t0 = constraints->first.tangent_direction.head(dim);
  Eigen::VectorXd t1 = constraints->second.tangent_direction.head(dim);
  if (t0.norm() < 1e-14 || t1.norm() < 1e-14) throw fit_error("zero-length constraint tangent");
  t0.normalize();
  t1.normalize();

  const double chord = (s1.head(std::min(dim, 3)) - s0.head(std::min(dim, 3))).norm();
  const double eps = 1e-6 * std::max(chord, 1e-12);

  Eigen::MatrixXd N = SplineD::basis_matrix(n, t);
  Eigen::MatrixXd A = N.transpose() * N + lambda * penalty_matrix(n);
  Eigen::MatrixXd B = N.transpose() * data;  // n x dim

  const int ni = std::max(0, n - 4);  // interior rows 2..n-3

  // Solve with alpha/beta free, then re-solve with either clamped at eps.
  auto assemble_solve = [&](bool fix_a, double a_fix, bool fix_b,
                            double b_fix) -> std::tuple<Eigen::MatrixXd, double, double> {
    int extra = (fix_a ? 0 : 1) + (fix_b ? 0 : 1);
    int nu = ni * dim + extra;
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(nu, nu);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nu);
    int ia = fix_a ? -1 : ni * dim;
    int ib = fix_b ? -1 : ni * dim + (fix_a ? 0 : 1);

    // constant part of P per dim: rows 0,1 from s0 (+ alpha t0 if fixed),
    // rows n-2, n-1 from s1 (- beta t1 if fixed)
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(n, dim);
    C.row(0) = s0.transpose();
    C.row(1) = s0.transpose();
    C.row(n - 2) = s1.transpose();
    C.row(n - 1) = s1.transpose();
    if (fix_a) C.row(1) += a_fix * t0.transpose();
    if (fix_b) C.row(n - 2) -= b_fix * t1.transpose();

    Eigen::MatrixXd R = B - A * C;  // n x dim

    for (int d = 0; d < dim; ++d) {
      for (int i = 0; i < ni; ++i) {
        int gi = d * ni + i;
        for (int j = 0; j < ni; ++j) M(gi, d * ni + j) = A(2 + i, 2 + j);
        if (!fix_a) {
          M(gi, ia) = A(2 + i, 1) * t0[d];
          M(ia, gi) = M(gi, ia);
        }
        if (!fix_b) {
          M(gi, ib) = -A(2 + i, n - 2) * t1[d];
          M(ib, gi) = M(gi, ib);
        }
        rhs[gi] = R(2 + i, d);
      }
      if (!fix_a) {
        M(ia, ia) += t0[d] * t0[d] * A(1, 1);
        rhs[ia] += t0[d] * R(1, d);
      }
      if (!fix_b) {
        M(ib, ib) += t1[d] * t1[d] * A(n - 2, n - 2);
        rhs[ib] += t1[d] * R(n - 2, d);
      }
      if (!fix_a && !fix_b) {
        double cross = -t0[d] * t1[d] * A(1, n - 2);
        M(ia, ib) += cross;
        M(ib, ia) += cross;
      }
    }
    Eigen::VectorXd q = M.ldlt().solve(rhs);
    if (!q.allFinite()) throw fit_error("singular constrained system");
    double alpha = fix_a ? a_fix : q[ia];
    double beta = fix_b ? b_fix : q[ib];
    Eigen::MatrixXd P = C;
    P.row(1) = s0.transpose() + alpha * t0.transpose();
    P.row(n - 2) = s1.transpose() - beta * t1.transpose();
    for (int d = 0; d < dim; ++d)
      for (int i = 0; i < ni; ++i) P(2 + i, d) = q[d * ni + i];
    return {P, alpha, beta};
  };

  auto [P, alpha, beta] = assemble_solve(false, 0.0, false, 0.0);
  bool clamp_a = alpha < eps, clamp_b = beta < eps;
  if (clamp_a || clamp_b)
    std::tie(P, alpha, beta) = assemble_solve(clamp_a, eps, clamp_b, eps);
  return P;
}

LambdaSweep::LambdaSweep(const Eigen::MatrixXd& data, const std::vector<double>& t, int n)
    : m_(static_cast<int>(t.size())), n_(n), data_(data) {
  if (m_ < n_) throw fit_error("lambda sweep requires m >= n");
  Eigen::MatrixXd N = SplineD::basis_matrix(n, t);
  Eigen::MatrixXd ntn = N.transpose() * N;
  Eigen::LLT<Eigen::MatrixXd> llt(ntn);
  if (llt.info() != Eigen::Success) throw fit_error("rank-deficient basis matrix");
  Eigen::MatrixXd rinv =
      llt.matrixU().solve(Eigen::MatrixXd::Identity(n, n));  // R^{-1}, ntn = R^T R
  Eigen::MatrixXd mmat = rinv.transpose() * penalty_matrix(n) * rinv;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(mmat);
  if (eig.info() != Eigen::Success) throw fit_error("eigendecomposition failed");
  sigma_ = eig.eigenvalues().cwiseMax(0.0);
  Eigen::MatrixXd u = eig.eigenvectors();
  g_ = N * rinv * u;                     // m x n
  w_ = g_.transpose() * data;            // n x dim
  data_sq_ = data.squaredNorm();
}

double LambdaSweep::trace_h(double lambda) const {
  double tr = 0.0;
  for (int i = 0; i < n_; ++i) tr += 1.0 / (1.0 + lambda * sigma_[i]);
  return tr;
}

double LambdaSweep::sse(double lambda) const {
  double s = data_sq_;
  for (int i = 0; i < n_; ++i) {
    double f = 1.0 / (1.0 + lambda * sigma_[i]);
    double w2 = w_.row(i).squaredNorm();
    s += w2 * (f * f - 2.0 * f);
  }
  return std::max(s, 0.0);
}

bool LambdaSweep::sse_is_zero(double s) const {
  return s <= 1e-10 * std::max(1.0, data_sq_);
}

double LambdaSweep::criterion(Criterion kind, double lambda) const {
  const double tr = trace_h(lambda);
  const double s = sse(lambda);
  const double m = static_cast<double>(m_);
  if (sse_is_zero(s) && kind != Criterion::CV && kind != Criterion::GCV)
    return -std::numeric_limits<double>::infinity();
  switch (kind) {
    case Criterion::AIC:
      return m * std::log(s / m) + 2.0 * tr;
    case Criterion::AICc: {
      double denom = m - tr - 1.0;
      double corr = denom > 1e-9 ? 2.0 * tr * (tr + 1.0) / denom : 1e18;
      return m * std::log(s / m) + 2.0 * tr + corr;
    }
    case Criterion::BIC:
      return m * std::log(s / m) + std::log(m) * tr;
    case Criterion::GCV: {
      double denom = 1.0 - tr / m;
      return denom > 1e-12 ? (s / m) / (denom * denom) : 1e18;
    }
    case Criterion::CV: {
      // leave-one-out via the hat-matrix identity
      Eigen::VectorXd f(n_);
      for (int i = 0; i < n_; ++i) f[i] = 1.0 / (1.0 + lambda * sigma_[i]);
      double cv = 0.0;
      for (int k = 0; k < m_; ++k) {
        double hkk = 0.0;
        for (int i = 0; i < n_; ++i) hkk += g_(k, i) * g_(k, i) * f[i];
        double denom = std::max(1.0 - hkk, 1e-12);
        for (int d = 0; d < data_.cols(); ++d) {
          double fit = 0.0;
          for (int i = 0; i < n_; ++i) fit += g_(k, i) * f[i] * w_(i, d);
          double r = data_(k, d) - fit;
          cv += (r / denom) * (r / denom);
        }
      }
      return cv / m;
    }
  }
  return 0.0;
}

CriterionValue criterion_value(Criterion kind, const Eigen::MatrixXd& data,
                               const std::vector<double>& t, int n, double lambda) {
  LambdaSweep sweep(data, t, n);
  double s = sweep.sse(lambda);
  if (sweep.sse_is_zero(s)) return {-std::numeric_limits<double>::infinity(), true};
  return {sweep.criterion(kind, lambda), false};
}

namespace {

double rmse(const Eigen::MatrixXd& resid) {
  return std::sqrt(resid.squaredNorm() / resid.rows());
}

// Candidate control-point counts, geometric ladder from 4 to m.
std::vector<int> n_candidates(int m) {
  std::vector<int> out;
  int n = 4;
  while (n < m) {
    out.push_back(n);
    n = std::max(n + 1, static_cast<int>(std::lround(n * 1.2)));
  }
  out.push_back(m);
  return out;
}

struct NSelect {
  int n;
  Eigen::MatrixXd P;
};

// Smallest candidate n whose non-penalized fit meets the RMSE thresholds.
// check(resid) returns true when the residual passes.
template <typename Check>
NSelect select_n_by_rmse(const Eigen::MatrixXd& data, const std::vector<double>& t, Check check) {
  const int m = static_cast<int>(t.size());
  Eigen::MatrixXd N_best;
  double best_r = std::numeric_limits<double>::infinity();
  NSelect best{-1, {}};
  for (int n : n_candidates(m)) {
    Eigen::MatrixXd P;
    try {
      P = solve_unconstrained(data, t, n, 0.0);
    } catch (const fit_error&) {
      continue;
    }
    Eigen::MatrixXd N = SplineD::basis_matrix(n, t);
    Eigen::MatrixXd resid = N * P - data;
    if (check(resid)) return {n, P};
    double r = rmse(resid);
    if (r < best_r) {
      best_r = r;
      best = {n, P};
    }
  }
  if (best.n < 0) throw fit_error("no solvable control-point count");
  return best;  // thresholds unreachable: closest fit
}

// The spectral sweep needs a numerically positive-definite basis Gram
// matrix; near n == m it can lose rank. Step n down the candidate ladder
// until construction succeeds, updating n in place.
LambdaSweep sweep_with_fallback(const Eigen::MatrixXd& data, const std::vector<double>& t,
                                int& n) {
  std::vector<int> tries;
  for (int c : n_candidates(static_cast<int>(t.size())))
    if (c <= n) tries.push_back(c);
  if (tries.empty() || tries.back() != n) tries.push_back(n);
  for (auto it = tries.rbegin(); it != tries.rend(); ++it) {
    try {
      LambdaSweep s(data, t, *it);
      n = *it;
      return s;
    } catch (const fit_error&) {
    }
  }
  throw fit_error("no usable control-point count for lambda sweep");
}

// Grid search + golden-section refinement on log(lambda).
double select_lambda(const LambdaSweep& sweep, const FitConfig& cfg,
                     std::vector<std::pair<double, double>>* trace) {
  const double l0 = std::log(cfg.lambda_min), l1 = std::log(cfg.lambda_max);
  const int g = std::max(cfg.lambda_grid_size, 3);
  int best = 0;
  double best_v = std::numeric_limits<double>::infinity();
  std::vector<double> logs(g);
  for (int i = 0; i < g; ++i) {
    logs[i] = l0 + (l1 - l0) * i / (g - 1);
    double v = sweep.criterion(cfg.criterion, std::exp(logs[i]));
    if (trace) trace->emplace_back(std::exp(logs[i]), v);
    if (v < best_v) {
      best_v = v;
      best = i;
    }
  }
  double a = logs[std::max(0, best - 1)], b = logs[std::min(g - 1, best + 1)];
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = sweep.criterion(cfg.criterion, std::exp(c));
  double fd = sweep.criterion(cfg.criterion, std::exp(d));
  for (int it = 0; it < 60 && b - a > 1e-10; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = sweep.criterion(cfg.criterion, std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = sweep.criterion(cfg.criterion, std::exp(d));
    }
  }
  double lam = std::exp(0.5 * (a + b));
  double v = sweep.criterion(cfg.criterion, lam);
  if (trace) trace->emplace_back(lam, v);
  return v < best_v ? lam : std::exp(logs[best]);
}

double total_sse(const Eigen::MatrixXd& data, const std::vector<double>& t,
                 const Eigen::MatrixXd& P) {
  Eigen::MatrixXd N = SplineD::basis_matrix(static_cast<int>(P.rows()), t);
  return (N * P - data).squaredNorm();
}

// Monotone inversion of the first coordinate of a (t,r) spline.
double invert_abscissa(const SplineD& s, double target) {
  double lo = 0.0, hi = 1.0;
  if (target <= s.evaluate(0.0)[0]) return 0.0;
  if (target >= s.evaluate(1.0)[0]) return 1.0;
  for (int it = 0; it < 80 && hi - lo > 1e-14; ++it) {
    double mid = 0.5 * (lo + hi);
    if (s.evaluate(mid)[0] < target)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

FitResult fit_vessel(const Eigen::MatrixXd& points, const FitConfig& config,
                     const std::optional<std::pair<EndConstraint, EndConstraint>>& constraints) {
  if (points.cols() != 4) throw fit_error("fit_vessel expects 4-coordinate points");
  ChordParam cp = chord_length_parametrize(points);
  const int m = static_cast<int>(cp.kept_rows.size());
  if (m < 4) throw fit_error("too few points after duplicate collapse");
  Eigen::MatrixXd data(m, 4);
  for (int i = 0; i < m; ++i) data.row(i) = points.row(cp.kept_rows[i]);
  const std::vector<double>& t = cp.t;

  auto pass_global = [&](const Eigen::MatrixXd& resid) {
    return rmse(resid.leftCols(3)) < config.rmse_threshold_spatial &&
           rmse(resid.col(3)) < config.rmse_threshold_radius;
  };

  FitResult result;

  auto solve_with_constraints = [&](const Eigen::MatrixXd& d, int n,
                                    double lambda) -> Eigen::MatrixXd {
    if (!constraints) return solve_penalized(d, t, n, lambda);
    // D-dim slice of the 4D constraints
    EndConstraint c0 = constraints->first, c1 = constraints->second;
    if (d.cols() == 3) {
      c0.point[3] = c1.point[3] = 0.0;
      c0.tangent_direction[3] = c1.tangent_direction[3] = 0.0;
    }
    return solve_penalized(d, t, n, lambda, std::make_pair(c0, c1));
  };

  switch (config.strategy) {
    case Strategy::GNP: {
      NSelect sel = select_n_by_rmse(data, t, pass_global);
      Eigen::MatrixXd P =
          constraints ? solve_with_constraints(data, std::max(sel.n, 4), 0.0) : sel.P;
      result.spline = Spline4(P);
      result.n_control = static_cast<int>(P.rows());
      result.sse = total_sse(data, t, P);
      break;
    }
    case Strategy::GNP_AIC: {
      // n minimizing AIC1 = m log(SSE) + 8 (n + p)
      double best_v = std::numeric_limits<double>::infinity();
      int best_n = -1;
      Eigen::MatrixXd best_p;
      for (int n : n_candidates(m)) {
        Eigen::MatrixXd P;
        try {
          P = solve_unconstrained(data, t, n, 0.0);
        } catch (const fit_error&) {
          continue;
        }
        double sse = total_sse(data, t, P);
        double v = sse <= 0.0 ? -std::numeric_limits<double>::infinity()
                              : m * std::log(sse) + 8.0 * (n + SplineD::kDegree);
        if (v < best_v) {
          best_v = v;
          best_n = n;
          best_p = P;
        }
      }
      if (best_n < 0) throw fit_error("GNP-AIC: no solvable control-point count");
      Eigen::MatrixXd P = constraints ? solve_with_constraints(data, best_n, 0.0) : best_p;
      result.spline = Spline4(P);
      result.n_control = best_n;
      result.sse = total_sse(data, t, P);
      break;
    }
    case Strategy::GP_AIC: {
      NSelect sel = select_n_by_rmse(data, t, pass_global);
      int n = sel.n;
      LambdaSweep sweep = sweep_with_fallback(data, t, n);
      double lam = select_lambda(sweep, config, &result.criterion_trace);
      Eigen::MatrixXd P =
          constraints ? solve_with_constraints(data, n, lam) : solve_penalized(data, t, n, lam);
      result.spline = Spline4(P);
      result.n_control = n;
      result.lambda_spatial = lam;
      result.lambda_radius = lam;
      result.sse = total_sse(data, t, P);
      break;
    }
    case Strategy::SRP_AIC: {
      // step 1: spatial coordinates
      Eigen::MatrixXd spatial = data.leftCols(3);
      NSelect sel_s = select_n_by_rmse(spatial, t, [&](const Eigen::MatrixXd& r) {
        return rmse(r) < config.rmse_threshold_spatial;
      });
      int n_s = sel_s.n;
      LambdaSweep sweep_s = sweep_with_fallback(spatial, t, n_s);
      double lam_s = select_lambda(sweep_s, config, &result.criterion_trace);
      Eigen::MatrixXd Ps = constraints ? solve_with_constraints(spatial, n_s, lam_s)
                                       : solve_penalized(spatial, t, n_s, lam_s);

      // step 2: (t, r) pairs
      Eigen::MatrixXd tr(m, 2);
      for (int i = 0; i < m; ++i) {
        tr(i, 0) = t[i];
        tr(i, 1) = data(i, 3);
      }
      NSelect sel_r = select_n_by_rmse(tr, t, [&](const Eigen::MatrixXd& r) {
        return rmse(r.col(1)) < config.rmse_threshold_radius;
      });
      int n_r = sel_r.n;
      LambdaSweep sweep_r = sweep_with_fallback(tr, t, n_r);
      FitConfig rcfg = config;
      double lam_r = select_lambda(sweep_r, rcfg, nullptr);
      Eigen::MatrixXd Pr;
      if (constraints) {
        // endpoint radius fixed; slope dr/dt from the 4D tangent
        double chord = 0.0;
        for (int i = 1; i < m; ++i)
          chord += (data.row(i).head(3) - data.row(i - 1).head(3)).norm();
        auto slope = [&](const EndConstraint& c) {
          double sp = c.tangent_direction.head<3>().norm();
          return sp > 1e-12 ? c.tangent_direction[3] / sp * chord : 0.0;
        };
        EndConstraint r0, r1;
        r0.point = Eigen::Vector4d(0.0, constraints->first.point[3], 0, 0);
        r1.point = Eigen::Vector4d(1.0, constraints->second.point[3], 0, 0);
        r0.tangent_direction = Eigen::Vector4d(1.0, slope(constraints->first), 0, 0).normalized();
        r1.tangent_direction = Eigen::Vector4d(1.0, slope(constraints->second), 0, 0).normalized();
        Pr = solve_penalized(tr, t, n_r, lam_r, std::make_pair(r0, r1));
      } else {
        Pr = solve_penalized(tr, t, n_r, lam_r);
      }
      SplineD rspline(Pr);

      // concatenate: resample the radius spline at the spatial Greville abscissae
      Eigen::MatrixXd P(n_s, 4);
      P.leftCols(3) = Ps;
      SplineD spatial_spline(Ps);
      auto grev = spatial_spline.greville();
      for (int i = 0; i < n_s; ++i)
        P(i, 3) = rspline.evaluate(invert_abscissa(rspline, grev[i]))[1];

      result.spline = Spline4(P);
      result.n_control = n_s;
      result.lambda_spatial = lam_s;
      result.lambda_radius = lam_r;
      result.sse = total_sse(data, t, P);
      break;
    }
  }
  return result;
}

}  // namespace vf
