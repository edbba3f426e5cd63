#pragma once

#include "vesselforge/bspline.hpp"

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace vf {

enum class Strategy { GNP, GNP_AIC, GP_AIC, SRP_AIC };
enum class Criterion { AIC, AICc, BIC, CV, GCV };

std::string to_string(Strategy s);
std::string to_string(Criterion c);
Strategy strategy_from_string(const std::string& s);
Criterion criterion_from_string(const std::string& s);

struct FitConfig {
  Strategy strategy = Strategy::SRP_AIC;
  double rmse_threshold_spatial = 1e-1;  // mm
  double rmse_threshold_radius = 1e-3;   // mm
  Criterion criterion = Criterion::AIC;
  // log-spaced lambda grid, refined by golden section around the argmin
  double lambda_min = 1e-6;
  double lambda_max = 1e6;
  int lambda_grid_size = 40;
};

struct EndConstraint {
  Eigen::Vector4d point;              // S
  Eigen::Vector4d tangent_direction;  // T, normalized
};

struct FitResult {
  Spline4 spline;
  double lambda_spatial = 0.0;
  double lambda_radius = 0.0;
  int n_control = 0;
  double sse = 0.0;
  std::vector<std::pair<double, double>> criterion_trace;  // (lambda, criterion)
};

class fit_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Delta = D2^T D2 with D2 the (n-2) x n second-difference operator.
Eigen::MatrixXd penalty_matrix(int n);

/// Normal-equation solution of the penalized least-squares problem.
/// data: m x D, t: strictly increasing parameters in [0,1], n control points.
/// With constraints, P_0 / P_{n-1} are fixed and P_1 / P_{n-2} lie on the
/// constraint tangents with magnitudes solved jointly (clamped below at
/// 1e-6 of the chord length).
Eigen::MatrixXd solve_penalized(const Eigen::MatrixXd& data, const std::vector<double>& t, int n,
                                double lambda,
                                const std::optional<std::pair<EndConstraint, EndConstraint>>&
                                    constraints = std::nullopt);

struct CriterionValue {
  double value;
  bool zero_sse = false;  // SSE == 0, value is a -inf sentinel
};
CriterionValue criterion_value(Criterion kind, const Eigen::MatrixXd& data,
                               const std::vector<double>& t, int n, double lambda);

/// Spectral cache for fast lambda sweeps: one eigendecomposition per (t, n),
/// then tr(H), SSE, and all criteria are O(n) per lambda.
class LambdaSweep {
public:
  LambdaSweep(const Eigen::MatrixXd& data, const std::vector<double>& t, int n);
  double trace_h(double lambda) const;
  double sse(double lambda) const;
  bool sse_is_zero(double s) const;
  double criterion(Criterion kind, double lambda) const;
  int m() const { return m_; }

private:
  int m_ = 0, n_ = 0;
  Eigen::VectorXd sigma_;   // generalized eigenvalues of Delta in the NtN metric
  Eigen::MatrixXd w_;       // n x D transformed data
  Eigen::MatrixXd g_;       // m x n, rows of N in the eigenbasis (for CV)
  Eigen::MatrixXd data_;
  double data_sq_ = 0.0;
};

/// Fit one vessel with the configured strategy. 4-coordinate input points.
FitResult fit_vessel(const Eigen::MatrixXd& points, const FitConfig& config,
                     const std::optional<std::pair<EndConstraint, EndConstraint>>& constraints =
                         std::nullopt);

}  // namespace vf
