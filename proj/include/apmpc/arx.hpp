#pragma once

// ARX(3,3,1) baseline in deviation variables around a per-subject operating
// point:
//
//   dy_k = -a1 dy_{k-1} - a2 dy_{k-2} - a3 dy_{k-3}
//          + bc1 dd_k + bc2 dd_{k-1} + bc3 dd_{k-2}
//          + bi1 du_{k-1} + bi2 du_{k-2} + bi3 du_{k-3}
//
// (the A(q) y = B(q) u convention). The literal reading, with +a_i, is kept
// for auditing.

#include "apmpc/dataset.hpp"
#include "apmpc/error.hpp"

#include <Eigen/Dense>

#include <complex>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace apmpc {

enum class ArxSign { kToolbox, kLiteral };

struct ArxModel {
  Eigen::Vector3d a = Eigen::Vector3d::Zero();
  Eigen::Vector3d b_cho = Eigen::Vector3d::Zero();
  Eigen::Vector3d b_ins = Eigen::Vector3d::Zero();
  ArxSign sign = ArxSign::kToolbox;
  double y_op = 0.0;  // mg/dL
  double u_op = 0.0;  // U per tick

  static constexpr int kNa = 3;
  static constexpr int kNb = 3;
  static constexpr int kNk = 1;

  // alpha with dy_k = sum alpha_i dy_{k-i} + ...
  Eigen::Vector3d autoregressive() const { return sign == ArxSign::kToolbox ? -a : a; }
  // Roots of z^3 - alpha1 z^2 - alpha2 z - alpha3.
  Eigen::Vector3cd roots() const;
  double max_root_magnitude() const;
  void validate() const;

  static ArxModel reference_preset();

  bool operator==(const ArxModel&) const = default;
};

// dy_hist = (dy_{k-1}, dy_{k-2}, dy_{k-3}), dd_hist = (dd_k, dd_{k-1}, dd_{k-2}),
// du_hist = (du_{k-1}, du_{k-2}, du_{k-3}); longer histories are truncated.
double arx_predict_1step(const ArxModel& m, const Eigen::Ref<const Eigen::VectorXd>& dy_hist,
                         const Eigen::Ref<const Eigen::VectorXd>& dd_hist,
                         const Eigen::Ref<const Eigen::VectorXd>& du_hist);

// Deviation series of one experiment.
struct ArxSeries {
  Eigen::VectorXd dy;
  Eigen::VectorXd du;
  Eigen::VectorXd dd;
};

ArxSeries deviation_series(const SampledTrace& trace, double y_op, double u_op);

struct ArxIdentification {
  ArxModel model;
  double residual_variance = 0.0;
  int samples = 0;
};

// Least squares on the 1-step prediction error (PEM for ARX). Throws IllPosed
// when the regressor matrix is rank deficient.
ArxIdentification identify_arx(const std::vector<ArxSeries>& series);

// Population fit on a dataset, each subject around its equilibrium glucose and
// basal rate. The returned operating point is the population mean; use
// at_operating_point for a given subject.
ArxIdentification identify_arx(const ScenarioDataset& ds);

ArxModel at_operating_point(ArxModel m, const PatientParams& p);

// Observer-form realization (3 states, inputs [dd, du]):
//   x_{k+1} = A x_k + B [dd_k; du_k],   dy_k = C x_k + D dd_k
struct ArxStateSpace {
  Eigen::Matrix3d a;
  Eigen::Matrix<double, 3, 2> b;  // columns: carbs, insulin
  Eigen::RowVector3d c;
  double d_cho = 0.0;
  Eigen::Vector3d kalman_gain = Eigen::Vector3d::Zero();
  Eigen::Matrix3d q_kf = Eigen::Matrix3d::Identity();
  double r_kf = 1e-6;
  int riccati_iterations = 0;
};

struct SteadyStateKalman {
  Eigen::MatrixXd gain;        // n x p, applied to the innovation
  Eigen::MatrixXd covariance;  // a-priori error covariance
  int iterations = 0;
};

// Iterates P <- A (P - P C'(C P C' + R)^-1 C P) A' + Q to a fixed point
// (max-abs change <= tol * max(1, |P|)). Throws IllPosed on non-convergence.
SteadyStateKalman steady_state_kalman(const Eigen::MatrixXd& a, const Eigen::MatrixXd& c,
                                      const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                                      double tol = 1e-12, int max_iterations = 10000);

ArxStateSpace realize_and_kalman(const ArxModel& m, const Eigen::Matrix3d& q_kf =
                                                        Eigen::Matrix3d::Identity(),
                                 double r_kf = 1e-6);

bool is_controllable(const ArxStateSpace& ss);

// Impulse response of channel `input` (0 carbs, 1 insulin) of the realization.
Eigen::VectorXd realization_impulse(const ArxStateSpace& ss, int input, int steps);

// A-priori estimate of the state at the current tick.
struct ArxFilterState {
  Eigen::Vector3d x = Eigen::Vector3d::Zero();
};

// Measurement update with the steady-state gain; returns the posterior.
Eigen::Vector3d kalman_correct(const ArxStateSpace& ss, const ArxFilterState& prior, double dy_meas,
                               double dd);
// Time update from a posterior with the inputs applied over the tick.
ArxFilterState kalman_predict(const ArxStateSpace& ss, const Eigen::Vector3d& posterior, double du,
                              double dd);

struct KalmanStepResult {
  ArxFilterState state;  // prior for the next tick
  double dy_next = 0.0;  // 1-step prediction of dy_{k+1} (no future carbs)
};

KalmanStepResult kalman_step(const ArxStateSpace& ss, const ArxFilterState& state, double dy_meas,
                             double du, double dd);

// Preset / coefficient file: "# apmpc-arx v1" then key=value lines.
void write_arx_model(std::ostream& out, const ArxModel& m);
ArxModel read_arx_model(std::istream& in);
void save_arx_model(const std::filesystem::path& path, const ArxModel& m);
ArxModel load_arx_model(const std::filesystem::path& path);

// CSV: name,value rows for coefficients, residual variance and root magnitudes.
void write_arx_report(const std::filesystem::path& path, const ArxIdentification& id);

}  // namespace apmpc
