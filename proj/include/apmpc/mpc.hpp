#pragma once

// Receding-horizon controllers. Both build
//
//   min_dU  (F + G dU - Ybar)' Q (F + G dU - Ybar) + dU' R dU
//   s.t.    u_min - ubar <= dU <= u_max - ubar
//           y_min <= F + G dU <= y_max        (softened)
//
// and apply ubar + dU*_0.

#include "apmpc/arx.hpp"
#include "apmpc/predictor.hpp"

#include <Eigen/Dense>

#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace apmpc {

struct MpcConfig {
  int horizon = 8;
  double ts = 15.0;  // min
  double q = 1.0;
  double r = 10.0;
  double u_min = 0.0;
  double u_max = 25.0;
  double y_min = 0.0;
  double y_max = 500.0;
  double slack_factor = 1e4;  // slack weight = slack_factor * q

  static MpcConfig multistep() { return {}; }
  static MpcConfig arx() {
    MpcConfig c;
    c.r = 1.5;
    return c;
  }
  double slack_weight() const { return slack_factor * q; }
  void validate() const;
};

struct SetpointSchedule {
  double day_target = 110.0;
  double night_target = 125.0;
  double day_start = 5.0 * 60.0;  // inclusive
  double day_end = 22.0 * 60.0;   // exclusive

  double at(double clock_min) const;
};

// Target for the k+1..k+T outputs; entry i uses the schedule at clock + i*Ts.
Eigen::VectorXd build_setpoint(double clock_min, int horizon, const SetpointSchedule& s = {},
                               double ts = 15.0);

// min 0.5 z'Hz + f'z  s.t.  lower <= z <= upper,
//                           soft_lower <= S z + s0 <= soft_upper   (softened)
struct QpProblem {
  Eigen::MatrixXd h;
  Eigen::VectorXd f;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Eigen::MatrixXd soft_rows;  // m x n, may be empty
  Eigen::VectorXd soft_offset;
  Eigen::VectorXd soft_lower;
  Eigen::VectorXd soft_upper;
  double slack_weight = 0.0;

  int size() const { return static_cast<int>(f.size()); }
  int soft_count() const { return static_cast<int>(soft_rows.rows()); }
  void validate() const;
  // Objective in the original variables, slack penalty included.
  double objective(const Eigen::VectorXd& z) const;
};

struct QpSolution {
  Eigen::VectorXd z;             // decision vector (without slacks)
  Eigen::VectorXd slack_lower;   // per soft row
  Eigen::VectorXd slack_upper;
  double objective = 0.0;        // 0.5 z'Hz + f'z + 0.5 w |s|^2
  int iterations = 0;
  double stationarity = 0.0;     // |grad L|_inf
  double feasibility = 0.0;      // max constraint violation
  double complementarity = 0.0;  // max |lambda_i * slack_i|
  double dual_infeasibility = 0.0;  // max(-lambda_i, 0)
  double slack_norm() const;
};

// Primal active-set method. The soft rows become
//   S z + s0 + s_lo >= soft_lower,  S z + s0 - s_hi <= soft_upper,  s >= 0
// with 0.5 * slack_weight * |s|^2 added to the cost.
QpSolution solve_qp(const QpProblem& p, int max_iterations = 500, double tolerance = 1e-8);

QpProblem build_qp(const Eigen::VectorXd& free, const Eigen::MatrixXd& forced,
                   const Eigen::VectorXd& ybar, double ubar, const MpcConfig& cfg);

QpProblem build_qp_affine(const AffinePredictor& pred, const PredictorState& x,
                          const Eigen::VectorXd& ybar, double ubar, const MpcConfig& cfg,
                          int* clamped_gains = nullptr);

// Prediction of dy_{k+1..k+T} from a posterior state: free part and input map.
struct ArxPrediction {
  Eigen::VectorXd free;
  Eigen::MatrixXd forced;
};

ArxPrediction arx_prediction(const ArxStateSpace& ss, const Eigen::Vector3d& posterior,
                             double announced_carbs, int horizon);

// ybar in mg/dL; the model's operating point converts to deviations.
QpProblem build_qp_arx(const ArxStateSpace& ss, const ArxModel& m, const Eigen::Vector3d& posterior,
                       const Eigen::VectorXd& ybar, double announced_carbs, const MpcConfig& cfg);

struct ControllerStep {
  double t_min = 0.0;
  double cgm = 0.0;
  double setpoint = 0.0;
  double command = 0.0;
  double objective = 0.0;
  int iterations = 0;
  double slack_norm = 0.0;
  bool fallback = false;
  bool warmup = false;
  int clamped_gains = 0;
  std::string incident;
};

class Controller {
 public:
  virtual ~Controller() = default;
  // One tick: consumes the CGM reading and carbs announced now, returns the
  // pump command for the coming 15 min.
  virtual ControllerStep step(double cgm, double announced_carbs, double clock_min) = 0;
  virtual std::string name() const = 0;
};

class MultiStepController final : public Controller {
 public:
  MultiStepController(AffinePredictor pred, double basal, MpcConfig cfg = MpcConfig::multistep(),
                      SetpointSchedule schedule = {});
  ControllerStep step(double cgm, double announced_carbs, double clock_min) override;
  std::string name() const override { return "multistep"; }

 private:
  AffinePredictor pred_;
  double basal_;
  MpcConfig cfg_;
  SetpointSchedule schedule_;
  std::deque<double> cgm_;      // newest first
  std::deque<double> insulin_;  // newest first, commands already delivered
  std::deque<double> carbs_;
};

class ArxController final : public Controller {
 public:
  // `warmup_ticks` of basal mirror the multi-step warm-up.
  ArxController(ArxModel model, ArxStateSpace ss, double basal, MpcConfig cfg = MpcConfig::arx(),
                SetpointSchedule schedule = {}, int warmup_ticks = 0);
  ControllerStep step(double cgm, double announced_carbs, double clock_min) override;
  std::string name() const override { return "arx"; }

 private:
  ArxModel model_;
  ArxStateSpace ss_;
  double basal_;
  MpcConfig cfg_;
  SetpointSchedule schedule_;
  int warmup_ticks_;
  int tick_ = 0;
  ArxFilterState state_;
};

// Applies the command bounds and the pump grid.
double finalize_command(double units, const MpcConfig& cfg);

void write_controller_log(const std::filesystem::path& path, const std::vector<ControllerStep>& log);

}  // namespace apmpc
