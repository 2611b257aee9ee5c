#pragma once

// Forced-response gains g_j(x) = C_j . cgm_hist, fitted by regressing the
// part of the observed future CGM that the free response does not explain
// onto the insulin deviations of the horizon.

#include "apmpc/dataset.hpp"
#include "apmpc/io.hpp"
#include "apmpc/predictor.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <vector>

namespace apmpc {

struct GtCoefficients {
  Eigen::MatrixXd c;  // T x (3T+1)

  int horizon() const { return static_cast<int>(c.rows()); }
  int history() const { return static_cast<int>(c.cols()); }
  void validate() const;

  void to_store(TensorStore& store) const;
  static GtCoefficients from_store(const TensorStore& store);
  void save(const std::filesystem::path& path) const;
  static GtCoefficients load(const std::filesystem::path& path);
};

struct GtResidual {
  Eigen::VectorXd cgm;  // history of x_k
  Eigen::VectorXd du;   // future insulin minus basal, length T
  Eigen::VectorXd dy;   // future CGM minus F(x_k), length T
};

std::vector<GtResidual> compute_residuals(const std::vector<const Window*>& windows,
                                          const FreeResponseModel& ft);

struct GtFitReport {
  int windows_used = 0;
  double rms_before = 0.0;  // residual RMS with C = 0
  double rms_after = 0.0;
};

// Minimizes (1/m) sum_rows (dy_i - sum_{j<=i} (C_j . cgm) du_j)^2 + lambda |C|_F^2
// over the m rows of windows whose du is not identically zero. Throws IllPosed
// when no such window exists.
GtCoefficients fit_gt(const std::vector<GtResidual>& residuals, double ridge_lambda = 1e-3,
                      GtFitReport* report = nullptr);

// Gradient of the objective above at C (flattened row-major, length T*(3T+1)).
Eigen::VectorXd gt_objective_gradient(const std::vector<GtResidual>& residuals,
                                      const GtCoefficients& coeffs, double ridge_lambda);

Eigen::VectorXd eval_gains(const GtCoefficients& coeffs, const PredictorState& x);

class LinearGains final : public ForcedGainModel {
 public:
  explicit LinearGains(GtCoefficients coeffs);
  int horizon() const override { return coeffs_.horizon(); }
  Eigen::VectorXd gains(const PredictorState& x) const override;
  const GtCoefficients& coefficients() const { return coeffs_; }

 private:
  GtCoefficients coeffs_;
};

struct SignAudit {
  long evaluated = 0;
  long positive = 0;
  double fraction() const { return evaluated ? static_cast<double>(positive) / evaluated : 0.0; }
  Eigen::VectorXd positive_by_step;  // fraction per j
};

SignAudit audit_gain_signs(const GtCoefficients& coeffs, const std::vector<const Window*>& windows);

}  // namespace apmpc
