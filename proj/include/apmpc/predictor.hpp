#pragma once

// Multi-step predictor affine in the future inputs:
//
//   Y_hat = F(x_k) + G(x_k) (U - U_bar)
//
// with F stacked from one free-response function per step and G lower
// triangular, column j holding g_j(x_k) from row j down.

#include "apmpc/error.hpp"

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace apmpc {

// Regressor x_k. All three histories are newest first:
//   cgm[m]     = y_{k-m}      m = 0..3T
//   insulin[m] = u_{k-1-m}
//   carbs[m]   = d_{k-m}
struct PredictorState {
  Eigen::VectorXd cgm;
  Eigen::VectorXd insulin;
  Eigen::VectorXd carbs;

  static int history_length(int horizon) { return 3 * horizon + 1; }
  int horizon() const { return static_cast<int>((cgm.size() - 1) / 3); }
  Eigen::Index size() const { return cgm.size() + insulin.size() + carbs.size(); }

  // Throws DimensionMismatch / std::invalid_argument on violated invariants.
  void validate(int horizon) const;
};

struct ControlSequence {
  Eigen::VectorXd u;          // U per tick, k .. k+T-1
  Eigen::VectorXd reference;  // nominal input (basal), same length

  static ControlSequence basal(int horizon, double basal_rate);
  Eigen::VectorXd deviation() const { return u - reference; }
};

class FreeResponseModel {
 public:
  virtual ~FreeResponseModel() = default;
  virtual int horizon() const = 0;
  // F(x): predicted outputs for k+1..k+T under nominal inputs, mg/dL.
  virtual Eigen::VectorXd evaluate(const PredictorState& x) const = 0;
  // One column per state. Implementations may batch the work.
  virtual Eigen::MatrixXd evaluate_batch(const std::vector<const PredictorState*>& xs) const;
};

class ForcedGainModel {
 public:
  virtual ~ForcedGainModel() = default;
  virtual int horizon() const = 0;
  // g_1..g_T, mg/dL per U.
  virtual Eigen::VectorXd gains(const PredictorState& x) const = 0;
};

// Adapters for closures; handy for tests and analytical predictors.
class FunctionFreeResponse final : public FreeResponseModel {
 public:
  using Fn = std::function<Eigen::VectorXd(const PredictorState&)>;
  FunctionFreeResponse(int horizon, Fn fn) : horizon_(horizon), fn_(std::move(fn)) {}
  int horizon() const override { return horizon_; }
  Eigen::VectorXd evaluate(const PredictorState& x) const override { return fn_(x); }

 private:
  int horizon_;
  Fn fn_;
};

class FunctionForcedGains final : public ForcedGainModel {
 public:
  using Fn = std::function<Eigen::VectorXd(const PredictorState&)>;
  FunctionForcedGains(int horizon, Fn fn) : horizon_(horizon), fn_(std::move(fn)) {}
  int horizon() const override { return horizon_; }
  Eigen::VectorXd gains(const PredictorState& x) const override { return fn_(x); }

 private:
  int horizon_;
  Fn fn_;
};

struct AffinePredictor {
  std::shared_ptr<const FreeResponseModel> free_response;
  std::shared_ptr<const ForcedGainModel> forced_gains;

  int horizon() const;
};

// Lower-triangular matrix with entry (i, j) = gains[j] for j <= i.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> assemble_gt_matrix(
    const Eigen::MatrixBase<Derived>& gains) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = gains.size();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> g =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) g.col(j).tail(n - j).setConstant(gains(j));
  return g;
}

// One evaluation of both parts at x_k.
struct AffineTerms {
  Eigen::VectorXd free;   // F(x)
  Eigen::VectorXd gains;  // g_1..g_T
  Eigen::MatrixXd forced; // G(x)
};

AffineTerms evaluate_terms(const AffinePredictor& pred, const PredictorState& x);

Eigen::VectorXd predict(const AffinePredictor& pred, const PredictorState& x,
                        const ControlSequence& u);

}  // namespace apmpc
