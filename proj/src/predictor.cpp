#include "apmpc/predictor.hpp"

#include <string>

namespace apmpc {

void PredictorState::validate(int horizon) const {
  const Eigen::Index n = history_length(horizon);
  if (cgm.size() != n || insulin.size() != n || carbs.size() != n) {
    throw DimensionMismatch("predictor state histories must have length 3T+1 = " +
                            std::to_string(n));
  }
  if (!cgm.allFinite() || !insulin.allFinite() || !carbs.allFinite()) {
    throw std::invalid_argument("predictor state holds non-finite entries");
  }
  if (cgm.minCoeff() < 0.0 || cgm.maxCoeff() > 500.0) {
    throw std::invalid_argument("CGM history outside [0, 500] mg/dL");
  }
}

ControlSequence ControlSequence::basal(int horizon, double basal_rate) {
  ControlSequence c;
  c.u = Eigen::VectorXd::Constant(horizon, basal_rate);
  c.reference = c.u;
  return c;
}

Eigen::MatrixXd FreeResponseModel::evaluate_batch(
    const std::vector<const PredictorState*>& xs) const {
  Eigen::MatrixXd out(horizon(), static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = evaluate(*xs[i]);
  return out;
}

int AffinePredictor::horizon() const {
  if (!free_response || !forced_gains) throw std::invalid_argument("predictor not loaded");
  if (free_response->horizon() != forced_gains->horizon()) {
    throw DimensionMismatch("free-response and gain horizons differ");
  }
  return free_response->horizon();
}

AffineTerms evaluate_terms(const AffinePredictor& pred, const PredictorState& x) {
  const int horizon = pred.horizon();
  AffineTerms t;
  t.free = pred.free_response->evaluate(x);
  t.gains = pred.forced_gains->gains(x);
  if (t.free.size() != horizon || t.gains.size() != horizon) {
    throw DimensionMismatch("predictor evaluators returned the wrong length");
  }
  t.forced = assemble_gt_matrix(t.gains);
  return t;
}

Eigen::VectorXd predict(const AffinePredictor& pred, const PredictorState& x,
                        const ControlSequence& u) {
  const int horizon = pred.horizon();
  if (u.u.size() != horizon || u.reference.size() != horizon) {
    throw DimensionMismatch("control sequence length differs from the horizon");
  }
  const AffineTerms t = evaluate_terms(pred, x);
  return t.free + t.forced * u.deviation();
}

}  // namespace apmpc
