#include "apmpc/gt_fit.hpp"

#include <Eigen/QR>

#include <cmath>

namespace apmpc {

namespace {

// L(du): (i, j) = du_j for j <= i.
Eigen::MatrixXd lower_from(const Eigen::VectorXd& du) { return assemble_gt_matrix(du); }

struct NormalEquations {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
  double yy = 0.0;
  long rows = 0;
  int windows = 0;
};

// Row-major unknown ordering: index j*n + m is C(j, m). For one window the
// regressor block is Phi = L(du) kron cgm^T.
NormalEquations accumulate(const std::vector<GtResidual>& residuals, int t, int n) {
  NormalEquations ne;
  ne.a = Eigen::MatrixXd::Zero(t * n, t * n);
  ne.b = Eigen::VectorXd::Zero(t * n);
  for (const auto& r : residuals) {
    if (r.du.size() != t || r.dy.size() != t || r.cgm.size() != n) {
      throw DimensionMismatch("residual dimensions disagree");
    }
    if (r.du.isZero(0.0)) continue;
    const Eigen::MatrixXd l = lower_from(r.du);
    const Eigen::MatrixXd ltl = l.transpose() * l;
    const Eigen::MatrixXd hh = r.cgm * r.cgm.transpose();
    const Eigen::VectorXd lty = l.transpose() * r.dy;
    for (int p = 0; p < t; ++p) {
      for (int q = 0; q < t; ++q) {
        if (ltl(p, q) != 0.0) ne.a.block(p * n, q * n, n, n) += ltl(p, q) * hh;
      }
      ne.b.segment(p * n, n) += lty[p] * r.cgm;
    }
    ne.yy += r.dy.squaredNorm();
    ne.rows += t;
    ++ne.windows;
  }
  return ne;
}

int infer_horizon(const std::vector<GtResidual>& residuals) {
  if (residuals.empty()) throw IllPosed("no residual windows to fit G_T");
  return static_cast<int>(residuals.front().du.size());
}

}  // namespace

void GtCoefficients::validate() const {
  if (c.rows() < 1 || c.cols() != 3 * c.rows() + 1) {
    throw DimensionMismatch("G_T coefficients must be T x (3T+1)");
  }
  if (!c.allFinite()) throw std::invalid_argument("G_T coefficients hold non-finite entries");
}

void GtCoefficients::to_store(TensorStore& store) const {
  validate();
  store.meta["gt.horizon"] = std::to_string(horizon());
  store.meta["gt.history"] = std::to_string(history());
  store.tensors["gt.C"] = c;
}

GtCoefficients GtCoefficients::from_store(const TensorStore& store) {
  GtCoefficients g;
  g.c = store.at("gt.C");
  if (parse_int(store.meta_at("gt.horizon")) != g.horizon() ||
      parse_int(store.meta_at("gt.history")) != g.history()) {
    throw FormatError("G_T header disagrees with the stored matrix");
  }
  g.validate();
  return g;
}

void GtCoefficients::save(const std::filesystem::path& path) const {
  TensorStore store;
  to_store(store);
  store.save(path);
}

GtCoefficients GtCoefficients::load(const std::filesystem::path& path) {
  return from_store(TensorStore::load(path));
}

std::vector<GtResidual> compute_residuals(const std::vector<const Window*>& windows,
                                          const FreeResponseModel& ft) {
  std::vector<const PredictorState*> xs;
  xs.reserve(windows.size());
  for (const Window* w : windows) xs.push_back(&w->x);
  const Eigen::MatrixXd f = ft.evaluate_batch(xs);
  std::vector<GtResidual> out;
  out.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const Window& w = *windows[i];
    if (w.future_y.size() != ft.horizon() || w.future_u.size() != ft.horizon()) {
      throw DimensionMismatch("window horizon differs from the free response");
    }
    GtResidual r;
    r.cgm = w.x.cgm;
    r.du = w.future_u.array() - w.basal;
    r.dy = w.future_y - f.col(static_cast<Eigen::Index>(i));
    out.push_back(std::move(r));
  }
  return out;
}

GtCoefficients fit_gt(const std::vector<GtResidual>& residuals, double ridge_lambda,
                      GtFitReport* report) {
  if (!(ridge_lambda >= 0.0)) throw std::invalid_argument("ridge_lambda must be >= 0");
  const int t = infer_horizon(residuals);
  const int n = static_cast<int>(residuals.front().cgm.size());
  NormalEquations ne = accumulate(residuals, t, n);
  if (ne.windows == 0) {
    throw IllPosed("every window has zero insulin deviation; G_T is not identifiable");
  }
  const double m = static_cast<double>(ne.rows);
  Eigen::MatrixXd lhs = ne.a / m;
  lhs.diagonal().array() += ridge_lambda;
  const Eigen::VectorXd rhs = ne.b / m;
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(lhs);
  const Eigen::VectorXd sol = qr.solve(rhs);
  if (!sol.allFinite()) throw IllPosed("G_T normal equations are singular");

  GtCoefficients g;
  g.c = sol.reshaped<Eigen::RowMajor>(t, n);
  if (report) {
    report->windows_used = ne.windows;
    report->rms_before = std::sqrt(ne.yy / m);
    const double sse = ne.yy - 2.0 * sol.dot(ne.b) + sol.dot(ne.a * sol);
    report->rms_after = std::sqrt(std::max(0.0, sse) / m);
  }
  return g;
}

Eigen::VectorXd gt_objective_gradient(const std::vector<GtResidual>& residuals,
                                      const GtCoefficients& coeffs, double ridge_lambda) {
  const int t = infer_horizon(residuals);
  const int n = static_cast<int>(residuals.front().cgm.size());
  NormalEquations ne = accumulate(residuals, t, n);
  if (ne.rows == 0) throw IllPosed("no informative windows");
  const Eigen::VectorXd c = coeffs.c.reshaped<Eigen::RowMajor>();
  return 2.0 * (ne.a * c - ne.b) / static_cast<double>(ne.rows) + 2.0 * ridge_lambda * c;
}

Eigen::VectorXd eval_gains(const GtCoefficients& coeffs, const PredictorState& x) {
  if (x.cgm.size() != coeffs.history()) {
    throw DimensionMismatch("CGM history length differs from the G_T coefficient width");
  }
  return coeffs.c * x.cgm;
}

LinearGains::LinearGains(GtCoefficients coeffs) : coeffs_(std::move(coeffs)) {
  coeffs_.validate();
}

Eigen::VectorXd LinearGains::gains(const PredictorState& x) const { return eval_gains(coeffs_, x); }

SignAudit audit_gain_signs(const GtCoefficients& coeffs, const std::vector<const Window*>& windows) {
  SignAudit a;
  a.positive_by_step = Eigen::VectorXd::Zero(coeffs.horizon());
  for (const Window* w : windows) {
    const Eigen::VectorXd g = eval_gains(coeffs, w->x);
    for (int j = 0; j < g.size(); ++j) {
      if (g[j] > 0.0) {
        ++a.positive;
        a.positive_by_step[j] += 1.0;
      }
      ++a.evaluated;
    }
  }
  if (!windows.empty()) a.positive_by_step /= static_cast<double>(windows.size());
  return a;
}

}  // namespace apmpc
