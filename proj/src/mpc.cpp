#include "apmpc/mpc.hpp"

#include "apmpc/io.hpp"
#include "apmpc/plant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace apmpc {

void MpcConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  if (!(ts > 0.0)) throw std::invalid_argument("ts must be > 0");
  if (!(q > 0.0) || !(r > 0.0)) throw std::invalid_argument("q and r must be > 0");
  if (!(u_min < u_max)) throw std::invalid_argument("u_min must be < u_max");
  if (!(y_min < y_max)) throw std::invalid_argument("y_min must be < y_max");
  if (!(slack_factor > 0.0)) throw std::invalid_argument("slack factor must be > 0");
}

double SetpointSchedule::at(double clock_min) const {
  double m = std::fmod(clock_min, 1440.0);
  if (m < 0.0) m += 1440.0;
  return (m >= day_start && m < day_end) ? day_target : night_target;
}

Eigen::VectorXd build_setpoint(double clock_min, int horizon, const SetpointSchedule& s, double ts) {
  Eigen::VectorXd y(horizon);
  for (int i = 0; i < horizon; ++i) y[i] = s.at(clock_min + ts * i);
  return y;
}

void QpProblem::validate() const {
  const Eigen::Index n = f.size();
  if (h.rows() != n || h.cols() != n || lower.size() != n || upper.size() != n) {
    throw DimensionMismatch("QP dimensions are inconsistent");
  }
  if ((lower.array() > upper.array()).any()) throw std::invalid_argument("QP box is empty");
  if ((h - h.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + h.cwiseAbs().maxCoeff())) {
    throw std::invalid_argument("QP Hessian is not symmetric");
  }
  const Eigen::Index m = soft_rows.rows();
  if (m > 0 && (soft_rows.cols() != n || soft_offset.size() != m || soft_lower.size() != m ||
                soft_upper.size() != m)) {
    throw DimensionMismatch("QP soft rows are inconsistent");
  }
  if (m > 0 && !(slack_weight > 0.0)) throw std::invalid_argument("slack weight must be > 0");
  if (!h.allFinite() || !f.allFinite() || (m > 0 && (!soft_rows.allFinite() ||
                                                     !soft_offset.allFinite()))) {
    throw std::invalid_argument("QP data hold non-finite entries");
  }
}

double QpProblem::objective(const Eigen::VectorXd& z) const {
  double obj = 0.5 * z.dot(h * z) + f.dot(z);
  if (soft_count() > 0) {
    const Eigen::VectorXd y = soft_rows * z + soft_offset;
    const Eigen::VectorXd lo = (soft_lower - y).cwiseMax(0.0);
    const Eigen::VectorXd hi = (y - soft_upper).cwiseMax(0.0);
    obj += 0.5 * slack_weight * (lo.squaredNorm() + hi.squaredNorm());
  }
  return obj;
}

double QpSolution::slack_norm() const {
  return std::sqrt(slack_lower.squaredNorm() + slack_upper.squaredNorm());
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Inequalities a_i' w <= b_i over w = [z; s_lo; s_hi].
struct Inequalities {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
};

Inequalities make_inequalities(const QpProblem& p) {
  const int n = p.size();
  const int m = p.soft_count();
  const int nw = n + 2 * m;
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> rhs;
  auto unit = [&](int i, double sign) {
    Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nw);
    r[i] = sign;
    return r;
  };
  for (int i = 0; i < n; ++i) {
    if (p.upper[i] < kInf) {
      rows.push_back(unit(i, 1.0));
      rhs.push_back(p.upper[i]);
    }
    if (p.lower[i] > -kInf) {
      rows.push_back(unit(i, -1.0));
      rhs.push_back(-p.lower[i]);
    }
  }
  for (int i = 0; i < 2 * m; ++i) {
    rows.push_back(unit(n + i, -1.0));
    rhs.push_back(0.0);
  }
  for (int i = 0; i < m; ++i) {
    if (p.soft_lower[i] > -kInf) {
      Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nw);
      r.head(n) = -p.soft_rows.row(i);
      r[n + i] = -1.0;
      rows.push_back(r);
      rhs.push_back(p.soft_offset[i] - p.soft_lower[i]);
    }
    if (p.soft_upper[i] < kInf) {
      Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nw);
      r.head(n) = p.soft_rows.row(i);
      r[n + m + i] = -1.0;
      rows.push_back(r);
      rhs.push_back(p.soft_upper[i] - p.soft_offset[i]);
    }
  }
  Inequalities c;
  c.a.resize(static_cast<Eigen::Index>(rows.size()), nw);
  c.b.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    c.a.row(static_cast<Eigen::Index>(i)) = rows[i];
    c.b[static_cast<Eigen::Index>(i)] = rhs[i];
  }
  return c;
}

// Solves the equality-constrained subproblem. Returns step p and multipliers
// for the working rows.
void solve_eqp(const Eigen::MatrixXd& h, const Eigen::VectorXd& g, const Eigen::MatrixXd& a,
               const std::vector<int>& work, Eigen::VectorXd& p, Eigen::VectorXd& lambda) {
  const Eigen::Index n = h.rows();
  const Eigen::Index k = static_cast<Eigen::Index>(work.size());
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + k, n + k);
  kkt.topLeftCorner(n, n) = h;
  for (Eigen::Index i = 0; i < k; ++i) {
    kkt.block(n + i, 0, 1, n) = a.row(work[static_cast<std::size_t>(i)]);
    kkt.block(0, n + i, n, 1) = a.row(work[static_cast<std::size_t>(i)]).transpose();
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + k);
  rhs.head(n) = -g;
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(kkt);
  Eigen::VectorXd sol = lu.solve(rhs);
  // One step of iterative refinement for a tight KKT certificate.
  sol += lu.solve(rhs - kkt * sol);
  p = sol.head(n);
  lambda = sol.tail(k);
}

}  // namespace

QpSolution solve_qp(const QpProblem& p, int max_iterations, double tolerance) {
  p.validate();
  const int n = p.size();
  const int m = p.soft_count();
  const int nw = n + 2 * m;

  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(nw, nw);
  h.topLeftCorner(n, n) = 0.5 * (p.h + p.h.transpose());
  if (m > 0) h.bottomRightCorner(2 * m, 2 * m).diagonal().setConstant(p.slack_weight);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(nw);
  f.head(n) = p.f;
  const Inequalities con = make_inequalities(p);

  // Feasible start: origin projected on the box, slacks absorbing the rest.
  Eigen::VectorXd w = Eigen::VectorXd::Zero(nw);
  w.head(n) = Eigen::VectorXd::Zero(n).cwiseMax(p.lower).cwiseMin(p.upper);
  if (m > 0) {
    const Eigen::VectorXd y = p.soft_rows * w.head(n) + p.soft_offset;
    w.segment(n, m) = (p.soft_lower - y).cwiseMax(0.0);
    w.tail(m) = (y - p.soft_upper).cwiseMax(0.0);
  }

  std::vector<int> work;
  std::vector<char> in_work(static_cast<std::size_t>(con.a.rows()), 0);
  Eigen::VectorXd step, lambda;
  const double scale = 1.0 + h.cwiseAbs().maxCoeff() + f.cwiseAbs().maxCoeff();
  int it = 0;
  bool done = false;
  for (; it < max_iterations; ++it) {
    const Eigen::VectorXd g = h * w + f;
    solve_eqp(h, g, con.a, work, step, lambda);
    if (step.cwiseAbs().maxCoeff() <= 1e-13 * (1.0 + w.cwiseAbs().maxCoeff())) {
      // Stationary on the working set; drop the most negative multiplier.
      int drop = -1;
      double most = -tolerance * 1e-3 * scale;
      for (std::size_t i = 0; i < work.size(); ++i) {
        if (lambda[static_cast<Eigen::Index>(i)] < most) {
          most = lambda[static_cast<Eigen::Index>(i)];
          drop = static_cast<int>(i);
        }
      }
      if (drop < 0) {
        done = true;
        break;
      }
      in_work[static_cast<std::size_t>(work[static_cast<std::size_t>(drop)])] = 0;
      work.erase(work.begin() + drop);
      continue;
    }
    double alpha = 1.0;
    int block = -1;
    for (Eigen::Index i = 0; i < con.a.rows(); ++i) {
      if (in_work[static_cast<std::size_t>(i)]) continue;
      const double ap = con.a.row(i).dot(step);
      if (ap <= 1e-14 * (1.0 + step.cwiseAbs().maxCoeff())) continue;
      const double ratio = std::max(0.0, (con.b[i] - con.a.row(i).dot(w)) / ap);
      if (ratio < alpha) {
        alpha = ratio;
        block = static_cast<int>(i);
      }
    }
    w += alpha * step;
    if (block >= 0) {
      work.push_back(block);
      in_work[static_cast<std::size_t>(block)] = 1;
    }
  }

  // Certificate over all constraints.
  Eigen::VectorXd mult = Eigen::VectorXd::Zero(con.a.rows());
  {
    const Eigen::VectorXd g = h * w + f;
    solve_eqp(h, g, con.a, work, step, lambda);
    for (std::size_t i = 0; i < work.size(); ++i) {
      mult[work[i]] = lambda[static_cast<Eigen::Index>(i)];
    }
  }
  QpSolution sol;
  sol.z = w.head(n);
  sol.slack_lower = w.segment(n, m);
  sol.slack_upper = w.tail(m);
  sol.iterations = it;
  sol.objective = 0.5 * w.dot(h * w) + f.dot(w);
  const Eigen::VectorXd viol = con.a * w - con.b;
  sol.stationarity = (h * w + f + con.a.transpose() * mult).cwiseAbs().maxCoeff();
  sol.feasibility = con.a.rows() > 0 ? std::max(0.0, viol.maxCoeff()) : 0.0;
  sol.complementarity = con.a.rows() > 0 ? mult.cwiseProduct(viol).cwiseAbs().maxCoeff() : 0.0;
  sol.dual_infeasibility = con.a.rows() > 0 ? std::max(0.0, -mult.minCoeff()) : 0.0;
  if (!done) {
    throw SolverFailure("active-set QP hit the iteration limit of " +
                            std::to_string(max_iterations),
                        sol.stationarity, sol.feasibility);
  }
  const double tol = tolerance * scale;
  if (sol.stationarity > tol || sol.feasibility > tol || !w.allFinite()) {
    throw SolverFailure("active-set QP ended without a KKT certificate", sol.stationarity,
                        sol.feasibility);
  }
  return sol;
}

QpProblem build_qp(const Eigen::VectorXd& free, const Eigen::MatrixXd& forced,
                   const Eigen::VectorXd& ybar, double ubar, const MpcConfig& cfg) {
  cfg.validate();
  const Eigen::Index t = free.size();
  if (forced.rows() != t || forced.cols() != t || ybar.size() != t) {
    throw DimensionMismatch("prediction, input map and setpoint lengths differ");
  }
  if (!free.allFinite() || !forced.allFinite()) {
    throw Error("predictor returned non-finite values");
  }
  QpProblem p;
  p.h = 2.0 * (cfg.q * forced.transpose() * forced +
               cfg.r * Eigen::MatrixXd::Identity(t, t));
  p.f = 2.0 * cfg.q * forced.transpose() * (free - ybar);
  p.lower = Eigen::VectorXd::Constant(t, cfg.u_min - ubar);
  p.upper = Eigen::VectorXd::Constant(t, cfg.u_max - ubar);
  p.soft_rows = forced;
  p.soft_offset = free;
  p.soft_lower = Eigen::VectorXd::Constant(t, cfg.y_min);
  p.soft_upper = Eigen::VectorXd::Constant(t, cfg.y_max);
  // Cost is J = ... + w |s|^2; the QP uses the 0.5 s'(2w)s form.
  p.slack_weight = 2.0 * cfg.slack_weight();
  return p;
}

QpProblem build_qp_affine(const AffinePredictor& pred, const PredictorState& x,
                          const Eigen::VectorXd& ybar, double ubar, const MpcConfig& cfg,
                          int* clamped_gains) {
  AffineTerms terms = evaluate_terms(pred, x);
  int clamped = 0;
  for (Eigen::Index j = 0; j < terms.gains.size(); ++j) {
    if (terms.gains[j] > 0.0) {
      terms.gains[j] = 0.0;
      ++clamped;
    }
  }
  if (clamped_gains) *clamped_gains = clamped;
  return build_qp(terms.free, assemble_gt_matrix(terms.gains), ybar, ubar, cfg);
}

ArxPrediction arx_prediction(const ArxStateSpace& ss, const Eigen::Vector3d& posterior,
                             double announced_carbs, int horizon) {
  ArxPrediction out;
  out.free.resize(horizon);
  out.forced = Eigen::MatrixXd::Zero(horizon, horizon);
  Eigen::Vector3d x = ss.a * posterior + ss.b.col(0) * announced_carbs;
  // markov[i] = C A^i B_u
  Eigen::VectorXd markov(horizon);
  Eigen::Vector3d v = ss.b.col(1);
  for (int i = 0; i < horizon; ++i) {
    out.free[i] = ss.c * x;
    markov[i] = ss.c * v;
    x = ss.a * x;
    v = ss.a * v;
  }
  for (int r = 0; r < horizon; ++r) {
    for (int j = 0; j <= r; ++j) out.forced(r, j) = markov[r - j];
  }
  return out;
}

QpProblem build_qp_arx(const ArxStateSpace& ss, const ArxModel& m, const Eigen::Vector3d& posterior,
                       const Eigen::VectorXd& ybar, double announced_carbs, const MpcConfig& cfg) {
  const ArxPrediction pr =
      arx_prediction(ss, posterior, announced_carbs, static_cast<int>(ybar.size()));
  return build_qp(pr.free.array() + m.y_op, pr.forced, ybar, m.u_op, cfg);
}

double finalize_command(double units, const MpcConfig& cfg) {
  if (!std::isfinite(units)) return cfg.u_min;
  return quantize_pump(std::clamp(units, cfg.u_min, cfg.u_max));
}

namespace {

void fill_from_solution(ControllerStep& s, const QpSolution& sol, double basal,
                        const MpcConfig& cfg) {
  s.command = finalize_command(basal + sol.z[0], cfg);
  s.objective = sol.objective;
  s.iterations = sol.iterations;
  s.slack_norm = sol.slack_norm();
}

}  // namespace

MultiStepController::MultiStepController(AffinePredictor pred, double basal, MpcConfig cfg,
                                         SetpointSchedule schedule)
    : pred_(std::move(pred)), basal_(basal), cfg_(cfg), schedule_(schedule) {
  cfg_.validate();
  if (pred_.horizon() != cfg_.horizon) {
    throw DimensionMismatch("predictor horizon differs from the MPC horizon");
  }
}

ControllerStep MultiStepController::step(double cgm, double announced_carbs, double clock_min) {
  const std::size_t n = static_cast<std::size_t>(PredictorState::history_length(cfg_.horizon));
  cgm_.push_front(cgm);
  carbs_.push_front(announced_carbs);
  if (cgm_.size() > n) cgm_.pop_back();
  if (carbs_.size() > n) carbs_.pop_back();

  ControllerStep s;
  s.t_min = clock_min;
  s.cgm = cgm;
  const Eigen::VectorXd ybar = build_setpoint(clock_min, cfg_.horizon, schedule_, cfg_.ts);
  s.setpoint = ybar[0];
  if (insulin_.size() < n) {
    s.warmup = true;
    s.command = finalize_command(basal_, cfg_);
  } else {
    PredictorState x;
    x.cgm.resize(static_cast<Eigen::Index>(n));
    x.insulin.resize(static_cast<Eigen::Index>(n));
    x.carbs.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      x.cgm[static_cast<Eigen::Index>(i)] = cgm_[i];
      x.insulin[static_cast<Eigen::Index>(i)] = insulin_[i];
      x.carbs[static_cast<Eigen::Index>(i)] = carbs_[i];
    }
    try {
      x.validate(cfg_.horizon);
      const QpProblem qp = build_qp_affine(pred_, x, ybar, basal_, cfg_, &s.clamped_gains);
      fill_from_solution(s, solve_qp(qp), basal_, cfg_);
      if (s.clamped_gains > 0) {
        s.incident = std::to_string(s.clamped_gains) + " positive gains clamped";
      }
    } catch (const std::exception& e) {
      s.fallback = true;
      s.incident = e.what();
      s.command = finalize_command(basal_, cfg_);
    }
  }
  insulin_.push_front(s.command);
  if (insulin_.size() > n) insulin_.pop_back();
  return s;
}

ArxController::ArxController(ArxModel model, ArxStateSpace ss, double basal, MpcConfig cfg,
                             SetpointSchedule schedule, int warmup_ticks)
    : model_(std::move(model)),
      ss_(std::move(ss)),
      basal_(basal),
      cfg_(cfg),
      schedule_(schedule),
      warmup_ticks_(warmup_ticks) {
  cfg_.validate();
  model_.u_op = basal_;
}

ControllerStep ArxController::step(double cgm, double announced_carbs, double clock_min) {
  ControllerStep s;
  s.t_min = clock_min;
  s.cgm = cgm;
  const Eigen::VectorXd ybar = build_setpoint(clock_min, cfg_.horizon, schedule_, cfg_.ts);
  s.setpoint = ybar[0];
  const Eigen::Vector3d posterior =
      kalman_correct(ss_, state_, cgm - model_.y_op, announced_carbs);
  if (tick_ < warmup_ticks_) {
    s.warmup = true;
    s.command = finalize_command(basal_, cfg_);
  } else {
    try {
      const QpProblem qp = build_qp_arx(ss_, model_, posterior, ybar, announced_carbs, cfg_);
      fill_from_solution(s, solve_qp(qp), basal_, cfg_);
    } catch (const std::exception& e) {
      s.fallback = true;
      s.incident = e.what();
      s.command = finalize_command(basal_, cfg_);
    }
  }
  state_ = kalman_predict(ss_, posterior, s.command - basal_, announced_carbs);
  ++tick_;
  return s;
}

void write_controller_log(const std::filesystem::path& path,
                          const std::vector<ControllerStep>& log) {
  std::vector<std::vector<double>> rows;
  rows.reserve(log.size());
  for (const auto& s : log) {
    rows.push_back({s.t_min, s.cgm, s.setpoint, s.command, s.objective,
                    static_cast<double>(s.iterations), s.slack_norm, s.fallback ? 1.0 : 0.0});
  }
  write_csv(path,
            {"t_min", "cgm", "setpoint", "command_U", "qp_objective", "qp_iterations",
             "slack_norm", "fallback_flag"},
            rows);
}

}  // namespace apmpc
