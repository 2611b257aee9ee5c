#include "apmpc/arx.hpp"

#include "apmpc/io.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace apmpc {

Eigen::Vector3cd ArxModel::roots() const {
  // Companion matrix of z^3 - alpha1 z^2 - alpha2 z - alpha3.
  const Eigen::Vector3d alpha = autoregressive();
  Eigen::Matrix3d comp = Eigen::Matrix3d::Zero();
  comp.row(0) = alpha.transpose();
  comp(1, 0) = 1.0;
  comp(2, 1) = 1.0;
  return Eigen::EigenSolver<Eigen::Matrix3d>(comp, false).eigenvalues();
}

double ArxModel::max_root_magnitude() const { return roots().cwiseAbs().maxCoeff(); }

void ArxModel::validate() const {
  if (!a.allFinite() || !b_cho.allFinite() || !b_ins.allFinite() || !std::isfinite(y_op) ||
      !std::isfinite(u_op)) {
    throw std::invalid_argument("ARX model holds non-finite values");
  }
}

ArxModel ArxModel::reference_preset() {
  ArxModel m;
  m.a << -2.20, 1.67, -0.46;
  m.b_cho << 2.09e-6, 7.36e-5, 1.93e-4;
  m.b_ins << -6.20e-5, -3.41e-3, -9.08e-4;
  return m;
}

double arx_predict_1step(const ArxModel& m, const Eigen::Ref<const Eigen::VectorXd>& dy_hist,
                         const Eigen::Ref<const Eigen::VectorXd>& dd_hist,
                         const Eigen::Ref<const Eigen::VectorXd>& du_hist) {
  if (dy_hist.size() < 3 || dd_hist.size() < 3 || du_hist.size() < 3) {
    throw DimensionMismatch("ARX histories need at least 3 samples");
  }
  return m.autoregressive().dot(dy_hist.head<3>()) + m.b_cho.dot(dd_hist.head<3>()) +
         m.b_ins.dot(du_hist.head<3>());
}

ArxSeries deviation_series(const SampledTrace& trace, double y_op, double u_op) {
  trace.validate();
  const auto n = static_cast<Eigen::Index>(trace.size());
  ArxSeries s;
  s.dy = Eigen::Map<const Eigen::VectorXd>(trace.cgm.data(), n).array() - y_op;
  s.du = Eigen::Map<const Eigen::VectorXd>(trace.insulin.data(), n).array() - u_op;
  s.dd = Eigen::Map<const Eigen::VectorXd>(trace.carbs.data(), n);
  return s;
}

ArxIdentification identify_arx(const std::vector<ArxSeries>& series) {
  Eigen::Index rows = 0;
  for (const auto& s : series) {
    if (s.du.size() != s.dy.size() || s.dd.size() != s.dy.size()) {
      throw DimensionMismatch("ARX series columns differ in length");
    }
    rows += std::max<Eigen::Index>(0, s.dy.size() - 3);
  }
  if (rows < 9) throw IllPosed("ARX identification needs at least 9 usable samples");
  // Columns: a1..a3 (on -dy), b_cho1..3, b_ins1..3; toolbox sign.
  Eigen::MatrixXd phi(rows, 9);
  Eigen::VectorXd target(rows);
  Eigen::Index r = 0;
  for (const auto& s : series) {
    for (Eigen::Index k = 3; k < s.dy.size(); ++k, ++r) {
      phi.row(r) << -s.dy[k - 1], -s.dy[k - 2], -s.dy[k - 3], s.dd[k], s.dd[k - 1], s.dd[k - 2],
          s.du[k - 1], s.du[k - 2], s.du[k - 3];
      target[r] = s.dy[k];
    }
  }
  // Column equilibration keeps the rank test meaningful across units.
  Eigen::VectorXd scale = phi.colwise().norm().transpose();
  for (Eigen::Index j = 0; j < 9; ++j) {
    if (scale[j] == 0.0) throw IllPosed("ARX regressor column " + std::to_string(j) + " is zero");
  }
  const Eigen::MatrixXd scaled = phi * scale.cwiseInverse().asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(1e-10);
  if (qr.rank() < 9) throw IllPosed("ARX regressors are rank deficient");
  const Eigen::VectorXd theta = qr.solve(target).cwiseQuotient(scale);

  ArxIdentification id;
  id.model.a = theta.head<3>();
  id.model.b_cho = theta.segment<3>(3);
  id.model.b_ins = theta.tail<3>();
  id.samples = static_cast<int>(rows);
  id.residual_variance = (target - phi * theta).squaredNorm() / static_cast<double>(rows - 9);
  return id;
}

ArxIdentification identify_arx(const ScenarioDataset& ds) {
  if (ds.subjects.empty()) throw InsufficientData("dataset holds no subjects");
  std::vector<ArxSeries> series;
  double y = 0.0, u = 0.0;
  for (const auto& s : ds.subjects) {
    series.push_back(
        deviation_series(s.trace, s.params.equilibrium_glucose, s.params.basal_rate));
    y += s.params.equilibrium_glucose;
    u += s.params.basal_rate;
  }
  ArxIdentification id = identify_arx(series);
  id.model.y_op = y / static_cast<double>(ds.subjects.size());
  id.model.u_op = u / static_cast<double>(ds.subjects.size());
  return id;
}

ArxModel at_operating_point(ArxModel m, const PatientParams& p) {
  m.y_op = p.equilibrium_glucose;
  m.u_op = p.basal_rate;
  return m;
}

SteadyStateKalman steady_state_kalman(const Eigen::MatrixXd& a, const Eigen::MatrixXd& c,
                                      const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                                      double tol, int max_iterations) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n || c.cols() != n || q.rows() != n || q.cols() != n || r.rows() != c.rows() ||
      r.cols() != c.rows()) {
    throw DimensionMismatch("Kalman filter matrices are inconsistent");
  }
  Eigen::MatrixXd p = q;
  for (int it = 1; it <= max_iterations; ++it) {
    const Eigen::MatrixXd s = c * p * c.transpose() + r;
    const Eigen::MatrixXd k = p * c.transpose() * s.ldlt().solve(Eigen::MatrixXd::Identity(s.rows(), s.cols()));
    Eigen::MatrixXd next = a * (p - k * c * p) * a.transpose() + q;
    next = 0.5 * (next + next.transpose());
    const double change = (next - p).cwiseAbs().maxCoeff();
    const double size = std::max(1.0, next.cwiseAbs().maxCoeff());
    p = next;
    if (!p.allFinite()) break;
    if (change <= tol * size) {
      SteadyStateKalman out;
      const Eigen::MatrixXd s2 = c * p * c.transpose() + r;
      out.gain = p * c.transpose() * s2.ldlt().solve(Eigen::MatrixXd::Identity(s2.rows(), s2.cols()));
      out.covariance = p;
      out.iterations = it;
      return out;
    }
  }
  throw IllPosed("Riccati iteration did not converge in " + std::to_string(max_iterations) +
                 " iterations");
}

ArxStateSpace realize_and_kalman(const ArxModel& m, const Eigen::Matrix3d& q_kf, double r_kf) {
  m.validate();
  const Eigen::Vector3d alpha = m.autoregressive();
  const Eigen::Vector3d& bc = m.b_cho;
  ArxStateSpace ss;
  ss.a.setZero();
  ss.a.col(0) = alpha;
  ss.a(0, 1) = 1.0;
  ss.a(1, 2) = 1.0;
  // Carbs act with direct feedthrough bc1; remove it from the strictly proper part.
  ss.d_cho = bc[0];
  ss.b.col(0) << bc[1] + alpha[0] * bc[0], bc[2] + alpha[1] * bc[0], alpha[2] * bc[0];
  ss.b.col(1) = m.b_ins;
  ss.c << 1.0, 0.0, 0.0;
  ss.q_kf = q_kf;
  ss.r_kf = r_kf;
  const SteadyStateKalman kf = steady_state_kalman(ss.a, ss.c, q_kf, Eigen::MatrixXd::Constant(1, 1, r_kf));
  ss.kalman_gain = kf.gain.col(0);
  ss.riccati_iterations = kf.iterations;
  return ss;
}

bool is_controllable(const ArxStateSpace& ss) {
  Eigen::Matrix<double, 3, 6> ctrb;
  ctrb << ss.b, ss.a * ss.b, ss.a * ss.a * ss.b;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(ctrb);
  lu.setThreshold(1e-12 * std::max(1.0, ctrb.cwiseAbs().maxCoeff()));
  return lu.rank() == 3;
}

Eigen::VectorXd realization_impulse(const ArxStateSpace& ss, int input, int steps) {
  if (input < 0 || input > 1) throw std::invalid_argument("input must be 0 (carbs) or 1 (insulin)");
  Eigen::VectorXd h(steps);
  Eigen::Vector3d x = Eigen::Vector3d::Zero();
  for (int k = 0; k < steps; ++k) {
    const double v = k == 0 ? 1.0 : 0.0;
    h[k] = ss.c * x + (input == 0 ? ss.d_cho * v : 0.0);
    x = ss.a * x + ss.b.col(input) * v;
  }
  return h;
}

Eigen::Vector3d kalman_correct(const ArxStateSpace& ss, const ArxFilterState& prior, double dy_meas,
                               double dd) {
  const double innovation = dy_meas - ss.c * prior.x - ss.d_cho * dd;
  return prior.x + ss.kalman_gain * innovation;
}

ArxFilterState kalman_predict(const ArxStateSpace& ss, const Eigen::Vector3d& posterior, double du,
                              double dd) {
  ArxFilterState next;
  next.x = ss.a * posterior + ss.b * Eigen::Vector2d(dd, du);
  return next;
}

KalmanStepResult kalman_step(const ArxStateSpace& ss, const ArxFilterState& state, double dy_meas,
                             double du, double dd) {
  KalmanStepResult r;
  r.state = kalman_predict(ss, kalman_correct(ss, state, dy_meas, dd), du, dd);
  r.dy_next = ss.c * r.state.x;
  return r;
}

namespace {

constexpr const char* kArxHeader = "# apmpc-arx v1";

}  // namespace

void write_arx_model(std::ostream& out, const ArxModel& m) {
  out << kArxHeader << '\n';
  out << "sign=" << (m.sign == ArxSign::kToolbox ? "toolbox" : "literal") << '\n';
  for (int i = 0; i < 3; ++i) out << "a" << i + 1 << '=' << format_double(m.a[i]) << '\n';
  for (int i = 0; i < 3; ++i) out << "b1" << i + 1 << '=' << format_double(m.b_cho[i]) << '\n';
  for (int i = 0; i < 3; ++i) out << "b2" << i + 1 << '=' << format_double(m.b_ins[i]) << '\n';
  out << "y_op=" << format_double(m.y_op) << '\n';
  out << "u_op=" << format_double(m.u_op) << '\n';
}

ArxModel read_arx_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kArxHeader) {
    throw FormatError("unsupported ARX model header");
  }
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw FormatError("bad ARX line '" + std::string(t) + "'");
    kv[std::string(trim(t.substr(0, eq)))] = std::string(trim(t.substr(eq + 1)));
  }
  auto get = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("ARX model missing '" + key + "'");
    return parse_double(it->second);
  };
  ArxModel m;
  if (auto it = kv.find("sign"); it != kv.end()) {
    if (it->second == "toolbox") {
      m.sign = ArxSign::kToolbox;
    } else if (it->second == "literal") {
      m.sign = ArxSign::kLiteral;
    } else {
      throw FormatError("unknown ARX sign convention '" + it->second + "'");
    }
  }
  for (int i = 0; i < 3; ++i) {
    m.a[i] = get("a" + std::to_string(i + 1));
    m.b_cho[i] = get("b1" + std::to_string(i + 1));
    m.b_ins[i] = get("b2" + std::to_string(i + 1));
  }
  m.y_op = kv.count("y_op") ? get("y_op") : 0.0;
  m.u_op = kv.count("u_op") ? get("u_op") : 0.0;
  m.validate();
  return m;
}

void save_arx_model(const std::filesystem::path& path, const ArxModel& m) {
  std::ostringstream out;
  write_arx_model(out, m);
  write_text(path, out.str());
}

ArxModel load_arx_model(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  return read_arx_model(in);
}

void write_arx_report(const std::filesystem::path& path, const ArxIdentification& id) {
  const ArxModel& m = id.model;
  std::ostringstream out;
  out << "name,value\n";
  for (int i = 0; i < 3; ++i) out << "a" << i + 1 << ',' << format_double(m.a[i]) << '\n';
  for (int i = 0; i < 3; ++i) out << "b1" << i + 1 << ',' << format_double(m.b_cho[i]) << '\n';
  for (int i = 0; i < 3; ++i) out << "b2" << i + 1 << ',' << format_double(m.b_ins[i]) << '\n';
  out << "residual_variance," << format_double(id.residual_variance) << '\n';
  out << "samples," << id.samples << '\n';
  const Eigen::Vector3cd roots = m.roots();
  for (int i = 0; i < 3; ++i) {
    out << "root" << i + 1 << "_magnitude," << format_double(std::abs(roots[i])) << '\n';
  }
  write_text(path, out.str());
}

}  // namespace apmpc
