#include "apmpc/arx.hpp"
#include "apmpc/error.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>
#include <sstream>

using namespace apmpc;

namespace {

// Stable planted model: poles 0.9, 0.6 +- 0.2i.
ArxModel planted_model() {
  ArxModel m;
  // (z - 0.9)(z^2 - 1.2 z + 0.4) = z^3 - 2.1 z^2 + 1.48 z - 0.36
  m.a << -2.1, 1.48, -0.36;
  m.b_cho << 0.05, 0.3, 0.2;
  m.b_ins << -2.0, -4.0, -1.5;
  return m;
}

// Difference equation with the toolbox sign convention.
Eigen::VectorXd simulate_arx(const ArxModel& m, const Eigen::VectorXd& du, const Eigen::VectorXd& dd) {
  const Eigen::Index n = du.size();
  const Eigen::Vector3d alpha = -m.a;
  Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
  auto at = [](const Eigen::VectorXd& v, Eigen::Index i) { return i >= 0 ? v[i] : 0.0; };
  for (Eigen::Index k = 0; k < n; ++k) {
    double v = 0.0;
    for (int i = 1; i <= 3; ++i) {
      v += alpha[i - 1] * at(y, k - i);
      v += m.b_ins[i - 1] * at(du, k - i);
      v += m.b_cho[i - 1] * at(dd, k - i + 1);
    }
    y[k] = v;
  }
  return y;
}

ArxSeries random_series(const ArxModel& m, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  ArxSeries s;
  s.du.resize(n);
  s.dd.resize(n);
  for (int k = 0; k < n; ++k) {
    s.du[k] = z(rng);
    s.dd[k] = 5.0 * z(rng);
  }
  s.dy = simulate_arx(m, s.du, s.dd);
  return s;
}

}  // namespace

TEST_CASE("one-step prediction") {
  const ArxModel p = ArxModel::reference_preset();
  const Eigen::Vector3d z = Eigen::Vector3d::Zero();
  CHECK(arx_predict_1step(p, z, z, z) == 0.0);
  CHECK(arx_predict_1step(p, Eigen::Vector3d::Constant(100.0), z, z) == doctest::Approx(99.0));
  const double ins = arx_predict_1step(p, z, z, Eigen::Vector3d(1.0, 0.0, 0.0));
  CHECK(ins == p.b_ins[0]);
  CHECK(ins < 0.0);
  ArxModel lit = p;
  lit.sign = ArxSign::kLiteral;
  CHECK(arx_predict_1step(lit, Eigen::Vector3d::Constant(100.0), z, z) == doctest::Approx(-99.0));
  CHECK_THROWS_AS(arx_predict_1step(p, Eigen::Vector2d::Zero(), z, z), DimensionMismatch);
}

TEST_CASE("preset root audit separates the sign conventions") {
  ArxModel m = ArxModel::reference_preset();
  CHECK(m.max_root_magnitude() <= 1.01);
  m.sign = ArxSign::kLiteral;
  CHECK(m.max_root_magnitude() > 1.5);
}

TEST_CASE("roots of a planted polynomial") {
  const auto r = planted_model().roots();
  std::vector<double> mags;
  for (int i = 0; i < 3; ++i) mags.push_back(std::abs(r[i]));
  std::sort(mags.begin(), mags.end());
  CHECK(mags[0] == doctest::Approx(std::sqrt(0.4)).epsilon(1e-10));
  CHECK(mags[1] == doctest::Approx(std::sqrt(0.4)).epsilon(1e-10));
  CHECK(mags[2] == doctest::Approx(0.9).epsilon(1e-10));
}

TEST_CASE("least squares recovers a planted model") {
  const ArxModel m = planted_model();
  const auto id = identify_arx({random_series(m, 400, 1), random_series(m, 300, 2)});
  CHECK((id.model.a - m.a).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((id.model.b_cho - m.b_cho).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((id.model.b_ins - m.b_ins).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(id.residual_variance < 1e-12);
  CHECK(id.model.max_root_magnitude() <= 1.0 + 1e-6);

  ArxSeries flat;
  flat.dy = flat.du = flat.dd = Eigen::VectorXd::Zero(100);
  CHECK_THROWS_AS(identify_arx({flat}), IllPosed);
}

TEST_CASE("realization reproduces the difference-equation impulse response") {
  for (const ArxModel& m : {planted_model(), ArxModel::reference_preset()}) {
    const ArxStateSpace ss = realize_and_kalman(m);
    Eigen::VectorXd pulse = Eigen::VectorXd::Zero(50), none = Eigen::VectorXd::Zero(50);
    pulse[0] = 1.0;
    const Eigen::VectorXd ins = simulate_arx(m, pulse, none);
    const Eigen::VectorXd cho = simulate_arx(m, none, pulse);
    CHECK((realization_impulse(ss, 1, 50) - ins).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((realization_impulse(ss, 0, 50) - cho).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(is_controllable(ss));
    CHECK(ss.r_kf == 1e-6);
    CHECK(ss.q_kf == Eigen::Matrix3d::Identity());
  }
}

TEST_CASE("Riccati: static scalar case, scale invariance, fixed point") {
  for (double q : {0.5, 1.0, 3.0}) {
    for (double r : {1e-6, 0.2, 4.0}) {
      const auto k = steady_state_kalman(Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Ones(1, 1),
                                         Eigen::MatrixXd::Constant(1, 1, q),
                                         Eigen::MatrixXd::Constant(1, 1, r));
      CHECK(k.gain(0, 0) == doctest::Approx(q / (q + r)).epsilon(1e-12));
    }
  }
  const ArxModel m = planted_model();
  const ArxStateSpace a = realize_and_kalman(m);
  const ArxStateSpace b = realize_and_kalman(m, 2.0 * Eigen::Matrix3d::Identity(), 2e-6);
  CHECK((a.kalman_gain - b.kalman_gain).cwiseAbs().maxCoeff() < 1e-9);

  const Eigen::MatrixXd c = a.c;
  const auto k = steady_state_kalman(a.a, c, a.q_kf, Eigen::MatrixXd::Constant(1, 1, a.r_kf));
  const Eigen::MatrixXd& p = k.covariance;
  const Eigen::MatrixXd s = c * p * c.transpose() + Eigen::MatrixXd::Constant(1, 1, a.r_kf);
  const Eigen::MatrixXd next =
      a.a * (p - p * c.transpose() * s.inverse() * c * p) * a.a.transpose() + a.q_kf;
  CHECK((next - p).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, p.cwiseAbs().maxCoeff()));
  CHECK((Eigen::Vector3d(k.gain) - a.kalman_gain).norm() < 1e-12);
}

TEST_CASE("Kalman filter: zero fixed point, convergence, white innovations") {
  const ArxModel m = planted_model();
  const ArxStateSpace ss = realize_and_kalman(m);
  const KalmanStepResult z = kalman_step(ss, ArxFilterState{}, 0.0, 0.0, 0.0);
  CHECK(z.state.x.isZero());
  CHECK(z.dy_next == 0.0);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::Vector3d x(3.0, -2.0, 1.0);
  ArxFilterState est;
  for (int k = 0; k < 200; ++k) {
    const double du = n01(rng), dd = n01(rng);
    const double y = ss.c * x + ss.d_cho * dd;
    est = kalman_step(ss, est, y, du, dd).state;
    x = ss.a * x + ss.b * Eigen::Vector2d(dd, du);
  }
  CHECK((x - est.x).norm() < 1e-6);

  // Data from the filter's own stochastic model.
  const int n = 10000;
  Eigen::VectorXd innov(n);
  x.setZero();
  est = ArxFilterState{};
  const double sr = std::sqrt(ss.r_kf);
  for (int k = 0; k < n; ++k) {
    const double du = n01(rng), dd = n01(rng);
    const double y = ss.c * x + ss.d_cho * dd + sr * n01(rng);
    innov[k] = y - ss.c * est.x - ss.d_cho * dd;
    est = kalman_step(ss, est, y, du, dd).state;
    x = ss.a * x + ss.b * Eigen::Vector2d(dd, du) + Eigen::Vector3d(n01(rng), n01(rng), n01(rng));
  }
  const Eigen::ArrayXd e = innov.array() - innov.mean();
  const double rho = (e.head(n - 1) * e.tail(n - 1)).sum() / e.square().sum();
  CHECK(std::abs(rho) < 0.1);
}

TEST_CASE("operating point, deviations, persistence") {
  PatientParams p;
  p.equilibrium_glucose = 131.0;
  p.basal_rate = 0.35;
  const ArxModel m = at_operating_point(ArxModel::reference_preset(), p);
  CHECK(m.y_op == 131.0);
  CHECK(m.u_op == 0.35);

  SampledTrace t;
  for (int k = 0; k < 5; ++k) {
    t.t_min.push_back(15.0 * k);
    t.cgm.push_back(130.0 + k);
    t.insulin.push_back(0.35 + 0.1 * k);
    t.carbs.push_back(k == 2 ? 40.0 : 0.0);
  }
  const ArxSeries s = deviation_series(t, 131.0, 0.35);
  CHECK(s.dy[0] == -1.0);
  CHECK(s.du[3] == doctest::Approx(0.3));
  CHECK(s.dd[2] == 40.0);

  std::stringstream ss;
  write_arx_model(ss, m);
  CHECK(read_arx_model(ss) == m);
  const auto path = std::filesystem::temp_directory_path() / "apmpc_arx_rt.txt";
  save_arx_model(path, m);
  CHECK(load_arx_model(path) == m);
  std::filesystem::remove(path);
}
