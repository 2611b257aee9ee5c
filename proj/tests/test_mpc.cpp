#include "apmpc/closed_loop.hpp"
#include "apmpc/error.hpp"
#include "apmpc/io.hpp"
#include "apmpc/meals.hpp"
#include "apmpc/mpc.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>

using namespace apmpc;

namespace {

PredictorState flat_state(int T, double level, double insulin = 0.3) {
  PredictorState x;
  const int n = PredictorState::history_length(T);
  x.cgm = Eigen::VectorXd::Constant(n, level);
  x.insulin = Eigen::VectorXd::Constant(n, insulin);
  x.carbs = Eigen::VectorXd::Zero(n);
  return x;
}

AffinePredictor constant_predictor(int T, double level_offset, double gain) {
  AffinePredictor p;
  p.free_response = std::make_shared<FunctionFreeResponse>(T, [T, level_offset](const PredictorState& x) {
    return Eigen::VectorXd(Eigen::VectorXd::Constant(T, x.cgm[0] + level_offset));
  });
  p.forced_gains = std::make_shared<FunctionForcedGains>(T, [T, gain](const PredictorState&) {
    return Eigen::VectorXd(Eigen::VectorXd::Constant(T, gain));
  });
  return p;
}

ArxModel planted_model() {
  ArxModel m;
  m.a << -2.1, 1.48, -0.36;
  m.b_cho << 0.05, 0.3, 0.2;
  m.b_ins << -2.0, -4.0, -1.5;
  m.y_op = 120.0;
  m.u_op = 0.3;
  return m;
}

}  // namespace

TEST_CASE("setpoint schedule") {
  const SetpointSchedule s;
  CHECK(s.at(8 * 60) == 110.0);
  CHECK(s.at(5 * 60) == 110.0);
  CHECK(s.at(5 * 60 - 1) == 125.0);
  CHECK(s.at(22 * 60) == 125.0);
  CHECK(s.at(1440 + 8 * 60) == 110.0);
  CHECK(build_setpoint(8 * 60, 8) == Eigen::VectorXd::Constant(8, 110.0));
  CHECK(build_setpoint(23 * 60 + 30, 8) == Eigen::VectorXd::Constant(8, 125.0));
  const Eigen::VectorXd b = build_setpoint(21 * 60 + 30, 8);
  for (int i = 0; i < 8; ++i) CHECK(b[i] == (i < 2 ? 110.0 : 125.0));
}

TEST_CASE("config presets and validation") {
  CHECK(MpcConfig::multistep().r == 10.0);
  CHECK(MpcConfig::arx().r == 1.5);
  CHECK(MpcConfig::multistep().q == 1.0);
  CHECK(MpcConfig::multistep().u_max == 25.0);
  CHECK(MpcConfig::multistep().slack_weight() == 1e4);
  MpcConfig c;
  c.r = 0.0;
  CHECK_THROWS(c.validate());
  c = MpcConfig{};
  c.u_min = 30.0;
  CHECK_THROWS(c.validate());
  c = MpcConfig{};
  c.y_max = -1.0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("QP construction from the affine predictor") {
  const int T = 3;
  const Eigen::Vector3d f(150.0, 160.0, 170.0), ybar = Eigen::Vector3d::Constant(110.0);
  const Eigen::Vector3d g(-5.0, -3.0, -1.0);
  const Eigen::MatrixXd G = assemble_gt_matrix(g);
  const MpcConfig cfg;
  const QpProblem p = build_qp(f, G, ybar, 0.4, cfg);
  CHECK((p.h - 2.0 * (G.transpose() * G + 10.0 * Eigen::Matrix3d::Identity())).norm() < 1e-12);
  CHECK((p.f - 2.0 * G.transpose() * (f - ybar)).norm() < 1e-12);
  CHECK(p.lower == Eigen::VectorXd::Constant(T, -0.4));
  CHECK(p.upper == Eigen::VectorXd::Constant(T, 24.6));
  CHECK(p.soft_rows == G);
  CHECK(p.soft_offset == Eigen::VectorXd(f));
  CHECK(p.soft_upper == Eigen::VectorXd::Constant(T, 500.0));

  // Objective matches the tracking cost up to its constant.
  const Eigen::Vector3d du(0.5, 0.2, 0.0);
  const Eigen::Vector3d e = f + G * du - ybar;
  const double j = e.squaredNorm() + 10.0 * du.squaredNorm();
  const double j0 = (f - ybar).squaredNorm();
  CHECK(0.5 * du.dot(p.h * du) + p.f.dot(du) == doctest::Approx(j - j0).epsilon(1e-12));
  CHECK_THROWS(build_qp(Eigen::Vector3d(1, std::nan(""), 1), G, ybar, 0.4, cfg));
}

TEST_CASE("minimizer properties of the multi-step QP") {
  const MpcConfig cfg;
  const PredictorState x = flat_state(8, 110.0);
  const Eigen::VectorXd ybar = build_setpoint(8 * 60, 8);
  // F at target: stay at basal.
  const QpSolution a = solve_qp(build_qp_affine(constant_predictor(8, 0.0, -4.0), x, ybar, 0.3, cfg));
  CHECK(a.z.cwiseAbs().maxCoeff() < 1e-10);
  // No insulin effect: stay at basal whatever the error.
  const QpSolution b =
      solve_qp(build_qp_affine(constant_predictor(8, 90.0, 0.0), x, ybar, 0.3, cfg));
  CHECK(b.z.cwiseAbs().maxCoeff() < 1e-10);
  // High and insulin lowers glucose: deliver more.
  const QpSolution c =
      solve_qp(build_qp_affine(constant_predictor(8, 90.0, -4.0), x, ybar, 0.3, cfg));
  CHECK(c.z.maxCoeff() > 0.0);

  // T = 2 against the grid.
  MpcConfig c2 = cfg;
  c2.horizon = 2;
  const QpProblem p2 = build_qp(Eigen::Vector2d(200.0, 220.0),
                                assemble_gt_matrix(Eigen::Vector2d(-8.0, -6.0)),
                                Eigen::Vector2d::Constant(110.0), 0.3, c2);
  const QpSolution s2 = solve_qp(p2);
  const auto g2 = oracle::grid_qp(p2.h, p2.f, p2.lower, p2.upper);
  CHECK((s2.z - g2.z).cwiseAbs().maxCoeff() < 1e-3);
  CHECK(s2.z[0] > 0.0);
}

TEST_CASE("positive gains are clamped and counted") {
  const PredictorState x = flat_state(4, 180.0);
  AffinePredictor p = constant_predictor(4, 0.0, 2.0);
  int clamped = -1;
  MpcConfig cfg;
  cfg.horizon = 4;
  const QpProblem q = build_qp_affine(p, x, Eigen::VectorXd::Constant(4, 110.0), 0.3, cfg, &clamped);
  CHECK(clamped == 4);
  CHECK(q.soft_rows.isZero());
}

TEST_CASE("ARX prediction matrices") {
  const ArxModel m = planted_model();
  const ArxStateSpace ss = realize_and_kalman(m);
  const ArxPrediction z = arx_prediction(ss, Eigen::Vector3d::Zero(), 0.0, 8);
  CHECK(z.free.isZero());
  const Eigen::VectorXd imp = realization_impulse(ss, 1, 10);
  for (int r = 0; r < 8; ++r) {
    for (int j = 0; j < 8; ++j) CHECK(z.forced(r, j) == doctest::Approx(j <= r ? imp[r - j + 1] : 0.0));
  }
  const ArxPrediction meal = arx_prediction(ss, Eigen::Vector3d::Zero(), 50.0, 8);
  CHECK(meal.free.minCoeff() > 0.0);

  // At the operating point and on target: stay at basal.
  const QpProblem q = build_qp_arx(ss, m, Eigen::Vector3d::Zero(), Eigen::VectorXd::Constant(8, 120.0),
                                   0.0, MpcConfig::arx());
  CHECK(solve_qp(q).z.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("command finalization") {
  const MpcConfig c;
  CHECK(finalize_command(-3.0, c) == 0.0);
  CHECK(finalize_command(40.0, c) == doctest::Approx(25.0));
  CHECK(finalize_command(1.237, c) == doctest::Approx(1.2));
  CHECK(finalize_command(std::nan(""), c) == 0.0);
}

TEST_CASE("multi-step controller: warm-up, steady state, fallback") {
  MultiStepController c(constant_predictor(8, 0.0, -4.0), 0.3);
  for (int k = 0; k < 25; ++k) {
    const ControllerStep s = c.step(110.0, 0.0, 480.0 + 15.0 * k);
    CHECK(s.warmup);
    CHECK(s.command == doctest::Approx(0.3));
  }
  const ControllerStep s = c.step(110.0, 0.0, 480.0 + 15.0 * 25);
  CHECK_FALSE(s.warmup);
  CHECK_FALSE(s.fallback);
  CHECK(s.command == doctest::Approx(0.3));

  AffinePredictor broken = constant_predictor(8, 0.0, -4.0);
  broken.free_response = std::make_shared<FunctionFreeResponse>(8, [](const PredictorState&) {
    return Eigen::VectorXd(Eigen::VectorXd::Constant(8, std::nan("")));
  });
  MultiStepController b(broken, 0.3);
  ControllerStep last;
  for (int k = 0; k < 30; ++k) last = b.step(150.0, 0.0, 15.0 * k);
  CHECK(last.fallback);
  CHECK(last.command == doctest::Approx(0.3));
  CHECK_FALSE(last.incident.empty());
}

TEST_CASE("ARX controller warm-up and steady state") {
  const ArxModel m = planted_model();
  ArxController c(m, realize_and_kalman(m), 0.3, MpcConfig::arx(), {}, 25);
  // Starts at 20:00 so the first active step (02:15) sees a 125 target over the horizon.
  for (int k = 0; k < 25; ++k) CHECK(c.step(120.0, 0.0, 1200.0 + 15.0 * k).warmup);
  // Target 125 > y_op: the controller cuts insulin, never below 0.
  const ControllerStep s = c.step(120.0, 0.0, 1200.0 + 15.0 * 25);
  CHECK_FALSE(s.warmup);
  CHECK(s.command >= 0.0);
  CHECK(s.command <= 0.3 + 1e-12);
  // Daytime target 110 < y_op: more insulin than basal.
  CHECK(c.step(120.0, 0.0, 1200.0 + 15.0 * 26 + 600.0).command > 0.3);
}

TEST_CASE("48 h closed loop: one bounded command per tick, shared noise") {
  const PatientParams p = make_cohort(1, 3)[0];
  const auto meals = fixed_meals_scenario_a(2);
  MultiStepController ms(constant_predictor(8, 10.0, -6.0), p.basal_rate);
  ArxModel m = planted_model();
  m.y_op = p.equilibrium_glucose;
  m.u_op = p.basal_rate;
  ArxController ax(m, realize_and_kalman(m), p.basal_rate, MpcConfig::arx(), {}, 25);
  const ClosedLoopRun a = run_closed_loop(p, ms, meals, 192, NoiseModel{}, 77);
  const ClosedLoopRun b = run_closed_loop(p, ax, meals, 192, NoiseModel{}, 77);
  for (const ClosedLoopRun* r : {&a, &b}) {
    REQUIRE(r->log.size() == 192);
    REQUIRE(r->trace.size() == 192);
    REQUIRE(r->glucose.size() == 192);
    for (std::size_t k = 0; k < 192; ++k) {
      CHECK(r->log[k].command >= 0.0);
      CHECK(r->log[k].command <= 25.0);
      CHECK(r->trace.insulin[k] == r->log[k].command);
      CHECK(r->log[k].t_min == 15.0 * k);
      CHECK(std::isfinite(r->glucose[k]));
    }
    CHECK(r->trace.carbs[32] == 50.0);
  }
  // Paired design: same sensor error sequence for both controllers.
  for (std::size_t k = 0; k < 192; ++k) {
    const double ea = a.trace.cgm[k] - a.glucose[k];
    const double eb = b.trace.cgm[k] - b.glucose[k];
    if (a.trace.cgm[k] > 0.0 && a.trace.cgm[k] < 500.0 && b.trace.cgm[k] > 0.0 &&
        b.trace.cgm[k] < 500.0) {
      CHECK(ea == doctest::Approx(eb).epsilon(1e-9));
    }
  }

  const auto dir = std::filesystem::temp_directory_path() / "apmpc_cl_logs";
  write_controller_log(dir / "log.csv", a.log);
  write_closed_loop_csv(dir / "trace.csv", a);
  const CsvTable log = read_csv(dir / "log.csv");
  CHECK(log.header == std::vector<std::string>{"t_min", "cgm", "setpoint", "command_U", "qp_objective",
                                               "qp_iterations", "slack_norm", "fallback_flag"});
  CHECK(log.rows.size() == 192);
  const CsvTable tr = read_csv(dir / "trace.csv");
  CHECK(tr.header == std::vector<std::string>{"t_min", "bg_mgdl", "cgm_mgdl", "command_U", "d_cho_g"});
  std::filesystem::remove_all(dir);
}
