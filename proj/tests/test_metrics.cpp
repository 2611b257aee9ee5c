#include "apmpc/io.hpp"
#include "apmpc/metrics.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

using namespace apmpc;

TEST_CASE("pointwise accuracy metrics") {
  const Eigen::Vector2d y(100.0, 110.0), yh(90.0, 120.0);
  CHECK(mae(y, yh) == doctest::Approx(10.0));
  CHECK(rmse(y, yh) == doctest::Approx(10.0));
  CHECK(mape(y, yh) == doctest::Approx(50.0 * (10.0 / 100.0 + 10.0 / 110.0)));
  CHECK(mae(y, y) == 0.0);
  CHECK(rmse(y, y) == 0.0);
  CHECK(mape(y, y) == 0.0);
  CHECK_THROWS_AS(mape(Eigen::Vector2d(0.0, 1.0), yh), std::domain_error);
  CHECK_THROWS(mae(Eigen::Vector3d::Ones(), yh));
}

TEST_CASE("rmse dominates mae") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 30.0);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd y(17), yh(17);
    for (int i = 0; i < 17; ++i) {
      y[i] = 150.0 + n(rng);
      yh[i] = y[i] + n(rng);
    }
    CHECK(rmse(y, yh) >= mae(y, yh) - 1e-12);
  }
}

TEST_CASE("glycemic metrics on hand traces") {
  const GlycemicReport c = glycemic_metrics(std::vector<double>(100, 100.0));
  CHECK(c.mean == 100.0);
  CHECK(c.cv == 0.0);
  CHECK(c.in_70_180 == 100.0);
  CHECK(c.in_70_140 == 100.0);
  CHECK(c.below_70 == 0.0);

  const GlycemicReport r = glycemic_metrics({60.0, 100.0, 200.0, 100.0});
  CHECK(r.mean == doctest::Approx(115.0));
  CHECK(r.below_54 == 0.0);
  CHECK(r.below_70 == 25.0);
  CHECK(r.in_70_180 == 50.0);
  CHECK(r.in_70_140 == 50.0);
  CHECK(r.above_180 == 25.0);
  CHECK(r.above_250 == 0.0);
  const double pop_sd = std::sqrt((55.0 * 55.0 + 15.0 * 15.0 * 2 + 85.0 * 85.0) / 4.0);
  CHECK(r.cv == doctest::Approx(100.0 * pop_sd / 115.0));

  // Band edges: closed below, open above.
  const GlycemicReport e = glycemic_metrics({54.0, 70.0, 140.0, 180.0, 250.0});
  CHECK(e.below_54 == 0.0);
  CHECK(e.below_70 == 20.0);
  CHECK(e.in_70_140 == 20.0);
  CHECK(e.in_70_180 == 40.0);
  CHECK(e.above_180 == 40.0);
  CHECK(e.above_250 == 20.0);
}

TEST_CASE("band percentages partition every trace") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> g(30.0, 400.0);
  std::uniform_int_distribution<int> len(1, 300);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(len(rng));
    for (double& x : v) x = g(rng);
    const GlycemicReport r = glycemic_metrics(v);
    CHECK(r.below_70 + r.in_70_180 + r.above_180 == doctest::Approx(100.0));
    CHECK(r.below_54 <= r.below_70);
    CHECK(r.in_70_140 <= r.in_70_180);
    CHECK(r.above_250 <= r.above_180);
  }
}

TEST_CASE("paired t-test") {
  std::vector<double> a(10), b(10, 0.0);
  for (int i = 0; i < 10; ++i) a[i] = i + 1;
  const TTestResult r = paired_t_test(a, b);
  CHECK(r.df == 9);
  CHECK(r.t == doctest::Approx(5.744563).epsilon(1e-6));
  CHECK(r.p == doctest::Approx(2.78196e-4).epsilon(1e-4));
  const TTestResult s = paired_t_test(b, a);
  CHECK(s.t == doctest::Approx(-r.t));
  CHECK(s.p == doctest::Approx(r.p));

  const TTestResult same = paired_t_test(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);
  std::vector<double> shifted = a;
  for (double& x : shifted) x += 2.0;
  CHECK_THROWS_AS(paired_t_test(shifted, a), DegenerateTest);
  CHECK_THROWS(paired_t_test({1.0}, {2.0}));
}

TEST_CASE("t CDF against quadrature") {
  for (int df = 1; df <= 30; ++df) {
    for (double t = -10.0; t <= 10.0; t += 0.25) {
      CHECK(std::abs(student_t_cdf(t, df) - oracle::t_cdf_quadrature(t, df)) < 1e-9);
    }
  }
  CHECK(student_t_cdf(0.0, 4.0) == 0.5);
  // df = 1 is Cauchy.
  CHECK(student_t_cdf(1.0, 1.0) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("regularized incomplete beta closed forms") {
  for (double x = 0.0; x <= 1.0; x += 0.05) {
    CHECK(regularized_incomplete_beta(1.0, 1.0, x) == doctest::Approx(x).epsilon(1e-12));
    CHECK(regularized_incomplete_beta(3.0, 1.0, x) == doctest::Approx(x * x * x).epsilon(1e-12));
    CHECK(regularized_incomplete_beta(1.0, 4.0, x) ==
          doctest::Approx(1.0 - std::pow(1.0 - x, 4.0)).epsilon(1e-12));
    const double poly = 6.0 * x * x * (1 - x) * (1 - x) + 4.0 * std::pow(x, 3) * (1 - x) + std::pow(x, 4);
    CHECK(regularized_incomplete_beta(2.0, 3.0, x) == doctest::Approx(poly).epsilon(1e-12));
    CHECK(regularized_incomplete_beta(2.5, 7.0, x) ==
          doctest::Approx(1.0 - regularized_incomplete_beta(7.0, 2.5, 1.0 - x)).epsilon(1e-12));
  }
  CHECK(regularized_incomplete_beta(6.5, 6.5, 0.5) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS(regularized_incomplete_beta(0.0, 1.0, 0.5));
  CHECK_THROWS(regularized_incomplete_beta(1.0, 1.0, 1.5));
}

TEST_CASE("prediction report and tables") {
  Eigen::MatrixXd a1(2, 3), p1(2, 3), a2(2, 3), p2(2, 3);
  a1 << 100, 110, 120, 130, 140, 150;
  p1 = a1.array() + 10.0;
  a2 = a1;
  p2 = a1.array() - 20.0;
  const PredictionReport r = prediction_report({1, 2}, {a1, a2}, {p1, p2});
  CHECK(r.horizon() == 2);
  CHECK(r.mae(0, 0) == doctest::Approx(10.0));
  CHECK(r.mae(1, 1) == doctest::Approx(20.0));
  CHECK(r.step_mae(1).mean == doctest::Approx(15.0));
  CHECK(r.step_mae(1).sd == doctest::Approx(std::sqrt(50.0)));
  CHECK(r.population_mae()[1] == doctest::Approx(15.0));
  CHECK(mean_sd({4.0}).sd == 0.0);

  const auto dir = std::filesystem::temp_directory_path() / "apmpc_metrics";
  std::filesystem::create_directories(dir);
  write_prediction_table_csv(dir / "t1.csv", {{"multistep", r}, {"arx", r}});
  auto lines = [](const std::filesystem::path& p) {
    const std::string s = read_text(p);
    return std::count(s.begin(), s.end(), '\n');
  };
  CHECK(lines(dir / "t1.csv") == 1 + 2);
  CHECK(prediction_table_markdown({{"multistep", r}}).find("|") != std::string::npos);

  OutcomeComparison c;
  c.scenario = "A";
  c.subjects = {1, 2, 3};
  for (double m : {100.0, 120.0, 140.0}) {
    c.multistep.push_back(glycemic_metrics({m, m + 10.0}));
    c.arx.push_back(glycemic_metrics({m + 5.0, m + 30.0}));
  }
  write_outcome_table_csv(dir / "t2.csv", {c});
  CHECK(lines(dir / "t2.csv") == 1 + static_cast<long>(glycemic_metric_names().size()));
  write_subject_outcomes_csv(dir / "s.csv", c);
  CHECK(lines(dir / "s.csv") == 1 + 6);
  std::filesystem::remove_all(dir);
}
