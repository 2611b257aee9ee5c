#include "apmpc/dataset.hpp"
#include "apmpc/error.hpp"
#include "apmpc/meals.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace apmpc;
namespace fs = std::filesystem;

namespace {

SampledTrace ramp_trace(int n) {
  SampledTrace t;
  for (int i = 0; i < n; ++i) {
    t.t_min.push_back(15.0 * i);
    t.cgm.push_back(100.0 + i);
    t.insulin.push_back(0.01 * i);
    t.carbs.push_back(i % 7 == 0 ? 10.0 : 0.0);
  }
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("regressor layout for T = 8") {
  const SampledTrace t = ramp_trace(60);
  const PredictorState x = state_at(t, 30, 8);
  CHECK(x.size() == 75);
  CHECK(x.cgm.size() == 25);
  CHECK(x.cgm[0] == t.cgm[30]);
  CHECK(x.cgm[24] == t.cgm[6]);
  CHECK(x.insulin[0] == t.insulin[29]);
  CHECK(x.insulin[24] == t.insulin[5]);
  CHECK(x.carbs[0] == t.carbs[30]);
  CHECK(x.carbs[24] == t.carbs[6]);
}

TEST_CASE("window count matches enumeration") {
  for (int T : {1, 2, 8}) {
    for (int len : {4 * T + 1, 4 * T + 2, 4 * T + 7, 100}) {
      int expected = 0;
      for (int k = 0; k < len; ++k) {
        const bool past = k - 3 * T - 1 >= 0;
        const bool future = k + T <= len - 1;
        expected += past && future;
      }
      CHECK(window_count(len, T) == expected);
    }
  }
  CHECK(window_count(4 * 8 + 2, 8) == 1);
  CHECK_THROWS_AS(window_trace(ramp_trace(4 * 8 + 1), 8, 1, 0.0), InsufficientData);
}

TEST_CASE("windows reproduce the source trace slice") {
  const SampledTrace t = ramp_trace(100);
  const auto ws = window_trace(t, 8, 3, 0.25);
  REQUIRE(ws.size() == static_cast<std::size_t>(window_count(100, 8)));
  for (const auto& w : ws) {
    CHECK(w.subject_id == 3);
    CHECK(w.basal == 0.25);
    for (int m = 0; m < 25; ++m) CHECK(w.x.cgm[m] == t.cgm[w.k - m]);
    for (int i = 0; i < 8; ++i) {
      CHECK(w.future_y[i] == t.cgm[w.k + 1 + i]);
      CHECK(w.future_u[i] == t.insulin[w.k + i]);
    }
  }
}

TEST_CASE("open-loop bolus rule") {
  PatientParams p = make_cohort(1, 2)[0];
  p.cr = 10.0;
  const std::vector<MealEvent> meals = {{300.0, 60.0}};
  const SampledTrace t = simulate_open_loop(p, meals, 40, true, NoiseModel{}, 1);
  for (int k = 0; k < 40; ++k) {
    if (k == 20) {
      CHECK(t.insulin[k] == doctest::Approx(p.basal_rate + 6.0));
      CHECK(t.carbs[k] == 60.0);
    } else {
      CHECK(t.insulin[k] == p.basal_rate);
      CHECK(t.carbs[k] == 0.0);
    }
  }
  const SampledTrace b = simulate_open_loop(p, meals, 40, false, NoiseModel{}, 1);
  CHECK(b.insulin[20] == p.basal_rate);
}

TEST_CASE("scenario datasets") {
  const auto cohort = make_cohort(3, 4);
  const auto cfg = MealChainConfig::defaults(5);
  const auto s1 = generate_scenario(ScenarioId::kI, cohort, cfg, scenario_seeds(ScenarioId::kI, 5, 6));
  const auto s2 = generate_scenario(ScenarioId::kII, cohort, cfg, scenario_seeds(ScenarioId::kII, 5, 6));
  const auto s3 = generate_scenario(ScenarioId::kIII, cohort, cfg, scenario_seeds(ScenarioId::kIII, 5, 6));
  REQUIRE(s1.subjects.size() == 3);
  for (const auto& s : s1.subjects) {
    CHECK(s.trace.size() == 28 * 96);
    double lo = 1e9, hi = -1e9;
    for (double u : s.trace.insulin) {
      lo = std::min(lo, u);
      hi = std::max(hi, u);
    }
    CHECK(lo == s.params.basal_rate);
    CHECK(hi == s.params.basal_rate);
    CHECK_NOTHROW(s.trace.validate());
    for (double y : s.trace.cgm) {
      CHECK(y >= 0.0);
      CHECK(y <= 500.0);
    }
    for (std::size_t k = 1; k < s.trace.t_min.size(); ++k) {
      CHECK(s.trace.t_min[k] - s.trace.t_min[k - 1] == 15.0);
    }
  }
  for (const auto& s : s2.subjects) {
    for (int k = 0; k < s.trace.size(); ++k) {
      if (s.trace.carbs[k] == 0.0) {
        CHECK(s.trace.insulin[k] == s.params.basal_rate);
      } else {
        CHECK(s.trace.insulin[k] ==
              doctest::Approx(s.params.basal_rate + quantize_pump(s.trace.carbs[k] / s.params.cr)));
      }
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(s1.subjects[i].meals == s2.subjects[i].meals);
    CHECK(s2.subjects[i].meals != s3.subjects[i].meals);
  }
  const auto again = generate_scenario(ScenarioId::kII, cohort, cfg, scenario_seeds(ScenarioId::kII, 5, 6));
  for (std::size_t i = 0; i < 3; ++i) CHECK(again.subjects[i].trace == s2.subjects[i].trace);
  CHECK_THROWS(generate_scenario(ScenarioId::kI, {}, cfg, scenario_seeds(ScenarioId::kI, 5, 6)));
}

TEST_CASE("dataset persistence round trip is exact and byte stable") {
  const auto cohort = make_cohort(2, 9);
  const auto ds = generate_scenario(ScenarioId::kII, cohort, MealChainConfig::defaults(2),
                                    scenario_seeds(ScenarioId::kII, 2, 3), 3);
  const fs::path dir = fs::temp_directory_path() / "apmpc_ds_rt";
  const fs::path dir2 = fs::temp_directory_path() / "apmpc_ds_rt2";
  fs::remove_all(dir);
  fs::remove_all(dir2);
  save_dataset(dir, ds);
  const auto back = load_dataset(dir);
  CHECK(back.id == ds.id);
  CHECK(back.days == ds.days);
  CHECK(back.seeds.meals == ds.seeds.meals);
  CHECK(back.seeds.noise == ds.seeds.noise);
  REQUIRE(back.subjects.size() == ds.subjects.size());
  for (std::size_t i = 0; i < ds.subjects.size(); ++i) {
    CHECK(back.subjects[i].trace == ds.subjects[i].trace);
    CHECK(back.subjects[i].meals == ds.subjects[i].meals);
    CHECK(back.subjects[i].params.basal_rate == ds.subjects[i].params.basal_rate);
    CHECK(back.subjects[i].params.cr == ds.subjects[i].params.cr);
    CHECK(back.subjects[i].params.ode.gut_time == ds.subjects[i].params.ode.gut_time);
  }
  save_dataset(dir2, back);
  for (const auto& e : fs::directory_iterator(dir)) {
    CHECK(slurp(e.path()) == slurp(dir2 / e.path().filename()));
  }
  const std::string header = slurp(dir / "subject_01.csv").substr(0, 40);
  CHECK(header.rfind("t_min,y_cgm_mgdl,u_ins_U,d_cho_g", 0) == 0);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("scenario ids") {
  CHECK(to_string(ScenarioId::kIII) == "III");
  CHECK(parse_scenario_id("II") == ScenarioId::kII);
  CHECK_THROWS(parse_scenario_id("IV"));
}
