#include "apmpc/error.hpp"
#include "apmpc/plant.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace apmpc;

namespace {

// Reference integrator: classic RK4 at 0.1 min, zero-order hold on insulin.
PlantState oracle_step(PlantState s, const PatientParams& p, double insulin, double carbs,
                       double minutes) {
  s.x[kGut1] += carbs * 1000.0;
  const double rate = insulin_rate(insulin, kTickMinutes);
  const double h = 0.1;
  const int n = static_cast<int>(std::lround(minutes / h));
  for (int i = 0; i < n; ++i) {
    const auto& x = s.x;
    const auto k1 = plant_derivative<double>(x, p, rate);
    const auto k2 = plant_derivative<double>(x + 0.5 * h * k1, p, rate);
    const auto k3 = plant_derivative<double>(x + 0.5 * h * k2, p, rate);
    const auto k4 = plant_derivative<double>(x + h * k3, p, rate);
    s.x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  s.clock += minutes;
  return s;
}

PatientParams subject() { return make_cohort(3, 11)[0]; }

}  // namespace

TEST_CASE("equilibrium is a fixed point of one basal tick") {
  const PatientParams p = subject();
  const PlantState s0 = equilibrium_state(p);
  CHECK(std::abs(s0.glucose() - p.equilibrium_glucose) < 1e-9);
  const PlantState s1 = step_patient(s0, p, p.basal_rate, 0.0);
  CHECK(std::abs(s1.glucose() - s0.glucose()) < 1e-6);
  CHECK(s1.clock == doctest::Approx(15.0));
}

TEST_CASE("meal raises and bolus lowers glucose against the fine-step oracle") {
  const PatientParams p = subject();
  const PlantState s0 = equilibrium_state(p);

  PlantState meal = s0;
  meal = step_patient(meal, p, p.basal_rate, 50.0);
  for (int i = 0; i < 3; ++i) meal = step_patient(meal, p, p.basal_rate, 0.0);
  PlantState ref = oracle_step(s0, p, p.basal_rate, 50.0, 15.0);
  for (int i = 0; i < 3; ++i) ref = oracle_step(ref, p, p.basal_rate, 0.0, 15.0);
  CHECK(ref.glucose() > s0.glucose());
  CHECK(meal.glucose() > s0.glucose());
  CHECK(std::abs(meal.glucose() - ref.glucose()) < 1e-3);

  PlantState bolus = step_patient(s0, p, p.basal_rate + 2.0, 0.0);
  PlantState ref2 = oracle_step(s0, p, p.basal_rate + 2.0, 0.0, 15.0);
  for (int i = 0; i < 5; ++i) {
    bolus = step_patient(bolus, p, p.basal_rate, 0.0);
    ref2 = oracle_step(ref2, p, p.basal_rate, 0.0, 15.0);
  }
  CHECK(ref2.glucose() < s0.glucose());
  CHECK(bolus.glucose() < s0.glucose());
  CHECK(std::abs(bolus.glucose() - ref2.glucose()) < 1e-3);
}

TEST_CASE("step_patient rejects bad inputs") {
  const PatientParams p = subject();
  const PlantState s0 = equilibrium_state(p);
  CHECK_THROWS_AS(step_patient(s0, p, -0.1, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(step_patient(s0, p, 0.1, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(step_patient(s0, p, 0.1, 0.0, 7.0), std::invalid_argument);
  CHECK_NOTHROW(step_patient(s0, p, 0.1, 0.0, 5.0));
}

TEST_CASE("divergence names subject and time") {
  const PatientParams p = subject();
  PlantState s = equilibrium_state(p);
  s.x[kGlucose] = 995.0;
  bool thrown = false;
  try {
    for (int i = 0; i < 20; ++i) s = step_patient(s, p, 0.0, 120.0);
  } catch (const SimulationDiverged& e) {
    thrown = true;
    CHECK(std::string(e.what()).find("subject") != std::string::npos);
  }
  CHECK(thrown);
}

TEST_CASE("cgm reading: noiseless, deterministic, marginal std") {
  const PatientParams p = subject();
  const PlantState s0 = equilibrium_state(p);
  CHECK(read_cgm(s0, NoiseModel{0.0, 0.7}, 3) == doctest::Approx(s0.glucose()).epsilon(1e-15));
  CHECK(read_cgm(s0, NoiseModel{}, 17) == read_cgm(s0, NoiseModel{}, 17));

  CgmSensor sensor(NoiseModel{2.0, 0.7}, 99);
  const int n = 10000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = sensor.read(s0) - s0.glucose();
    sum += e;
    sum2 += e * e;
  }
  const double mean = sum / n;
  const double sd = std::sqrt((sum2 - n * mean * mean) / (n - 1));
  CHECK(std::abs(sd - 2.0) < 0.2);
}

TEST_CASE("cgm reading is clipped to the sensor range") {
  const PatientParams p = subject();
  PlantState s = equilibrium_state(p);
  s.x[kGlucose] = 800.0;
  CHECK(read_cgm(s, NoiseModel{}, 1) == 500.0);
}

TEST_CASE("cohort: deterministic, nominal collapse, equilibrium holds 48 h") {
  const auto a = make_cohort(10, 42);
  const auto b = make_cohort(10, 42);
  REQUIRE(a.size() == 10);
  std::ostringstream sa, sb;
  write_cohort(sa, a);
  write_cohort(sb, b);
  CHECK(sa.str() == sb.str());

  CohortOptions flat;
  flat.cv = 0.0;
  flat.target_cv = 0.0;
  const auto one = make_cohort(1, 5, flat);
  const OdeParams& o = one[0].ode;
  const OdeParams n{};
  CHECK(o.glucose_volume == n.glucose_volume);
  CHECK(o.insulin_sensitivity == n.insulin_sensitivity);
  CHECK(o.gut_time == n.gut_time);
  CHECK(one[0].body_mass == PatientParams{}.body_mass);

  for (const auto& p : a) {
    PlantState s = equilibrium_state(p);
    double worst = 0.0;
    for (int k = 0; k < 48 * 4; ++k) {
      s = step_patient(s, p, p.basal_rate, 0.0);
      worst = std::max(worst, std::abs(s.glucose() - p.equilibrium_glucose));
    }
    CHECK(worst < 1.0);
    CHECK(p.basal_rate > 0.0);
    CHECK(p.cr > 0.0);
  }
}

TEST_CASE("cohort file round trip") {
  const auto a = make_cohort(4, 8);
  std::stringstream ss;
  write_cohort(ss, a);
  const auto b = read_cohort(ss);
  REQUIRE(b.size() == a.size());
  std::ostringstream again;
  write_cohort(again, b);
  CHECK(again.str() == ss.str());
}

TEST_CASE("monotone in insulin and carbs 60 min ahead") {
  const PatientParams p = subject();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ins(0.0, 3.0), cho(0.0, 80.0), warm(0.0, 10.0);
  for (int trial = 0; trial < 40; ++trial) {
    PlantState s = equilibrium_state(p);
    for (int k = 0; k < 6; ++k) s = step_patient(s, p, warm(rng) / 4.0, k == 0 ? cho(rng) : 0.0);
    const double u = ins(rng), d = cho(rng), extra = 0.5 + ins(rng);
    auto ahead = [&](double uu, double dd) {
      PlantState t = step_patient(s, p, uu, dd);
      for (int k = 0; k < 3; ++k) t = step_patient(t, p, u, 0.0);
      return t.glucose();
    };
    CHECK(ahead(u + extra, d) <= ahead(u, d) + 1e-9);
    CHECK(ahead(u, d + 20.0) >= ahead(u, d) - 1e-9);
  }
}

TEST_CASE("gut absorbs the ingested carbohydrate mass") {
  const PatientParams p = subject();
  PlantState s = equilibrium_state(p);
  s.x[kGut1] += 60.0 * 1000.0;
  const double rate = insulin_rate(p.basal_rate, kTickMinutes);
  double absorbed = 0.0;
  const double h = 0.5;
  for (int i = 0; i < static_cast<int>(24 * 60 / h); ++i) {
    const double before = s.x[kGut2] / p.ode.gut_time;
    const auto& x = s.x;
    const auto k1 = plant_derivative<double>(x, p, rate);
    const auto k2 = plant_derivative<double>(x + 0.5 * h * k1, p, rate);
    const auto k3 = plant_derivative<double>(x + 0.5 * h * k2, p, rate);
    const auto k4 = plant_derivative<double>(x + h * k3, p, rate);
    s.x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    absorbed += 0.5 * h * (before + s.x[kGut2] / p.ode.gut_time);
  }
  CHECK(std::abs(absorbed - 60000.0) / 60000.0 < 0.01);
}

TEST_CASE("halving the substep barely moves a 24 h trajectory") {
  const PatientParams p = subject();
  PlantState a = equilibrium_state(p), b = a;
  double worst = 0.0;
  for (int k = 0; k < 96; ++k) {
    const double d = (k == 32 || k == 52 || k == 76) ? 70.0 : 0.0;
    const double u = p.basal_rate + (d > 0.0 ? d / p.cr : 0.0);
    a = step_patient(a, p, u, d, kTickMinutes, 1.0);
    b = step_patient(b, p, u, d, kTickMinutes, 0.5);
    worst = std::max(worst, std::abs(a.glucose() - b.glucose()));
  }
  CHECK(worst < 0.1);
}

TEST_CASE("insulin resistance raises the fasting level") {
  const PatientParams p = subject();
  const PatientParams r = with_insulin_sensitivity(p, 0.75);
  CHECK(r.insulin_sensitivity_scale == 0.75);
  CHECK(r.basal_rate == p.basal_rate);
  CHECK(r.equilibrium_glucose > p.equilibrium_glucose);
  const PlantState s = equilibrium_state(r);
  CHECK(std::abs(step_patient(s, r, r.basal_rate, 0.0).glucose() - r.equilibrium_glucose) < 1e-6);
}

TEST_CASE("pump grid floors to 0.05 U") {
  CHECK(quantize_pump(1.234) == doctest::Approx(1.2));
  CHECK(quantize_pump(0.05) == doctest::Approx(0.05));
  CHECK(quantize_pump(0.049) == 0.0);
  CHECK(quantize_pump(-1.0) == 0.0);
  CHECK(quantize_pump(25.0) == doctest::Approx(25.0));
}

TEST_CASE("seed mixing separates streams") {
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
  CHECK(mix_seed(1, 0) != mix_seed(2, 0));
  CHECK(mix_seed(7, 3) == mix_seed(7, 3));
}
