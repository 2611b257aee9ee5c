#include "apmpc/plant.hpp"

#include "apmpc/io.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace apmpc {

void PatientParams::validate() const {
  if (!(basal_rate > 0.0)) throw CohortError("basal_rate must be > 0");
  if (!(cr > 0.0)) throw CohortError("cr must be > 0");
  if (!(body_mass > 0.0)) throw CohortError("body_mass must be > 0");
  if (!(insulin_sensitivity_scale > 0.0 && insulin_sensitivity_scale <= 2.0)) {
    throw CohortError("insulin_sensitivity_scale must lie in (0, 2]");
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

void check_state(const PlantVector<double>& x, const PatientParams& p, double clock) {
  const double g = x[kGlucose];
  if (!std::isfinite(g) || g <= 0.0 || g >= 1000.0) {
    throw SimulationDiverged(p.subject_id, clock, g);
  }
}

using Residual = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// Newton with a central-difference Jacobian. Returns the root or throws.
Eigen::VectorXd newton(const Residual& f, Eigen::VectorXd z, const char* what) {
  constexpr int kMaxIterations = 200;
  for (int it = 0; it < kMaxIterations; ++it) {
    const Eigen::VectorXd r = f(z);
    const double scale = 1.0 + z.cwiseAbs().maxCoeff();
    if (r.cwiseAbs().maxCoeff() < 1e-13 * scale) return z;
    Eigen::MatrixXd jac(r.size(), z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double h = 1e-6 * (1.0 + std::abs(z[i]));
      Eigen::VectorXd zp = z, zm = z;
      zp[i] += h;
      zm[i] -= h;
      jac.col(i) = (f(zp) - f(zm)) / (2.0 * h);
    }
    const Eigen::VectorXd step = jac.colPivHouseholderQr().solve(r);
    if (!step.allFinite()) break;
    z -= step;
    if (step.cwiseAbs().maxCoeff() < 1e-14 * scale) return z;
  }
  throw CohortError(std::string(what) + ": equilibration did not converge in 200 iterations");
}

// Non-glucose fasting states for a given basal infusion, used as a starting
// point for Newton.
PlantVector<double> fasting_guess(const PatientParams& p, double rate, double glucose) {
  const auto& o = p.ode;
  PlantVector<double> x = PlantVector<double>::Zero();
  x[kSubcut1] = rate * o.subcut_time;
  x[kSubcut2] = x[kSubcut1];
  x[kPlasmaInsulin] = rate / (o.insulin_volume * p.body_mass * o.insulin_clearance);
  x[kInsulinAction] = o.insulin_sensitivity * p.insulin_sensitivity_scale * x[kPlasmaInsulin];
  x[kGlucose] = glucose;
  return x;
}

// Basal rate (U/tick) that puts the fasting steady state at `target` mg/dL.
double solve_basal_for_target(const PatientParams& p, double target) {
  const double rate0 = insulin_rate(p.basal_rate, kTickMinutes);
  PlantVector<double> guess = fasting_guess(p, rate0, target);
  Eigen::VectorXd z(5);
  z << guess[kInsulinAction], guess[kPlasmaInsulin], guess[kSubcut1], guess[kSubcut2], rate0;
  auto residual = [&](const Eigen::VectorXd& v) {
    PlantVector<double> x = PlantVector<double>::Zero();
    x[kGlucose] = target;
    x[kInsulinAction] = v[0];
    x[kPlasmaInsulin] = v[1];
    x[kSubcut1] = v[2];
    x[kSubcut2] = v[3];
    const PlantVector<double> dx = plant_derivative<double>(x, p, v[4]);
    Eigen::VectorXd r(5);
    r << dx[kGlucose], dx[kInsulinAction], dx[kPlasmaInsulin], dx[kSubcut1], dx[kSubcut2];
    return r;
  };
  const Eigen::VectorXd sol = newton(residual, z, "basal solve");
  const double units = sol[4] * kTickMinutes / 1000.0;
  if (!(units > 0.0)) {
    throw CohortError("subject " + std::to_string(p.subject_id) +
                      ": no positive basal rate reaches the target glucose");
  }
  return units;
}

}  // namespace

PlantState step_patient(const PlantState& state, const PatientParams& params, double insulin,
                        double carbs, double dt, double max_substep) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  const double ratio = kTickMinutes / dt;
  if (std::abs(ratio - std::round(ratio)) > 1e-9) {
    throw std::invalid_argument("dt must divide 15 minutes evenly");
  }
  if (!(insulin >= 0.0) || !(carbs >= 0.0) || !std::isfinite(insulin) || !std::isfinite(carbs)) {
    throw std::invalid_argument("insulin and carbs must be finite and non-negative");
  }
  if (!(max_substep > 0.0)) throw std::invalid_argument("substep must be positive");

  PlantState next = state;
  next.x[kGut1] += carbs * 1000.0;
  const double rate = insulin_rate(insulin, dt);
  const int n = static_cast<int>(std::ceil(dt / max_substep - 1e-12));
  const double h = dt / n;
  for (int i = 0; i < n; ++i) {
    const PlantVector<double>& x = next.x;
    const PlantVector<double> k1 = plant_derivative<double>(x, params, rate);
    const PlantVector<double> k2 = plant_derivative<double>(x + 0.5 * h * k1, params, rate);
    const PlantVector<double> k3 = plant_derivative<double>(x + 0.5 * h * k2, params, rate);
    const PlantVector<double> k4 = plant_derivative<double>(x + h * k3, params, rate);
    next.x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    next.clock = state.clock + (i + 1) * h;
    check_state(next.x, params, next.clock);
  }
  next.clock = state.clock + dt;
  return next;
}

PlantState equilibrium_state(const PatientParams& params) {
  const double rate = insulin_rate(params.basal_rate, kTickMinutes);
  const PlantVector<double> guess = fasting_guess(params, rate, params.equilibrium_glucose);
  auto residual = [&](const Eigen::VectorXd& v) {
    PlantVector<double> x = PlantVector<double>::Zero();
    x.head<5>() = v;
    return Eigen::VectorXd(plant_derivative<double>(x, params, rate).head<5>());
  };
  const Eigen::VectorXd sol =
      newton(residual, Eigen::VectorXd(guess.head<5>()), "fasting equilibrium");
  PlantState state;
  state.x.head<5>() = sol;
  return state;
}

PatientParams with_insulin_sensitivity(const PatientParams& params, double scale) {
  PatientParams out = params;
  out.insulin_sensitivity_scale = scale;
  out.validate();
  out.equilibrium_glucose = equilibrium_state(out).glucose();
  return out;
}

double quantize_pump(double units) {
  if (!(units > 0.0)) return 0.0;
  const double steps = std::floor(units / kPumpResolution + 1e-7);
  return steps * kPumpResolution;
}

CgmSensor::CgmSensor(NoiseModel noise, std::uint64_t seed) : noise_(noise), rng_(seed) {}

double CgmSensor::read(const PlantState& state) {
  const double w = normal_(rng_);
  if (!started_) {
    error_ = noise_.std_dev * w;
    started_ = true;
  } else {
    const double phi = noise_.autocorrelation;
    error_ = phi * error_ + noise_.std_dev * std::sqrt(1.0 - phi * phi) * w;
  }
  return std::clamp(state.glucose() + error_, kCgmMin, kCgmMax);
}

double read_cgm(const PlantState& state, const NoiseModel& noise, std::uint64_t rng_seed) {
  CgmSensor sensor(noise, rng_seed);
  return sensor.read(state);
}

double derive_carb_ratio(const PatientParams& params) {
  const PlantState eq = equilibrium_state(params);
  const double rate = insulin_rate(params.basal_rate, kTickMinutes);
  Eigen::Matrix<double, kPlantStates, kPlantStates> jac;
  for (int i = 0; i < kPlantStates; ++i) {
    const double h = 1e-6 * (1.0 + std::abs(eq.x[i]));
    PlantVector<double> xp = eq.x, xm = eq.x;
    xp[i] += h;
    xm[i] -= h;
    jac.col(i) = (plant_derivative<double>(xp, params, rate) -
                  plant_derivative<double>(xm, params, rate)) /
                 (2.0 * h);
  }
  // Area under the glucose impulse response of the linearisation: -J^{-1} x0.
  const auto lu = jac.fullPivLu();
  PlantVector<double> unit_insulin = PlantVector<double>::Zero();
  unit_insulin[kSubcut1] = 1000.0;
  PlantVector<double> unit_carb = PlantVector<double>::Zero();
  unit_carb[kGut1] = 1000.0;
  const double area_insulin = -lu.solve(unit_insulin)[kGlucose];
  const double area_carb = -lu.solve(unit_carb)[kGlucose];
  if (!(area_insulin < 0.0 && area_carb > 0.0)) {
    throw CohortError("subject " + std::to_string(params.subject_id) +
                      ": linearised insulin/carb gains have unexpected signs");
  }
  return -area_insulin / area_carb;
}

std::vector<PatientParams> make_cohort(int n, std::uint64_t seed, const CohortOptions& opts) {
  if (n < 1) throw std::invalid_argument("cohort size must be >= 1");
  std::vector<PatientParams> cohort;
  cohort.reserve(n);
  const double sigma = std::sqrt(std::log1p(opts.cv * opts.cv));
  const double sigma_target = std::sqrt(std::log1p(opts.target_cv * opts.target_cv));
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> normal(0.0, 1.0);
    auto lognormal = [&](double nominal, double s) { return nominal * std::exp(s * normal(rng)); };

    PatientParams p = opts.nominal;
    p.subject_id = i + 1;
    p.insulin_sensitivity_scale = 1.0;
    p.body_mass = lognormal(p.body_mass, sigma);
    auto& o = p.ode;
    o.glucose_volume = lognormal(o.glucose_volume, sigma);
    o.glucose_effectiveness = lognormal(o.glucose_effectiveness, sigma);
    o.endogenous_production = lognormal(o.endogenous_production, sigma);
    o.insulin_sensitivity = lognormal(o.insulin_sensitivity, sigma);
    o.insulin_action_rate = lognormal(o.insulin_action_rate, sigma);
    o.insulin_volume = lognormal(o.insulin_volume, sigma);
    o.insulin_clearance = lognormal(o.insulin_clearance, sigma);
    o.subcut_time = lognormal(o.subcut_time, sigma);
    o.gut_time = lognormal(o.gut_time, sigma);
    const double target = lognormal(opts.target_glucose, sigma_target);

    // Re-equilibrate: continuous basal for the target, snapped to the pump grid,
    // then the fasting glucose that grid rate actually holds.
    const double exact_basal = solve_basal_for_target(p, target);
    p.basal_rate = std::max(1.0, std::round(exact_basal / kPumpResolution)) * kPumpResolution;
    p.equilibrium_glucose = target;
    p.equilibrium_glucose = equilibrium_state(p).glucose();
    p.cr = derive_carb_ratio(p);
    p.validate();
    cohort.push_back(p);
  }
  return cohort;
}

namespace {

// Stable key order for the cohort file.
std::vector<std::pair<std::string, double*>> cohort_fields(PatientParams& p, double& id) {
  auto& o = p.ode;
  return {{"subject_id", &id},
          {"body_mass", &p.body_mass},
          {"basal_rate", &p.basal_rate},
          {"cr", &p.cr},
          {"insulin_sensitivity_scale", &p.insulin_sensitivity_scale},
          {"equilibrium_glucose", &p.equilibrium_glucose},
          {"glucose_volume", &o.glucose_volume},
          {"glucose_effectiveness", &o.glucose_effectiveness},
          {"endogenous_production", &o.endogenous_production},
          {"insulin_sensitivity", &o.insulin_sensitivity},
          {"insulin_action_rate", &o.insulin_action_rate},
          {"insulin_volume", &o.insulin_volume},
          {"insulin_clearance", &o.insulin_clearance},
          {"subcut_time", &o.subcut_time},
          {"gut_time", &o.gut_time},
          {"carb_bioavailability", &o.carb_bioavailability},
          {"renal_rate", &o.renal_rate},
          {"renal_threshold", &o.renal_threshold}};
}

constexpr const char* kCohortHeader = "# apmpc-cohort v1";

}  // namespace

void write_cohort(std::ostream& out, const std::vector<PatientParams>& cohort) {
  out << kCohortHeader << '\n';
  for (PatientParams p : cohort) {
    double id = p.subject_id;
    bool first = true;
    for (const auto& [key, ptr] : cohort_fields(p, id)) {
      if (!first) out << ' ';
      first = false;
      out << key << '=' << format_double(*ptr);
    }
    out << '\n';
  }
}

std::vector<PatientParams> read_cohort(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCohortHeader) {
    throw FormatError("unsupported cohort header");
  }
  std::vector<PatientParams> cohort;
  while (std::getline(in, line)) {
    if (trim(line).empty() || trim(line).front() == '#') continue;
    std::map<std::string, double> kv;
    for (const auto& token : split(trim(line), ' ')) {
      if (token.empty()) continue;
      const auto eq = token.find('=');
      if (eq == std::string::npos) throw FormatError("bad cohort token '" + token + "'");
      kv[token.substr(0, eq)] = parse_double(std::string_view(token).substr(eq + 1));
    }
    PatientParams p;
    double id = 0.0;
    for (const auto& [key, ptr] : cohort_fields(p, id)) {
      auto it = kv.find(key);
      if (it == kv.end()) throw FormatError("cohort record missing '" + key + "'");
      *ptr = it->second;
    }
    p.subject_id = static_cast<int>(id);
    p.validate();
    cohort.push_back(p);
  }
  return cohort;
}

}  // namespace apmpc
