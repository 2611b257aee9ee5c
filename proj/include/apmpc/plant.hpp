#pragma once

// Virtual patient: Bergman minimal model with absolute remote insulin action,
// two-compartment subcutaneous insulin absorption, two-compartment gut
// absorption and renal excretion above 180 mg/dL. Time unit is the minute.
//
//   dG/dt  = -(S_G + X) G + EGP/V_G + Ra/V_G - renal(G)
//   dX/dt  = -p2 X + p2 S_I s I
//   dI/dt  = S2 / (tau_I V_I) - k_e I
//   dS1/dt = u - S1/tau_I
//   dS2/dt = (S1 - S2)/tau_I
//   dQ1/dt = -Q1/tau_G             (meals enter Q1 as impulses)
//   dQ2/dt = (Q1 - Q2)/tau_G
//   Ra     = f Q2/tau_G
//
// s is the insulin-sensitivity scale (1 nominal, 0.75 for added resistance).

#include "apmpc/error.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

namespace apmpc {

inline constexpr double kTickMinutes = 15.0;
inline constexpr int kTicksPerDay = 96;
inline constexpr double kCgmMin = 0.0;
inline constexpr double kCgmMax = 500.0;
inline constexpr double kPumpResolution = 0.05;

enum PlantIndex : int {
  kGlucose = 0,     // mg/dL
  kInsulinAction,   // 1/min
  kPlasmaInsulin,   // mU/L
  kSubcut1,         // mU
  kSubcut2,         // mU
  kGut1,            // mg
  kGut2,            // mg
  kPlantStates
};

template <typename Scalar>
using PlantVector = Eigen::Matrix<Scalar, kPlantStates, 1>;

struct OdeParams {
  double glucose_volume = 1.6;          // dL/kg
  double glucose_effectiveness = 0.002; // 1/min
  double endogenous_production = 1.8;   // mg/kg/min
  double insulin_sensitivity = 5.0e-4;  // (1/min)/(mU/L)
  double insulin_action_rate = 0.025;   // 1/min
  double insulin_volume = 0.12;         // L/kg
  double insulin_clearance = 0.138;     // 1/min
  double subcut_time = 55.0;            // min
  double gut_time = 40.0;               // min
  double carb_bioavailability = 0.8;
  double renal_rate = 0.003;            // 1/min
  double renal_threshold = 180.0;       // mg/dL
};

struct PatientParams {
  int subject_id = 1;
  double body_mass = 70.0;                 // kg
  double basal_rate = 0.25;                // U per 15-min tick
  double cr = 10.0;                        // g/U
  double insulin_sensitivity_scale = 1.0;
  OdeParams ode;
  double equilibrium_glucose = 120.0;      // mg/dL

  void validate() const;
};

struct PlantState {
  PlantVector<double> x = PlantVector<double>::Zero();
  double clock = 0.0;  // minutes since simulation start

  double glucose() const { return x[kGlucose]; }
};

// Right-hand side of the ODE with insulin infusion rate in mU/min.
template <typename Scalar>
PlantVector<Scalar> plant_derivative(const PlantVector<Scalar>& x, const PatientParams& p,
                                     Scalar insulin_rate_mu_per_min) {
  const OdeParams& o = p.ode;
  const Scalar vg = Scalar(o.glucose_volume * p.body_mass);
  const Scalar vi = Scalar(o.insulin_volume * p.body_mass);
  const Scalar ra = Scalar(o.carb_bioavailability) * x[kGut2] / Scalar(o.gut_time);
  const Scalar excess = x[kGlucose] - Scalar(o.renal_threshold);
  const Scalar renal = excess > Scalar(0) ? Scalar(o.renal_rate) * excess : Scalar(0);

  PlantVector<Scalar> dx;
  dx[kGlucose] = -(Scalar(o.glucose_effectiveness) + x[kInsulinAction]) * x[kGlucose] +
                 Scalar(o.endogenous_production * p.body_mass) / vg + ra / vg - renal;
  dx[kInsulinAction] = Scalar(o.insulin_action_rate) *
                       (Scalar(o.insulin_sensitivity * p.insulin_sensitivity_scale) *
                            x[kPlasmaInsulin] -
                        x[kInsulinAction]);
  dx[kPlasmaInsulin] = x[kSubcut2] / (Scalar(o.subcut_time) * vi) -
                       Scalar(o.insulin_clearance) * x[kPlasmaInsulin];
  dx[kSubcut1] = insulin_rate_mu_per_min - x[kSubcut1] / Scalar(o.subcut_time);
  dx[kSubcut2] = (x[kSubcut1] - x[kSubcut2]) / Scalar(o.subcut_time);
  dx[kGut1] = -x[kGut1] / Scalar(o.gut_time);
  dx[kGut2] = (x[kGut1] - x[kGut2]) / Scalar(o.gut_time);
  return dx;
}

// Insulin in U per tick to the infusion rate the ODE expects.
inline double insulin_rate(double units, double dt_min) { return units * 1000.0 / dt_min; }

// Advances the plant by dt minutes. `insulin` units are infused uniformly over
// dt; `carbs` grams enter the gut at the start of the interval. dt must divide
// 15 evenly. RK4 with substeps no longer than `max_substep` minutes.
PlantState step_patient(const PlantState& state, const PatientParams& params, double insulin,
                        double carbs, double dt = kTickMinutes, double max_substep = 1.0);

// Fasting steady state under constant basal infusion (Newton, at most 200
// iterations). Throws CohortError when it does not converge.
PlantState equilibrium_state(const PatientParams& params);

// Returns a copy with the sensitivity scale replaced and the equilibrium
// glucose recomputed for the same basal rate.
PatientParams with_insulin_sensitivity(const PatientParams& params, double scale);

// Floors a command to the pump grid.
double quantize_pump(double units);

struct NoiseModel {
  double std_dev = 2.0;          // marginal, mg/dL
  double autocorrelation = 0.7;  // per 15-min tick
};

// AR(1) additive sensor error, clipped to the CGM range. The error sequence
// depends only on the seed, so two simulations sharing a seed see identical
// sensor noise whatever the plant does.
class CgmSensor {
 public:
  CgmSensor(NoiseModel noise, std::uint64_t seed);

  double read(const PlantState& state);
  double current_error() const { return error_; }

 private:
  NoiseModel noise_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  double error_ = 0.0;
  bool started_ = false;
};

double read_cgm(const PlantState& state, const NoiseModel& noise, std::uint64_t rng_seed);

struct CohortOptions {
  double cv = 0.2;                        // log-normal coefficient of variation
  double target_glucose = 120.0;          // nominal fasting glucose, mg/dL
  double target_cv = 0.1;
  PatientParams nominal{};
};

std::vector<PatientParams> make_cohort(int n, std::uint64_t seed, const CohortOptions& opts = {});

// Derives the carbohydrate ratio from the linearised model: grams whose
// glucose area matches the area removed by one unit of insulin.
double derive_carb_ratio(const PatientParams& params);

// Line-oriented cohort format; see README ("Cohort file").
void write_cohort(std::ostream& out, const std::vector<PatientParams>& cohort);
std::vector<PatientParams> read_cohort(std::istream& in);

// Deterministic seed mixing (splitmix64) used to derive per-subject streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace apmpc
