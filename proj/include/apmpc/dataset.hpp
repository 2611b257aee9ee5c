#pragma once

// Open-loop identification and validation data. Scenario I runs basal only;
// II and III add a meal bolus of grams/CR at each meal tick and differ only in
// the meal seed.

#include "apmpc/meals.hpp"
#include "apmpc/plant.hpp"
#include "apmpc/predictor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace apmpc {

enum class ScenarioId { kI, kII, kIII };

std::string to_string(ScenarioId id);
ScenarioId parse_scenario_id(std::string_view text);

// One sample per 15-min tick.
struct SampledTrace {
  std::vector<double> t_min;
  std::vector<double> cgm;      // mg/dL
  std::vector<double> insulin;  // U delivered over the tick
  std::vector<double> carbs;    // g announced at the tick

  int size() const { return static_cast<int>(t_min.size()); }
  void validate() const;
  bool operator==(const SampledTrace&) const = default;
};

struct SubjectTrace {
  PatientParams params;
  SampledTrace trace;
  std::vector<MealEvent> meals;
  std::uint64_t meal_seed = 0;
  std::uint64_t noise_seed = 0;
};

struct ScenarioSeeds {
  std::uint64_t meals = 0;
  std::uint64_t noise = 0;
};

// Scenario I and II share meal realizations; III draws its own. Noise streams
// are distinct per scenario.
ScenarioSeeds scenario_seeds(ScenarioId id, std::uint64_t meal_seed, std::uint64_t noise_seed);

struct ScenarioDataset {
  static constexpr int kFormatVersion = 1;

  ScenarioId id = ScenarioId::kI;
  int days = 28;
  ScenarioSeeds seeds;
  std::vector<SubjectTrace> subjects;

  const SubjectTrace& subject(int subject_id) const;
};

ScenarioDataset generate_scenario(ScenarioId id, const std::vector<PatientParams>& cohort,
                                  const MealChainConfig& meal_config, ScenarioSeeds seeds,
                                  int days = 28, const NoiseModel& noise = {});

// Open-loop run from the fasting equilibrium. When `bolus` is set, each meal
// tick adds quantize_pump(grams / cr) to the basal.
SampledTrace simulate_open_loop(const PatientParams& params, const std::vector<MealEvent>& meals,
                                int ticks, bool bolus, const NoiseModel& noise,
                                std::uint64_t noise_seed);

struct Window {
  PredictorState x;
  Eigen::VectorXd future_u;  // u_k .. u_{k+T-1}
  Eigen::VectorXd future_y;  // y_{k+1} .. y_{k+T}
  double basal = 0.0;
  int subject_id = 0;
  int k = 0;
};

// x_k from a trace; requires 3T+1 <= k.
PredictorState state_at(const SampledTrace& trace, int k, int horizon);

// Number of windows a trace of `length` samples yields: k runs over
// [3T+1, length-1-T].
int window_count(int length, int horizon);

std::vector<Window> window_trace(const SampledTrace& trace, int horizon, int subject_id,
                                 double basal);
std::vector<Window> window_dataset(const ScenarioDataset& ds, int horizon);

// Directory layout: manifest.txt, cohort.txt, subject_NN.csv, meals_NN.csv.
void save_dataset(const std::filesystem::path& dir, const ScenarioDataset& ds);
ScenarioDataset load_dataset(const std::filesystem::path& dir);

void write_trace_csv(const std::filesystem::path& path, const SampledTrace& trace);
SampledTrace read_trace_csv(const std::filesystem::path& path);

}  // namespace apmpc
