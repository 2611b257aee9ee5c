#pragma once

// End-to-end orchestration shared by the CLI and the acceptance runner.
//
// Layout under RunConfig::out:
//   data/scenario_{I,II,III}/         datasets
//   models/                           predictor bundle, ARX model, training logs
//   closed_loop/<scenario>/<ctrl>/    traces and controller logs per subject
//   reports/                          tables (byte-stable for fixed seeds)

#include "apmpc/arx.hpp"
#include "apmpc/closed_loop.hpp"
#include "apmpc/dataset.hpp"
#include "apmpc/gt_fit.hpp"
#include "apmpc/lstm.hpp"
#include "apmpc/metrics.hpp"
#include "apmpc/mpc.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace apmpc {

enum class ClosedLoopScenario { kA, kB, kC };

std::string to_string(ClosedLoopScenario s);
ClosedLoopScenario parse_closed_loop_scenario(std::string_view text);

struct RunConfig {
  std::string command;
  std::string scenario = "all";     // I|II|III (gen-data), A|B|C (closed-loop), or all
  std::string controller = "both";  // multistep|arx|both
  std::uint64_t seed_cohort = 1;
  std::uint64_t seed_meals = 1;
  std::uint64_t seed_noise = 1;
  std::uint64_t seed_train = 1;
  std::filesystem::path out = "run";

  // data
  int subjects = 10;
  int days = 28;

  // predictor
  int horizon = 8;
  int window_stride = 4;          // F_T training windows: every n-th per subject
  std::vector<int> batch_grid = {64, 128, 256};
  bool forward_chain = true;      // forward-chaining report for every j
  double holdout_fraction = 0.15; // tail of each subject used for early stopping
  double ridge_lambda = 1e-3;
  TrainingConfig train;

  // closed loop
  double duration_h = 48.0;
  double scenario_c_sensitivity = 0.75;
  std::string arx_source = "identified";  // identified|preset
  MpcConfig multistep = MpcConfig::multistep();
  MpcConfig arx = MpcConfig::arx();
  NoiseModel noise;

  int closed_loop_ticks() const;
  void validate() const;
};

// key = value lines, '#' comments. Unknown keys are errors.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
// Canonical dump, parseable by parse_config.
std::string describe_config(const RunConfig& cfg);

using Logger = std::function<void(const std::string&)>;

struct Paths {
  std::filesystem::path root;
  std::filesystem::path data(ScenarioId id) const;
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path predictor() const { return models() / "predictor.txt"; }
  std::filesystem::path arx_model() const { return models() / "arx_model.txt"; }
  std::filesystem::path closed_loop(ClosedLoopScenario s, const std::string& ctrl) const;
  std::filesystem::path reports() const { return root / "reports"; }
};

// ---- gen-data
std::vector<PatientParams> build_cohort(const RunConfig& cfg);
ScenarioDataset build_dataset(const RunConfig& cfg, ScenarioId id,
                              const std::vector<PatientParams>& cohort);
void cmd_gen_data(const RunConfig& cfg, const Logger& log);

// ---- predictor bundle
struct PredictorBundle {
  static constexpr int kVersion = 1;
  std::vector<FreeResponseNet> nets;  // f_1..f_T
  GtCoefficients gt;
  double ts = 15.0;

  int horizon() const { return static_cast<int>(nets.size()); }
  AffinePredictor predictor() const;
  void save(const std::filesystem::path& path) const;
  static PredictorBundle load(const std::filesystem::path& path);
};

// Splits each subject's windows in time order; the last `fraction` goes to
// validation.
void temporal_split(const std::vector<std::vector<const Window*>>& subjects, double fraction,
                    std::vector<const Window*>& train, std::vector<const Window*>& validation);

std::vector<std::vector<const Window*>> group_by_subject(const std::vector<Window>& windows,
                                                         int stride);

// ---- train
void cmd_train(const RunConfig& cfg, const Logger& log);

// ---- validate
// T x N matrices of actual and predicted y_{k+1..k+T} for one subject.
struct SubjectPredictions {
  int subject_id = 0;
  Eigen::MatrixXd actual;
  Eigen::MatrixXd predicted;
};

std::vector<SubjectPredictions> predict_multistep(const AffinePredictor& pred,
                                                  const ScenarioDataset& ds);
std::vector<SubjectPredictions> predict_arx(const ArxModel& population, const ScenarioDataset& ds,
                                            int horizon);
PredictionReport report_from(const std::vector<SubjectPredictions>& p);
void cmd_validate(const RunConfig& cfg, const Logger& log);

// ---- closed loop
std::vector<MealEvent> closed_loop_meals(const RunConfig& cfg, ClosedLoopScenario s,
                                         int subject_id);
std::uint64_t closed_loop_noise_seed(const RunConfig& cfg, ClosedLoopScenario s, int subject_id);
PatientParams closed_loop_plant(const RunConfig& cfg, ClosedLoopScenario s,
                                const PatientParams& nominal);

ArxModel closed_loop_arx(const RunConfig& cfg);

struct SafetyAudit {
  int runs = 0;
  int ticks = 0;
  int commands_out_of_bounds = 0;
  int non_finite_values = 0;
  int tick_count_mismatches = 0;
  int fallbacks = 0;
  bool ok() const {
    return commands_out_of_bounds == 0 && non_finite_values == 0 && tick_count_mismatches == 0;
  }
};

void audit_run(const ClosedLoopRun& run, int expected_ticks, const MpcConfig& cfg,
               SafetyAudit& audit);

struct ScenarioOutcome {
  ClosedLoopScenario scenario;
  OutcomeComparison comparison;
  SafetyAudit audit;
};

ScenarioOutcome run_scenario(const RunConfig& cfg, ClosedLoopScenario s,
                             const PredictorBundle& bundle, const ArxModel& arx,
                             const std::vector<PatientParams>& cohort, const Logger& log);
void cmd_closed_loop(const RunConfig& cfg, const Logger& log);

// ---- report
// Rebuilds the tables from the files left by validate and closed-loop.
void cmd_report(const RunConfig& cfg, const Logger& log);

}  // namespace apmpc
