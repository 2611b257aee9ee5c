#pragma once

// Receding-horizon simulation: CGM read, controller tick, plant advance.

#include "apmpc/dataset.hpp"
#include "apmpc/meals.hpp"
#include "apmpc/mpc.hpp"
#include "apmpc/plant.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace apmpc {

struct ClosedLoopRun {
  int subject_id = 0;
  SampledTrace trace;          // cgm, delivered commands, announced carbs
  std::vector<double> glucose; // plasma glucose at each tick
  std::vector<ControllerStep> log;
  int fallbacks = 0;
  int clamped_gains = 0;
};

// `plant` is what the patient actually is (Scenario C passes reduced
// sensitivity); the controller only sees CGM and announced carbs. Starts at the
// plant's own fasting steady state at midnight.
ClosedLoopRun run_closed_loop(const PatientParams& plant, Controller& controller,
                              const std::vector<MealEvent>& meals, int ticks,
                              const NoiseModel& noise, std::uint64_t noise_seed);

// t_min, bg_mgdl, cgm_mgdl, command_U, d_cho_g
void write_closed_loop_csv(const std::filesystem::path& path, const ClosedLoopRun& run);

}  // namespace apmpc
