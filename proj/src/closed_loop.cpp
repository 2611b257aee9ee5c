#include "apmpc/closed_loop.hpp"

#include "apmpc/io.hpp"

#include <cmath>

namespace apmpc {

ClosedLoopRun run_closed_loop(const PatientParams& plant, Controller& controller,
                              const std::vector<MealEvent>& meals, int ticks,
                              const NoiseModel& noise, std::uint64_t noise_seed) {
  if (ticks < 1) throw std::invalid_argument("ticks must be >= 1");
  const std::vector<double> carbs = meals_to_ticks(meals, ticks);
  PlantState state = equilibrium_state(plant);
  CgmSensor sensor(noise, noise_seed);
  ClosedLoopRun run;
  run.subject_id = plant.subject_id;
  run.log.reserve(static_cast<std::size_t>(ticks));
  for (int k = 0; k < ticks; ++k) {
    const double t = k * kTickMinutes;
    const double d = carbs[static_cast<std::size_t>(k)];
    const double y = sensor.read(state);
    ControllerStep s = controller.step(y, d, t);
    if (!std::isfinite(s.command)) {
      throw SimulationDiverged(plant.subject_id, t, state.glucose());
    }
    run.trace.t_min.push_back(t);
    run.trace.cgm.push_back(y);
    run.trace.insulin.push_back(s.command);
    run.trace.carbs.push_back(d);
    run.glucose.push_back(state.glucose());
    if (s.fallback) ++run.fallbacks;
    run.clamped_gains += s.clamped_gains;
    run.log.push_back(std::move(s));
    state = step_patient(state, plant, run.trace.insulin.back(), d);
  }
  return run;
}

void write_closed_loop_csv(const std::filesystem::path& path, const ClosedLoopRun& run) {
  std::vector<std::vector<double>> rows;
  rows.reserve(run.glucose.size());
  for (std::size_t k = 0; k < run.glucose.size(); ++k) {
    rows.push_back({run.trace.t_min[k], run.glucose[k], run.trace.cgm[k], run.trace.insulin[k],
                    run.trace.carbs[k]});
  }
  write_csv(path, {"t_min", "bg_mgdl", "cgm_mgdl", "command_U", "d_cho_g"}, rows);
}

}  // namespace apmpc
