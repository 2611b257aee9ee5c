#include "apmpc/error.hpp"

#include <sstream>

namespace apmpc {

namespace {
std::string diverged_message(int subject_id, double t_min, double glucose) {
  std::ostringstream ss;
  ss << "simulation diverged: subject " << subject_id << " at t=" << t_min
     << " min (plasma glucose " << glucose << " mg/dL)";
  return ss.str();
}
}  // namespace

SimulationDiverged::SimulationDiverged(int subject_id, double t_min, double glucose)
    : Error(diverged_message(subject_id, t_min, glucose)), subject_id_(subject_id), t_min_(t_min) {}

TrainingError::TrainingError(const std::string& what, int epoch)
    : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}

SolverFailure::SolverFailure(const std::string& what, double stationarity, double feasibility)
    : Error(what + " (stationarity " + std::to_string(stationarity) + ", feasibility " +
            std::to_string(feasibility) + ")"),
      stationarity_(stationarity),
      feasibility_(feasibility) {}

}  // namespace apmpc
