#pragma once

#include <stdexcept>
#include <string>

namespace apmpc {

// Base for every failure raised by the library. Callers that only need to
// distinguish "our" errors from programming errors catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class SimulationDiverged : public Error {
 public:
  SimulationDiverged(int subject_id, double t_min, double glucose);
  int subject_id() const { return subject_id_; }
  double time_min() const { return t_min_; }

 private:
  int subject_id_;
  double t_min_;
};

class CohortError : public Error {
 public:
  using Error::Error;
};

class MealGenerationError : public Error {
 public:
  using Error::Error;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch);
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

class IllPosed : public Error {
 public:
  using Error::Error;
};

class SolverFailure : public Error {
 public:
  SolverFailure(const std::string& what, double stationarity, double feasibility);
  double stationarity() const { return stationarity_; }
  double feasibility() const { return feasibility_; }

 private:
  double stationarity_;
  double feasibility_;
};

class DegenerateTest : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace apmpc
