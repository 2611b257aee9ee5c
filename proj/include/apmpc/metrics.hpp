#pragma once

// Prediction accuracy, glycemic outcomes and the paired t-test.

#include "apmpc/error.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace apmpc {

double mae(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& y_hat);
// Percent. Throws std::domain_error when any y_i is 0.
double mape(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& y_hat);
double rmse(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& y_hat);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample (N-1); 0 for a single value
};

MeanSd mean_sd(const std::vector<double>& v);

// Rows are subjects, columns steps j = 1..T.
struct PredictionReport {
  std::vector<int> subjects;
  Eigen::MatrixXd mae;
  Eigen::MatrixXd mape;
  Eigen::MatrixXd rmse;

  int horizon() const { return static_cast<int>(mae.cols()); }
  MeanSd step_mae(int j) const;
  MeanSd step_mape(int j) const;
  MeanSd step_rmse(int j) const;
  // Population mean MAE per step (length T).
  Eigen::VectorXd population_mae() const;
};

// actual / predicted: one T x N matrix per subject, column n holds
// y_{k+1..k+T} for window n.
PredictionReport prediction_report(const std::vector<int>& subjects,
                                   const std::vector<Eigen::MatrixXd>& actual,
                                   const std::vector<Eigen::MatrixXd>& predicted);

struct GlycemicReport {
  double mean = 0.0;        // mg/dL
  double cv = 0.0;          // percent
  double below_54 = 0.0;    // percent of samples
  double below_70 = 0.0;
  double in_70_140 = 0.0;
  double in_70_180 = 0.0;
  double above_180 = 0.0;
  double above_250 = 0.0;
};

// Bands are closed below, open above: [70,180) is in range, >= 180 is above.
// CV uses the population standard deviation of the samples.
GlycemicReport glycemic_metrics(const std::vector<double>& glucose);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;  // two-sided
  int df = 0;
};

// Regularized incomplete beta I_x(a, b), continued fraction (modified Lentz).
double regularized_incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);

// d = a - b. Identical samples give t = 0, p = 1; constant nonzero differences
// throw DegenerateTest.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

// Table layouts. Predictor and controller names are column groups, in map
// order.
void write_prediction_table_csv(const std::filesystem::path& path,
                                const std::map<std::string, PredictionReport>& reports);
std::string prediction_table_markdown(const std::map<std::string, PredictionReport>& reports);

struct OutcomeComparison {
  std::string scenario;
  std::vector<int> subjects;
  std::vector<GlycemicReport> multistep;
  std::vector<GlycemicReport> arx;
};

// Metric names in table order and their accessor.
const std::vector<std::string>& glycemic_metric_names();
double glycemic_metric(const GlycemicReport& r, const std::string& name);

void write_outcome_table_csv(const std::filesystem::path& path,
                             const std::vector<OutcomeComparison>& scenarios);
std::string outcome_table_markdown(const std::vector<OutcomeComparison>& scenarios);

// Per-subject outcomes: subject, controller, then one column per metric.
void write_subject_outcomes_csv(const std::filesystem::path& path, const OutcomeComparison& c);

}  // namespace apmpc
