#include "apmpc/metrics.hpp"

#include "apmpc/io.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace apmpc {

namespace {

void check_pair(const Eigen::Ref<const Eigen::VectorXd>& y,
                const Eigen::Ref<const Eigen::VectorXd>& y_hat) {
  if (y.size() == 0) throw std::invalid_argument("metric of an empty vector");
  if (y.size() != y_hat.size()) throw DimensionMismatch("metric inputs differ in length");
}

std::string fixed2(double v) {
  if (!std::isfinite(v)) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fixed3(double v) {
  if (!std::isfinite(v)) return "n/a";
  char buf[64];
  if (v < 0.001) {
    std::snprintf(buf, sizeof buf, "<0.001");
  } else {
    std::snprintf(buf, sizeof buf, "%.3f", v);
  }
  return buf;
}

std::string cell(const MeanSd& m) { return fixed2(m.mean) + " (" + fixed2(m.sd) + ")"; }

MeanSd column_stats(const Eigen::MatrixXd& m, int j) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) v[static_cast<std::size_t>(i)] = m(i, j - 1);
  return mean_sd(v);
}

}  // namespace

double mae(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& y_hat) {
  check_pair(y, y_hat);
  return (y - y_hat).cwiseAbs().mean();
}

double mape(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& y_hat) {
  check_pair(y, y_hat);
  if ((y.array() == 0.0).any()) throw std::domain_error("MAPE undefined for a zero observation");
  return 100.0 * ((y - y_hat).array() / y.array()).abs().mean();
}

double rmse(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& y_hat) {
  check_pair(y, y_hat);
  return std::sqrt((y - y_hat).squaredNorm() / static_cast<double>(y.size()));
}

MeanSd mean_sd(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty sample");
  MeanSd r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

MeanSd PredictionReport::step_mae(int j) const { return column_stats(mae, j); }
MeanSd PredictionReport::step_mape(int j) const { return column_stats(mape, j); }
MeanSd PredictionReport::step_rmse(int j) const { return column_stats(rmse, j); }

Eigen::VectorXd PredictionReport::population_mae() const { return mae.colwise().mean().transpose(); }

PredictionReport prediction_report(const std::vector<int>& subjects,
                                   const std::vector<Eigen::MatrixXd>& actual,
                                   const std::vector<Eigen::MatrixXd>& predicted) {
  if (subjects.empty() || subjects.size() != actual.size() || actual.size() != predicted.size()) {
    throw DimensionMismatch("prediction report needs one actual/predicted pair per subject");
  }
  const Eigen::Index t = actual.front().rows();
  PredictionReport r;
  r.subjects = subjects;
  const auto n = static_cast<Eigen::Index>(subjects.size());
  r.mae.resize(n, t);
  r.mape.resize(n, t);
  r.rmse.resize(n, t);
  for (Eigen::Index s = 0; s < n; ++s) {
    const Eigen::MatrixXd& y = actual[static_cast<std::size_t>(s)];
    const Eigen::MatrixXd& yh = predicted[static_cast<std::size_t>(s)];
    if (y.rows() != t || yh.rows() != t || y.cols() != yh.cols()) {
      throw DimensionMismatch("prediction matrices differ in shape");
    }
    for (Eigen::Index j = 0; j < t; ++j) {
      r.mae(s, j) = mae(y.row(j).transpose(), yh.row(j).transpose());
      r.mape(s, j) = mape(y.row(j).transpose(), yh.row(j).transpose());
      r.rmse(s, j) = rmse(y.row(j).transpose(), yh.row(j).transpose());
    }
  }
  return r;
}

GlycemicReport glycemic_metrics(const std::vector<double>& glucose) {
  if (glucose.empty()) throw std::invalid_argument("glycemic metrics of an empty trace");
  GlycemicReport r;
  const double n = static_cast<double>(glucose.size());
  double sum = 0.0;
  for (double g : glucose) {
    sum += g;
    if (g < 54.0) r.below_54 += 1.0;
    if (g < 70.0) r.below_70 += 1.0;
    if (g >= 70.0 && g < 140.0) r.in_70_140 += 1.0;
    if (g >= 70.0 && g < 180.0) r.in_70_180 += 1.0;
    if (g >= 180.0) r.above_180 += 1.0;
    if (g >= 250.0) r.above_250 += 1.0;
  }
  r.mean = sum / n;
  double ss = 0.0;
  for (double g : glucose) ss += (g - r.mean) * (g - r.mean);
  r.cv = r.mean != 0.0 ? 100.0 * std::sqrt(ss / n) / r.mean : 0.0;
  for (double* p : {&r.below_54, &r.below_70, &r.in_70_140, &r.in_70_180, &r.above_180,
                    &r.above_250}) {
    *p *= 100.0 / n;
  }
  return r;
}

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::domain_error("incomplete beta needs a, b > 0");
  if (x < 0.0 || x > 1.0) throw std::domain_error("incomplete beta needs x in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  // The fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - regularized_incomplete_beta(b, a, 1.0 - x);

  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) return std::exp(ln_front) * h / a;
  }
  throw std::runtime_error("incomplete beta continued fraction did not converge");
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw std::domain_error("degrees of freedom must be > 0");
  if (std::isnan(t)) return t;
  if (std::isinf(t)) return t > 0.0 ? 1.0 : 0.0;
  const double tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0.0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionMismatch("paired samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired t-test needs at least two pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const MeanSd s = mean_sd(d);
  TTestResult r;
  r.df = static_cast<int>(d.size()) - 1;
  if (s.sd == 0.0) {
    if (s.mean == 0.0) return r;
    throw DegenerateTest("paired differences have zero variance");
  }
  r.t = s.mean / (s.sd / std::sqrt(static_cast<double>(d.size())));
  r.p = std::min(1.0, 2.0 * student_t_cdf(-std::abs(r.t), r.df));
  return r;
}

void write_prediction_table_csv(const std::filesystem::path& path,
                                const std::map<std::string, PredictionReport>& reports) {
  std::ostringstream out;
  out << "j,minutes";
  for (const auto& [name, rep] : reports) {
    for (const char* m : {"mae", "mae_sd", "mape", "mape_sd", "rmse", "rmse_sd"}) {
      out << ',' << name << '_' << m;
    }
  }
  out << '\n';
  const int t = reports.empty() ? 0 : reports.begin()->second.horizon();
  for (int j = 1; j <= t; ++j) {
    out << j << ',' << 15 * j;
    for (const auto& [name, rep] : reports) {
      for (const MeanSd& m : {rep.step_mae(j), rep.step_mape(j), rep.step_rmse(j)}) {
        out << ',' << format_double(m.mean) << ',' << format_double(m.sd);
      }
    }
    out << '\n';
  }
  write_text(path, out.str());
}

std::string prediction_table_markdown(const std::map<std::string, PredictionReport>& reports) {
  std::ostringstream out;
  out << "| j |";
  for (const auto& kv : reports) {
    out << ' ' << kv.first << " MAE | " << kv.first << " MAPE | " << kv.first << " RMSE |";
  }
  out << "\n|---|";
  for (std::size_t i = 0; i < reports.size(); ++i) out << "---|---|---|";
  out << '\n';
  const int t = reports.empty() ? 0 : reports.begin()->second.horizon();
  for (int j = 1; j <= t; ++j) {
    out << "| " << j << " |";
    for (const auto& kv : reports) {
      out << ' ' << cell(kv.second.step_mae(j)) << " | " << cell(kv.second.step_mape(j)) << " | "
          << cell(kv.second.step_rmse(j)) << " |";
    }
    out << '\n';
  }
  return out.str();
}

const std::vector<std::string>& glycemic_metric_names() {
  static const std::vector<std::string> names = {"mean",     "cv",        "below_54",
                                                 "below_70", "in_70_140", "in_70_180",
                                                 "above_180", "above_250"};
  return names;
}

double glycemic_metric(const GlycemicReport& r, const std::string& name) {
  if (name == "mean") return r.mean;
  if (name == "cv") return r.cv;
  if (name == "below_54") return r.below_54;
  if (name == "below_70") return r.below_70;
  if (name == "in_70_140") return r.in_70_140;
  if (name == "in_70_180") return r.in_70_180;
  if (name == "above_180") return r.above_180;
  if (name == "above_250") return r.above_250;
  throw std::invalid_argument("unknown glycemic metric " + name);
}

namespace {

struct OutcomeRow {
  MeanSd multistep;
  MeanSd arx;
  double p = std::numeric_limits<double>::quiet_NaN();
};

OutcomeRow outcome_row(const OutcomeComparison& c, const std::string& metric) {
  std::vector<double> a, b;
  for (const auto& r : c.multistep) a.push_back(glycemic_metric(r, metric));
  for (const auto& r : c.arx) b.push_back(glycemic_metric(r, metric));
  OutcomeRow row;
  row.multistep = mean_sd(a);
  row.arx = mean_sd(b);
  try {
    row.p = paired_t_test(a, b).p;
  } catch (const DegenerateTest&) {
  }
  return row;
}

}  // namespace

void write_outcome_table_csv(const std::filesystem::path& path,
                             const std::vector<OutcomeComparison>& scenarios) {
  std::ostringstream out;
  out << "scenario,metric,multistep_mean,multistep_sd,arx_mean,arx_sd,p_value\n";
  for (const auto& c : scenarios) {
    for (const auto& m : glycemic_metric_names()) {
      const OutcomeRow r = outcome_row(c, m);
      out << c.scenario << ',' << m << ',' << format_double(r.multistep.mean) << ','
          << format_double(r.multistep.sd) << ',' << format_double(r.arx.mean) << ','
          << format_double(r.arx.sd) << ',' << (std::isfinite(r.p) ? format_double(r.p) : "nan")
          << '\n';
    }
  }
  write_text(path, out.str());
}

std::string outcome_table_markdown(const std::vector<OutcomeComparison>& scenarios) {
  std::ostringstream out;
  out << "| scenario | metric | multi-step | ARX | p |\n|---|---|---|---|---|\n";
  for (const auto& c : scenarios) {
    for (const auto& m : glycemic_metric_names()) {
      const OutcomeRow r = outcome_row(c, m);
      out << "| " << c.scenario << " | " << m << " | " << cell(r.multistep) << " | "
          << cell(r.arx) << " | " << fixed3(r.p) << " |\n";
    }
  }
  return out.str();
}

void write_subject_outcomes_csv(const std::filesystem::path& path, const OutcomeComparison& c) {
  std::ostringstream out;
  out << "subject,controller";
  for (const auto& m : glycemic_metric_names()) out << ',' << m;
  out << '\n';
  for (std::size_t i = 0; i < c.subjects.size(); ++i) {
    for (const auto& [name, reps] : {std::pair{"multistep", &c.multistep}, std::pair{"arx", &c.arx}}) {
      out << c.subjects[i] << ',' << name;
      for (const auto& m : glycemic_metric_names()) {
        out << ',' << format_double(glycemic_metric((*reps)[i], m));
      }
      out << '\n';
    }
  }
  write_text(path, out.str());
}

}  // namespace apmpc
