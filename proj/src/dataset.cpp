#include "apmpc/dataset.hpp"

#include "apmpc/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace apmpc {

std::string to_string(ScenarioId id) {
  switch (id) {
    case ScenarioId::kI: return "I";
    case ScenarioId::kII: return "II";
    case ScenarioId::kIII: return "III";
  }
  return "?";
}

ScenarioId parse_scenario_id(std::string_view text) {
  text = trim(text);
  if (text == "I") return ScenarioId::kI;
  if (text == "II") return ScenarioId::kII;
  if (text == "III") return ScenarioId::kIII;
  throw FormatError("unknown dataset scenario '" + std::string(text) + "'");
}

void SampledTrace::validate() const {
  const auto n = t_min.size();
  if (cgm.size() != n || insulin.size() != n || carbs.size() != n) {
    throw DimensionMismatch("trace columns differ in length");
  }
}

ScenarioSeeds scenario_seeds(ScenarioId id, std::uint64_t meal_seed, std::uint64_t noise_seed) {
  const auto tag = static_cast<std::uint64_t>(id) + 1;
  ScenarioSeeds s;
  s.meals = id == ScenarioId::kIII ? mix_seed(meal_seed, 3) : meal_seed;
  s.noise = mix_seed(noise_seed, tag);
  return s;
}

const SubjectTrace& ScenarioDataset::subject(int subject_id) const {
  for (const auto& s : subjects) {
    if (s.params.subject_id == subject_id) return s;
  }
  throw std::out_of_range("no subject " + std::to_string(subject_id) + " in dataset");
}

SampledTrace simulate_open_loop(const PatientParams& params, const std::vector<MealEvent>& meals,
                                int ticks, bool bolus, const NoiseModel& noise,
                                std::uint64_t noise_seed) {
  const std::vector<double> carbs = meals_to_ticks(meals, ticks);
  PlantState state = equilibrium_state(params);
  CgmSensor sensor(noise, noise_seed);
  SampledTrace tr;
  tr.t_min.reserve(ticks);
  tr.cgm.reserve(ticks);
  tr.insulin.reserve(ticks);
  tr.carbs.reserve(ticks);
  for (int k = 0; k < ticks; ++k) {
    const double d = carbs[static_cast<std::size_t>(k)];
    double u = params.basal_rate;
    if (bolus && d > 0.0) u += quantize_pump(d / params.cr);
    tr.t_min.push_back(k * kTickMinutes);
    tr.cgm.push_back(sensor.read(state));
    tr.insulin.push_back(u);
    tr.carbs.push_back(d);
    state = step_patient(state, params, u, d);
  }
  return tr;
}

ScenarioDataset generate_scenario(ScenarioId id, const std::vector<PatientParams>& cohort,
                                  const MealChainConfig& meal_config, ScenarioSeeds seeds,
                                  int days, const NoiseModel& noise) {
  if (cohort.empty()) throw std::invalid_argument("cohort is empty");
  if (days < 1) throw std::invalid_argument("days must be >= 1");
  ScenarioDataset ds;
  ds.id = id;
  ds.days = days;
  ds.seeds = seeds;
  const int ticks = days * kTicksPerDay;
  for (const auto& p : cohort) {
    const auto sid = static_cast<std::uint64_t>(p.subject_id);
    SubjectTrace s;
    s.params = p;
    s.meal_seed = mix_seed(seeds.meals, sid);
    s.noise_seed = mix_seed(seeds.noise, sid);
    MealChainConfig cfg = meal_config;
    cfg.seed = s.meal_seed;
    s.meals = generate_meals(cfg, days);
    s.trace = simulate_open_loop(p, s.meals, ticks, id != ScenarioId::kI, noise, s.noise_seed);
    ds.subjects.push_back(std::move(s));
  }
  return ds;
}

PredictorState state_at(const SampledTrace& trace, int k, int horizon) {
  const int n = PredictorState::history_length(horizon);
  if (k < n || k >= trace.size()) {
    throw InsufficientData("state at tick " + std::to_string(k) + " needs " +
                           std::to_string(n) + " earlier samples");
  }
  PredictorState x;
  x.cgm.resize(n);
  x.insulin.resize(n);
  x.carbs.resize(n);
  for (int m = 0; m < n; ++m) {
    x.cgm[m] = trace.cgm[k - m];
    x.insulin[m] = trace.insulin[k - 1 - m];
    x.carbs[m] = trace.carbs[k - m];
  }
  return x;
}

int window_count(int length, int horizon) {
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  return std::max(0, length - PredictorState::history_length(horizon) - horizon);
}

std::vector<Window> window_trace(const SampledTrace& trace, int horizon, int subject_id,
                                 double basal) {
  trace.validate();
  const int count = window_count(trace.size(), horizon);
  if (count == 0) {
    throw InsufficientData("trace of " + std::to_string(trace.size()) +
                           " samples is too short for horizon " + std::to_string(horizon));
  }
  const int first = PredictorState::history_length(horizon);
  std::vector<Window> out;
  out.reserve(count);
  for (int k = first; k < first + count; ++k) {
    Window w;
    w.x = state_at(trace, k, horizon);
    w.future_u.resize(horizon);
    w.future_y.resize(horizon);
    for (int i = 0; i < horizon; ++i) {
      w.future_u[i] = trace.insulin[k + i];
      w.future_y[i] = trace.cgm[k + 1 + i];
    }
    w.basal = basal;
    w.subject_id = subject_id;
    w.k = k;
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<Window> window_dataset(const ScenarioDataset& ds, int horizon) {
  std::vector<Window> out;
  for (const auto& s : ds.subjects) {
    auto w = window_trace(s.trace, horizon, s.params.subject_id, s.params.basal_rate);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

void write_trace_csv(const std::filesystem::path& path, const SampledTrace& trace) {
  trace.validate();
  std::vector<std::vector<double>> rows;
  rows.reserve(trace.t_min.size());
  for (std::size_t i = 0; i < trace.t_min.size(); ++i) {
    rows.push_back({trace.t_min[i], trace.cgm[i], trace.insulin[i], trace.carbs[i]});
  }
  write_csv(path, {"t_min", "y_cgm_mgdl", "u_ins_U", "d_cho_g"}, rows);
}

SampledTrace read_trace_csv(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  SampledTrace tr;
  tr.t_min = table.column_values("t_min");
  tr.cgm = table.column_values("y_cgm_mgdl");
  tr.insulin = table.column_values("u_ins_U");
  tr.carbs = table.column_values("d_cho_g");
  return tr;
}

namespace {

constexpr const char* kManifestHeader = "# apmpc-dataset";

std::string numbered(const char* stem, int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%02d.csv", stem, id);
  return buf;
}

std::uint64_t parse_seed(const std::string& text) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(text, &pos);
    if (pos != text.size()) throw FormatError("bad seed '" + text + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad seed '" + text + "'");
  }
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const ScenarioDataset& ds) {
  std::filesystem::create_directories(dir);
  std::ostringstream m;
  m << kManifestHeader << " v" << ScenarioDataset::kFormatVersion << '\n';
  m << "scenario " << to_string(ds.id) << '\n';
  m << "days " << ds.days << '\n';
  m << "meal_seed " << ds.seeds.meals << '\n';
  m << "noise_seed " << ds.seeds.noise << '\n';
  m << "cohort cohort.txt\n";
  std::vector<PatientParams> cohort;
  for (const auto& s : ds.subjects) {
    const int id = s.params.subject_id;
    m << "subject " << id << ' ' << numbered("subject", id) << ' ' << numbered("meals", id) << ' '
      << s.meal_seed << ' ' << s.noise_seed << '\n';
    write_trace_csv(dir / numbered("subject", id), s.trace);
    write_meals_csv(dir / numbered("meals", id), s.meals);
    cohort.push_back(s.params);
  }
  std::ostringstream c;
  write_cohort(c, cohort);
  write_text(dir / "cohort.txt", c.str());
  write_text(dir / "manifest.txt", m.str());
}

ScenarioDataset load_dataset(const std::filesystem::path& dir) {
  std::istringstream m(read_text(dir / "manifest.txt"));
  std::string line;
  const std::string expected =
      std::string(kManifestHeader) + " v" + std::to_string(ScenarioDataset::kFormatVersion);
  if (!std::getline(m, line) || trim(line) != expected) {
    throw FormatError("unsupported dataset manifest in " + dir.string());
  }
  ScenarioDataset ds;
  std::map<int, PatientParams> params;
  struct Entry {
    int id;
    std::string trace, meals;
    std::uint64_t meal_seed, noise_seed;
  };
  std::vector<Entry> entries;
  while (std::getline(m, line)) {
    const auto t = split(trim(line), ' ');
    if (t.empty() || t[0].empty()) continue;
    if (t[0] == "scenario" && t.size() == 2) {
      ds.id = parse_scenario_id(t[1]);
    } else if (t[0] == "days" && t.size() == 2) {
      ds.days = static_cast<int>(parse_int(t[1]));
    } else if (t[0] == "meal_seed" && t.size() == 2) {
      ds.seeds.meals = parse_seed(t[1]);
    } else if (t[0] == "noise_seed" && t.size() == 2) {
      ds.seeds.noise = parse_seed(t[1]);
    } else if (t[0] == "cohort" && t.size() == 2) {
      std::istringstream c(read_text(dir / t[1]));
      for (const auto& p : read_cohort(c)) params[p.subject_id] = p;
    } else if (t[0] == "subject" && t.size() == 6) {
      entries.push_back({static_cast<int>(parse_int(t[1])), t[2], t[3], parse_seed(t[4]),
                         parse_seed(t[5])});
    } else {
      throw FormatError("bad manifest line '" + line + "'");
    }
  }
  for (const auto& e : entries) {
    auto it = params.find(e.id);
    if (it == params.end()) throw FormatError("subject " + std::to_string(e.id) + " not in cohort");
    SubjectTrace s;
    s.params = it->second;
    s.trace = read_trace_csv(dir / e.trace);
    s.meals = read_meals_csv(dir / e.meals);
    s.meal_seed = e.meal_seed;
    s.noise_seed = e.noise_seed;
    if (s.trace.size() != ds.days * kTicksPerDay) {
      throw FormatError(e.trace + " does not hold " + std::to_string(ds.days) + " days");
    }
    ds.subjects.push_back(std::move(s));
  }
  return ds;
}

}  // namespace apmpc
