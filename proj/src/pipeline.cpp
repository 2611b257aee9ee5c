#include "apmpc/pipeline.hpp"

#include "apmpc/io.hpp"
#include "apmpc/meals.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace apmpc {

namespace fs = std::filesystem;

std::string to_string(ClosedLoopScenario s) {
  switch (s) {
    case ClosedLoopScenario::kA: return "A";
    case ClosedLoopScenario::kB: return "B";
    case ClosedLoopScenario::kC: return "C";
  }
  return "?";
}

ClosedLoopScenario parse_closed_loop_scenario(std::string_view text) {
  if (text == "A") return ClosedLoopScenario::kA;
  if (text == "B") return ClosedLoopScenario::kB;
  if (text == "C") return ClosedLoopScenario::kC;
  throw std::invalid_argument("unknown closed-loop scenario '" + std::string(text) + "'");
}

// ---------------------------------------------------------------- config

int RunConfig::closed_loop_ticks() const {
  return static_cast<int>(std::lround(duration_h * 60.0 / kTickMinutes));
}

void RunConfig::validate() const {
  if (subjects < 2) throw std::invalid_argument("subjects must be >= 2");
  if (days < 1) throw std::invalid_argument("days must be >= 1");
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  if (window_stride < 1) throw std::invalid_argument("window_stride must be >= 1");
  if (batch_grid.empty()) throw std::invalid_argument("batch_grid must not be empty");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("holdout_fraction must lie in (0, 1)");
  }
  const double minutes = duration_h * 60.0;
  if (!(minutes > 0.0) || std::abs(minutes / kTickMinutes - std::round(minutes / kTickMinutes)) > 1e-9) {
    throw std::invalid_argument("duration must be a positive multiple of 15 min");
  }
  if (!(scenario_c_sensitivity > 0.0)) throw std::invalid_argument("sensitivity must be > 0");
  if (controller != "multistep" && controller != "arx" && controller != "both") {
    throw std::invalid_argument("controller must be multistep, arx or both");
  }
  if (arx_source != "identified" && arx_source != "preset") {
    throw std::invalid_argument("arx_source must be identified or preset");
  }
  train.validate();
  multistep.validate();
  arx.validate();
}

namespace {

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + std::string(v) + "'");
}

std::uint64_t parse_u64(std::string_view v) {
  const long long x = parse_int(v);
  if (x < 0) throw std::invalid_argument("seed must be non-negative");
  return static_cast<std::uint64_t>(x);
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

RunConfig parse_config(std::istream& in, RunConfig c) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string_view t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key(trim(t.substr(0, eq)));
    const std::string_view v = trim(t.substr(eq + 1));
    if (key == "scenario") c.scenario = v;
    else if (key == "controller") c.controller = v;
    else if (key == "seed_cohort") c.seed_cohort = parse_u64(v);
    else if (key == "seed_meals") c.seed_meals = parse_u64(v);
    else if (key == "seed_noise") c.seed_noise = parse_u64(v);
    else if (key == "seed_train") c.seed_train = parse_u64(v);
    else if (key == "out") c.out = std::string(v);
    else if (key == "subjects") c.subjects = static_cast<int>(parse_int(v));
    else if (key == "days") c.days = static_cast<int>(parse_int(v));
    else if (key == "horizon") c.horizon = static_cast<int>(parse_int(v));
    else if (key == "window_stride") c.window_stride = static_cast<int>(parse_int(v));
    else if (key == "batch_grid") {
      c.batch_grid.clear();
      for (const auto& s : split(v, ',')) c.batch_grid.push_back(static_cast<int>(parse_int(trim(s))));
    }
    else if (key == "forward_chain") c.forward_chain = parse_bool(v);
    else if (key == "holdout_fraction") c.holdout_fraction = parse_double(v);
    else if (key == "ridge_lambda") c.ridge_lambda = parse_double(v);
    else if (key == "learning_rate") c.train.learning_rate = parse_double(v);
    else if (key == "batch_size") c.train.batch_size = static_cast<int>(parse_int(v));
    else if (key == "max_epochs") c.train.max_epochs = static_cast<int>(parse_int(v));
    else if (key == "rmsprop_decay") c.train.rmsprop_decay = parse_double(v);
    else if (key == "rmsprop_epsilon") c.train.rmsprop_epsilon = parse_double(v);
    else if (key == "early_stop_patience") c.train.early_stop_patience = static_cast<int>(parse_int(v));
    else if (key == "hidden_size") c.train.hidden_size = static_cast<int>(parse_int(v));
    else if (key == "duration_h") c.duration_h = parse_double(v);
    else if (key == "scenario_c_sensitivity") c.scenario_c_sensitivity = parse_double(v);
    else if (key == "arx_source") c.arx_source = v;
    else if (key == "multistep_q") c.multistep.q = parse_double(v);
    else if (key == "multistep_r") c.multistep.r = parse_double(v);
    else if (key == "arx_q") c.arx.q = parse_double(v);
    else if (key == "arx_r") c.arx.r = parse_double(v);
    else if (key == "u_max") c.multistep.u_max = c.arx.u_max = parse_double(v);
    else if (key == "y_min") c.multistep.y_min = c.arx.y_min = parse_double(v);
    else if (key == "y_max") c.multistep.y_max = c.arx.y_max = parse_double(v);
    else if (key == "slack_factor") c.multistep.slack_factor = c.arx.slack_factor = parse_double(v);
    else if (key == "noise_std") c.noise.std_dev = parse_double(v);
    else if (key == "noise_autocorrelation") c.noise.autocorrelation = parse_double(v);
    else throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.multistep.horizon = c.arx.horizon = c.horizon;
  return c;
}

RunConfig load_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return parse_config(in, std::move(base));
}

std::string describe_config(const RunConfig& c) {
  std::ostringstream o;
  auto d = [](double x) { return format_double(x); };
  o << "scenario = " << c.scenario << '\n'
    << "controller = " << c.controller << '\n'
    << "seed_cohort = " << c.seed_cohort << '\n'
    << "seed_meals = " << c.seed_meals << '\n'
    << "seed_noise = " << c.seed_noise << '\n'
    << "seed_train = " << c.seed_train << '\n'
    << "subjects = " << c.subjects << '\n'
    << "days = " << c.days << '\n'
    << "horizon = " << c.horizon << '\n'
    << "window_stride = " << c.window_stride << '\n'
    << "batch_grid = " << join_ints(c.batch_grid) << '\n'
    << "forward_chain = " << (c.forward_chain ? "true" : "false") << '\n'
    << "holdout_fraction = " << d(c.holdout_fraction) << '\n'
    << "ridge_lambda = " << d(c.ridge_lambda) << '\n'
    << "learning_rate = " << d(c.train.learning_rate) << '\n'
    << "batch_size = " << c.train.batch_size << '\n'
    << "max_epochs = " << c.train.max_epochs << '\n'
    << "rmsprop_decay = " << d(c.train.rmsprop_decay) << '\n'
    << "rmsprop_epsilon = " << d(c.train.rmsprop_epsilon) << '\n'
    << "early_stop_patience = " << c.train.early_stop_patience << '\n'
    << "hidden_size = " << c.train.hidden_size << '\n'
    << "duration_h = " << d(c.duration_h) << '\n'
    << "scenario_c_sensitivity = " << d(c.scenario_c_sensitivity) << '\n'
    << "arx_source = " << c.arx_source << '\n'
    << "multistep_q = " << d(c.multistep.q) << '\n'
    << "multistep_r = " << d(c.multistep.r) << '\n'
    << "arx_q = " << d(c.arx.q) << '\n'
    << "arx_r = " << d(c.arx.r) << '\n'
    << "u_max = " << d(c.multistep.u_max) << '\n'
    << "y_min = " << d(c.multistep.y_min) << '\n'
    << "y_max = " << d(c.multistep.y_max) << '\n'
    << "slack_factor = " << d(c.multistep.slack_factor) << '\n'
    << "noise_std = " << d(c.noise.std_dev) << '\n'
    << "noise_autocorrelation = " << d(c.noise.autocorrelation) << '\n';
  return o.str();
}

// ---------------------------------------------------------------- paths

fs::path Paths::data(ScenarioId id) const { return root / "data" / ("scenario_" + to_string(id)); }

fs::path Paths::closed_loop(ClosedLoopScenario s, const std::string& ctrl) const {
  return root / "closed_loop" / to_string(s) / ctrl;
}

namespace {

std::string two_digit(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", id);
  return buf;
}

void require(const fs::path& p, const char* what) {
  if (!fs::exists(p)) {
    throw std::runtime_error(std::string(what) + " not found at " + p.string() +
                             " (run the producing command first)");
  }
}

}  // namespace

// ---------------------------------------------------------------- gen-data

std::vector<PatientParams> build_cohort(const RunConfig& cfg) {
  return make_cohort(cfg.subjects, cfg.seed_cohort);
}

ScenarioDataset build_dataset(const RunConfig& cfg, ScenarioId id,
                              const std::vector<PatientParams>& cohort) {
  return generate_scenario(id, cohort, MealChainConfig::defaults(cfg.seed_meals),
                           scenario_seeds(id, cfg.seed_meals, cfg.seed_noise), cfg.days,
                           cfg.noise);
}

void cmd_gen_data(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  const Paths paths{cfg.out};
  std::vector<ScenarioId> ids;
  if (cfg.scenario == "all") {
    ids = {ScenarioId::kI, ScenarioId::kII, ScenarioId::kIII};
  } else {
    ids = {parse_scenario_id(cfg.scenario)};
  }
  if (!fs::exists(cfg.out)) log("creating output directory " + cfg.out.string());
  const auto cohort = build_cohort(cfg);
  for (ScenarioId id : ids) {
    const ScenarioDataset ds = build_dataset(cfg, id, cohort);
    save_dataset(paths.data(id), ds);
    log("scenario " + to_string(id) + ": " + std::to_string(ds.subjects.size()) + " subjects x " +
        std::to_string(ds.days) + " days -> " + paths.data(id).string());
  }
}

// ---------------------------------------------------------------- bundle

AffinePredictor PredictorBundle::predictor() const {
  AffinePredictor p;
  p.free_response = std::make_shared<LstmFreeResponse>(nets);
  p.forced_gains = std::make_shared<LinearGains>(gt);
  return p;
}

void PredictorBundle::save(const fs::path& path) const {
  if (nets.empty() || gt.horizon() != horizon()) {
    throw DimensionMismatch("bundle needs T networks and a T-row G_T");
  }
  TensorStore store;
  store.meta["bundle.version"] = std::to_string(kVersion);
  store.meta["T"] = std::to_string(horizon());
  store.meta["Ts"] = format_double(ts);
  for (int j = 1; j <= horizon(); ++j) {
    nets[static_cast<std::size_t>(j - 1)].to_store(store, "f" + std::to_string(j) + ".");
  }
  gt.to_store(store);
  store.save(path);
}

PredictorBundle PredictorBundle::load(const fs::path& path) {
  require(path, "predictor bundle");
  const TensorStore store = TensorStore::load(path);
  if (parse_int(store.meta_at("bundle.version")) != kVersion) {
    throw FormatError("unsupported predictor bundle version");
  }
  PredictorBundle b;
  const int t = static_cast<int>(parse_int(store.meta_at("T")));
  b.ts = parse_double(store.meta_at("Ts"));
  for (int j = 1; j <= t; ++j) {
    b.nets.push_back(FreeResponseNet::from_store(store, "f" + std::to_string(j) + "."));
    if (b.nets.back().steps() != j) throw FormatError("network f" + std::to_string(j) + " has wrong output size");
  }
  b.gt = GtCoefficients::from_store(store);
  if (b.gt.horizon() != t) throw FormatError("G_T horizon differs from the network count");
  return b;
}

// ---------------------------------------------------------------- train

std::vector<std::vector<const Window*>> group_by_subject(const std::vector<Window>& windows,
                                                         int stride) {
  std::vector<std::vector<const Window*>> groups;
  int current = -1;
  int index = 0;
  for (const Window& w : windows) {
    if (groups.empty() || w.subject_id != current) {
      groups.emplace_back();
      current = w.subject_id;
      index = 0;
    }
    if (index++ % stride == 0) groups.back().push_back(&w);
  }
  return groups;
}

void temporal_split(const std::vector<std::vector<const Window*>>& subjects, double fraction,
                    std::vector<const Window*>& train, std::vector<const Window*>& validation) {
  train.clear();
  validation.clear();
  for (const auto& s : subjects) {
    const auto n = s.size();
    auto n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    n_val = std::clamp<std::size_t>(n_val, n > 1 ? 1 : 0, n > 1 ? n - 1 : 0);
    train.insert(train.end(), s.begin(), s.end() - static_cast<std::ptrdiff_t>(n_val));
    validation.insert(validation.end(), s.end() - static_cast<std::ptrdiff_t>(n_val), s.end());
  }
}

void cmd_train(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  const Paths paths{cfg.out};
  require(paths.data(ScenarioId::kI), "Scenario-I dataset");
  require(paths.data(ScenarioId::kII), "Scenario-II dataset");
  const ScenarioDataset ds1 = load_dataset(paths.data(ScenarioId::kI));
  const ScenarioDataset ds2 = load_dataset(paths.data(ScenarioId::kII));
  fs::create_directories(paths.models());
  const int t = cfg.horizon;

  const std::vector<Window> w1 = window_dataset(ds1, t);
  const auto groups = group_by_subject(w1, cfg.window_stride);
  TrainingConfig base = cfg.train;
  base.seed = cfg.seed_train;

  // Batch-size selection by forward chaining on the longest step.
  std::map<int, std::vector<FoldResult>> chain_at_t;
  if (cfg.batch_grid.size() > 1) {
    std::ostringstream grid;
    grid << "batch_size,mean_val_mae\n";
    double best = std::numeric_limits<double>::infinity();
    for (int b : cfg.batch_grid) {
      TrainingConfig c = base;
      c.batch_size = b;
      auto folds = forward_chain_validate(groups, t, c);
      double m = 0.0;
      for (const auto& f : folds) m += f.val_mae;
      m /= static_cast<double>(folds.size());
      grid << b << ',' << format_double(m) << '\n';
      log("grid: batch " + std::to_string(b) + " forward-chain MAE " + format_double(m));
      if (m < best) {
        best = m;
        base.batch_size = b;
      }
      chain_at_t[b] = std::move(folds);
    }
    write_text(paths.models() / "batch_grid.csv", grid.str());
    log("selected batch size " + std::to_string(base.batch_size));
  } else {
    base.batch_size = cfg.batch_grid.front();
  }

  if (cfg.forward_chain) {
    std::ostringstream fc;
    fc << "j,fold,validation_subject,val_mae,best_epoch\n";
    for (int j = 1; j <= t; ++j) {
      std::vector<FoldResult> folds;
      if (j == t && chain_at_t.count(base.batch_size)) {
        folds = chain_at_t[base.batch_size];
      } else {
        folds = forward_chain_validate(groups, j, base);
      }
      for (const auto& f : folds) {
        fc << j << ',' << f.fold << ',' << f.validation_subject << ',' << format_double(f.val_mae)
           << ',' << f.best_epoch << '\n';
      }
      log("forward chain j=" + std::to_string(j) + " done");
    }
    write_text(paths.models() / "forward_chain.csv", fc.str());
  }

  std::vector<const Window*> train, val;
  temporal_split(groups, cfg.holdout_fraction, train, val);
  PredictorBundle bundle;
  std::ostringstream summary;
  summary << "j,batch_size,best_epoch,best_val_mae,train_windows,val_windows\n";
  for (int j = 1; j <= t; ++j) {
    TrainResult r = train_ft(train, val, j, base);
    write_training_log(paths.models() / ("train_log_j" + std::to_string(j) + ".csv"), r.log);
    summary << j << ',' << base.batch_size << ',' << r.best_epoch << ','
            << format_double(r.best_val_mae) << ',' << train.size() << ',' << val.size() << '\n';
    log("f_" + std::to_string(j) + ": best epoch " + std::to_string(r.best_epoch) + ", val MAE " +
        format_double(r.best_val_mae));
    bundle.nets.push_back(std::move(r.model));
  }
  write_text(paths.models() / "training_summary.csv", summary.str());

  const std::vector<Window> w2 = window_dataset(ds2, t);
  std::vector<const Window*> all2;
  for (const auto& w : w2) all2.push_back(&w);
  const LstmFreeResponse ft(bundle.nets);
  GtFitReport rep;
  bundle.gt = fit_gt(compute_residuals(all2, ft), cfg.ridge_lambda, &rep);
  const SignAudit audit = audit_gain_signs(bundle.gt, all2);
  {
    std::ostringstream g;
    g << "name,value\n"
      << "windows_used," << rep.windows_used << '\n'
      << "rms_before," << format_double(rep.rms_before) << '\n'
      << "rms_after," << format_double(rep.rms_after) << '\n'
      << "positive_gain_fraction," << format_double(audit.fraction()) << '\n';
    for (int j = 0; j < t; ++j) {
      g << "positive_fraction_step_" << j + 1 << ',' << format_double(audit.positive_by_step[j])
        << '\n';
    }
    write_text(paths.models() / "gt_fit.csv", g.str());
  }
  log("G_T: " + std::to_string(rep.windows_used) + " windows, residual RMS " +
      format_double(rep.rms_before) + " -> " + format_double(rep.rms_after) +
      ", positive gains " + format_double(audit.fraction()));
  bundle.save(paths.predictor());

  const ArxIdentification id = identify_arx(ds2);
  save_arx_model(paths.arx_model(), id.model);
  write_arx_report(paths.models() / "arx_identification.csv", id);
  log("ARX identified on " + std::to_string(id.samples) + " samples, max root " +
      format_double(id.model.max_root_magnitude()));
}

// ---------------------------------------------------------------- validate

std::vector<SubjectPredictions> predict_multistep(const AffinePredictor& pred,
                                                  const ScenarioDataset& ds) {
  const int t = pred.horizon();
  std::vector<SubjectPredictions> out;
  for (const auto& s : ds.subjects) {
    const auto windows = window_trace(s.trace, t, s.params.subject_id, s.params.basal_rate);
    std::vector<const PredictorState*> xs;
    for (const auto& w : windows) xs.push_back(&w.x);
    const Eigen::MatrixXd free = pred.free_response->evaluate_batch(xs);
    SubjectPredictions sp;
    sp.subject_id = s.params.subject_id;
    sp.actual.resize(t, static_cast<Eigen::Index>(windows.size()));
    sp.predicted.resize(t, static_cast<Eigen::Index>(windows.size()));
    for (std::size_t n = 0; n < windows.size(); ++n) {
      const Window& w = windows[n];
      const Eigen::MatrixXd g = assemble_gt_matrix(pred.forced_gains->gains(w.x));
      const auto c = static_cast<Eigen::Index>(n);
      sp.actual.col(c) = w.future_y;
      sp.predicted.col(c) = free.col(c) + g * (w.future_u.array() - w.basal).matrix();
    }
    out.push_back(std::move(sp));
  }
  return out;
}

std::vector<SubjectPredictions> predict_arx(const ArxModel& population, const ScenarioDataset& ds,
                                            int horizon) {
  std::vector<SubjectPredictions> out;
  const int first = PredictorState::history_length(horizon);
  for (const auto& s : ds.subjects) {
    const ArxModel m = at_operating_point(population, s.params);
    const ArxStateSpace ss = realize_and_kalman(m);
    const SampledTrace& tr = s.trace;
    const int count = window_count(tr.size(), horizon);
    SubjectPredictions sp;
    sp.subject_id = s.params.subject_id;
    sp.actual.resize(horizon, count);
    sp.predicted.resize(horizon, count);
    ArxFilterState prior;
    for (int k = 0; k < first + count; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      const double dd = tr.carbs[uk];
      const Eigen::Vector3d post = kalman_correct(ss, prior, tr.cgm[uk] - m.y_op, dd);
      if (k >= first) {
        const ArxPrediction p = arx_prediction(ss, post, dd, horizon);
        Eigen::VectorXd du(horizon), y(horizon);
        for (int i = 0; i < horizon; ++i) {
          du[i] = tr.insulin[uk + static_cast<std::size_t>(i)] - m.u_op;
          y[i] = tr.cgm[uk + 1 + static_cast<std::size_t>(i)];
        }
        sp.actual.col(k - first) = y;
        sp.predicted.col(k - first) = (p.free + p.forced * du).array() + m.y_op;
      }
      prior = kalman_predict(ss, post, tr.insulin[uk] - m.u_op, dd);
    }
    out.push_back(std::move(sp));
  }
  return out;
}

PredictionReport report_from(const std::vector<SubjectPredictions>& p) {
  std::vector<int> ids;
  std::vector<Eigen::MatrixXd> a, b;
  for (const auto& s : p) {
    ids.push_back(s.subject_id);
    a.push_back(s.actual);
    b.push_back(s.predicted);
  }
  return prediction_report(ids, a, b);
}

namespace {

void write_prediction_subjects(const fs::path& path,
                               const std::map<std::string, PredictionReport>& reports) {
  std::ostringstream o;
  o << "predictor,subject,j,mae,mape,rmse\n";
  for (const auto& [name, r] : reports) {
    for (std::size_t s = 0; s < r.subjects.size(); ++s) {
      for (int j = 0; j < r.horizon(); ++j) {
        const auto si = static_cast<Eigen::Index>(s);
        o << name << ',' << r.subjects[s] << ',' << j + 1 << ',' << format_double(r.mae(si, j))
          << ',' << format_double(r.mape(si, j)) << ',' << format_double(r.rmse(si, j)) << '\n';
      }
    }
  }
  write_text(path, o.str());
}

std::map<std::string, PredictionReport> read_prediction_subjects(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  struct Row {
    int subject;
    int j;
    double mae, mape, rmse;
  };
  std::map<std::string, std::vector<Row>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto c = split(trim(line), ',');
    if (c.size() != 6) throw FormatError("bad prediction row in " + path.string());
    rows[c[0]].push_back({static_cast<int>(parse_int(c[1])), static_cast<int>(parse_int(c[2])),
                          parse_double(c[3]), parse_double(c[4]), parse_double(c[5])});
  }
  std::map<std::string, PredictionReport> out;
  for (const auto& [name, rs] : rows) {
    std::vector<int> subjects;
    int t = 0;
    for (const auto& r : rs) {
      if (std::find(subjects.begin(), subjects.end(), r.subject) == subjects.end()) {
        subjects.push_back(r.subject);
      }
      t = std::max(t, r.j);
    }
    PredictionReport rep;
    rep.subjects = subjects;
    const auto n = static_cast<Eigen::Index>(subjects.size());
    rep.mae = rep.mape = rep.rmse = Eigen::MatrixXd::Zero(n, t);
    for (const auto& r : rs) {
      const auto s = static_cast<Eigen::Index>(
          std::find(subjects.begin(), subjects.end(), r.subject) - subjects.begin());
      rep.mae(s, r.j - 1) = r.mae;
      rep.mape(s, r.j - 1) = r.mape;
      rep.rmse(s, r.j - 1) = r.rmse;
    }
    out[name] = rep;
  }
  return out;
}

}  // namespace

void cmd_validate(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  const Paths paths{cfg.out};
  require(paths.data(ScenarioId::kIII), "Scenario-III dataset");
  require(paths.arx_model(), "ARX model");
  const PredictorBundle bundle = PredictorBundle::load(paths.predictor());
  const ScenarioDataset ds3 = load_dataset(paths.data(ScenarioId::kIII));
  const ArxModel arx = load_arx_model(paths.arx_model());
  std::map<std::string, PredictionReport> reports;
  reports["arx"] = report_from(predict_arx(arx, ds3, bundle.horizon()));
  reports["multistep"] = report_from(predict_multistep(bundle.predictor(), ds3));
  fs::create_directories(paths.reports());
  write_prediction_subjects(paths.reports() / "prediction_subjects.csv", reports);
  write_prediction_table_csv(paths.reports() / "table1.csv", reports);
  write_text(paths.reports() / "table1.md", prediction_table_markdown(reports));

  const std::vector<Window> w3 = window_dataset(ds3, bundle.horizon());
  std::vector<const Window*> all3;
  for (const auto& w : w3) all3.push_back(&w);
  const SignAudit audit = audit_gain_signs(bundle.gt, all3);
  write_text(paths.reports() / "gain_sign_audit.csv",
             "name,value\nevaluated," + std::to_string(audit.evaluated) + "\npositive," +
                 std::to_string(audit.positive) + "\nfraction," + format_double(audit.fraction()) +
                 "\n");
  const Eigen::VectorXd m = reports["multistep"].population_mae();
  std::string line = "multi-step population MAE by j:";
  for (Eigen::Index j = 0; j < m.size(); ++j) line += " " + format_double(m[j]);
  log(line);
}

// ---------------------------------------------------------------- closed loop

std::vector<MealEvent> closed_loop_meals(const RunConfig& cfg, ClosedLoopScenario s,
                                         int subject_id) {
  const int days = (cfg.closed_loop_ticks() + kTicksPerDay - 1) / kTicksPerDay;
  if (s == ClosedLoopScenario::kB) {
    const std::uint64_t seed =
        mix_seed(mix_seed(cfg.seed_meals, 0xB0), static_cast<std::uint64_t>(subject_id));
    return generate_meals(MealChainConfig::defaults(seed), days);
  }
  return fixed_meals_scenario_a(days);
}

std::uint64_t closed_loop_noise_seed(const RunConfig& cfg, ClosedLoopScenario s, int subject_id) {
  return mix_seed(mix_seed(cfg.seed_noise, 0xC0 + static_cast<std::uint64_t>(s)),
                  static_cast<std::uint64_t>(subject_id));
}

PatientParams closed_loop_plant(const RunConfig& cfg, ClosedLoopScenario s,
                                const PatientParams& nominal) {
  if (s == ClosedLoopScenario::kC) return with_insulin_sensitivity(nominal, cfg.scenario_c_sensitivity);
  return nominal;
}

ArxModel closed_loop_arx(const RunConfig& cfg) {
  if (cfg.arx_source == "preset") return ArxModel::reference_preset();
  const Paths paths{cfg.out};
  require(paths.arx_model(), "ARX model");
  return load_arx_model(paths.arx_model());
}

void audit_run(const ClosedLoopRun& run, int expected_ticks, const MpcConfig& cfg,
               SafetyAudit& audit) {
  ++audit.runs;
  audit.ticks += static_cast<int>(run.log.size());
  const auto n = static_cast<std::size_t>(expected_ticks);
  if (run.log.size() != n || run.trace.insulin.size() != n || run.glucose.size() != n ||
      run.trace.cgm.size() != n) {
    ++audit.tick_count_mismatches;
  }
  for (std::size_t k = 0; k < run.log.size(); ++k) {
    const ControllerStep& s = run.log[k];
    if (!(s.command >= cfg.u_min && s.command <= cfg.u_max)) ++audit.commands_out_of_bounds;
    for (double v : {s.t_min, s.cgm, s.setpoint, s.command, s.objective, s.slack_norm,
                     run.glucose[k], run.trace.insulin[k]}) {
      if (!std::isfinite(v)) ++audit.non_finite_values;
    }
    if (k < run.trace.t_min.size() && run.trace.t_min[k] != s.t_min) ++audit.tick_count_mismatches;
  }
  audit.fallbacks += run.fallbacks;
}

ScenarioOutcome run_scenario(const RunConfig& cfg, ClosedLoopScenario s,
                             const PredictorBundle& bundle, const ArxModel& arx,
                             const std::vector<PatientParams>& cohort, const Logger& log) {
  const Paths paths{cfg.out};
  const int ticks = cfg.closed_loop_ticks();
  const bool do_ms = cfg.controller != "arx";
  const bool do_arx = cfg.controller != "multistep";
  ScenarioOutcome out;
  out.scenario = s;
  out.comparison.scenario = to_string(s);
  const AffinePredictor pred = do_ms ? bundle.predictor() : AffinePredictor{};
  for (const PatientParams& nominal : cohort) {
    const PatientParams plant = closed_loop_plant(cfg, s, nominal);
    const auto meals = closed_loop_meals(cfg, s, nominal.subject_id);
    const auto noise_seed = closed_loop_noise_seed(cfg, s, nominal.subject_id);
    const std::string tag = two_digit(nominal.subject_id);
    out.comparison.subjects.push_back(nominal.subject_id);
    auto record = [&](Controller& c, const MpcConfig& mc, std::vector<GlycemicReport>& dst) {
      ClosedLoopRun run;
      try {
        run = run_closed_loop(plant, c, meals, ticks, cfg.noise, noise_seed);
      } catch (const std::exception& e) {
        throw std::runtime_error("scenario " + to_string(s) + ", subject " +
                                 std::to_string(nominal.subject_id) + ", " + c.name() + ": " +
                                 e.what());
      }
      audit_run(run, ticks, mc, out.audit);
      const fs::path dir = paths.closed_loop(s, c.name());
      write_closed_loop_csv(dir / ("subject_" + tag + ".csv"), run);
      write_controller_log(dir / ("log_" + tag + ".csv"), run.log);
      dst.push_back(glycemic_metrics(run.glucose));
    };
    if (do_ms) {
      MultiStepController c(pred, nominal.basal_rate, cfg.multistep);
      record(c, cfg.multistep, out.comparison.multistep);
    }
    if (do_arx) {
      const ArxModel m = at_operating_point(arx, nominal);
      ArxController c(m, realize_and_kalman(m), nominal.basal_rate, cfg.arx, {},
                      PredictorState::history_length(cfg.horizon));
      record(c, cfg.arx, out.comparison.arx);
    }
  }
  log("scenario " + to_string(s) + ": " + std::to_string(out.audit.runs) + " runs, " +
      std::to_string(out.audit.fallbacks) + " solver fallbacks");
  return out;
}

void cmd_closed_loop(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  const Paths paths{cfg.out};
  std::vector<ClosedLoopScenario> scenarios;
  if (cfg.scenario == "all") {
    scenarios = {ClosedLoopScenario::kA, ClosedLoopScenario::kB, ClosedLoopScenario::kC};
  } else {
    scenarios = {parse_closed_loop_scenario(cfg.scenario)};
  }
  PredictorBundle bundle;
  if (cfg.controller != "arx") bundle = PredictorBundle::load(paths.predictor());
  const ArxModel arx = cfg.controller != "multistep" ? closed_loop_arx(cfg) : ArxModel{};
  const auto cohort = build_cohort(cfg);
  for (ClosedLoopScenario s : scenarios) run_scenario(cfg, s, bundle, arx, cohort, log);
  cmd_report(cfg, log);
}

// ---------------------------------------------------------------- report

namespace {

struct LoadedRuns {
  std::vector<int> subjects;
  std::vector<GlycemicReport> outcomes;
};

LoadedRuns load_runs(const fs::path& dir, int expected_ticks, const MpcConfig& mc,
                     SafetyAudit& audit) {
  LoadedRuns r;
  if (!fs::exists(dir)) return r;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("subject_", 0) == 0) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const CsvTable trace = read_csv(f);
    const std::string stem = f.stem().string();
    const int id = static_cast<int>(parse_int(stem.substr(8)));
    const CsvTable logt = read_csv(dir / ("log_" + stem.substr(8) + ".csv"));
    ++audit.runs;
    audit.ticks += static_cast<int>(logt.rows.size());
    if (static_cast<int>(trace.rows.size()) != expected_ticks ||
        logt.rows.size() != trace.rows.size()) {
      ++audit.tick_count_mismatches;
    }
    for (const auto* t : {&trace, &logt}) {
      for (const auto& row : t->rows) {
        for (double v : row) {
          if (!std::isfinite(v)) ++audit.non_finite_values;
        }
      }
    }
    for (double u : trace.column_values("command_U")) {
      if (!(u >= mc.u_min && u <= mc.u_max)) ++audit.commands_out_of_bounds;
    }
    for (double fb : logt.column_values("fallback_flag")) audit.fallbacks += fb != 0.0;
    r.subjects.push_back(id);
    r.outcomes.push_back(glycemic_metrics(trace.column_values("bg_mgdl")));
  }
  return r;
}

void write_single_outcomes(const fs::path& path, const LoadedRuns& r) {
  std::ostringstream o;
  o << "subject";
  for (const auto& m : glycemic_metric_names()) o << ',' << m;
  o << '\n';
  for (std::size_t i = 0; i < r.subjects.size(); ++i) {
    o << r.subjects[i];
    for (const auto& m : glycemic_metric_names()) {
      o << ',' << format_double(glycemic_metric(r.outcomes[i], m));
    }
    o << '\n';
  }
  write_text(path, o.str());
}

}  // namespace

void cmd_report(const RunConfig& cfg, const Logger& log) {
  const Paths paths{cfg.out};
  fs::create_directories(paths.reports());
  std::ostringstream md;
  md << "# Report\n\n";

  const fs::path pred_file = paths.reports() / "prediction_subjects.csv";
  if (fs::exists(pred_file)) {
    const auto reports = read_prediction_subjects(pred_file);
    write_prediction_table_csv(paths.reports() / "table1.csv", reports);
    write_text(paths.reports() / "table1.md", prediction_table_markdown(reports));
    md << "## Prediction accuracy (Scenario III)\n\n" << prediction_table_markdown(reports) << '\n';
  }

  std::vector<OutcomeComparison> comparisons;
  std::ostringstream safety;
  safety << "scenario,controller,runs,ticks,commands_out_of_bounds,non_finite_values,"
            "tick_count_mismatches,fallbacks\n";
  bool any_runs = false;
  for (ClosedLoopScenario s :
       {ClosedLoopScenario::kA, ClosedLoopScenario::kB, ClosedLoopScenario::kC}) {
    SafetyAudit a_ms, a_arx;
    const LoadedRuns ms =
        load_runs(paths.closed_loop(s, "multistep"), cfg.closed_loop_ticks(), cfg.multistep, a_ms);
    const LoadedRuns ax =
        load_runs(paths.closed_loop(s, "arx"), cfg.closed_loop_ticks(), cfg.arx, a_arx);
    for (const auto& [name, runs, audit] :
         {std::tuple{"multistep", &ms, &a_ms}, std::tuple{"arx", &ax, &a_arx}}) {
      if (runs->subjects.empty()) continue;
      any_runs = true;
      write_single_outcomes(paths.reports() / ("outcomes_" + to_string(s) + "_" + name + ".csv"),
                            *runs);
      safety << to_string(s) << ',' << name << ',' << audit->runs << ',' << audit->ticks << ','
             << audit->commands_out_of_bounds << ',' << audit->non_finite_values << ','
             << audit->tick_count_mismatches << ',' << audit->fallbacks << '\n';
    }
    if (!ms.subjects.empty() && ms.subjects == ax.subjects) {
      OutcomeComparison c;
      c.scenario = to_string(s);
      c.subjects = ms.subjects;
      c.multistep = ms.outcomes;
      c.arx = ax.outcomes;
      write_subject_outcomes_csv(paths.reports() / ("outcomes_" + to_string(s) + ".csv"), c);
      comparisons.push_back(std::move(c));
    }
  }
  if (any_runs) write_text(paths.reports() / "safety.csv", safety.str());
  if (!comparisons.empty()) {
    write_outcome_table_csv(paths.reports() / "table2.csv", comparisons);
    write_text(paths.reports() / "table2.md", outcome_table_markdown(comparisons));
    md << "## Closed-loop outcomes (plasma glucose, " << format_double(cfg.duration_h) << " h)\n\n"
       << outcome_table_markdown(comparisons) << '\n';
  }
  if (any_runs) md << "## Safety audit\n\n```\n" << safety.str() << "```\n";
  write_text(paths.reports() / "report.md", md.str());
  log("report written to " + (paths.reports() / "report.md").string());
}

}  // namespace apmpc
