#include "apmpc/lstm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace apmpc {

namespace {

// Scale floor for constant channels (e.g. a single-subject insulin history).
double safe_scale(double sd) { return sd > 1e-9 ? sd : 1.0; }

InputScaler fit_input_scaler(const std::vector<const Window*>& windows) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  Eigen::Vector3d sq = Eigen::Vector3d::Zero();
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  double n = 0.0;
  for (const Window* w : windows) {
    lo = lo.cwiseMin(Eigen::Vector3d(w->x.cgm.minCoeff(), w->x.insulin.minCoeff(),
                                     w->x.carbs.minCoeff()));
    hi = hi.cwiseMax(Eigen::Vector3d(w->x.cgm.maxCoeff(), w->x.insulin.maxCoeff(),
                                     w->x.carbs.maxCoeff()));
    sum += Eigen::Vector3d(w->x.cgm.sum(), w->x.insulin.sum(), w->x.carbs.sum());
    sq += Eigen::Vector3d(w->x.cgm.squaredNorm(), w->x.insulin.squaredNorm(),
                          w->x.carbs.squaredNorm());
    n += static_cast<double>(w->x.cgm.size());
  }
  InputScaler s;
  s.mean = sum / n;
  s.lower = lo;
  s.upper = hi;
  for (int c = 0; c < 3; ++c) {
    const double var = std::max(0.0, sq[c] / n - s.mean[c] * s.mean[c]);
    s.scale[c] = safe_scale(std::sqrt(var));
  }
  return s;
}

// Training data in network units: sequences stacked window-major.
struct Encoded {
  int steps = 0;
  Eigen::MatrixXd seq;      // 3 x steps*N
  Eigen::VectorXd current;  // y_k per window
  Eigen::MatrixXd target;   // j x N, mg/dL
};

Encoded encode(const std::vector<const Window*>& windows, const InputScaler& scaler, int j) {
  Encoded e;
  if (windows.empty()) return e;
  const int n = static_cast<int>(windows.size());
  e.steps = static_cast<int>(windows.front()->x.cgm.size());
  e.seq.resize(3, static_cast<Eigen::Index>(e.steps) * n);
  e.current.resize(n);
  e.target.resize(j, n);
  for (int i = 0; i < n; ++i) {
    const Window& w = *windows[static_cast<std::size_t>(i)];
    if (w.future_y.size() < j) throw DimensionMismatch("window horizon shorter than j");
    e.seq.middleCols(static_cast<Eigen::Index>(i) * e.steps, e.steps) =
        encode_sequence(w.x, scaler);
    e.current[i] = w.x.cgm[0];
    e.target.col(i) = w.future_y.head(j);
  }
  return e;
}

// Time-major batch (3 x steps*B) from window indices.
Eigen::MatrixXd gather(const Encoded& e, const std::vector<int>& idx, std::size_t begin,
                       std::size_t end) {
  const int b = static_cast<int>(end - begin);
  Eigen::MatrixXd out(3, static_cast<Eigen::Index>(e.steps) * b);
  for (int t = 0; t < e.steps; ++t) {
    for (int r = 0; r < b; ++r) {
      out.col(static_cast<Eigen::Index>(t) * b + r) =
          e.seq.col(static_cast<Eigen::Index>(idx[begin + r]) * e.steps + t);
    }
  }
  return out;
}

// Predictions in mg/dL from raw network outputs.
Eigen::MatrixXd to_glucose(const FreeResponseNet& m, const Eigen::MatrixXd& out,
                           const Eigen::VectorXd& current) {
  Eigen::MatrixXd y = out.array().colwise() * m.target_scale.array();
  y.colwise() += m.target_mean;
  y.rowwise() += current.transpose();
  return y;
}

double encoded_mae(const FreeResponseNet& m, const Encoded& e) {
  const int n = static_cast<int>(e.current.size());
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  constexpr int kChunk = 512;
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  double total = 0.0;
  for (int start = 0; start < n; start += kChunk) {
    const int stop = std::min(n, start + kChunk);
    const Eigen::MatrixXd out = lstm_forward_batch(m.net, gather(e, idx, start, stop), e.steps);
    const Eigen::MatrixXd y = to_glucose(m, out, e.current.segment(start, stop - start));
    total += (y - e.target.middleCols(start, stop - start)).cwiseAbs().sum();
  }
  return total / (static_cast<double>(n) * static_cast<double>(e.target.rows()));
}

}  // namespace

Eigen::MatrixXd encode_sequence(const PredictorState& x, const InputScaler& scaler) {
  const Eigen::Index n = x.cgm.size();
  if (x.insulin.size() != n || x.carbs.size() != n) {
    throw DimensionMismatch("predictor state histories differ in length");
  }
  Eigen::MatrixXd seq(3, n);
  // Oldest first: tick t holds history index n-1-t.
  seq.row(0) = x.cgm.reverse().transpose();
  seq.row(1) = x.insulin.reverse().transpose();
  seq.row(2) = x.carbs.reverse().transpose();
  for (int c = 0; c < 3; ++c) {
    seq.row(c) = seq.row(c).cwiseMax(scaler.lower[c]).cwiseMin(scaler.upper[c]);
  }
  seq.colwise() -= scaler.mean;
  seq = scaler.scale.cwiseInverse().asDiagonal() * seq;
  return seq;
}

Eigen::VectorXd FreeResponseNet::evaluate(const PredictorState& x) const {
  return evaluate_batch({&x}).col(0);
}

Eigen::MatrixXd FreeResponseNet::evaluate_batch(const std::vector<const PredictorState*>& xs) const {
  const int n = static_cast<int>(xs.size());
  Eigen::MatrixXd result(steps(), n);
  if (n == 0) return result;
  const int len = static_cast<int>(xs.front()->cgm.size());
  if (len < 1 || (len - 1) % 3 != 0) throw DimensionMismatch("history length must be 3T+1");
  constexpr int kChunk = 512;
  for (int start = 0; start < n; start += kChunk) {
    const int b = std::min(kChunk, n - start);
    Eigen::MatrixXd batch(3, static_cast<Eigen::Index>(len) * b);
    Eigen::VectorXd current(b);
    for (int r = 0; r < b; ++r) {
      const PredictorState& x = *xs[static_cast<std::size_t>(start + r)];
      if (x.cgm.size() != len) throw DimensionMismatch("batch states differ in history length");
      const Eigen::MatrixXd seq = encode_sequence(x, input);
      for (int t = 0; t < len; ++t) batch.col(static_cast<Eigen::Index>(t) * b + r) = seq.col(t);
      current[r] = x.cgm[0];
    }
    const Eigen::MatrixXd out = lstm_forward_batch(net, batch, len);
    if (!out.allFinite()) throw std::runtime_error("LSTM produced a non-finite activation");
    result.middleCols(start, b) = to_glucose(*this, out, current);
  }
  return result;
}

void FreeResponseNet::to_store(TensorStore& store, const std::string& prefix) const {
  net.for_each_tensor([&](const char* name, const auto& t) {
    store.tensors[prefix + name] = t;
  });
  store.tensors[prefix + "input.mean"] = input.mean;
  store.tensors[prefix + "input.scale"] = input.scale;
  store.tensors[prefix + "input.lower"] = input.lower;
  store.tensors[prefix + "input.upper"] = input.upper;
  store.tensors[prefix + "target.mean"] = target_mean;
  store.tensors[prefix + "target.scale"] = target_scale;
}

FreeResponseNet FreeResponseNet::from_store(const TensorStore& store, const std::string& prefix) {
  FreeResponseNet m;
  m.net.for_each_tensor([&](const char* name, auto& t) {
    const Eigen::MatrixXd& src = store.at(prefix + name);
    if (t.ColsAtCompileTime == 1 && src.cols() != 1) {
      throw FormatError("tensor " + prefix + name + " must be a column");
    }
    t = src;
  });
  m.net.validate();
  m.input.mean = store.at(prefix + "input.mean");
  m.input.scale = store.at(prefix + "input.scale");
  m.input.lower = store.at(prefix + "input.lower");
  m.input.upper = store.at(prefix + "input.upper");
  m.target_mean = store.at(prefix + "target.mean");
  m.target_scale = store.at(prefix + "target.scale");
  if (m.target_mean.size() != m.net.output_size() || m.target_scale.size() != m.target_mean.size()) {
    throw FormatError("target scaler length differs from the network output size");
  }
  return m;
}

double select_multi_step_sample(const Eigen::VectorXd& outputs, int j) {
  if (j < 1 || outputs.size() < j) throw DimensionMismatch("f_j output shorter than j");
  return outputs[j - 1];
}

LstmFreeResponse::LstmFreeResponse(std::vector<FreeResponseNet> nets) : nets_(std::move(nets)) {
  if (nets_.empty()) throw std::invalid_argument("free response needs at least one network");
  for (std::size_t j = 0; j < nets_.size(); ++j) {
    if (nets_[j].steps() != static_cast<int>(j) + 1) {
      throw DimensionMismatch("network " + std::to_string(j + 1) + " has the wrong output size");
    }
  }
}

Eigen::VectorXd LstmFreeResponse::evaluate(const PredictorState& x) const {
  return evaluate_batch({&x}).col(0);
}

Eigen::MatrixXd LstmFreeResponse::evaluate_batch(
    const std::vector<const PredictorState*>& xs) const {
  Eigen::MatrixXd f(horizon(), static_cast<Eigen::Index>(xs.size()));
  for (int j = 1; j <= horizon(); ++j) {
    f.row(j - 1) = nets_[static_cast<std::size_t>(j - 1)].evaluate_batch(xs).row(j - 1);
  }
  return f;
}

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (early_stop_patience < 1) throw std::invalid_argument("early_stop_patience must be >= 1");
  if (hidden_size < 1) throw std::invalid_argument("hidden_size must be >= 1");
  if (!(rmsprop_decay >= 0.0 && rmsprop_decay < 1.0)) {
    throw std::invalid_argument("rmsprop_decay must lie in [0, 1)");
  }
  if (!(rmsprop_epsilon > 0.0)) throw std::invalid_argument("rmsprop_epsilon must be > 0");
}

TrainResult train_ft(const std::vector<const Window*>& train,
                     const std::vector<const Window*>& validation, int j,
                     const TrainingConfig& cfg) {
  cfg.validate();
  if (j < 1) throw std::invalid_argument("j must be >= 1");
  if (train.empty() || validation.empty()) {
    throw InsufficientData("training and validation sets must be non-empty");
  }

  FreeResponseNet model;
  model.input = fit_input_scaler(train);
  const Encoded tr = encode(train, model.input, j);
  const Encoded va = encode(validation, model.input, j);
  const int n = static_cast<int>(train.size());

  const Eigen::MatrixXd delta = tr.target.rowwise() - tr.current.transpose();
  model.target_mean = delta.rowwise().mean();
  model.target_scale.resize(j);
  for (int i = 0; i < j; ++i) {
    const double var = (delta.row(i).array() - model.target_mean[i]).square().mean();
    model.target_scale[i] = safe_scale(std::sqrt(var));
  }
  model.net = LstmNetwork<double>::initialized(kLstmFeatures, cfg.hidden_size, j,
                                              mix_seed(cfg.seed, static_cast<std::uint64_t>(j)));

  Eigen::VectorXd theta = model.net.flatten();
  Eigen::VectorXd mean_sq = Eigen::VectorXd::Zero(theta.size());
  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(j)));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  LstmNetwork<double> best = model.net;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  LstmCache<double> cache;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double abs_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const int b = static_cast<int>(stop - start);
      const Eigen::MatrixXd out =
          lstm_forward_batch(model.net, gather(tr, order, start, stop), tr.steps, &cache);
      Eigen::VectorXd current(b);
      Eigen::MatrixXd target(j, b);
      for (int r = 0; r < b; ++r) {
        current[r] = tr.current[order[start + r]];
        target.col(r) = tr.target.col(order[start + r]);
      }
      const Eigen::MatrixXd err = to_glucose(model, out, current) - target;
      const double batch_abs = err.cwiseAbs().sum();
      if (!std::isfinite(batch_abs)) throw TrainingError("training loss is not finite", epoch);
      abs_sum += batch_abs;
      // d(mean |err|)/d out = sign(err) * scale / (j b)
      const Eigen::MatrixXd d_out =
          (err.array().sign().colwise() * model.target_scale.array()).matrix() /
          (static_cast<double>(j) * b);
      const Eigen::VectorXd grad = lstm_backward(model.net, cache, d_out).flatten();
      mean_sq = cfg.rmsprop_decay * mean_sq +
                (1.0 - cfg.rmsprop_decay) * grad.cwiseAbs2();
      theta.array() -= cfg.learning_rate * grad.array() /
                       (mean_sq.array().sqrt() + cfg.rmsprop_epsilon);
      model.net.assign(theta);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mae = abs_sum / (static_cast<double>(n) * j);
    rec.val_mae = encoded_mae(model, va);
    if (!std::isfinite(rec.val_mae) || !theta.allFinite()) {
      throw TrainingError("validation loss is not finite", epoch);
    }
    result.log.push_back(rec);
    if (rec.val_mae < best_val) {
      best_val = rec.val_mae;
      best_epoch = epoch;
      best = model.net;
    } else if (epoch - best_epoch >= cfg.early_stop_patience) {
      break;
    }
  }
  model.net = best;
  result.model = std::move(model);
  result.best_epoch = best_epoch;
  result.best_val_mae = best_val;
  return result;
}

double evaluate_mae(const FreeResponseNet& model, const std::vector<const Window*>& windows) {
  if (windows.empty()) throw InsufficientData("no windows to evaluate");
  return encoded_mae(model, encode(windows, model.input, model.steps()));
}

std::vector<FoldResult> forward_chain_validate(
    const std::vector<std::vector<const Window*>>& subjects, int j, const TrainingConfig& cfg) {
  if (subjects.size() < 2) throw InsufficientData("forward chaining needs at least 2 subjects");
  std::vector<FoldResult> folds;
  std::vector<const Window*> train;
  for (std::size_t kp = 1; kp < subjects.size(); ++kp) {
    const auto& add = subjects[kp - 1];
    train.insert(train.end(), add.begin(), add.end());
    const auto& val = subjects[kp];
    if (val.empty()) throw InsufficientData("validation subject has no windows");
    const TrainResult r = train_ft(train, val, j, cfg);
    FoldResult f;
    f.fold = static_cast<int>(kp);
    f.validation_subject = val.front()->subject_id;
    f.val_mae = r.best_val_mae;
    f.best_epoch = r.best_epoch;
    folds.push_back(f);
  }
  return folds;
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log) {
  std::vector<std::vector<double>> rows;
  rows.reserve(log.size());
  for (const auto& r : log) rows.push_back({static_cast<double>(r.epoch), r.train_mae, r.val_mae});
  write_csv(path, {"epoch", "train_mae", "val_mae"}, rows);
}

}  // namespace apmpc
