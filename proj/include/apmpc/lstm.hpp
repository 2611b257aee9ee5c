#pragma once

// Free-response networks f_j: two stacked LSTM layers read the 3T+1 ticks of
// (cgm, insulin, carbs) oldest first; the last hidden state of the second
// layer goes through a tanh dense layer and a linear dense layer with j
// outputs.
//
// Batched layout: a sequence batch is a (features x steps*batch) matrix whose
// column t*batch + b holds tick t of sample b. Gates are stacked i, f, g, o.

#include "apmpc/dataset.hpp"
#include "apmpc/error.hpp"
#include "apmpc/io.hpp"
#include "apmpc/predictor.hpp"

#include <Eigen/Dense>

#include <limits>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace apmpc {

inline constexpr int kLstmFeatures = 3;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct LstmLayer {
  MatrixX<Scalar> input_weights;      // 4H x inputs
  MatrixX<Scalar> recurrent_weights;  // 4H x H
  VectorX<Scalar> bias;               // 4H

  int hidden() const { return static_cast<int>(recurrent_weights.cols()); }
  int inputs() const { return static_cast<int>(input_weights.cols()); }
};

template <typename Scalar>
struct DenseLayer {
  MatrixX<Scalar> weights;  // out x in
  VectorX<Scalar> bias;     // out
};

template <typename Scalar>
struct LstmNetwork {
  LstmLayer<Scalar> layer1;
  LstmLayer<Scalar> layer2;
  DenseLayer<Scalar> fc1;
  DenseLayer<Scalar> fc2;

  int hidden_size() const { return layer1.hidden(); }
  int input_size() const { return layer1.inputs(); }
  int dense_size() const { return static_cast<int>(fc1.weights.rows()); }
  int output_size() const { return static_cast<int>(fc2.weights.rows()); }

  static LstmNetwork zeros(int inputs, int hidden, int outputs) {
    LstmNetwork n;
    auto layer = [](int in, int h) {
      LstmLayer<Scalar> l;
      l.input_weights = MatrixX<Scalar>::Zero(4 * h, in);
      l.recurrent_weights = MatrixX<Scalar>::Zero(4 * h, h);
      l.bias = VectorX<Scalar>::Zero(4 * h);
      return l;
    };
    n.layer1 = layer(inputs, hidden);
    n.layer2 = layer(hidden, hidden);
    n.fc1.weights = MatrixX<Scalar>::Zero(hidden, hidden);
    n.fc1.bias = VectorX<Scalar>::Zero(hidden);
    n.fc2.weights = MatrixX<Scalar>::Zero(outputs, hidden);
    n.fc2.bias = VectorX<Scalar>::Zero(outputs);
    return n;
  }

  // Glorot-uniform weights, zero biases except forget gates at 1.
  static LstmNetwork initialized(int inputs, int hidden, int outputs, std::uint64_t seed) {
    LstmNetwork n = zeros(inputs, hidden, outputs);
    std::mt19937_64 rng(seed);
    auto glorot = [&rng](MatrixX<Scalar>& w, int fan_in, int fan_out) {
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = Scalar(u(rng));
      }
    };
    for (LstmLayer<Scalar>* l : {&n.layer1, &n.layer2}) {
      glorot(l->input_weights, l->inputs(), 4 * hidden);
      glorot(l->recurrent_weights, hidden, 4 * hidden);
      l->bias.segment(hidden, hidden).setOnes();
    }
    glorot(n.fc1.weights, hidden, hidden);
    glorot(n.fc2.weights, hidden, outputs);
    return n;
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    f("layer1.W", layer1.input_weights);
    f("layer1.U", layer1.recurrent_weights);
    f("layer1.b", layer1.bias);
    f("layer2.W", layer2.input_weights);
    f("layer2.U", layer2.recurrent_weights);
    f("layer2.b", layer2.bias);
    f("fc1.W", fc1.weights);
    f("fc1.b", fc1.bias);
    f("fc2.W", fc2.weights);
    f("fc2.b", fc2.bias);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<LstmNetwork*>(this)->for_each_tensor(
        [&](const char* name, auto& t) { f(name, std::as_const(t)); });
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for_each_tensor([&](const char*, const auto& t) { n += t.size(); });
    return n;
  }

  VectorX<Scalar> flatten() const {
    VectorX<Scalar> v(parameter_count());
    Eigen::Index o = 0;
    for_each_tensor([&](const char*, const auto& t) {
      v.segment(o, t.size()) = t.reshaped();
      o += t.size();
    });
    return v;
  }

  void assign(const VectorX<Scalar>& v) {
    if (v.size() != parameter_count()) throw DimensionMismatch("parameter vector length");
    Eigen::Index o = 0;
    for_each_tensor([&](const char*, auto& t) {
      t.reshaped() = v.segment(o, t.size());
      o += t.size();
    });
  }

  void validate() const {
    const int h = hidden_size();
    auto bad = [](const auto& t) { return !t.allFinite(); };
    if (layer1.input_weights.rows() != 4 * h || layer1.bias.size() != 4 * h ||
        layer2.input_weights.rows() != 4 * h || layer2.input_weights.cols() != h ||
        layer2.recurrent_weights.rows() != 4 * h || layer2.recurrent_weights.cols() != h ||
        layer2.bias.size() != 4 * h || fc1.weights.cols() != h ||
        fc1.bias.size() != fc1.weights.rows() || fc2.weights.cols() != fc1.weights.rows() ||
        fc2.bias.size() != fc2.weights.rows()) {
      throw DimensionMismatch("LSTM network gate dimensions are inconsistent");
    }
    bool finite = true;
    for_each_tensor([&](const char*, const auto& t) { finite = finite && !bad(t); });
    if (!finite) throw std::invalid_argument("LSTM network holds non-finite parameters");
  }
};

template <typename Scalar>
struct LstmLayerCache {
  MatrixX<Scalar> gates;  // activated i, f, g, o: 4H x steps*batch
  MatrixX<Scalar> cell;   // H x steps*batch
  MatrixX<Scalar> cell_tanh;
  MatrixX<Scalar> hidden;
};

template <typename Scalar>
struct LstmCache {
  int steps = 0;
  int batch = 0;
  MatrixX<Scalar> input;  // features x steps*batch
  LstmLayerCache<Scalar> layer1;
  LstmLayerCache<Scalar> layer2;
  MatrixX<Scalar> dense;  // tanh activations of fc1, D x batch
};

namespace detail {

// Both activations go through exp, which Eigen vectorizes for double.
template <typename Derived>
void sigmoid_inplace(Eigen::MatrixBase<Derived>&& m) {
  using S = typename Derived::Scalar;
  m = (S(1) + (-m.array()).exp()).inverse().matrix();
}

template <typename Derived>
void tanh_inplace(Eigen::MatrixBase<Derived>&& m) {
  using S = typename Derived::Scalar;
  m = (S(2) * (S(1) + (S(-2) * m.array()).exp()).inverse() - S(1)).matrix();
}

template <typename Scalar>
void lstm_layer_forward(const LstmLayer<Scalar>& l, const MatrixX<Scalar>& in, int steps, int batch,
                        LstmLayerCache<Scalar>& c) {
  const int h = l.hidden();
  c.gates.noalias() = l.input_weights * in;
  c.gates.colwise() += l.bias;
  c.cell.resize(h, static_cast<Eigen::Index>(steps) * batch);
  c.cell_tanh.resize(h, c.cell.cols());
  c.hidden.resize(h, c.cell.cols());
  for (int t = 0; t < steps; ++t) {
    const Eigen::Index col = static_cast<Eigen::Index>(t) * batch;
    auto g = c.gates.middleCols(col, batch);
    if (t > 0) g.noalias() += l.recurrent_weights * c.hidden.middleCols(col - batch, batch);
    sigmoid_inplace(g.topRows(2 * h));
    tanh_inplace(g.middleRows(2 * h, h));
    sigmoid_inplace(g.bottomRows(h));
    auto cell = c.cell.middleCols(col, batch);
    cell = g.topRows(h).cwiseProduct(g.middleRows(2 * h, h));
    if (t > 0) cell += g.middleRows(h, h).cwiseProduct(c.cell.middleCols(col - batch, batch));
    c.cell_tanh.middleCols(col, batch) = cell;
    tanh_inplace(c.cell_tanh.middleCols(col, batch));
    c.hidden.middleCols(col, batch) =
        g.bottomRows(h).cwiseProduct(c.cell_tanh.middleCols(col, batch));
  }
}

// Backprop through one layer. d_hidden holds the gradient arriving at each
// hidden output from above; returns the gradient w.r.t. the layer input when
// `d_input` is non-null.
template <typename Scalar>
void lstm_layer_backward(const LstmLayer<Scalar>& l, const MatrixX<Scalar>& in,
                         const LstmLayerCache<Scalar>& c, const MatrixX<Scalar>& d_hidden,
                         int steps, int batch, LstmLayer<Scalar>& grad,
                         MatrixX<Scalar>* d_input) {
  const int h = l.hidden();
  MatrixX<Scalar> dz(4 * h, static_cast<Eigen::Index>(steps) * batch);
  MatrixX<Scalar> dh_next = MatrixX<Scalar>::Zero(h, batch);
  MatrixX<Scalar> dc_next = MatrixX<Scalar>::Zero(h, batch);
  for (int t = steps - 1; t >= 0; --t) {
    const Eigen::Index col = static_cast<Eigen::Index>(t) * batch;
    const auto g = c.gates.middleCols(col, batch);
    const auto i = g.topRows(h).array();
    const auto f = g.middleRows(h, h).array();
    const auto gg = g.middleRows(2 * h, h).array();
    const auto o = g.bottomRows(h).array();
    const auto tc = c.cell_tanh.middleCols(col, batch).array();
    const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> dh =
        d_hidden.middleCols(col, batch).array() + dh_next.array();
    const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> dc =
        dh * o * (Scalar(1) - tc * tc) + dc_next.array();
    auto d = dz.middleCols(col, batch);
    d.topRows(h) = (dc * gg * i * (Scalar(1) - i)).matrix();
    if (t > 0) {
      d.middleRows(h, h) =
          (dc * c.cell.middleCols(col - batch, batch).array() * f * (Scalar(1) - f)).matrix();
    } else {
      d.middleRows(h, h).setZero();
    }
    d.middleRows(2 * h, h) = (dc * i * (Scalar(1) - gg * gg)).matrix();
    d.bottomRows(h) = (dh * tc * o * (Scalar(1) - o)).matrix();
    dc_next = (dc * f).matrix();
    dh_next.noalias() = l.recurrent_weights.transpose() * d;
  }
  grad.input_weights.noalias() = dz * in.transpose();
  grad.bias = dz.rowwise().sum();
  const Eigen::Index rest = static_cast<Eigen::Index>(steps - 1) * batch;
  grad.recurrent_weights.setZero(4 * h, h);
  if (rest > 0) {
    grad.recurrent_weights.noalias() =
        dz.rightCols(rest) * c.hidden.leftCols(rest).transpose();
  }
  if (d_input) d_input->noalias() = l.input_weights.transpose() * dz;
}

}  // namespace detail

// Forward pass over a batch; returns outputs (j x batch). Fills `cache` when
// given, which lstm_backward needs.
template <typename Scalar>
MatrixX<Scalar> lstm_forward_batch(const LstmNetwork<Scalar>& net, const MatrixX<Scalar>& input,
                                   int steps, LstmCache<Scalar>* cache = nullptr) {
  if (steps < 1 || input.cols() % steps != 0 || input.rows() != net.input_size()) {
    throw DimensionMismatch("LSTM input does not match the network layout");
  }
  LstmCache<Scalar> local;
  LstmCache<Scalar>& c = cache ? *cache : local;
  c.steps = steps;
  c.batch = static_cast<int>(input.cols() / steps);
  c.input = input;
  detail::lstm_layer_forward(net.layer1, c.input, steps, c.batch, c.layer1);
  detail::lstm_layer_forward(net.layer2, c.layer1.hidden, steps, c.batch, c.layer2);
  const auto last = c.layer2.hidden.rightCols(c.batch);
  c.dense.noalias() = net.fc1.weights * last;
  c.dense.colwise() += net.fc1.bias;
  c.dense = c.dense.array().tanh().matrix();
  MatrixX<Scalar> out = net.fc2.weights * c.dense;
  out.colwise() += net.fc2.bias;
  return out;
}

// Gradient of sum(d_out .* outputs) w.r.t. every parameter, shaped like the
// network.
template <typename Scalar>
LstmNetwork<Scalar> lstm_backward(const LstmNetwork<Scalar>& net, const LstmCache<Scalar>& c,
                                  const MatrixX<Scalar>& d_out) {
  const int h = net.hidden_size();
  const int steps = c.steps;
  const int batch = c.batch;
  LstmNetwork<Scalar> g = LstmNetwork<Scalar>::zeros(net.input_size(), h, net.output_size());

  g.fc2.weights.noalias() = d_out * c.dense.transpose();
  g.fc2.bias = d_out.rowwise().sum();
  const MatrixX<Scalar> d_dense =
      ((net.fc2.weights.transpose() * d_out).array() * (Scalar(1) - c.dense.array().square()))
          .matrix();
  const auto last = c.layer2.hidden.rightCols(batch);
  g.fc1.weights.noalias() = d_dense * last.transpose();
  g.fc1.bias = d_dense.rowwise().sum();

  MatrixX<Scalar> d_h2 = MatrixX<Scalar>::Zero(h, static_cast<Eigen::Index>(steps) * batch);
  d_h2.rightCols(batch).noalias() = net.fc1.weights.transpose() * d_dense;
  MatrixX<Scalar> d_h1;
  detail::lstm_layer_backward(net.layer2, c.layer1.hidden, c.layer2, d_h2, steps, batch, g.layer2,
                              &d_h1);
  detail::lstm_layer_backward(net.layer1, c.input, c.layer1, d_h1, steps, batch, g.layer1,
                              static_cast<MatrixX<Scalar>*>(nullptr));
  return g;
}

// Per-channel affine scaling of the (cgm, insulin, carbs) features. Raw
// values are first clipped to the range seen in training.
struct InputScaler {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d scale = Eigen::Vector3d::Ones();
  Eigen::Vector3d lower = Eigen::Vector3d::Constant(-std::numeric_limits<double>::infinity());
  Eigen::Vector3d upper = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());

  Eigen::Vector3d standardize(const Eigen::Vector3d& v) const {
    return (v - mean).cwiseQuotient(scale);
  }
  Eigen::Vector3d destandardize(const Eigen::Vector3d& v) const {
    return v.cwiseProduct(scale) + mean;
  }
};

// Sequence of 3T+1 ticks, oldest first, standardized (3 x steps).
Eigen::MatrixXd encode_sequence(const PredictorState& x, const InputScaler& scaler);

// Trained free response f_j with its scalers. The net predicts standardized
// increments over the current CGM: y_{k+i} = y_k + mean_i + scale_i * out_i.
struct FreeResponseNet {
  LstmNetwork<double> net;
  InputScaler input;
  Eigen::VectorXd target_mean;
  Eigen::VectorXd target_scale;

  int steps() const { return static_cast<int>(target_mean.size()); }
  // f_j(x): predictions for k+1..k+j (mg/dL).
  Eigen::VectorXd evaluate(const PredictorState& x) const;
  // Column per state.
  Eigen::MatrixXd evaluate_batch(const std::vector<const PredictorState*>& xs) const;

  void to_store(TensorStore& store, const std::string& prefix) const;
  static FreeResponseNet from_store(const TensorStore& store, const std::string& prefix);
};

// Element j (1-indexed) of the f_j output, i.e. its last entry.
double select_multi_step_sample(const Eigen::VectorXd& outputs, int j);

// F_T = [last(f_1), ..., last(f_T)].
class LstmFreeResponse final : public FreeResponseModel {
 public:
  explicit LstmFreeResponse(std::vector<FreeResponseNet> nets);
  int horizon() const override { return static_cast<int>(nets_.size()); }
  Eigen::VectorXd evaluate(const PredictorState& x) const override;
  Eigen::MatrixXd evaluate_batch(const std::vector<const PredictorState*>& xs) const override;
  const std::vector<FreeResponseNet>& nets() const { return nets_; }

 private:
  std::vector<FreeResponseNet> nets_;
};

struct TrainingConfig {
  double learning_rate = 1e-4;
  int batch_size = 64;
  int max_epochs = 200;
  double rmsprop_decay = 0.9;
  double rmsprop_epsilon = 1e-8;
  int early_stop_patience = 20;
  int hidden_size = 32;
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_mae = 0.0;
  double val_mae = 0.0;
};

struct TrainResult {
  FreeResponseNet model;
  std::vector<EpochRecord> log;
  int best_epoch = 0;
  double best_val_mae = 0.0;
};

// Trains f_j on `train`, early-stopping on `validation`. Windows must come
// from basal-only data.
TrainResult train_ft(const std::vector<const Window*>& train,
                     const std::vector<const Window*>& validation, int j,
                     const TrainingConfig& cfg);

// MAE (mg/dL) of f_j over the windows, averaged across all j outputs.
double evaluate_mae(const FreeResponseNet& model, const std::vector<const Window*>& windows);

struct FoldResult {
  int fold = 0;  // k_p: trained on subjects 1..k_p
  int validation_subject = 0;
  double val_mae = 0.0;
  int best_epoch = 0;
};

// Windows grouped by subject, in subject order.
std::vector<FoldResult> forward_chain_validate(
    const std::vector<std::vector<const Window*>>& subjects, int j, const TrainingConfig& cfg);

void write_training_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log);

}  // namespace apmpc
