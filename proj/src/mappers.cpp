#include "exmap/mappers.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "exmap/binio.hpp"

namespace exmap::mappers {

using nn::EpmConfig;
using nn::Mode;

data::ExpressionParams epm_forward(EpmModel& model, const BlendshapeVec& coeffs,
                                   Mode mode) {
  if (!model.finite()) throw Error("corrupt-model", "model tensors are not finite");
  const Mode prev = model.mode();
  model.set_mode(mode);
  Mat<float> x = coeffs.cast<float>();
  Mat<float> y = model.forward(x);
  model.set_mode(prev);
  if (!y.allFinite()) throw Error("corrupt-model", "non-finite activations");
  return data::ExpressionParams::from_vector(y.col(0).cast<double>());
}

namespace {

double l1_loss(const Mat<float>& pred, const Mat<float>& target, Mat<float>* grad) {
  const double denom = double(pred.rows()) * double(pred.cols());
  Mat<float> diff = pred - target;
  if (grad) *grad = diff.array().sign().matrix() * float(1.0 / denom);
  return diff.cwiseAbs().sum() / denom;
}

Mat<float> gather_inputs(const std::vector<data::PairedSample>& samples,
                         const std::vector<std::size_t>& idx) {
  Mat<float> x(kBlendshapeCount, idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j)
    x.col(j) = samples[idx[j]].frame.coeffs.cast<float>();
  return x;
}

Mat<float> gather_targets(const std::vector<data::PairedSample>& samples,
                          const std::vector<std::size_t>& idx) {
  Mat<float> y(kParamCount, idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j)
    y.col(j) = samples[idx[j]].target.flatten().cast<float>();
  return y;
}

double eval_l1(EpmModel& model, const std::vector<data::PairedSample>& set) {
  model.set_mode(Mode::kEval);
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), 0);
  double total = 0.0;
  const std::size_t chunk = 1024;
  for (std::size_t pos = 0; pos < idx.size(); pos += chunk) {
    std::vector<std::size_t> part(idx.begin() + pos,
                                  idx.begin() + std::min(idx.size(), pos + chunk));
    Mat<float> pred = model.forward(gather_inputs(set, part));
    total += (pred - gather_targets(set, part)).cwiseAbs().sum();
  }
  return total / (double(set.size()) * kParamCount);
}

}  // namespace

std::pair<EpmModel, TrainReport> epm_train(const std::vector<data::PairedSample>& train_set,
                                           const std::vector<data::PairedSample>& val_set,
                                           const EpmConfig& config, const TrainHyper& hyper) {
  if (train_set.empty() || val_set.empty())
    throw Error("insufficient-data", "train and validation sets must be non-empty");
  if (hyper.batch_size < 2) throw Error("bad-input", "batch_size must be at least 2");

  EpmModel model(config, hyper.seed);
  TrainReport report;
  report.config = config;
  report.hyper = hyper;

  EpmModel best = model;
  double best_val = std::numeric_limits<double>::infinity();
  nn::Adam<float> adam(hyper.lr, hyper.weight_decay);
  auto params = model.trainable_views();
  typename EpmModel::Tape tape;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    // Cosine decay to 1% of the base rate; the L1 objective needs a shrinking
    // step to settle below the optimizer's fluctuation floor.
    const double t = hyper.epochs > 1 ? double(epoch) / double(hyper.epochs - 1) : 0.0;
    adam.set_lr(hyper.lr * (0.01 + 0.99 * 0.5 * (1.0 + std::cos(t * M_PI))));
    auto batches = data::balanced_batches(train_set, std::size_t(hyper.batch_size),
                                          mix64(hyper.seed, 0x1000 + epoch));
    auto dropout_rng = make_rng(hyper.seed, 0x2000 + epoch);
    model.set_mode(Mode::kTrain);
    double epoch_loss = 0.0;
    for (const auto& batch : batches) {
      Mat<float> x = gather_inputs(train_set, batch);
      Mat<float> y = gather_targets(train_set, batch);
      Mat<float> pred = model.forward(x, &tape, &dropout_rng, /*update_running=*/true);
      Mat<float> grad;
      const double loss = l1_loss(pred, y, &grad);
      if (!std::isfinite(loss)) {
        report.diverged = true;
        report.train_l1.push_back(loss);
        return {std::move(best), std::move(report)};
      }
      epoch_loss += loss;
      model.zero_grad();
      model.backward(grad, tape);
      adam.step(params);
    }
    report.train_l1.push_back(epoch_loss / double(batches.size()));

    const double val = eval_l1(model, val_set);
    report.val_l1.push_back(val);
    if (val < best_val) {
      best_val = val;
      best = model;
      report.best_epoch = epoch;
    }
  }
  best.set_mode(Mode::kEval);
  return {std::move(best), std::move(report)};
}

double epm_grad_check(const EpmConfig& config, std::uint64_t seed, int n_params,
                      int corrupt_param, int* argmax_out) {
  constexpr int kBatch = 8;
  nn::ResidualMlp<double> model(config, seed);
  model.set_mode(Mode::kTrain);  // batch statistics from the fixed batch

  auto rng = make_rng(seed, 0x6c);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Mat<double> x(config.input_dim, kBatch);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = unit(rng);

  // Targets sit at least 0.5 away from the initial predictions on both
  // sides, keeping the finite differences clear of the L1 kinks.
  typename nn::ResidualMlp<double>::Tape tape;
  Mat<double> y0 = model.forward(x);
  Mat<double> target(config.output_dim, kBatch);
  std::uniform_real_distribution<double> off(0.5, 1.0);
  for (Eigen::Index i = 0; i < target.size(); ++i)
    target.data()[i] = y0.data()[i] + (unit(rng) < 0.5 ? -1.0 : 1.0) * off(rng);

  auto loss_at = [&]() {
    Mat<double> pred = model.forward(x);
    const double denom = double(pred.rows()) * double(pred.cols());
    return (pred - target).cwiseAbs().sum() / denom;
  };

  Mat<double> pred = model.forward(x, &tape);
  const double denom = double(pred.rows()) * double(pred.cols());
  Mat<double> grad = (pred - target).array().sign().matrix() / denom;
  model.zero_grad();
  model.backward(grad, tape);

  auto views = model.trainable_views();
  std::int64_t total = 0;
  for (const auto& v : views) total += v.size;

  std::uniform_int_distribution<std::int64_t> pick(0, total - 1);
  const double h = 1e-5;
  double max_err = 0.0;
  int argmax = -1;
  for (int k = 0; k < n_params; ++k) {
    std::int64_t flat = pick(rng);
    std::int64_t off_idx = flat;
    std::size_t vi = 0;
    while (off_idx >= views[vi].size) off_idx -= views[vi++].size;
    double& value = views[vi].value[off_idx];
    double analytic = views[vi].grad[off_idx];
    if (k == corrupt_param) analytic += 1.0;

    const double saved = value;
    value = saved + h;
    const double lp = loss_at();
    value = saved - h;
    const double lm = loss_at();
    value = saved;
    const double fd = (lp - lm) / (2.0 * h);
    // The 1e-6 floor keeps central-difference roundoff (~1e-11 at h = 1e-5)
    // from registering as error on near-zero gradients.
    const double err = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
    if (err > max_err) {
      max_err = err;
      argmax = k;
    }
  }
  if (argmax_out) *argmax_out = argmax;
  return max_err;
}

Eigen::VectorXd matrix_map(const MatrixMapper& mapper, const BlendshapeVec& coeffs) {
  if (mapper.M.rows() != kBlendshapeCount || mapper.M.cols() != kMatrixOutDim)
    throw Error("dimension-mismatch", "matrix mapper must be 51x103");
  return mapper.M.transpose() * coeffs;  // coeffs' * M, no bias, no clamping
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> ridge_regression(const Eigen::MatrixXd& X,
                                                             const Eigen::MatrixXd& Y,
                                                             double lambda) {
  if (X.rows() != Y.rows()) throw Error("dimension-mismatch", "X and Y row counts differ");
  if (X.rows() < X.cols() + 1)
    throw Error("insufficient-data", "need at least n_features + 1 samples");
  if (lambda < 0.0) throw Error("bad-input", "lambda must be nonnegative");

  const Eigen::RowVectorXd x_mean = X.colwise().mean();
  const Eigen::RowVectorXd y_mean = Y.colwise().mean();
  const Eigen::MatrixXd Xc = X.rowwise() - x_mean;
  const Eigen::MatrixXd Yc = Y.rowwise() - y_mean;

  Eigen::MatrixXd gram = Xc.transpose() * Xc;
  gram.diagonal().array() += lambda;
  Eigen::MatrixXd W = gram.ldlt().solve(Xc.transpose() * Yc);
  Eigen::VectorXd intercept = y_mean.transpose() - W.transpose() * x_mean.transpose();
  return {std::move(W), std::move(intercept)};
}

RidgeMapper ridge_fit(const std::vector<std::pair<BlendshapeVec, Eigen::VectorXd>>& samples,
                      double lambda) {
  if (samples.size() < kBlendshapeCount + 1)
    throw Error("insufficient-data",
                "need at least 52 samples, got " + std::to_string(samples.size()));
  Eigen::MatrixXd X(samples.size(), kBlendshapeCount);
  Eigen::MatrixXd Y(samples.size(), kRidgeOutDim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].second.size() != kRidgeOutDim)
      throw Error("dimension-mismatch", "ridge targets must have 109 entries");
    X.row(i) = samples[i].first.transpose();
    Y.row(i) = samples[i].second.transpose();
  }
  auto [W, intercept] = ridge_regression(X, Y, lambda);
  return RidgeMapper{std::move(W), std::move(intercept), lambda};
}

Eigen::VectorXd ridge_apply(const RidgeMapper& mapper, const BlendshapeVec& coeffs) {
  if (mapper.W.rows() != kBlendshapeCount || mapper.W.cols() != kRidgeOutDim ||
      mapper.intercept.size() != kRidgeOutDim)
    throw Error("dimension-mismatch", "ridge mapper must be 51x109 with a 109 intercept");
  return mapper.W.transpose() * coeffs + mapper.intercept;
}

std::string TrainReport::to_json() const {
  nlohmann::ordered_json j;
  j["config"] = {{"input_dim", config.input_dim},   {"hidden_dim", config.hidden_dim},
                 {"n_blocks", config.n_blocks},     {"output_dim", config.output_dim},
                 {"dropout_p", config.dropout_p},   {"bn_eps", config.bn_eps},
                 {"bn_momentum", config.bn_momentum}};
  j["hyper"] = {{"lr", hyper.lr},
                {"batch_size", hyper.batch_size},
                {"epochs", hyper.epochs},
                {"seed", hyper.seed},
                {"weight_decay", hyper.weight_decay}};
  j["train_l1"] = train_l1;
  j["val_l1"] = val_l1;
  j["best_epoch"] = best_epoch;
  j["diverged"] = diverged;
  return j.dump(2);
}

void save_model(const EpmModel& model, const std::string& path) {
  const auto& cfg = model.config();
  BinWriter w(path);
  w.magic("EPM1");
  w.u32(std::uint32_t(cfg.input_dim));
  w.u32(std::uint32_t(cfg.hidden_dim));
  w.u32(std::uint32_t(cfg.n_blocks));
  w.u32(std::uint32_t(cfg.output_dim));
  w.f32(float(cfg.dropout_p));
  w.f32(float(cfg.bn_eps));
  w.f32(float(cfg.bn_momentum));
  EpmModel& m = const_cast<EpmModel&>(model);
  auto dense = [&](const nn::Dense<float>& d) {
    w.matrix_f32(d.W);
    w.matrix_f32(d.b);
  };
  dense(m.input_fc());
  for (auto& blk : m.blocks()) {
    dense(blk.fc1);
    dense(blk.fc2);
  }
  dense(m.output_fc());
  auto bn = [&](const nn::BatchNorm<float>& b) {
    w.matrix_f32(b.gamma);
    w.matrix_f32(b.beta);
    w.matrix_f32(b.running_mean);
    w.matrix_f32(b.running_var);
  };
  bn(m.input_bn());
  for (auto& blk : m.blocks()) {
    bn(blk.bn1);
    bn(blk.bn2);
  }
  w.close();
}

EpmModel load_epm(const std::string& path) {
  BinReader r(path);
  r.expect_magic("EPM1");
  EpmConfig cfg;
  cfg.input_dim = int(r.u32());
  cfg.hidden_dim = int(r.u32());
  cfg.n_blocks = int(r.u32());
  cfg.output_dim = int(r.u32());
  cfg.dropout_p = double(r.f32());
  cfg.bn_eps = double(r.f32());
  cfg.bn_momentum = double(r.f32());
  cfg.validate();

  EpmModel m(cfg, 0);
  auto dense = [&](nn::Dense<float>& d) {
    r.matrix_f32_into(d.W);
    r.matrix_f32_into(d.b);
  };
  dense(m.input_fc());
  for (auto& blk : m.blocks()) {
    dense(blk.fc1);
    dense(blk.fc2);
  }
  dense(m.output_fc());
  auto bn = [&](nn::BatchNorm<float>& b) {
    r.matrix_f32_into(b.gamma);
    r.matrix_f32_into(b.beta);
    r.matrix_f32_into(b.running_mean);
    r.matrix_f32_into(b.running_var);
  };
  bn(m.input_bn());
  for (auto& blk : m.blocks()) {
    bn(blk.bn1);
    bn(blk.bn2);
  }
  r.expect_eof();
  if (!m.finite()) throw Error("corrupt-model", "non-finite tensors in " + path);
  m.set_mode(Mode::kEval);
  return m;
}

void save_model(const MatrixMapper& mapper, const std::string& path) {
  BinWriter w(path);
  w.magic("MAT1");
  w.u32(std::uint32_t(mapper.M.rows()));
  w.u32(std::uint32_t(mapper.M.cols()));
  w.matrix_f32(mapper.M);
  w.close();
}

MatrixMapper load_matrix_mapper(const std::string& path) {
  BinReader r(path);
  r.expect_magic("MAT1");
  const auto rows = r.u32(), cols = r.u32();
  if (rows != kBlendshapeCount || cols != kMatrixOutDim)
    throw Error("dimension-mismatch", "matrix mapper file must be 51x103");
  MatrixMapper m;
  m.M.resize(rows, cols);
  r.matrix_f32_into(m.M);
  r.expect_eof();
  if (!m.M.allFinite()) throw Error("corrupt-model", "non-finite matrix in " + path);
  return m;
}

void save_model(const RidgeMapper& mapper, const std::string& path) {
  BinWriter w(path);
  w.magic("RDG1");
  w.u32(std::uint32_t(mapper.W.rows()));
  w.u32(std::uint32_t(mapper.W.cols()));
  w.f32(float(mapper.lambda));
  w.matrix_f32(mapper.W);
  w.matrix_f32(mapper.intercept);
  w.close();
}

RidgeMapper load_ridge_mapper(const std::string& path) {
  BinReader r(path);
  r.expect_magic("RDG1");
  const auto rows = r.u32(), cols = r.u32();
  if (rows != kBlendshapeCount || cols != kRidgeOutDim)
    throw Error("dimension-mismatch", "ridge mapper file must be 51x109");
  RidgeMapper m;
  m.lambda = double(r.f32());
  m.W.resize(rows, cols);
  r.matrix_f32_into(m.W);
  m.intercept.resize(cols);
  r.matrix_f32_into(m.intercept);
  r.expect_eof();
  if (!m.W.allFinite() || !m.intercept.allFinite())
    throw Error("corrupt-model", "non-finite ridge mapper in " + path);
  return m;
}

}  // namespace exmap::mappers
