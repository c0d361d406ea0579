#pragma once

#include <string>
#include <utility>
#include <vector>

#include "exmap/dataset.hpp"
#include "exmap/mlp.hpp"

// The expression parameter mapper (residual MLP) with its training loop, and
// the two reference mapping baselines: a fixed 51x103 matrix applied by bare
// multiplication and a closed-form ridge regression (51 -> 109).

namespace exmap::mappers {

inline constexpr int kMatrixOutDim = 103;  // 100 expression + 3 jaw axis-angle
inline constexpr int kRidgeOutDim = 109;   // + 6 eye axis-angle

using EpmModel = nn::ResidualMlp<float>;

/// Single-frame inference. Eval mode (the default) is a pure function of
/// (model, input); train mode normalizes with the one-column batch statistics
/// and never applies dropout.
data::ExpressionParams epm_forward(EpmModel& model, const BlendshapeVec& coeffs,
                                   nn::Mode mode = nn::Mode::kEval);

struct TrainHyper {
  double lr = 1e-3;
  int batch_size = 256;
  int epochs = 200;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
};

struct TrainReport {
  std::vector<double> train_l1;  // per epoch
  std::vector<double> val_l1;
  int best_epoch = -1;
  bool diverged = false;
  nn::EpmConfig config;
  TrainHyper hyper;

  std::string to_json() const;
};

/// L1 training with Adam and subject-balanced batches; the returned model is
/// the epoch snapshot with the best validation loss. Deterministic given the
/// seed. On divergence training stops early and the report says so.
std::pair<EpmModel, TrainReport> epm_train(const std::vector<data::PairedSample>& train_set,
                                           const std::vector<data::PairedSample>& val_set,
                                           const nn::EpmConfig& config,
                                           const TrainHyper& hyper);

/// Central-finite-difference validation of the analytic gradients in double
/// precision (dropout off, batch statistics from one fixed batch of 8).
/// Returns the max relative error over `n_params` sampled parameters.
/// `corrupt_param` >= 0 perturbs that sampled gradient entry first, for
/// fault-injection tests; `argmax_out` reports where the max occurred.
double epm_grad_check(const nn::EpmConfig& config, std::uint64_t seed, int n_params = 200,
                      int corrupt_param = -1, int* argmax_out = nullptr);

struct MatrixMapper {
  Eigen::MatrixXd M;  // 51 x 103; loaded, never trained
};

Eigen::VectorXd matrix_map(const MatrixMapper& mapper, const BlendshapeVec& coeffs);

struct RidgeMapper {
  Eigen::MatrixXd W;          // 51 x 109
  Eigen::VectorXd intercept;  // 109
  double lambda = 1.0;
};

/// Closed form (Xc' Xc + lambda I)^-1 Xc' Yc on centered data with an
/// unregularized intercept. Works for arbitrary dimensions.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> ridge_regression(const Eigen::MatrixXd& X,
                                                             const Eigen::MatrixXd& Y,
                                                             double lambda);

RidgeMapper ridge_fit(const std::vector<std::pair<BlendshapeVec, Eigen::VectorXd>>& samples,
                      double lambda = 1.0);
Eigen::VectorXd ridge_apply(const RidgeMapper& mapper, const BlendshapeVec& coeffs);

void save_model(const EpmModel& model, const std::string& path);
EpmModel load_epm(const std::string& path);
void save_model(const MatrixMapper& mapper, const std::string& path);
MatrixMapper load_matrix_mapper(const std::string& path);
void save_model(const RidgeMapper& mapper, const std::string& path);
RidgeMapper load_ridge_mapper(const std::string& path);

}  // namespace exmap::mappers
