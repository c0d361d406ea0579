#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "exmap/flame.hpp"
#include "exmap/mappers.hpp"
#include "exmap/rig.hpp"

// Mapper-integrated avatar fitting: optimizes the avatar's expression and
// pose-feature offsets against meshes driven by the (frozen) mapper so the
// avatar matches the mapper's output distribution instead of the ground
// truth it was never going to see at runtime.

namespace exmap::mia {

struct AvatarOffsets {
  Eigen::VectorXd d_e;  // K_e
  Eigen::VectorXd d_p;  // 27

  static AvatarOffsets zeros(int k_e) {
    return {Eigen::VectorXd::Zero(k_e), Eigen::VectorXd::Zero(kPoseFeatureCount)};
  }
};

struct MiaConfig {
  double lambda_lap = 1e-2;    // Laplacian smoothing weight
  double lambda_reg = 1e-4;    // parameter regularizer weight
  double lambda_scale = 1e-3;  // Gaussian anisotropy weight
  double lr = 0.05;
  int iterations = 400;
  std::uint64_t seed = 0;
};

struct LossParts {
  double vtx = 0.0, lap = 0.0, reg = 0.0, scale = 0.0;
  double total() const { return vtx + lap + reg + scale; }
};

struct MiaReport {
  std::vector<LossParts> history;  // per iteration, weighted components
  double pre_train_rmse_mm = 0.0, post_train_rmse_mm = 0.0;
  double pre_holdout_rmse_mm = -1.0, post_holdout_rmse_mm = -1.0;  // -1 when unused
  MiaConfig config;
  bool diverged = false;

  std::string to_json() const;
};

using Predictor = std::function<data::ExpressionParams(const data::BlendshapeFrame&)>;

Predictor epm_predictor(mappers::EpmModel& model);

/// Full objective with analytic gradient with respect to [d_e; d_p]; exposed
/// for the finite-difference gradient suite. `parts` (optional) receives the
/// weighted components, which sum exactly to the returned value.
double mia_objective(const flame::FlameLiteModel& model, const rig::GaussianCloud& cloud,
                     const Predictor& predictor,
                     const std::vector<data::PairedSample>& frames, const MiaConfig& config,
                     const AvatarOffsets& offsets, Eigen::VectorXd* grad,
                     LossParts* parts = nullptr);

/// Adam over the offsets; the mapper stays frozen. Returns the best-so-far
/// offsets along with pre/post vertex RMSE on the fit frames (and held-out
/// frames when provided).
std::pair<AvatarOffsets, MiaReport> mia_fit(
    const flame::FlameLiteModel& model, const rig::GaussianCloud& cloud,
    const Predictor& predictor, const std::vector<data::PairedSample>& frames,
    const MiaConfig& config, const std::vector<data::PairedSample>* holdout = nullptr);

/// Vertex RMSE (mm) of mapper-driven meshes against ground-truth meshes,
/// with and without the offsets applied.
struct MiaEval {
  double with_offsets_mm = 0.0;
  double without_offsets_mm = 0.0;
};
MiaEval mia_eval(const flame::FlameLiteModel& model, const Predictor& predictor,
                 const AvatarOffsets& offsets, const std::vector<data::PairedSample>& frames);

void save_offsets(const AvatarOffsets& offsets, const std::string& path);
AvatarOffsets load_offsets(const std::string& path);

}  // namespace exmap::mia
