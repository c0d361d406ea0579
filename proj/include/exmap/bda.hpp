#pragma once

#include <string>
#include <utility>
#include <vector>

#include "exmap/dataset.hpp"

// Blendshape distribution alignment: a per-device affine map W c + b fitted
// in closed form that pulls headset-convention activations into the
// distribution the expression mapper was trained on.

namespace exmap::bda {

struct FitStats {
  std::uint64_t n_samples = 0;
  double train_mse = 0.0;  // mean squared error per coefficient entry
};

struct AffineAlignment {
  Eigen::Matrix<double, kBlendshapeCount, kBlendshapeCount> W;
  Eigen::Matrix<double, kBlendshapeCount, 1> b;
  FitStats fit_stats;

  static AffineAlignment identity();
  bool finite() const { return W.allFinite() && b.allFinite(); }
};

/// Closed-form least squares on the augmented input [c; 1] with Tikhonov
/// damping 1e-8 on the (unnormalized) Gram matrix. Needs at least 52 pairs.
AffineAlignment fit_bda(
    const std::vector<std::pair<BlendshapeVec, BlendshapeVec>>& pairs);

/// clamp(W c + b, 0, 1); pure, suitable for per-frame streaming use.
BlendshapeVec apply_bda(const AffineAlignment& alignment, const BlendshapeVec& coeffs);
data::BlendshapeFrame apply_bda(const AffineAlignment& alignment,
                                const data::BlendshapeFrame& frame);

void save_alignment(const AffineAlignment& alignment, const std::string& path);
AffineAlignment load_alignment(const std::string& path);

}  // namespace exmap::bda
