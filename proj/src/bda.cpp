#include "exmap/bda.hpp"

#include <Eigen/Cholesky>

#include "exmap/binio.hpp"

namespace exmap::bda {

namespace {
constexpr int kAug = kBlendshapeCount + 1;
constexpr double kGramDamping = 1e-8;
}  // namespace

AffineAlignment AffineAlignment::identity() {
  AffineAlignment a;
  a.W.setIdentity();
  a.b.setZero();
  return a;
}

AffineAlignment fit_bda(
    const std::vector<std::pair<BlendshapeVec, BlendshapeVec>>& pairs) {
  const auto n = static_cast<Eigen::Index>(pairs.size());
  if (n < kAug)
    throw Error("insufficient-data",
                "need at least 52 pairs, got " + std::to_string(pairs.size()));

  Eigen::Matrix<double, kAug, kAug> gram = Eigen::Matrix<double, kAug, kAug>::Zero();
  Eigen::Matrix<double, kAug, kBlendshapeCount> rhs =
      Eigen::Matrix<double, kAug, kBlendshapeCount>::Zero();
  Eigen::Matrix<double, kAug, 1> x;
  for (const auto& [vr, mp] : pairs) {
    if (!vr.allFinite() || !mp.allFinite())
      throw Error("bad-input", "non-finite pair passed to fit_bda");
    x.head<kBlendshapeCount>() = vr;
    x(kBlendshapeCount) = 1.0;
    gram.noalias() += x * x.transpose();
    rhs.noalias() += x * mp.transpose();
  }
  gram.diagonal().array() += kGramDamping;

  Eigen::Matrix<double, kAug, kBlendshapeCount> theta = gram.ldlt().solve(rhs);

  AffineAlignment a;
  a.W = theta.topRows<kBlendshapeCount>().transpose();
  a.b = theta.row(kBlendshapeCount).transpose();
  a.fit_stats.n_samples = static_cast<std::uint64_t>(n);

  double sq = 0.0;
  for (const auto& [vr, mp] : pairs) sq += (mp - (a.W * vr + a.b)).squaredNorm();
  a.fit_stats.train_mse = sq / (static_cast<double>(n) * kBlendshapeCount);
  return a;
}

BlendshapeVec apply_bda(const AffineAlignment& alignment, const BlendshapeVec& coeffs) {
  if (!alignment.finite()) throw Error("bad-input", "non-finite alignment");
  return (alignment.W * coeffs + alignment.b).cwiseMax(0.0).cwiseMin(1.0);
}

data::BlendshapeFrame apply_bda(const AffineAlignment& alignment,
                                const data::BlendshapeFrame& frame) {
  data::BlendshapeFrame out = frame;
  out.coeffs = apply_bda(alignment, frame.coeffs);
  return out;
}

void save_alignment(const AffineAlignment& alignment, const std::string& path) {
  BinWriter w(path);
  w.magic("BDA1");
  w.matrix_f64(alignment.W);
  w.matrix_f64(alignment.b);
  w.u64(alignment.fit_stats.n_samples);
  w.f64(alignment.fit_stats.train_mse);
  w.close();
}

AffineAlignment load_alignment(const std::string& path) {
  BinReader r(path);
  r.expect_magic("BDA1");
  AffineAlignment a;
  r.matrix_f64(a.W);
  r.matrix_f64(a.b);
  a.fit_stats.n_samples = r.u64();
  a.fit_stats.train_mse = r.f64();
  r.expect_eof();
  if (!a.finite()) throw Error("bad-input", "non-finite alignment in " + path);
  return a;
}

}  // namespace exmap::bda
