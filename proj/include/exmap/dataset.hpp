#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "exmap/common.hpp"
#include "exmap/rotation.hpp"

// Paired blendshape / expression-parameter data: JSONL ingestion with the
// canonical coefficient ordering, subject-disjoint splitting, subject-balanced
// batch sampling, and seeded synthetic generators used as ground-truth
// oracles throughout the test suites.

namespace exmap::data {

struct BlendshapeFrame {
  std::string subject_id;
  std::uint64_t frame_id = 0;
  std::uint64_t timestamp_us = 0;
  BlendshapeVec coeffs = BlendshapeVec::Zero();
};

struct ExpressionParams {
  Eigen::Matrix<double, kExprCount, 1> expr = Eigen::Matrix<double, kExprCount, 1>::Zero();
  Vec6<double> jaw6d = identity_rot6d<double>();
  Vec6<double> eye_l6d = identity_rot6d<double>();
  Vec6<double> eye_r6d = identity_rot6d<double>();

  ParamVec flatten() const;
  static ExpressionParams from_vector(const Eigen::Ref<const ParamVec>& v);
  /// Throws bad-input if any 6D block is not orthonormalizable.
  void validate() const;
};

struct PairedSample {
  BlendshapeFrame frame;
  ExpressionParams target;
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
};

/// Seeded ground-truth map q = A bs + alpha * B (bs o bs) + c + bias_subject,
/// with the three 6D blocks orthonormalized afterwards. Regenerating with the
/// same seed is bit-identical.
struct SyntheticOracle {
  std::uint64_t seed = 0;
  Eigen::Matrix<double, kParamCount, kBlendshapeCount> A;
  Eigen::Matrix<double, kParamCount, kBlendshapeCount> B;
  ParamVec c;
  double alpha = 0.0;
  std::map<std::string, ParamVec> per_subject_bias;

  static SyntheticOracle make(std::uint64_t seed, double alpha, int n_subjects);
};

/// Canonical coefficient ordering (ARKit convention minus tongue-out),
/// versioned; also loadable from a text manifest shipped with the repo.
struct Manifest {
  int version = 1;
  std::vector<std::string> names;  // exactly 51, unique

  static Manifest canonical();
  static Manifest load(const std::string& path);
  void save(const std::string& path) const;
  void validate() const;
  int index_of(const std::string& name) const;  // -1 if unknown
};

struct LoadResult {
  std::vector<PairedSample> samples;
  std::size_t clamp_count = 0;
  bool targets_present = false;
};

/// JSONL ingestion. Out-of-range coefficients are clamped to [0,1] and
/// counted; structural problems throw with the offending line number.
LoadResult load_pairs(const std::string& path, const Manifest& manifest);
void save_pairs(const std::string& path, const std::vector<PairedSample>& samples,
                bool with_targets);

/// Deterministic subject-disjoint split. Subjects are grouped by the source
/// prefix of their id (text before '/', if any) and each source contributes
/// `counts` = (train, val, test) subjects; extras beyond the three quotas go
/// to train so the union always covers every subject.
DatasetSplit split_subjects(const std::vector<PairedSample>& samples,
                            const std::array<int, 3>& counts, std::uint64_t seed);

std::vector<PairedSample> filter_subjects(const std::vector<PairedSample>& samples,
                                          const std::vector<std::string>& subjects);

/// One epoch of subject-balanced batches (uniform over subjects, then uniform
/// over that subject's frames). With a single subject this degenerates to a
/// plain shuffled pass over its frames.
std::vector<std::vector<std::size_t>> balanced_batches(
    const std::vector<PairedSample>& samples, std::size_t batch_size, std::uint64_t seed);

std::vector<PairedSample> synth_pairs(const SyntheticOracle& oracle, int n_subjects,
                                      int frames_per_subject);

struct VrPair {
  BlendshapeFrame vr;  // headset-convention frame
  BlendshapeFrame mp;  // canonical-convention frame
};

struct VrPairSet {
  std::vector<VrPair> pairs;
  BlendshapeVec d;  // the diagonal remap actually applied, kept for oracle checks
  double sigma = 0.0;
};

/// Simulates the headset-side remap vr = clamp(D mp + eta): D diagonal with
/// entries drawn uniformly from `d_choices` (the stock headset weights by
/// default), eta Gaussian with std `sigma`.
VrPairSet synth_vr_pairs(const std::vector<PairedSample>& samples, std::uint64_t seed,
                         double sigma = 0.01,
                         const std::vector<double>& d_choices = {0.5, 0.75, 1.0});

}  // namespace exmap::data
