#include "exmap/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace exmap::data {

using nlohmann::json;

ParamVec ExpressionParams::flatten() const {
  ParamVec v;
  v.head<kExprCount>() = expr;
  v.segment<6>(kExprCount) = jaw6d;
  v.segment<6>(kExprCount + 6) = eye_l6d;
  v.segment<6>(kExprCount + 12) = eye_r6d;
  return v;
}

ExpressionParams ExpressionParams::from_vector(const Eigen::Ref<const ParamVec>& v) {
  ExpressionParams q;
  q.expr = v.head<kExprCount>();
  q.jaw6d = v.segment<6>(kExprCount);
  q.eye_l6d = v.segment<6>(kExprCount + 6);
  q.eye_r6d = v.segment<6>(kExprCount + 12);
  return q;
}

void ExpressionParams::validate() const {
  if (!flatten().allFinite()) throw Error("bad-input", "non-finite expression parameters");
  for (const auto* block : {&jaw6d, &eye_l6d, &eye_r6d}) {
    if (!try_rot6d_to_matrix(*block))
      throw Error("bad-input", "6D rotation block is not orthonormalizable");
  }
}

SyntheticOracle SyntheticOracle::make(std::uint64_t seed, double alpha, int n_subjects) {
  if (n_subjects < 1) throw Error("bad-input", "oracle needs at least one subject");
  SyntheticOracle o;
  o.seed = seed;
  o.alpha = alpha;

  // Expression rows get full-strength coefficients; the 18 rotation rows are
  // scaled down and centered on the identity 6D pattern so the decoded
  // rotations stay mild and smoothly dependent on the activations.
  auto rng = make_rng(seed, 0x0a);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Eigen::Ref<Eigen::Matrix<double, kParamCount, kBlendshapeCount>> m,
                  double expr_scale, double rot_scale) {
    for (int i = 0; i < kParamCount; ++i)
      for (int j = 0; j < kBlendshapeCount; ++j)
        m(i, j) = normal(rng) * (i < kExprCount ? expr_scale : rot_scale);
  };
  fill(o.A, 0.35, 0.10);
  fill(o.B, 0.35, 0.10);

  o.c.setZero();
  for (int i = 0; i < kExprCount; ++i) o.c(i) = normal(rng) * 0.25;
  for (int j = 0; j < kJointCount; ++j)
    o.c.segment<6>(kExprCount + 6 * j) = identity_rot6d<double>();
  for (int i = kExprCount; i < kParamCount; ++i) o.c(i) += normal(rng) * 0.05;

  // The subject bias is irreducible error for any identity-blind mapper, so
  // it stays well below the nonlinear component of the map.
  for (int s = 0; s < n_subjects; ++s) {
    auto brng = make_rng(seed, mix64(0x0b, static_cast<std::uint64_t>(s)));
    std::normal_distribution<double> bn(0.0, 1.0);
    ParamVec bias;
    for (int i = 0; i < kParamCount; ++i)
      bias(i) = bn(brng) * (i < kExprCount ? 0.02 : 0.005);
    char name[16];
    std::snprintf(name, sizeof(name), "s%03d", s);
    o.per_subject_bias.emplace(name, bias);
  }
  return o;
}

namespace {

constexpr const char* kCanonicalNames[kBlendshapeCount] = {
    "browDownLeft",     "browDownRight",    "browInnerUp",      "browOuterUpLeft",
    "browOuterUpRight", "cheekPuff",        "cheekSquintLeft",  "cheekSquintRight",
    "eyeBlinkLeft",     "eyeBlinkRight",    "eyeLookDownLeft",  "eyeLookDownRight",
    "eyeLookInLeft",    "eyeLookInRight",   "eyeLookOutLeft",   "eyeLookOutRight",
    "eyeLookUpLeft",    "eyeLookUpRight",   "eyeSquintLeft",    "eyeSquintRight",
    "eyeWideLeft",      "eyeWideRight",     "jawForward",       "jawLeft",
    "jawOpen",          "jawRight",         "mouthClose",       "mouthDimpleLeft",
    "mouthDimpleRight", "mouthFrownLeft",   "mouthFrownRight",  "mouthFunnel",
    "mouthLeft",        "mouthLowerDownLeft", "mouthLowerDownRight", "mouthPressLeft",
    "mouthPressRight",  "mouthPucker",      "mouthRight",       "mouthRollLower",
    "mouthRollUpper",   "mouthShrugLower",  "mouthShrugUpper",  "mouthSmileLeft",
    "mouthSmileRight",  "mouthStretchLeft", "mouthStretchRight", "mouthUpperUpLeft",
    "mouthUpperUpRight", "noseSneerLeft",   "noseSneerRight"};

double clamp01(double v, std::size_t& clamped) {
  if (v < 0.0) { ++clamped; return 0.0; }
  if (v > 1.0) { ++clamped; return 1.0; }
  return v;
}

std::string source_of(const std::string& subject_id) {
  auto pos = subject_id.find('/');
  return pos == std::string::npos ? std::string() : subject_id.substr(0, pos);
}

}  // namespace

Manifest Manifest::canonical() {
  Manifest m;
  m.names.assign(std::begin(kCanonicalNames), std::end(kCanonicalNames));
  return m;
}

void Manifest::validate() const {
  if (version != 1) throw Error("version-mismatch", "unsupported manifest version");
  if (names.size() != kBlendshapeCount)
    throw Error("bad-input", "manifest must list exactly 51 coefficient names");
  std::set<std::string> uniq(names.begin(), names.end());
  if (uniq.size() != names.size()) throw Error("bad-input", "duplicate coefficient name in manifest");
}

int Manifest::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot open manifest: " + path);
  Manifest m;
  std::string line;
  if (!std::getline(in, line)) throw Error("bad-input", "empty manifest: " + path);
  if (line.rfind("version:", 0) != 0)
    throw Error("bad-input", "manifest missing 'version:' header: " + path);
  m.version = std::stoi(line.substr(8));
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) m.names.push_back(line);
  }
  m.validate();
  return m;
}

void Manifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error("io-error", "cannot write manifest: " + path);
  out << "version: " << version << "\n";
  for (const auto& n : names) out << n << "\n";
}

LoadResult load_pairs(const std::string& path, const Manifest& manifest) {
  manifest.validate();
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot open: " + path);

  LoadResult result;
  std::string line;
  std::size_t line_no = 0;
  bool first_record = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("parse-error",
                  "line " + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    auto fail = [&](const std::string& msg) -> Error {
      return Error("bad-input", "line " + std::to_string(line_no) + ": " + msg);
    };
    if (!rec.is_object() || !rec.contains("subject") || !rec.contains("frame") ||
        !rec.contains("ts_us") || !rec.contains("bs"))
      throw fail("malformed record: missing subject/frame/ts_us/bs");

    PairedSample s;
    s.frame.subject_id = rec["subject"].get<std::string>();
    s.frame.frame_id = rec["frame"].get<std::uint64_t>();
    s.frame.timestamp_us = rec["ts_us"].get<std::uint64_t>();

    const json& bs = rec["bs"];
    if (bs.is_array()) {
      if (bs.size() != kBlendshapeCount)
        throw fail("coefficient count mismatch (got " + std::to_string(bs.size()) +
                   ", want 51)");
      for (int i = 0; i < kBlendshapeCount; ++i) {
        if (!bs[i].is_number()) throw fail("non-numeric coefficient");
        s.frame.coeffs(i) = clamp01(bs[i].get<double>(), result.clamp_count);
      }
    } else if (bs.is_object()) {
      for (auto it = bs.begin(); it != bs.end(); ++it) {
        int idx = manifest.index_of(it.key());
        if (idx < 0) throw fail("unknown coefficient name '" + it.key() + "'");
        s.frame.coeffs(idx) = clamp01(it.value().get<double>(), result.clamp_count);
      }
    } else {
      throw fail("'bs' must be an array or an object");
    }
    if (!s.frame.coeffs.allFinite()) throw fail("non-finite coefficient");

    const bool has_q = rec.contains("q") && !rec["q"].is_null();
    if (first_record) {
      result.targets_present = has_q;
      first_record = false;
    } else if (has_q != result.targets_present) {
      throw fail("mixed presence of 'q' across records");
    }
    if (has_q) {
      const json& q = rec["q"];
      if (!q.is_array() || q.size() != kParamCount)
        throw fail("parameter count mismatch (got " +
                   std::to_string(q.is_array() ? q.size() : 0) + ", want 68)");
      ParamVec v;
      for (int i = 0; i < kParamCount; ++i) v(i) = q[i].get<double>();
      s.target = ExpressionParams::from_vector(v);
      try {
        s.target.validate();
      } catch (const Error& e) {
        throw fail(e.what());
      }
    }
    result.samples.push_back(std::move(s));
  }
  return result;
}

void save_pairs(const std::string& path, const std::vector<PairedSample>& samples,
                bool with_targets) {
  std::ofstream out(path);
  if (!out) throw Error("io-error", "cannot write: " + path);
  for (const auto& s : samples) {
    json rec;
    rec["subject"] = s.frame.subject_id;
    rec["frame"] = s.frame.frame_id;
    rec["ts_us"] = s.frame.timestamp_us;
    json bs = json::array();
    for (int i = 0; i < kBlendshapeCount; ++i) bs.push_back(s.frame.coeffs(i));
    rec["bs"] = std::move(bs);
    if (with_targets) {
      ParamVec v = s.target.flatten();
      json q = json::array();
      for (int i = 0; i < kParamCount; ++i) q.push_back(v(i));
      rec["q"] = std::move(q);
    }
    out << rec.dump() << "\n";
  }
  if (!out) throw Error("io-error", "write failed: " + path);
}

DatasetSplit split_subjects(const std::vector<PairedSample>& samples,
                            const std::array<int, 3>& counts, std::uint64_t seed) {
  const int need = counts[0] + counts[1] + counts[2];
  if (counts[0] < 0 || counts[1] < 0 || counts[2] < 0 || need == 0)
    throw Error("bad-input", "split counts must be nonnegative and not all zero");

  std::map<std::string, std::vector<std::string>> by_source;
  for (const auto& s : samples) {
    auto& list = by_source[source_of(s.frame.subject_id)];
    if (std::find(list.begin(), list.end(), s.frame.subject_id) == list.end())
      list.push_back(s.frame.subject_id);
  }
  if (by_source.empty()) throw Error("insufficient-data", "no samples to split");

  DatasetSplit split;
  auto rng = make_rng(seed, 0x51);
  for (auto& [source, subjects] : by_source) {
    std::sort(subjects.begin(), subjects.end());
    if (static_cast<int>(subjects.size()) < need)
      throw Error("insufficient-data",
                  "source '" + source + "' has " + std::to_string(subjects.size()) +
                      " subjects, need " + std::to_string(need));
    std::shuffle(subjects.begin(), subjects.end(), rng);
    int i = 0;
    for (int k = 0; k < counts[0]; ++k) split.train.push_back(subjects[i++]);
    for (int k = 0; k < counts[1]; ++k) split.val.push_back(subjects[i++]);
    for (int k = 0; k < counts[2]; ++k) split.test.push_back(subjects[i++]);
    for (; i < static_cast<int>(subjects.size()); ++i) split.train.push_back(subjects[i]);
  }
  return split;
}

std::vector<PairedSample> filter_subjects(const std::vector<PairedSample>& samples,
                                          const std::vector<std::string>& subjects) {
  std::set<std::string> keep(subjects.begin(), subjects.end());
  std::vector<PairedSample> out;
  for (const auto& s : samples)
    if (keep.count(s.frame.subject_id)) out.push_back(s);
  return out;
}

std::vector<std::vector<std::size_t>> balanced_batches(
    const std::vector<PairedSample>& samples, std::size_t batch_size, std::uint64_t seed) {
  if (samples.empty()) throw Error("insufficient-data", "empty dataset");
  if (batch_size == 0) throw Error("bad-input", "batch size must be positive");

  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < samples.size(); ++i)
    by_subject[samples[i].frame.subject_id].push_back(i);

  auto rng = make_rng(seed, 0x5b);
  std::vector<std::vector<std::size_t>> batches;

  if (by_subject.size() == 1) {
    std::vector<std::size_t> order = by_subject.begin()->second;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t pos = 0; pos < order.size(); pos += batch_size) {
      auto end = std::min(order.size(), pos + batch_size);
      batches.emplace_back(order.begin() + pos, order.begin() + end);
    }
    return batches;
  }

  std::vector<const std::vector<std::size_t>*> subjects;
  subjects.reserve(by_subject.size());
  for (const auto& [id, idx] : by_subject) subjects.push_back(&idx);

  const std::size_t draws = std::max(samples.size(), batch_size);
  const std::size_t n_batches = std::max<std::size_t>(1, draws / batch_size);
  std::uniform_int_distribution<std::size_t> pick_subject(0, subjects.size() - 1);
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<std::size_t> batch(batch_size);
    for (auto& slot : batch) {
      const auto& frames = *subjects[pick_subject(rng)];
      std::uniform_int_distribution<std::size_t> pick_frame(0, frames.size() - 1);
      slot = frames[pick_frame(rng)];
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<PairedSample> synth_pairs(const SyntheticOracle& oracle, int n_subjects,
                                      int frames_per_subject) {
  if (n_subjects < 1) throw Error("bad-input", "n_subjects must be >= 1");
  if (frames_per_subject < 1) throw Error("bad-input", "frames_per_subject must be >= 1");
  if (static_cast<std::size_t>(n_subjects) > oracle.per_subject_bias.size())
    throw Error("bad-input", "oracle was built for fewer subjects");

  std::vector<PairedSample> out;
  out.reserve(static_cast<std::size_t>(n_subjects) * frames_per_subject);

  int s = 0;
  for (const auto& [subject_id, bias] : oracle.per_subject_bias) {
    if (s++ >= n_subjects) break;
    auto rng = make_rng(oracle.seed, mix64(0x0c, static_cast<std::uint64_t>(s)));
    std::uniform_int_distribution<int> n_active(3, 8);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int f = 0; f < frames_per_subject; ++f) {
      PairedSample ps;
      ps.frame.subject_id = subject_id;
      ps.frame.frame_id = static_cast<std::uint64_t>(f);
      ps.frame.timestamp_us = static_cast<std::uint64_t>(f) * 16667ull;  // synthetic 60 Hz

      // Sparse activation pattern: 3..8 active coefficients per frame.
      int k = n_active(rng);
      std::array<int, kBlendshapeCount> idx;
      std::iota(idx.begin(), idx.end(), 0);
      for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<int> pick(i, kBlendshapeCount - 1);
        std::swap(idx[i], idx[pick(rng)]);
        ps.frame.coeffs(idx[i]) = unit(rng);
      }

      const BlendshapeVec& bs = ps.frame.coeffs;
      ParamVec q = oracle.A * bs + oracle.alpha * (oracle.B * bs.cwiseProduct(bs)) +
                   oracle.c + bias;
      for (int j = 0; j < kJointCount; ++j) {
        auto block = q.segment<6>(kExprCount + 6 * j);
        auto m = try_rot6d_to_matrix(Vec6<double>(block));
        block = m ? matrix_to_rot6d(*m) : identity_rot6d<double>();
      }
      ps.target = ExpressionParams::from_vector(q);
      out.push_back(std::move(ps));
    }
  }
  return out;
}

VrPairSet synth_vr_pairs(const std::vector<PairedSample>& samples, std::uint64_t seed,
                         double sigma, const std::vector<double>& d_choices) {
  if (d_choices.empty()) throw Error("bad-input", "d_choices must not be empty");
  VrPairSet set;
  set.sigma = sigma;
  auto rng = make_rng(seed, 0x0d);
  std::uniform_int_distribution<std::size_t> pick(0, d_choices.size() - 1);
  for (int i = 0; i < kBlendshapeCount; ++i) set.d(i) = d_choices[pick(rng)];

  std::normal_distribution<double> noise(0.0, 1.0);
  set.pairs.reserve(samples.size());
  for (const auto& s : samples) {
    VrPair p;
    p.mp = s.frame;
    p.vr = s.frame;
    for (int i = 0; i < kBlendshapeCount; ++i) {
      double v = set.d(i) * s.frame.coeffs(i);
      if (sigma > 0.0) v += sigma * noise(rng);
      p.vr.coeffs(i) = std::clamp(v, 0.0, 1.0);
    }
    set.pairs.push_back(std::move(p));
  }
  return set;
}

}  // namespace exmap::data
