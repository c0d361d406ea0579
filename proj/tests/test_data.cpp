#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "exmap/bda.hpp"
#include "exmap/dataset.hpp"
#include "exmap/mappers.hpp"

using namespace exmap;

namespace {

std::string tmp_file(const std::string& name, const std::string& contents) {
  const auto path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream(path) << contents;
  return path;
}

std::string bs_array(double value) {
  std::string s = "[";
  for (int i = 0; i < kBlendshapeCount; ++i) s += (i ? "," : "") + std::to_string(value);
  return s + "]";
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

}  // namespace

TEST_CASE("load_pairs accepts a well-formed record") {
  const auto path = tmp_file("lp_ok.jsonl",
                             R"({"subject":"a","frame":1,"ts_us":10,"bs":)" + bs_array(0.5) +
                                 "}\n");
  const auto result = data::load_pairs(path, data::Manifest::canonical());
  CHECK(result.samples.size() == 1);
  CHECK(result.clamp_count == 0);
  CHECK(!result.targets_present);
  CHECK(result.samples[0].frame.coeffs(0) == doctest::Approx(0.5));
}

TEST_CASE("load_pairs clamps out-of-range coefficients and counts them") {
  const auto path = tmp_file("lp_clamp.jsonl",
                             R"({"subject":"a","frame":1,"ts_us":0,"bs":)" + bs_array(1.2) +
                                 "}\n");
  const auto result = data::load_pairs(path, data::Manifest::canonical());
  CHECK(result.clamp_count == kBlendshapeCount);
  CHECK(result.samples[0].frame.coeffs.maxCoeff() == doctest::Approx(1.0));

  const auto path2 = tmp_file(
      "lp_clamp1.jsonl",
      R"({"subject":"a","frame":1,"ts_us":0,"bs":[1.2)" +
          ([] { std::string s; for (int i = 1; i < 51; ++i) s += ",0.1"; return s; })() +
          "]}\n");
  CHECK(data::load_pairs(path2, data::Manifest::canonical()).clamp_count == 1);
}

TEST_CASE("load_pairs rejects wrong coefficient counts with the line number") {
  std::string fifty = "[";
  for (int i = 0; i < 50; ++i) fifty += (i ? ",0.1" : "0.1");
  fifty += "]";
  const auto path = tmp_file("lp_50.jsonl",
                             R"({"subject":"a","frame":1,"ts_us":0,"bs":)" + fifty + "}\n");
  try {
    data::load_pairs(path, data::Manifest::canonical());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("coefficient count mismatch") != std::string::npos);
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
}

TEST_CASE("load_pairs reports malformed JSON with the line number") {
  const auto path = tmp_file("lp_bad.jsonl",
                             R"({"subject":"a","frame":1,"ts_us":0,"bs":)" + bs_array(0.1) +
                                 "}\nnot json\n");
  try {
    data::load_pairs(path, data::Manifest::canonical());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.cls() == "parse-error");
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("load_pairs maps named coefficients through the manifest") {
  const auto path = tmp_file("lp_named.jsonl",
                             R"({"subject":"a","frame":1,"ts_us":0,"bs":{"jawOpen":0.7}})"
                             "\n");
  const auto result = data::load_pairs(path, data::Manifest::canonical());
  const int idx = data::Manifest::canonical().index_of("jawOpen");
  CHECK(result.samples[0].frame.coeffs(idx) == doctest::Approx(0.7));

  const auto bad = tmp_file("lp_unknown.jsonl",
                            R"({"subject":"a","frame":1,"ts_us":0,"bs":{"nope":0.7}})" "\n");
  try {
    data::load_pairs(bad, data::Manifest::canonical());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("unknown coefficient name") != std::string::npos);
  }
}

TEST_CASE("the shipped manifest matches the built-in ordering") {
  const char* assets = std::getenv("EXMAP_ASSETS");
  const std::string root = assets ? assets : "assets";
  const std::string path = root + "/blendshapes51.txt";
  if (!std::filesystem::exists(path)) {
    MESSAGE("manifest asset not found; set EXMAP_ASSETS");
    return;
  }
  const auto m = data::Manifest::load(path);
  CHECK(m.names == data::Manifest::canonical().names);
  CHECK(m.version == 1);
}

TEST_CASE("save/load of pairs round trips") {
  auto oracle = data::SyntheticOracle::make(5, 0.3, 2);
  auto samples = data::synth_pairs(oracle, 2, 5);
  const auto path = (std::filesystem::temp_directory_path() / "roundtrip.jsonl").string();
  data::save_pairs(path, samples, true);
  const auto loaded = data::load_pairs(path, data::Manifest::canonical());
  REQUIRE(loaded.samples.size() == samples.size());
  CHECK(loaded.targets_present);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK((loaded.samples[i].frame.coeffs - samples[i].frame.coeffs).cwiseAbs().maxCoeff() <
          1e-15);
    CHECK((loaded.samples[i].target.flatten() - samples[i].target.flatten())
              .cwiseAbs()
              .maxCoeff() < 1e-15);
  }
}

TEST_CASE("expression parameter invariants") {
  data::ExpressionParams q;
  CHECK_NOTHROW(q.validate());
  q.jaw6d.setZero();
  CHECK_THROWS_AS(q.validate(), Error);
  q = data::ExpressionParams{};
  q.eye_l6d.tail<3>() = q.eye_l6d.head<3>();  // parallel
  CHECK_THROWS_AS(q.validate(), Error);
  CHECK(data::ExpressionParams{}.flatten().size() == kParamCount);
}

TEST_CASE("split_subjects is disjoint, covering and deterministic") {
  auto oracle = data::SyntheticOracle::make(3, 0.0, 10);
  auto samples = data::synth_pairs(oracle, 10, 2);
  const auto a = data::split_subjects(samples, {8, 1, 1}, 7);
  const auto b = data::split_subjects(samples, {8, 1, 1}, 7);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  CHECK(a.train.size() == 8);
  CHECK(a.val.size() == 1);
  CHECK(a.test.size() == 1);
  std::set<std::string> all;
  for (const auto& s : a.train) all.insert(s);
  for (const auto& s : a.val) all.insert(s);
  for (const auto& s : a.test) all.insert(s);
  CHECK(all.size() == 10);
}

TEST_CASE("split_subjects fails with too few subjects") {
  auto oracle = data::SyntheticOracle::make(3, 0.0, 3);
  auto samples = data::synth_pairs(oracle, 3, 2);
  CHECK_THROWS_AS(data::split_subjects(samples, {8, 1, 1}, 7), Error);
}

TEST_CASE("split_subjects honors per-source quotas") {
  std::vector<data::PairedSample> samples;
  for (int src = 0; src < 3; ++src) {
    auto oracle = data::SyntheticOracle::make(10 + src, 0.0, 10);
    auto part = data::synth_pairs(oracle, 10, 1);
    for (auto& s : part)
      s.frame.subject_id = "d" + std::to_string(src) + "/" + s.frame.subject_id;
    samples.insert(samples.end(), part.begin(), part.end());
  }
  const auto split = data::split_subjects(samples, {8, 1, 1}, 99);
  CHECK(split.train.size() == 24);
  CHECK(split.val.size() == 3);
  CHECK(split.test.size() == 3);
  for (int src = 0; src < 3; ++src) {
    const std::string prefix = "d" + std::to_string(src) + "/";
    auto count = [&](const std::vector<std::string>& v) {
      return std::count_if(v.begin(), v.end(),
                           [&](const std::string& s) { return s.rfind(prefix, 0) == 0; });
    };
    CHECK(count(split.val) == 1);
    CHECK(count(split.test) == 1);
  }
}

TEST_CASE("balanced batches draw subjects uniformly") {
  // Two subjects with very different frame counts.
  auto oracle = data::SyntheticOracle::make(21, 0.0, 2);
  std::vector<data::PairedSample> samples = data::synth_pairs(oracle, 1, 10);
  auto big = data::synth_pairs(oracle, 2, 1000);
  for (auto& s : big)
    if (s.frame.subject_id == "s001") samples.push_back(s);
  REQUIRE(samples.size() == 1010);

  // 10k draws via repeated epochs for the binomial bound at n >= 10000.
  std::size_t total = 0, hits = 0;
  for (int epoch = 0; total < 10000; ++epoch) {
    for (const auto& b : data::balanced_batches(samples, 100, 1000 + epoch))
      for (auto idx : b) {
        ++total;
        if (samples[idx].frame.subject_id == "s000") ++hits;
      }
  }
  CHECK(std::abs(double(hits) - double(total) / 2) <
        3.0 * std::sqrt(double(total) * 0.25));
}

TEST_CASE("balanced batches pass a chi-square uniformity check") {
  auto oracle = data::SyntheticOracle::make(33, 0.0, 5);
  auto samples = data::synth_pairs(oracle, 5, 2100);  // 10500 draws per epoch
  std::map<std::string, std::size_t> counts;
  std::size_t draws = 0;
  for (const auto& b : data::balanced_batches(samples, 256, 17))
    for (auto idx : b) {
      ++counts[samples[idx].frame.subject_id];
      ++draws;
    }
  REQUIRE(draws >= 10000);
  const double expected = double(draws) / 5.0;
  double chi2 = 0.0;
  for (const auto& [id, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
  CHECK(chi2 < 13.277);  // chi-square 99th percentile, 4 dof
}

TEST_CASE("balanced batches degenerate and error cases") {
  auto oracle = data::SyntheticOracle::make(4, 0.0, 1);
  auto samples = data::synth_pairs(oracle, 1, 57);
  const auto batches = data::balanced_batches(samples, 10, 5);
  std::vector<std::size_t> seen;
  for (const auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> want(samples.size());
  std::iota(want.begin(), want.end(), 0);
  CHECK(seen == want);  // single subject: a plain shuffled pass

  CHECK_THROWS_AS(data::balanced_batches({}, 10, 5), Error);
}

TEST_CASE("synth_pairs with alpha 0 is exactly affine") {
  auto oracle = data::SyntheticOracle::make(8, 0.0, 1);
  auto samples = data::synth_pairs(oracle, 1, 400);
  Eigen::MatrixXd X(samples.size(), kBlendshapeCount);
  Eigen::MatrixXd Y(samples.size(), kExprCount);  // expression block stays affine
  for (std::size_t i = 0; i < samples.size(); ++i) {
    X.row(i) = samples[i].frame.coeffs.transpose();
    Y.row(i) = samples[i].target.expr.transpose();
  }
  auto [W, intercept] = mappers::ridge_regression(X, Y, 0.0);
  const Eigen::MatrixXd pred = (X * W).rowwise() + intercept.transpose();
  CHECK((pred - Y).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("synth_pairs is bit-identical across regenerations") {
  auto a = data::synth_pairs(data::SyntheticOracle::make(77, 0.5, 3), 3, 20);
  auto b = data::synth_pairs(data::SyntheticOracle::make(77, 0.5, 3), 3, 20);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK((a[i].frame.coeffs.array() == b[i].frame.coeffs.array()).all());
    CHECK((a[i].target.flatten().array() == b[i].target.flatten().array()).all());
  }
}

TEST_CASE("synth_pairs with alpha > 0 defeats any affine fit") {
  auto oracle = data::SyntheticOracle::make(8, 0.5, 1);
  auto samples = data::synth_pairs(oracle, 1, 2000);
  Eigen::MatrixXd X(samples.size(), kBlendshapeCount);
  Eigen::MatrixXd Y(samples.size(), kExprCount);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    X.row(i) = samples[i].frame.coeffs.transpose();
    Y.row(i) = samples[i].target.expr.transpose();
  }
  auto [W, intercept] = mappers::ridge_regression(X, Y, 0.0);
  const Eigen::MatrixXd residual = ((X * W).rowwise() + intercept.transpose()) - Y;
  const double rms = std::sqrt(residual.squaredNorm() / double(residual.size()));
  CHECK(rms > 1e-3);
}

TEST_CASE("targets generated by the oracle satisfy the 6D invariants") {
  auto samples = data::synth_pairs(data::SyntheticOracle::make(55, 0.5, 2), 2, 50);
  for (const auto& s : samples) CHECK_NOTHROW(s.target.validate());
}

TEST_CASE("vr pairs: identity remap reproduces the input") {
  auto samples = data::synth_pairs(data::SyntheticOracle::make(6, 0.2, 1), 1, 30);
  const auto set = data::synth_vr_pairs(samples, 9, 0.0, {1.0});
  for (const auto& p : set.pairs)
    CHECK((p.vr.coeffs - p.mp.coeffs).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("vr pairs: stock scalar weights behave as documented") {
  data::PairedSample s;
  s.frame.subject_id = "a";
  s.frame.coeffs(10) = 0.8;
  const auto set = data::synth_vr_pairs({s}, 4, 0.0, {0.5});
  CHECK(set.pairs[0].vr.coeffs(10) == doctest::Approx(0.4));
  CHECK((set.d.array() == 0.5).all());
}

TEST_CASE("fit_bda recovers a noiseless diagonal remap exactly") {
  auto samples = data::synth_pairs(data::SyntheticOracle::make(31, 0.5, 4), 4, 600);
  const auto set = data::synth_vr_pairs(samples, 12, 0.0);
  std::vector<std::pair<BlendshapeVec, BlendshapeVec>> pairs;
  for (const auto& p : set.pairs) pairs.emplace_back(p.vr.coeffs, p.mp.coeffs);
  const auto alignment = bda::fit_bda(pairs);

  // mp = D^-1 vr, so W D should be the identity.
  const Eigen::MatrixXd wd = alignment.W * set.d.asDiagonal();
  CHECK((wd - Eigen::MatrixXd::Identity(51, 51)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(alignment.b.cwiseAbs().maxCoeff() < 1e-6);
  CHECK(alignment.fit_stats.train_mse < 1e-10);

  for (const auto& p : set.pairs)
    CHECK((bda::apply_bda(alignment, p.vr.coeffs) - p.mp.coeffs).cwiseAbs().maxCoeff() <
          1e-6);
}

TEST_CASE("fit_bda on identity pairs is the identity map") {
  auto samples = data::synth_pairs(data::SyntheticOracle::make(41, 0.5, 2), 2, 300);
  std::vector<std::pair<BlendshapeVec, BlendshapeVec>> pairs;
  for (const auto& s : samples) pairs.emplace_back(s.frame.coeffs, s.frame.coeffs);
  const auto alignment = bda::fit_bda(pairs);
  CHECK((alignment.W - Eigen::MatrixXd::Identity(51, 51)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(alignment.fit_stats.train_mse < 1e-10);
}

TEST_CASE("fit_bda residual variance tracks additive output noise") {
  auto rng = make_rng(61);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Matrix<double, 51, 51> w_true = Eigen::Matrix<double, 51, 51>::Identity();
  for (int i = 0; i < 51; ++i)
    for (int j = 0; j < 51; ++j) w_true(i, j) += 0.05 * normal(rng);
  BlendshapeVec b_true;
  for (int i = 0; i < 51; ++i) b_true(i) = 0.1 * normal(rng);

  const double sigma = 0.01;
  auto samples = data::synth_pairs(data::SyntheticOracle::make(62, 0.5, 4), 4, 800);
  std::vector<std::pair<BlendshapeVec, BlendshapeVec>> pairs;
  for (const auto& s : samples) {
    BlendshapeVec noise;
    for (int i = 0; i < 51; ++i) noise(i) = sigma * normal(rng);
    pairs.emplace_back(s.frame.coeffs, w_true * s.frame.coeffs + b_true + noise);
  }
  const auto alignment = bda::fit_bda(pairs);
  CHECK(alignment.fit_stats.train_mse > 0.8 * sigma * sigma);
  CHECK(alignment.fit_stats.train_mse < 1.2 * sigma * sigma);
  CHECK((alignment.W - w_true).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("fitted alignment sits at a local minimum of the training error") {
  auto samples = data::synth_pairs(data::SyntheticOracle::make(71, 0.5, 2), 2, 200);
  const auto set = data::synth_vr_pairs(samples, 5, 0.005);
  std::vector<std::pair<BlendshapeVec, BlendshapeVec>> pairs;
  for (const auto& p : set.pairs) pairs.emplace_back(p.vr.coeffs, p.mp.coeffs);
  auto alignment = bda::fit_bda(pairs);

  auto mse_of = [&](const bda::AffineAlignment& a) {
    double sq = 0.0;
    for (const auto& [x, y] : pairs) sq += (y - (a.W * x + a.b)).squaredNorm();
    return sq / (double(pairs.size()) * kBlendshapeCount);
  };
  const double base = mse_of(alignment);
  auto rng = make_rng(4);
  std::uniform_int_distribution<int> pick(0, 50);
  for (int trial = 0; trial < 30; ++trial) {
    bda::AffineAlignment perturbed = alignment;
    const int i = pick(rng), j = pick(rng);
    const double delta = (trial % 2 == 0) ? 1e-3 : -1e-3;
    if (trial % 3 == 0)
      perturbed.b(i) += delta;
    else
      perturbed.W(i, j) += delta;
    CHECK(mse_of(perturbed) >= base);
  }
}

TEST_CASE("apply_bda is affine before clamping") {
  auto alignment = bda::AffineAlignment::identity();
  auto rng = make_rng(8);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (int i = 0; i < 51; ++i) {
    alignment.b(i) = normal(rng);
    for (int j = 0; j < 51; ++j) alignment.W(i, j) += normal(rng);
  }
  BlendshapeVec x = BlendshapeVec::Constant(0.4), y = BlendshapeVec::Constant(0.6);
  const double a = 0.35;
  const BlendshapeVec lhs = alignment.W * (a * x + (1 - a) * y) + alignment.b;
  const BlendshapeVec rhs =
      a * (alignment.W * x + alignment.b) + (1 - a) * (alignment.W * y + alignment.b);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("apply_bda clamps and preserves metadata") {
  auto alignment = bda::AffineAlignment::identity();
  data::BlendshapeFrame frame;
  frame.subject_id = "who";
  frame.frame_id = 9;
  frame.timestamp_us = 123;
  frame.coeffs.setConstant(0.75);
  auto out = bda::apply_bda(alignment, frame);
  CHECK(out.subject_id == "who");
  CHECK(out.frame_id == 9);
  CHECK((out.coeffs.array() == 0.75).all());

  alignment.W *= 2.0;
  out = bda::apply_bda(alignment, frame);
  CHECK((out.coeffs.array() == 1.0).all());
}

TEST_CASE("fit_bda input validation") {
  std::vector<std::pair<BlendshapeVec, BlendshapeVec>> pairs(10);
  CHECK_THROWS_AS(bda::fit_bda(pairs), Error);
  pairs.resize(60);
  pairs[5].first(0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(bda::fit_bda(pairs), Error);
}

TEST_CASE("alignment file round trip is bit-exact with version checks") {
  auto samples = data::synth_pairs(data::SyntheticOracle::make(81, 0.5, 2), 2, 100);
  std::vector<std::pair<BlendshapeVec, BlendshapeVec>> pairs;
  for (const auto& s : samples) pairs.emplace_back(s.frame.coeffs, s.frame.coeffs);
  const auto alignment = bda::fit_bda(pairs);

  const auto p1 = (std::filesystem::temp_directory_path() / "bda_a.bin").string();
  const auto p2 = (std::filesystem::temp_directory_path() / "bda_b.bin").string();
  bda::save_alignment(alignment, p1);
  const auto loaded = bda::load_alignment(p1);
  CHECK((loaded.W.array() == alignment.W.array()).all());
  CHECK((loaded.b.array() == alignment.b.array()).all());
  CHECK(loaded.fit_stats.n_samples == alignment.fit_stats.n_samples);
  bda::save_alignment(loaded, p2);
  CHECK(file_bytes(p1) == file_bytes(p2));

  std::string bytes = file_bytes(p1);
  std::ofstream(p1, std::ios::binary).write(bytes.data(), 100);
  CHECK_THROWS_AS(bda::load_alignment(p1), Error);

  bytes[3] = '7';
  std::ofstream(p1, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
  try {
    bda::load_alignment(p1);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.cls() == "version-mismatch");
  }
}
