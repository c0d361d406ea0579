#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "exmap/dataset.hpp"
#include "exmap/mappers.hpp"

using namespace exmap;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

nn::EpmConfig small_config() {
  nn::EpmConfig cfg;
  cfg.hidden_dim = 16;
  cfg.n_blocks = 2;
  return cfg;
}

}  // namespace

TEST_CASE("config defaults match the published architecture") {
  nn::EpmConfig cfg;
  CHECK(cfg.input_dim == 51);
  CHECK(cfg.hidden_dim == 128);
  CHECK(cfg.n_blocks == 4);
  CHECK(cfg.output_dim == 68);
  CHECK_NOTHROW(cfg.validate());
  cfg.dropout_p = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("parameter count matches the formula at construction") {
  // Construction itself cross-checks; also verify the closed form by hand
  // for the default shape.
  nn::EpmConfig cfg;
  const std::int64_t fc = 51 * 128 + 128 + 4 * 2 * (128 * 128 + 128) + 128 * 68 + 68;
  const std::int64_t bn = 9 * 2 * 128;
  CHECK(cfg.trainable_parameter_count() == fc + bn);
  CHECK_NOTHROW(mappers::EpmModel(cfg, 0));
}

TEST_CASE("a zeroed output layer maps everything to zero") {
  mappers::EpmModel model(nn::EpmConfig{}, 3);
  model.output_fc().W.setZero();
  model.output_fc().b.setZero();
  auto rng = make_rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    BlendshapeVec coeffs;
    for (int i = 0; i < kBlendshapeCount; ++i) coeffs(i) = unit(rng);
    const auto q = mappers::epm_forward(model, coeffs);
    CHECK(q.flatten().cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  }
}

TEST_CASE("eval-mode inference is deterministic") {
  mappers::EpmModel model(nn::EpmConfig{}, 11);
  BlendshapeVec coeffs = BlendshapeVec::Constant(0.3);
  const auto a = mappers::epm_forward(model, coeffs);
  const auto b = mappers::epm_forward(model, coeffs);
  CHECK((a.flatten().array() == b.flatten().array()).all());
}

TEST_CASE("train-mode batch normalization yields zero mean and unit variance") {
  nn::EpmConfig cfg;  // full-size network, double precision
  cfg.bn_eps = 1e-6;  // keeps the eps/(var+eps) bias below the tolerance
  nn::ResidualMlp<double> model(cfg, 21);
  model.set_mode(nn::Mode::kTrain);
  auto rng = make_rng(22);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Mat<double> x(cfg.input_dim, 64);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = unit(rng);

  nn::ResidualMlp<double>::Tape tape;
  model.forward(x, &tape);
  REQUIRE(tape.bn.size() == 9);
  for (const auto& bn : tape.bn) {
    const Eigen::VectorXd mean = bn.xhat.rowwise().mean();
    const Eigen::VectorXd var =
        (bn.xhat.colwise() - mean).array().square().rowwise().mean();
    CHECK(mean.cwiseAbs().maxCoeff() < 1e-5);
    CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("a zeroed residual block is the identity on nonnegative input") {
  nn::EpmConfig cfg = small_config();
  cfg.n_blocks = 1;
  nn::ResidualMlp<double> model(cfg, 9);
  auto& blk = model.blocks()[0];
  blk.fc1.W.setZero(); blk.fc1.b.setZero();
  blk.fc2.W.setZero(); blk.fc2.b.setZero();
  blk.bn1.gamma.setZero(); blk.bn1.beta.setZero();
  blk.bn2.gamma.setZero(); blk.bn2.beta.setZero();

  auto rng = make_rng(10);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Mat<double> x(cfg.input_dim, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = unit(rng);

  nn::ResidualMlp<double>::Tape tape;
  model.forward(x, &tape);
  // tape.out_in is the block output; recompute the input stage by hand.
  Mat<double> h = model.input_fc().W * x;
  h.colwise() += model.input_fc().b;
  const auto& bn = model.input_bn();
  for (Eigen::Index c = 0; c < h.cols(); ++c)
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
      const double xhat = (h(r, c) - bn.running_mean(r)) /
                          std::sqrt(bn.running_var(r) + cfg.bn_eps);
      h(r, c) = std::max(0.0, bn.gamma(r) * xhat + bn.beta(r));
    }
  CHECK((tape.out_in - h).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient check passes across five seeds") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    CHECK(mappers::epm_grad_check(nn::EpmConfig{}, seed) < 1e-3);
}

TEST_CASE("gradient check flags an injected gradient fault") {
  int argmax = -1;
  const double err = mappers::epm_grad_check(nn::EpmConfig{}, 2, 200, 17, &argmax);
  CHECK(err > 1e-1);
  CHECK(argmax == 17);
}

TEST_CASE("an all-zero batch keeps the ReLU subgradient convention") {
  nn::EpmConfig cfg = small_config();
  nn::ResidualMlp<double> model(cfg, 30);
  model.set_mode(nn::Mode::kTrain);
  Mat<double> x = Mat<double>::Zero(cfg.input_dim, 8);
  Mat<double> target = Mat<double>::Constant(cfg.output_dim, 8, 0.75);

  nn::ResidualMlp<double>::Tape tape;
  Mat<double> pred = model.forward(x, &tape);
  const double denom = double(pred.size());
  Mat<double> grad = (pred - target).array().sign().matrix() / denom;
  model.zero_grad();
  model.backward(grad, tape);

  auto loss_at = [&]() {
    return (model.forward(x) - target).cwiseAbs().sum() / denom;
  };
  auto views = model.trainable_views();
  const double h = 1e-5;
  for (const auto& view : {views[0], views[4]}) {  // in_fc.W and a block fc1.W
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(view.size, 5); ++k) {
      const double saved = view.value[k];
      view.value[k] = saved + h;
      const double lp = loss_at();
      view.value[k] = saved - h;
      const double lm = loss_at();
      view.value[k] = saved;
      const double fd = (lp - lm) / (2 * h);
      CHECK(std::abs(view.grad[k] - fd) < 1e-8);
    }
  }
}

TEST_CASE("training with zero epochs returns the initialized model") {
  auto oracle = data::SyntheticOracle::make(1, 0.0, 2);
  auto samples = data::synth_pairs(oracle, 2, 30);
  mappers::TrainHyper hyper;
  hyper.epochs = 0;
  auto [model, report] = mappers::epm_train(samples, samples, nn::EpmConfig{}, hyper);
  CHECK(report.train_l1.empty());
  CHECK(report.val_l1.empty());
  CHECK(report.best_epoch == -1);
  CHECK(model.finite());
}

TEST_CASE("training on linear data reaches a tenth of the initial loss") {
  auto oracle = data::SyntheticOracle::make(19, 0.0, 3);
  auto samples = data::synth_pairs(oracle, 3, 700);
  nn::EpmConfig cfg;
  cfg.dropout_p = 0.0;
  mappers::TrainHyper hyper;
  hyper.epochs = 80;
  hyper.lr = 3e-3;
  hyper.batch_size = 128;
  hyper.seed = 2;
  auto [model, report] = mappers::epm_train(samples, samples, cfg, hyper);
  REQUIRE(!report.train_l1.empty());
  CHECK(!report.diverged);
  CHECK(report.train_l1.back() <= report.train_l1.front() / 10.0);
  CHECK(report.best_epoch >= 0);
}

TEST_CASE("training is deterministic given the seed") {
  auto oracle = data::SyntheticOracle::make(23, 0.3, 2);
  auto samples = data::synth_pairs(oracle, 2, 120);
  nn::EpmConfig cfg = small_config();
  mappers::TrainHyper hyper;
  hyper.epochs = 3;
  hyper.batch_size = 32;
  hyper.seed = 5;
  auto [m1, r1] = mappers::epm_train(samples, samples, cfg, hyper);
  auto [m2, r2] = mappers::epm_train(samples, samples, cfg, hyper);
  CHECK(r1.train_l1 == r2.train_l1);
  CHECK(r1.val_l1 == r2.val_l1);
  const std::string p1 = tmp_path("det_a.bin"), p2 = tmp_path("det_b.bin");
  mappers::save_model(m1, p1);
  mappers::save_model(m2, p2);
  CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("training reports divergence instead of crashing") {
  auto oracle = data::SyntheticOracle::make(29, 0.0, 2);
  auto samples = data::synth_pairs(oracle, 2, 80);
  mappers::TrainHyper hyper;
  hyper.epochs = 3;
  hyper.lr = 1e30;  // guaranteed blow-up
  hyper.batch_size = 32;
  auto [model, report] = mappers::epm_train(samples, samples, small_config(), hyper);
  CHECK(report.diverged);
}

TEST_CASE("matrix mapper is bare multiplication") {
  mappers::MatrixMapper mapper;
  mapper.M = Eigen::MatrixXd::Zero(51, 103);

  SUBCASE("zero input, zero output, no bias") {
    CHECK(mappers::matrix_map(mapper, BlendshapeVec::Zero()).cwiseAbs().maxCoeff() ==
          doctest::Approx(0.0));
  }
  SUBCASE("permutation embedding permutes the inputs") {
    for (int i = 0; i < 51; ++i) mapper.M(i, (i + 1) % 51) = 1.0;
    BlendshapeVec in = BlendshapeVec::Zero();
    in(2) = 0.4;
    const auto out = mappers::matrix_map(mapper, in);
    CHECK(out(3) == doctest::Approx(0.4));
    CHECK(out.cwiseAbs().sum() == doctest::Approx(0.4));
  }
  SUBCASE("a unit coefficient extracts a row") {
    auto rng = make_rng(14);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < 51; ++i)
      for (int j = 0; j < 103; ++j) mapper.M(i, j) = normal(rng);
    BlendshapeVec e7 = BlendshapeVec::Zero();
    e7(7) = 1.0;
    CHECK((mappers::matrix_map(mapper, e7).transpose() - mapper.M.row(7))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  }
}

TEST_CASE("ridge regression closed form") {
  SUBCASE("single-feature hand case") {
    Eigen::MatrixXd x(2, 1), y(2, 1);
    x << 1, 2;
    y << 2, 4;
    auto [w, intercept] = mappers::ridge_regression(x, y, 0.0);
    CHECK(w(0, 0) == doctest::Approx(2.0));
    CHECK(intercept(0) == doctest::Approx(0.0));
  }
  SUBCASE("lambda zero equals ordinary least squares") {
    auto rng = make_rng(16);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd x(80, 5), y(80, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = normal(rng);
    auto [w, intercept] = mappers::ridge_regression(x, y, 0.0);

    Eigen::MatrixXd aug(80, 6);
    aug << x, Eigen::VectorXd::Ones(80);
    const Eigen::MatrixXd theta =
        aug.colPivHouseholderQr().solve(y);  // independent OLS route
    CHECK((w - theta.topRows(5)).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((intercept.transpose() - theta.row(5)).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("lambda to infinity kills the weights and keeps the mean") {
    auto rng = make_rng(17);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd x(50, 3), y(50, 2);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = 3.0 + normal(rng);
    auto [w, intercept] = mappers::ridge_regression(x, y, 1e12);
    CHECK(w.cwiseAbs().maxCoeff() < 1e-6);
    CHECK((intercept.transpose() - y.colwise().mean()).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("ridge mapper application") {
  mappers::RidgeMapper mapper;
  mapper.W = Eigen::MatrixXd::Zero(51, 109);
  mapper.intercept = Eigen::VectorXd::Constant(109, 0.7);
  const auto out = mappers::ridge_apply(mapper, BlendshapeVec::Constant(0.3));
  CHECK((out.array() == 0.7).all());

  // Identity-embedded weights reproduce inputs in the embedded coordinates.
  for (int i = 0; i < 51; ++i) mapper.W(i, i) = 1.0;
  mapper.intercept.setZero();
  BlendshapeVec in;
  auto rng = make_rng(50);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 51; ++i) in(i) = unit(rng);
  const auto out2 = mappers::ridge_apply(mapper, in);
  CHECK((out2.head<51>() - in).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(out2.tail(58).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("ridge at lambda zero attains the OLS residual on the fit set") {
  auto oracle = data::SyntheticOracle::make(43, 0.4, 2);
  auto samples = data::synth_pairs(oracle, 2, 300);
  std::vector<std::pair<BlendshapeVec, Eigen::VectorXd>> pairs;
  Eigen::MatrixXd X(samples.size(), 51), Y(samples.size(), 109);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Eigen::VectorXd t = Eigen::VectorXd::Zero(109);
    t.head<50>() = samples[i].target.expr;
    t.segment<6>(100) = samples[i].target.jaw6d;  // arbitrary embedding for the test
    pairs.emplace_back(samples[i].frame.coeffs, t);
    X.row(i) = samples[i].frame.coeffs.transpose();
    Y.row(i) = t.transpose();
  }
  const auto mapper = mappers::ridge_fit(pairs, 0.0);
  double fit_sq = 0.0;
  for (const auto& [x, y] : pairs)
    fit_sq += (mappers::ridge_apply(mapper, x) - y).squaredNorm();

  Eigen::MatrixXd aug(X.rows(), 52);
  aug << X, Eigen::VectorXd::Ones(X.rows());
  const Eigen::MatrixXd theta = aug.colPivHouseholderQr().solve(Y);
  const double ols_sq = (aug * theta - Y).squaredNorm();
  CHECK(fit_sq == doctest::Approx(ols_sq).epsilon(1e-8));
}

TEST_CASE("ridge with an intercept never loses to a bias-free matrix") {
  auto oracle = data::SyntheticOracle::make(47, 0.5, 3);
  auto samples = data::synth_pairs(oracle, 3, 400);
  Eigen::MatrixXd X(samples.size(), 51), Y(samples.size(), 103);
  std::vector<std::pair<BlendshapeVec, Eigen::VectorXd>> pairs;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Eigen::VectorXd t = Eigen::VectorXd::Zero(103);
    t.head<50>() = samples[i].target.expr;
    X.row(i) = samples[i].frame.coeffs.transpose();
    Y.row(i) = t.transpose();
    Eigen::VectorXd t109 = Eigen::VectorXd::Zero(109);
    t109.head(103) = t;
    pairs.emplace_back(samples[i].frame.coeffs, t109);
  }
  // Best bias-free matrix in the least-squares sense.
  mappers::MatrixMapper matrix;
  matrix.M = (X.transpose() * X).ldlt().solve(X.transpose() * Y);

  const auto ridge = mappers::ridge_fit(pairs, 0.0);
  double ridge_sq = 0.0, matrix_sq = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ridge_sq += (mappers::ridge_apply(ridge, samples[i].frame.coeffs).head(103) -
                 Y.row(i).transpose())
                    .squaredNorm();
    matrix_sq +=
        (mappers::matrix_map(matrix, samples[i].frame.coeffs) - Y.row(i).transpose())
            .squaredNorm();
  }
  CHECK(ridge_sq <= matrix_sq + 1e-9);
}

TEST_CASE("model files round trip byte-identically with version checks") {
  SUBCASE("epm") {
    mappers::EpmModel model(small_config(), 77);
    const std::string p1 = tmp_path("epm_a.bin"), p2 = tmp_path("epm_b.bin");
    mappers::save_model(model, p1);
    mappers::save_model(mappers::load_epm(p1), p2);
    CHECK(file_bytes(p1) == file_bytes(p2));

    std::string bytes = file_bytes(p1);
    std::ofstream(p1, std::ios::binary).write(bytes.data(), 40);
    CHECK_THROWS_AS(mappers::load_epm(p1), Error);
    bytes[3] = '9';
    std::ofstream(p1, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    try {
      mappers::load_epm(p1);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.cls() == "version-mismatch");
    }
  }
  SUBCASE("matrix") {
    mappers::MatrixMapper mapper;
    auto rng = make_rng(3);
    std::normal_distribution<double> normal(0.0, 1.0);
    mapper.M.resize(51, 103);
    for (Eigen::Index i = 0; i < mapper.M.size(); ++i) mapper.M.data()[i] = normal(rng);
    const std::string p1 = tmp_path("mat_a.bin"), p2 = tmp_path("mat_b.bin");
    mappers::save_model(mapper, p1);
    mappers::save_model(mappers::load_matrix_mapper(p1), p2);
    CHECK(file_bytes(p1) == file_bytes(p2));
  }
  SUBCASE("ridge") {
    mappers::RidgeMapper mapper;
    auto rng = make_rng(4);
    std::normal_distribution<double> normal(0.0, 1.0);
    mapper.W.resize(51, 109);
    for (Eigen::Index i = 0; i < mapper.W.size(); ++i) mapper.W.data()[i] = normal(rng);
    mapper.intercept.resize(109);
    for (int i = 0; i < 109; ++i) mapper.intercept(i) = normal(rng);
    const std::string p1 = tmp_path("rdg_a.bin"), p2 = tmp_path("rdg_b.bin");
    mappers::save_model(mapper, p1);
    mappers::save_model(mappers::load_ridge_mapper(p1), p2);
    CHECK(file_bytes(p1) == file_bytes(p2));
  }
}

TEST_CASE("train report serializes to JSON") {
  mappers::TrainReport report;
  report.train_l1 = {1.0, 0.5};
  report.val_l1 = {0.9, 0.6};
  report.best_epoch = 1;
  const std::string json = report.to_json();
  CHECK(json.find("\"best_epoch\": 1") != std::string::npos);
  CHECK(json.find("train_l1") != std::string::npos);
}
