#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "exmap/common.hpp"

// Residual MLP with batch normalization, manual backpropagation, and Adam.
// Layout: input FC -> BN -> ReLU, then n_blocks residual blocks of
//   y = ReLU( BN(FC2( Drop( ReLU(BN(FC1(x))) ) )) + x ),
// then a bare output FC. Batches are stored column-wise (one sample per
// column) so fully connected layers are single GEMMs.

namespace exmap::nn {

enum class Mode { kTrain, kEval };

struct EpmConfig {
  int input_dim = kBlendshapeCount;
  int hidden_dim = 128;
  int n_blocks = 4;
  int output_dim = kParamCount;
  double dropout_p = 0.1;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  void validate() const {
    if (input_dim <= 0 || hidden_dim <= 0 || n_blocks <= 0 || output_dim <= 0)
      throw Error("bad-input", "all network dimensions must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
      throw Error("bad-input", "dropout_p must lie in [0, 1)");
    if (bn_eps <= 0.0 || bn_momentum < 0.0 || bn_momentum > 1.0)
      throw Error("bad-input", "invalid batch-norm hyperparameters");
  }

  // One BN after every FC except the output FC: 1 + 2 * n_blocks of them.
  std::int64_t trainable_parameter_count() const {
    std::int64_t fc = std::int64_t(hidden_dim) * input_dim + hidden_dim;
    fc += std::int64_t(n_blocks) * 2 * (std::int64_t(hidden_dim) * hidden_dim + hidden_dim);
    fc += std::int64_t(output_dim) * hidden_dim + output_dim;
    std::int64_t bn = std::int64_t(1 + 2 * n_blocks) * 2 * hidden_dim;
    return fc + bn;
  }
  std::int64_t state_count() const {
    return trainable_parameter_count() + std::int64_t(1 + 2 * n_blocks) * 2 * hidden_dim;
  }
};

template <typename Scalar>
struct Dense {
  Mat<Scalar> W;  // out x in
  Vec<Scalar> b;
  Mat<Scalar> dW;
  Vec<Scalar> db;

  void init(int out, int in, std::mt19937_64& rng) {
    W.resize(out, in);
    b = Vec<Scalar>::Zero(out);
    // Kaiming-style uniform fan-in scaling.
    const Scalar bound = std::sqrt(Scalar(6) / Scalar(in));
    std::uniform_real_distribution<double> u(-double(bound), double(bound));
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = Scalar(u(rng));
    zero_grad();
  }
  void zero_grad() {
    dW = Mat<Scalar>::Zero(W.rows(), W.cols());
    db = Vec<Scalar>::Zero(b.size());
  }
};

template <typename Scalar>
struct BatchNorm {
  Vec<Scalar> gamma, beta, running_mean, running_var;
  Vec<Scalar> dgamma, dbeta;

  void init(int dim) {
    gamma = Vec<Scalar>::Ones(dim);
    beta = Vec<Scalar>::Zero(dim);
    running_mean = Vec<Scalar>::Zero(dim);
    running_var = Vec<Scalar>::Ones(dim);
    zero_grad();
  }
  void zero_grad() {
    dgamma = Vec<Scalar>::Zero(gamma.size());
    dbeta = Vec<Scalar>::Zero(beta.size());
  }
};

/// Reference to one trainable tensor and its gradient, in network order.
template <typename Scalar>
struct ParamView {
  const char* name;
  Scalar* value;
  Scalar* grad;
  Eigen::Index size;
};

template <typename Scalar>
class ResidualMlp {
 public:
  using M = Mat<Scalar>;
  using V = Vec<Scalar>;

  struct Block {
    Dense<Scalar> fc1, fc2;
    BatchNorm<Scalar> bn1, bn2;
  };

  ResidualMlp() = default;
  ResidualMlp(const EpmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    auto rng = make_rng(seed, 0xe9);
    in_fc_.init(cfg_.hidden_dim, cfg_.input_dim, rng);
    in_bn_.init(cfg_.hidden_dim);
    blocks_.resize(cfg_.n_blocks);
    for (auto& blk : blocks_) {
      blk.fc1.init(cfg_.hidden_dim, cfg_.hidden_dim, rng);
      blk.bn1.init(cfg_.hidden_dim);
      blk.fc2.init(cfg_.hidden_dim, cfg_.hidden_dim, rng);
      blk.bn2.init(cfg_.hidden_dim);
    }
    out_fc_.init(cfg_.output_dim, cfg_.hidden_dim, rng);
    check_parameter_count();
  }

  const EpmConfig& config() const { return cfg_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  Dense<Scalar>& input_fc() { return in_fc_; }
  Dense<Scalar>& output_fc() { return out_fc_; }
  BatchNorm<Scalar>& input_bn() { return in_bn_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  bool finite() const {
    bool ok = in_fc_.W.allFinite() && in_fc_.b.allFinite() && out_fc_.W.allFinite() &&
              out_fc_.b.allFinite() && bn_finite(in_bn_);
    for (const auto& blk : blocks_)
      ok = ok && blk.fc1.W.allFinite() && blk.fc1.b.allFinite() && blk.fc2.W.allFinite() &&
           blk.fc2.b.allFinite() && bn_finite(blk.bn1) && bn_finite(blk.bn2);
    return ok;
  }

  /// Forward pass. In train mode BN uses the batch statistics (and updates
  /// running statistics when `update_running`); dropout needs an RNG and is
  /// skipped when none is given. Records everything backward() needs when
  /// `tape` is non-null.
  struct Tape;
  M forward(const M& x, Tape* tape = nullptr, std::mt19937_64* dropout_rng = nullptr,
            bool update_running = false) {
    if (x.rows() != cfg_.input_dim)
      throw Error("dimension-mismatch", "input must have " +
                                            std::to_string(cfg_.input_dim) + " rows");
    const bool train = mode_ == Mode::kTrain;
    if (tape) {
      tape->clear();
      tape->x0 = x;
    }

    M h = in_fc_.W * x;
    h.colwise() += in_fc_.b;
    bn_forward(in_bn_, h, train, update_running, tape ? &tape->bn.emplace_back() : nullptr);
    relu_forward(h, tape ? &tape->relu.emplace_back() : nullptr);

    for (auto& blk : blocks_) {
      if (tape) tape->block_in.push_back(h);
      M t = blk.fc1.W * h;
      t.colwise() += blk.fc1.b;
      bn_forward(blk.bn1, t, train, update_running, tape ? &tape->bn.emplace_back() : nullptr);
      relu_forward(t, tape ? &tape->relu.emplace_back() : nullptr);
      dropout_forward(t, train ? dropout_rng : nullptr,
                      tape ? &tape->drop.emplace_back() : nullptr);
      if (tape) tape->fc2_in.push_back(t);
      M s = blk.fc2.W * t;
      s.colwise() += blk.fc2.b;
      bn_forward(blk.bn2, s, train, update_running, tape ? &tape->bn.emplace_back() : nullptr);
      s += h;  // skip connection before the block's final ReLU
      relu_forward(s, tape ? &tape->relu.emplace_back() : nullptr);
      h = std::move(s);
    }

    if (tape) tape->out_in = h;
    M y = out_fc_.W * h;
    y.colwise() += out_fc_.b;
    return y;
  }

  /// Backpropagates dL/dy and accumulates parameter gradients.
  void backward(const M& grad_out, const Tape& tape) {
    M g = grad_out;
    out_fc_.dW.noalias() += g * tape.out_in.transpose();
    out_fc_.db += g.rowwise().sum();
    M gh = out_fc_.W.transpose() * g;

    std::size_t bn_i = tape.bn.size();
    std::size_t relu_i = tape.relu.size();
    std::size_t drop_i = tape.drop.size();
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
      auto& blk = *it;
      const std::size_t bidx = static_cast<std::size_t>(blocks_.rend() - it) - 1;
      relu_backward(gh, tape.relu[--relu_i]);
      M gskip = gh;  // gradient through the identity path
      bn_backward(blk.bn2, gh, tape.bn[--bn_i]);
      blk.fc2.dW.noalias() += gh * tape.fc2_in[bidx].transpose();
      blk.fc2.db += gh.rowwise().sum();
      M gt = blk.fc2.W.transpose() * gh;
      dropout_backward(gt, tape.drop[--drop_i]);
      relu_backward(gt, tape.relu[--relu_i]);
      bn_backward(blk.bn1, gt, tape.bn[--bn_i]);
      blk.fc1.dW.noalias() += gt * tape.block_in[bidx].transpose();
      blk.fc1.db += gt.rowwise().sum();
      gh = blk.fc1.W.transpose() * gt;
      gh += gskip;
    }

    relu_backward(gh, tape.relu[--relu_i]);
    bn_backward(in_bn_, gh, tape.bn[--bn_i]);
    in_fc_.dW.noalias() += gh * tape.x0.transpose();
    in_fc_.db += gh.rowwise().sum();
  }

  void zero_grad() {
    in_fc_.zero_grad();
    in_bn_.zero_grad();
    for (auto& blk : blocks_) {
      blk.fc1.zero_grad();
      blk.bn1.zero_grad();
      blk.fc2.zero_grad();
      blk.bn2.zero_grad();
    }
    out_fc_.zero_grad();
  }

  std::vector<ParamView<Scalar>> trainable_views() {
    std::vector<ParamView<Scalar>> v;
    auto add = [&](const char* name, auto& val, auto& grad) {
      v.push_back({name, val.data(), grad.data(), val.size()});
    };
    add("in_fc.W", in_fc_.W, in_fc_.dW);
    add("in_fc.b", in_fc_.b, in_fc_.db);
    add("in_bn.gamma", in_bn_.gamma, in_bn_.dgamma);
    add("in_bn.beta", in_bn_.beta, in_bn_.dbeta);
    for (auto& blk : blocks_) {
      add("fc1.W", blk.fc1.W, blk.fc1.dW);
      add("fc1.b", blk.fc1.b, blk.fc1.db);
      add("bn1.gamma", blk.bn1.gamma, blk.bn1.dgamma);
      add("bn1.beta", blk.bn1.beta, blk.bn1.dbeta);
      add("fc2.W", blk.fc2.W, blk.fc2.dW);
      add("fc2.b", blk.fc2.b, blk.fc2.db);
      add("bn2.gamma", blk.bn2.gamma, blk.bn2.dgamma);
      add("bn2.beta", blk.bn2.beta, blk.bn2.dbeta);
    }
    add("out_fc.W", out_fc_.W, out_fc_.dW);
    add("out_fc.b", out_fc_.b, out_fc_.db);
    return v;
  }

  template <typename Other>
  ResidualMlp<Other> cast() const {
    ResidualMlp<Other> m;
    m.cfg_ = cfg_;
    m.mode_ = mode_;
    auto cv = [](const auto& src, auto& dst) { dst = src.template cast<Other>(); };
    cv(in_fc_.W, m.in_fc_.W); cv(in_fc_.b, m.in_fc_.b);
    copy_bn(in_bn_, m.in_bn_);
    m.blocks_.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      cv(blocks_[i].fc1.W, m.blocks_[i].fc1.W); cv(blocks_[i].fc1.b, m.blocks_[i].fc1.b);
      cv(blocks_[i].fc2.W, m.blocks_[i].fc2.W); cv(blocks_[i].fc2.b, m.blocks_[i].fc2.b);
      copy_bn(blocks_[i].bn1, m.blocks_[i].bn1);
      copy_bn(blocks_[i].bn2, m.blocks_[i].bn2);
    }
    cv(out_fc_.W, m.out_fc_.W); cv(out_fc_.b, m.out_fc_.b);
    m.zero_grad();
    return m;
  }

  struct Tape {
    M x0;
    struct BnCache { M xhat; V invstd; bool batch_stats = false; };
    std::vector<BnCache> bn;
    std::vector<Mat<bool>> relu;   // pre-activation > 0
    std::vector<M> drop;           // multiplier actually applied (0 or 1/(1-p))
    std::vector<M> block_in;
    std::vector<M> fc2_in;
    M out_in;
    void clear() {
      bn.clear(); relu.clear(); drop.clear(); block_in.clear(); fc2_in.clear();
    }
  };

  template <typename>
  friend class ResidualMlp;

 private:
  static bool bn_finite(const BatchNorm<Scalar>& bn) {
    return bn.gamma.allFinite() && bn.beta.allFinite() && bn.running_mean.allFinite() &&
           bn.running_var.allFinite() && (bn.running_var.array() > Scalar(0)).all();
  }

  template <typename A, typename B>
  static void copy_bn(const A& src, B& dst) {
    dst.gamma = src.gamma.template cast<typename B::Scalar>();
    dst.beta = src.beta.template cast<typename B::Scalar>();
    dst.running_mean = src.running_mean.template cast<typename B::Scalar>();
    dst.running_var = src.running_var.template cast<typename B::Scalar>();
  }

  void bn_forward(BatchNorm<Scalar>& bn, M& x, bool train, bool update_running,
                  typename Tape::BnCache* cache) {
    const auto bsz = x.cols();
    if (train) {
      const V mean = x.rowwise().mean();
      M centered = x.colwise() - mean;
      const V var = centered.array().square().rowwise().mean();  // biased
      const V invstd = (var.array() + Scalar(cfg_.bn_eps)).rsqrt();
      M xhat = centered.array().colwise() * invstd.array();
      x = (xhat.array().colwise() * bn.gamma.array()).colwise() + bn.beta.array();
      if (update_running) {
        const Scalar m = Scalar(cfg_.bn_momentum);
        // Running variance uses the unbiased estimate, as is conventional.
        const Scalar unbias = bsz > 1 ? Scalar(bsz) / Scalar(bsz - 1) : Scalar(1);
        bn.running_mean = (Scalar(1) - m) * bn.running_mean + m * mean;
        bn.running_var = (Scalar(1) - m) * bn.running_var + m * (unbias * var.array()).matrix();
      }
      if (cache) {
        cache->xhat = std::move(xhat);
        cache->invstd = invstd;
        cache->batch_stats = true;
      }
    } else {
      const V invstd = (bn.running_var.array() + Scalar(cfg_.bn_eps)).rsqrt();
      x = (((x.colwise() - bn.running_mean).array().colwise() * invstd.array())
               .colwise() * bn.gamma.array())
              .colwise() + bn.beta.array();
      if (cache) {
        cache->invstd = invstd;
        cache->batch_stats = false;
      }
    }
  }

  void bn_backward(BatchNorm<Scalar>& bn, M& g, const typename Tape::BnCache& cache) {
    if (!cache.batch_stats)
      throw Error("bad-input", "backward through eval-mode batch norm is unsupported");
    const auto bsz = g.cols();
    bn.dbeta += g.rowwise().sum();
    bn.dgamma += (g.array() * cache.xhat.array()).rowwise().sum().matrix();
    M gx = g.array().colwise() * bn.gamma.array();
    const V sum_gx = gx.rowwise().sum();
    const V sum_gx_xhat = (gx.array() * cache.xhat.array()).rowwise().sum();
    g = ((gx * Scalar(bsz)).colwise() - sum_gx).array() -
        (cache.xhat.array().colwise() * sum_gx_xhat.array());
    g = (g.array().colwise() * (cache.invstd.array() / Scalar(bsz))).matrix();
  }

  static void relu_forward(M& x, Mat<bool>* mask) {
    if (mask) *mask = x.array() > Scalar(0);
    x = x.cwiseMax(Scalar(0));
  }
  static void relu_backward(M& g, const Mat<bool>& mask) {
    g = (mask.array()).select(g, Scalar(0));
  }

  void dropout_forward(M& x, std::mt19937_64* rng, M* mask) {
    if (!rng || cfg_.dropout_p <= 0.0) {
      if (mask) *mask = M::Constant(x.rows(), x.cols(), Scalar(1));
      return;
    }
    const Scalar keep_scale = Scalar(1.0 / (1.0 - cfg_.dropout_p));
    std::bernoulli_distribution drop(cfg_.dropout_p);
    M m(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = drop(*rng) ? Scalar(0) : keep_scale;
    x.array() *= m.array();
    if (mask) *mask = std::move(m);
  }
  static void dropout_backward(M& g, const M& mask) { g.array() *= mask.array(); }

  void check_parameter_count() const {
    std::int64_t n = in_fc_.W.size() + in_fc_.b.size() + in_bn_.gamma.size() +
                     in_bn_.beta.size() + out_fc_.W.size() + out_fc_.b.size();
    for (const auto& blk : blocks_)
      n += blk.fc1.W.size() + blk.fc1.b.size() + blk.fc2.W.size() + blk.fc2.b.size() +
           blk.bn1.gamma.size() + blk.bn1.beta.size() + blk.bn2.gamma.size() +
           blk.bn2.beta.size();
    if (n != cfg_.trainable_parameter_count())
      throw Error("bad-input", "parameter count does not match configuration");
  }

  EpmConfig cfg_;
  Mode mode_ = Mode::kEval;
  Dense<Scalar> in_fc_, out_fc_;
  BatchNorm<Scalar> in_bn_;
  std::vector<Block> blocks_;
};

/// Adam with optional L2 weight decay folded into the gradient.
template <typename Scalar>
class Adam {
 public:
  Adam(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }

  void step(const std::vector<ParamView<Scalar>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(Vec<Scalar>::Zero(p.size));
        v_.emplace_back(Vec<Scalar>::Zero(p.size));
      }
    }
    ++t_;
    const Scalar bc1 = Scalar(1) - Scalar(std::pow(beta1_, t_));
    const Scalar bc2 = Scalar(1) - Scalar(std::pow(beta2_, t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto value = Eigen::Map<Vec<Scalar>>(params[i].value, params[i].size);
      auto grad = Eigen::Map<const Vec<Scalar>>(params[i].grad, params[i].size);
      Vec<Scalar>& m = m_[i];
      Vec<Scalar>& v = v_[i];
      Vec<Scalar> g = grad;
      if (wd_ != 0.0) g += Scalar(wd_) * value;
      m = Scalar(beta1_) * m + (Scalar(1) - Scalar(beta1_)) * g;
      v = Scalar(beta2_) * v + (Scalar(1) - Scalar(beta2_)) * g.cwiseProduct(g);
      value.array() -=
          Scalar(lr_) * (m.array() / bc1) / ((v.array() / bc2).sqrt() + Scalar(eps_));
    }
  }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Vec<Scalar>> m_, v_;
};

}  // namespace exmap::nn
