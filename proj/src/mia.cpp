#include "exmap/mia.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

#include "exmap/binio.hpp"
#include "exmap/metrics.hpp"

namespace exmap::mia {

Predictor epm_predictor(mappers::EpmModel& model) {
  return [&model](const data::BlendshapeFrame& frame) {
    return mappers::epm_forward(model, frame.coeffs);
  };
}

namespace {

struct FrameContext {
  flame::LbsTransforms lbs;
  Eigen::VectorXd rest_base;   // rest pose with zero offsets
  Eigen::VectorXd gt_flat;     // ground-truth deformed vertices
  data::ExpressionParams pred; // frozen mapper output
};

Eigen::VectorXd flatten_mesh(const flame::Mesh& mesh) {
  Eigen::VectorXd flat(3 * mesh.vertices.rows());
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i)
    flat.segment<3>(3 * i) = mesh.vertices.row(i).transpose();
  return flat;
}

std::vector<FrameContext> build_contexts(const flame::FlameLiteModel& model,
                                         const Predictor& predictor,
                                         const std::vector<data::PairedSample>& frames) {
  std::vector<FrameContext> ctx;
  ctx.reserve(frames.size());
  for (const auto& s : frames) {
    FrameContext c;
    c.pred = predictor(s.frame);
    const flame::JointRotations rots = flame::joint_rotations(c.pred);
    c.lbs = flame::lbs_transforms(model, rots);
    Eigen::VectorXd e_eff = flame::adapt_expr(c.pred.expr, model.expr_dim());
    c.rest_base = flatten_mesh(flame::Mesh{model.template_vertices, model.faces});
    c.rest_base += model.expr_basis * e_eff;
    c.rest_base += model.pose_basis * flame::pose_feature(rots);
    c.gt_flat = flatten_mesh(flame::deform(model, s.target));
    ctx.push_back(std::move(c));
  }
  return ctx;
}

// Vertex-space terms are accumulated in squared millimeters so the default
// loss weights keep the regularizers subordinate to the data term.
constexpr double kSqMmPerSqM = 1e6;

double objective_impl(const flame::FlameLiteModel& model,
                      const std::vector<FrameContext>& ctx,
                      const Eigen::SparseMatrix<double>& lap, double scale_term,
                      double mean_pred_expr_sq, const MiaConfig& config,
                      const AvatarOffsets& offsets, Eigen::VectorXd* grad,
                      LossParts* parts) {
  const auto v = model.vertex_count();
  const int k_e = model.expr_dim();
  const double nf = double(ctx.size());

  if (grad) *grad = Eigen::VectorXd::Zero(k_e + kPoseFeatureCount);
  const Eigen::VectorXd delta =
      model.expr_basis * offsets.d_e + model.pose_basis * offsets.d_p;

  double vtx = 0.0, lap_sum = 0.0;
  Eigen::VectorXd mesh_grad(3 * v), t(3 * v);
  Eigen::MatrixX3d verts;
  for (const auto& c : ctx) {
    flame::lbs_apply(c.lbs, c.rest_base + delta, verts);
    Eigen::VectorXd flat = flatten_mesh(flame::Mesh{verts, model.faces});
    const Eigen::VectorXd r = flat - c.gt_flat;
    vtx += kSqMmPerSqM * r.squaredNorm() / double(v);
    if (grad) mesh_grad = (kSqMmPerSqM * 2.0 / (nf * double(v))) * r;

    // Laplacian term: rows of `lap` act on vertex positions per coordinate.
    Eigen::MatrixX3d lx(v, 3);
    for (int cdim = 0; cdim < 3; ++cdim) {
      Eigen::VectorXd coord(v);
      for (Eigen::Index i = 0; i < v; ++i) coord(i) = verts(i, cdim);
      lx.col(cdim) = lap * coord;
    }
    lap_sum += kSqMmPerSqM * lx.squaredNorm() / double(v);
    if (grad) {
      Eigen::MatrixX3d ltlx(v, 3);
      for (int cdim = 0; cdim < 3; ++cdim)
        ltlx.col(cdim) = lap.transpose() * Eigen::VectorXd(lx.col(cdim));
      for (Eigen::Index i = 0; i < v; ++i)
        mesh_grad.segment<3>(3 * i) +=
            (config.lambda_lap * kSqMmPerSqM * 2.0 / (nf * double(v))) *
            ltlx.row(i).transpose();
      t = flame::lbs_adjoint(c.lbs, mesh_grad);
      grad->head(k_e) += model.expr_basis.transpose() * t;
      grad->tail(kPoseFeatureCount) += model.pose_basis.transpose() * t;
    }
  }
  vtx /= nf;
  lap_sum /= nf;

  const double reg =
      mean_pred_expr_sq + offsets.d_e.squaredNorm() + offsets.d_p.squaredNorm();
  if (grad) {
    grad->head(k_e) += (config.lambda_reg * 2.0) * offsets.d_e;
    grad->tail(kPoseFeatureCount) += (config.lambda_reg * 2.0) * offsets.d_p;
  }

  LossParts p;
  p.vtx = vtx;
  p.lap = config.lambda_lap * lap_sum;
  p.reg = config.lambda_reg * reg;
  p.scale = config.lambda_scale * scale_term;
  if (parts) *parts = p;
  return p.total();
}

double scale_penalty_for(const flame::FlameLiteModel& model, const rig::GaussianCloud& cloud,
                         const std::vector<FrameContext>& ctx) {
  // The per-Gaussian scale ratio is invariant to the (scalar) face scale, so
  // this term does not depend on the offsets; it is evaluated once.
  if (cloud.size() == 0 || ctx.empty()) return 0.0;
  Eigen::MatrixX3d verts;
  flame::lbs_apply(ctx.front().lbs, ctx.front().rest_base, verts);
  const auto updated = rig::update_gaussians(cloud, flame::Mesh{verts, model.faces});
  return rig::anisotropy_penalty(updated.dynamics);
}

}  // namespace

double mia_objective(const flame::FlameLiteModel& model, const rig::GaussianCloud& cloud,
                     const Predictor& predictor,
                     const std::vector<data::PairedSample>& frames, const MiaConfig& config,
                     const AvatarOffsets& offsets, Eigen::VectorXd* grad, LossParts* parts) {
  if (frames.empty()) throw Error("insufficient-data", "need at least one frame");
  const auto ctx = build_contexts(model, predictor, frames);
  const auto lap = flame::uniform_laplacian(*model.faces, model.vertex_count());
  double expr_sq = 0.0;
  for (const auto& c : ctx) expr_sq += c.pred.expr.squaredNorm();
  expr_sq /= double(ctx.size());
  const double scale_term = scale_penalty_for(model, cloud, ctx);
  return objective_impl(model, ctx, lap, scale_term, expr_sq, config, offsets, grad, parts);
}

std::pair<AvatarOffsets, MiaReport> mia_fit(
    const flame::FlameLiteModel& model, const rig::GaussianCloud& cloud,
    const Predictor& predictor, const std::vector<data::PairedSample>& frames,
    const MiaConfig& config, const std::vector<data::PairedSample>* holdout) {
  if (frames.empty()) throw Error("insufficient-data", "need at least one frame");
  model.validate();

  MiaReport report;
  report.config = config;

  const auto ctx = build_contexts(model, predictor, frames);
  const auto lap = flame::uniform_laplacian(*model.faces, model.vertex_count());
  double expr_sq = 0.0;
  for (const auto& c : ctx) expr_sq += c.pred.expr.squaredNorm();
  expr_sq /= double(ctx.size());
  const double scale_term = scale_penalty_for(model, cloud, ctx);

  AvatarOffsets offsets = AvatarOffsets::zeros(model.expr_dim());
  AvatarOffsets best = offsets;
  double best_loss = std::numeric_limits<double>::infinity();

  report.pre_train_rmse_mm = mia_eval(model, predictor, offsets, frames).with_offsets_mm;
  if (holdout)
    report.pre_holdout_rmse_mm = mia_eval(model, predictor, offsets, *holdout).with_offsets_mm;

  const int k_e = model.expr_dim();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(k_e + kPoseFeatureCount);
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd m = Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(x.size());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  for (int it = 0; it < config.iterations; ++it) {
    // Cosine decay to 1% of the base rate; the tail of the schedule settles
    // the iterate well below the optimizer's oscillation floor.
    const double t = config.iterations > 1 ? double(it) / double(config.iterations - 1) : 0.0;
    const double lr = config.lr * (0.01 + 0.99 * 0.5 * (1.0 + std::cos(t * M_PI)));
    offsets.d_e = x.head(k_e);
    offsets.d_p = x.tail(kPoseFeatureCount);
    LossParts parts;
    const double loss =
        objective_impl(model, ctx, lap, scale_term, expr_sq, config, offsets, &g, &parts);
    if (!std::isfinite(loss)) {
      report.diverged = true;
      break;
    }
    report.history.push_back(parts);
    if (loss < best_loss) {
      best_loss = loss;
      best = offsets;
    }
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v.array().matrix() + (1.0 - beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(beta1, it + 1);
    const double bc2 = 1.0 - std::pow(beta2, it + 1);
    x.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
  }

  report.post_train_rmse_mm = mia_eval(model, predictor, best, frames).with_offsets_mm;
  if (holdout)
    report.post_holdout_rmse_mm =
        mia_eval(model, predictor, best, *holdout).with_offsets_mm;
  return {std::move(best), std::move(report)};
}

MiaEval mia_eval(const flame::FlameLiteModel& model, const Predictor& predictor,
                 const AvatarOffsets& offsets, const std::vector<data::PairedSample>& frames) {
  if (frames.empty()) throw Error("insufficient-data", "need at least one frame");
  double with_sq = 0.0, without_sq = 0.0;
  for (const auto& s : frames) {
    const data::ExpressionParams pred = predictor(s.frame);
    const flame::Mesh gt = flame::deform(model, s.target);
    const flame::Mesh plain = flame::deform(model, pred);
    const flame::Mesh adjusted = flame::deform(model, pred, offsets.d_e, offsets.d_p);
    without_sq += (plain.vertices - gt.vertices).rowwise().squaredNorm().mean();
    with_sq += (adjusted.vertices - gt.vertices).rowwise().squaredNorm().mean();
  }
  MiaEval eval;
  eval.with_offsets_mm = std::sqrt(with_sq / double(frames.size())) * 1000.0;
  eval.without_offsets_mm = std::sqrt(without_sq / double(frames.size())) * 1000.0;
  return eval;
}

std::string MiaReport::to_json() const {
  nlohmann::ordered_json j;
  j["config"] = {{"lambda_lap", config.lambda_lap}, {"lambda_reg", config.lambda_reg},
                 {"lambda_scale", config.lambda_scale}, {"lr", config.lr},
                 {"iterations", config.iterations},  {"seed", config.seed}};
  auto series = [&](auto get) {
    std::vector<double> v;
    v.reserve(history.size());
    for (const auto& h : history) v.push_back(get(h));
    return v;
  };
  j["loss_total"] = series([](const LossParts& p) { return p.total(); });
  j["loss_vtx"] = series([](const LossParts& p) { return p.vtx; });
  j["loss_lap"] = series([](const LossParts& p) { return p.lap; });
  j["loss_reg"] = series([](const LossParts& p) { return p.reg; });
  j["loss_scale"] = series([](const LossParts& p) { return p.scale; });
  j["pre_train_rmse_mm"] = pre_train_rmse_mm;
  j["post_train_rmse_mm"] = post_train_rmse_mm;
  j["pre_holdout_rmse_mm"] = pre_holdout_rmse_mm;
  j["post_holdout_rmse_mm"] = post_holdout_rmse_mm;
  j["diverged"] = diverged;
  return j.dump(2);
}

void save_offsets(const AvatarOffsets& offsets, const std::string& path) {
  BinWriter w(path);
  w.magic("MIA1");
  w.u32(std::uint32_t(offsets.d_e.size()));
  w.matrix_f32(offsets.d_e);
  w.matrix_f32(offsets.d_p);
  w.close();
}

AvatarOffsets load_offsets(const std::string& path) {
  BinReader r(path);
  r.expect_magic("MIA1");
  const auto k = r.u32();
  AvatarOffsets o = AvatarOffsets::zeros(int(k));
  r.matrix_f32_into(o.d_e);
  r.matrix_f32_into(o.d_p);
  r.expect_eof();
  return o;
}

}  // namespace exmap::mia
