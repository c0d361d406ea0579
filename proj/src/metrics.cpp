#include "exmap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "exmap/rotation.hpp"

namespace exmap::metrics {

NamedMapper make_epm_mapper(mappers::EpmModel& model) {
  return {"epm", kExprCount, [&model](const data::BlendshapeFrame& frame) {
            const data::ExpressionParams q = mappers::epm_forward(model, frame.coeffs);
            MethodOutput out;
            out.expr = q.expr;
            out.jaw6d = q.jaw6d;
            out.jaw = rot6d_to_matrix(Vec6<double>(q.jaw6d));
            out.eye_l = rot6d_to_matrix(Vec6<double>(q.eye_l6d));
            out.eye_r = rot6d_to_matrix(Vec6<double>(q.eye_r6d));
            return out;
          }};
}

NamedMapper make_ridge_mapper(const mappers::RidgeMapper& mapper) {
  return {"linear", 100, [&mapper](const data::BlendshapeFrame& frame) {
            const Eigen::VectorXd y = mappers::ridge_apply(mapper, frame.coeffs);
            MethodOutput out;
            out.expr = y.head(100);
            out.jaw = axis_angle_to_matrix(Vec3<double>(y.segment<3>(100)));
            out.eye_l = axis_angle_to_matrix(Vec3<double>(y.segment<3>(103)));
            out.eye_r = axis_angle_to_matrix(Vec3<double>(y.segment<3>(106)));
            return out;
          }};
}

NamedMapper make_matrix_mapper(const mappers::MatrixMapper& mapper) {
  return {"matrix", 100, [&mapper](const data::BlendshapeFrame& frame) {
            const Eigen::VectorXd y = mappers::matrix_map(mapper, frame.coeffs);
            MethodOutput out;
            out.expr = y.head(100);
            out.jaw = axis_angle_to_matrix(Vec3<double>(y.segment<3>(100)));
            return out;  // no eye predictions
          }};
}

double param_rmse(const MethodOutput& pred, const data::ExpressionParams& gt) {
  if (pred.expr.size() < kExprCount)
    throw Error("dimension-mismatch", "prediction has fewer than 50 expression values");
  Eigen::Matrix<double, kExprCount + 6, 1> err;
  err.head<kExprCount>() = pred.expr.head<kExprCount>() - gt.expr;
  const Vec6<double> jaw6d =
      pred.jaw6d ? *pred.jaw6d : matrix_to_rot6d(Eigen::Matrix3d(pred.jaw));
  err.tail<6>() = jaw6d - gt.jaw6d;
  return std::sqrt(err.squaredNorm() / double(err.size()));
}

Eigen::VectorXd per_vertex_error_mm(const flame::Mesh& a, const flame::Mesh& b) {
  if (a.vertices.rows() != b.vertices.rows())
    throw Error("dimension-mismatch", "meshes have different vertex counts");
  return (a.vertices - b.vertices).rowwise().norm() * 1000.0;
}

double vertex_rmse(const flame::Mesh& a, const flame::Mesh& b) {
  if (a.vertices.rows() != b.vertices.rows())
    throw Error("dimension-mismatch", "meshes have different vertex counts");
  const double mean_sq =
      (a.vertices - b.vertices).rowwise().squaredNorm().mean();
  return std::sqrt(mean_sq) * 1000.0;
}

SynthFamily::SynthFamily(std::uint64_t seed, int vertex_count)
    : seed_(seed), vertex_count_(vertex_count) {}

const flame::FlameLiteModel& SynthFamily::model_for(int expr_dim) {
  auto it = cache_.find(expr_dim);
  if (it == cache_.end())
    it = cache_.emplace(expr_dim, flame::synth_model(seed_, vertex_count_, expr_dim)).first;
  return it->second;
}

FixedModelProvider::FixedModelProvider(flame::FlameLiteModel base) : base_(std::move(base)) {}

const flame::FlameLiteModel& FixedModelProvider::model_for(int expr_dim) {
  if (expr_dim == base_.expr_dim()) return base_;
  auto it = cache_.find(expr_dim);
  if (it == cache_.end()) {
    flame::FlameLiteModel m = base_;
    m.expr_basis = Eigen::MatrixXd::Zero(base_.expr_basis.rows(), expr_dim);
    const int shared = std::min(expr_dim, base_.expr_dim());
    m.expr_basis.leftCols(shared) = base_.expr_basis.leftCols(shared);
    it = cache_.emplace(expr_dim, std::move(m)).first;
  }
  return it->second;
}

EvalReport evaluate_methods(std::vector<NamedMapper>& methods,
                            const std::vector<data::PairedSample>& test_set,
                            ModelProvider& provider, const std::string& dataset_name) {
  if (test_set.empty()) throw Error("insufficient-data", "empty test set");
  EvalReport report;
  report.dataset = dataset_name;

  const flame::FlameLiteModel& gt_model = provider.model_for(kExprCount);
  std::vector<flame::Mesh> gt_meshes;
  gt_meshes.reserve(test_set.size());
  for (const auto& s : test_set) gt_meshes.push_back(flame::deform(gt_model, s.target));

  for (auto& method : methods) {
    const flame::FlameLiteModel& model = provider.model_for(method.expr_dim);
    MethodEval eval;
    eval.name = method.name;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
      const MethodOutput out = method.map(test_set[i].frame);
      eval.param_series.push_back(param_rmse(out, test_set[i].target));

      flame::JointRotations rots{out.jaw, out.eye_l.value_or(Eigen::Matrix3d::Identity()),
                                 out.eye_r.value_or(Eigen::Matrix3d::Identity())};
      const flame::Mesh mesh = flame::deform(model, out.expr, rots);
      eval.vertex_series.push_back(vertex_rmse(mesh, gt_meshes[i]));
    }
    eval.param_rmse =
        std::accumulate(eval.param_series.begin(), eval.param_series.end(), 0.0) /
        double(eval.param_series.size());
    eval.vertex_rmse_mm =
        std::accumulate(eval.vertex_series.begin(), eval.vertex_series.end(), 0.0) /
        double(eval.vertex_series.size());
    report.methods.push_back(std::move(eval));
  }
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["subspace"] = subspace;
  j["methods"] = nlohmann::ordered_json::array();
  for (const auto& m : methods) {
    nlohmann::ordered_json e;
    e["name"] = m.name;
    e["param_rmse"] = m.param_rmse;
    e["vertex_rmse_mm"] = m.vertex_rmse_mm;
    e["param_series"] = m.param_series;
    e["vertex_series"] = m.vertex_series;
    j["methods"].push_back(std::move(e));
  }
  return j.dump(2);
}

std::string EvalReport::to_markdown() const {
  std::string out = "| Method | Param Error ↓ | Vertex Error (mm) ↓ |\n";
  out += "|---|---|---|\n";
  char line[160];
  for (const auto& m : methods) {
    std::snprintf(line, sizeof(line), "| %s | %.3f | %.3f |\n", m.name.c_str(),
                  m.param_rmse, m.vertex_rmse_mm);
    out += line;
  }
  return out;
}

void heatmap_export(const flame::Mesh& mesh, const Eigen::VectorXd& error_mm,
                    const std::string& ply_path) {
  if (error_mm.size() != mesh.vertices.rows())
    throw Error("dimension-mismatch", "one error value per vertex required");
  if (!mesh.faces) throw Error("bad-input", "mesh has no face topology");

  const double max_err = error_mm.size() ? error_mm.maxCoeff() : 0.0;
  std::ofstream ply(ply_path);
  if (!ply) throw Error("io-error", "cannot write " + ply_path);
  ply << "ply\nformat ascii 1.0\n";
  ply << "comment per-vertex error heatmap, linear blue(0) to red(max) over [0, "
      << max_err << "] mm\n";
  ply << "element vertex " << mesh.vertices.rows() << "\n";
  ply << "property double x\nproperty double y\nproperty double z\n";
  ply << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  ply << "element face " << mesh.faces->rows() << "\n";
  ply << "property list uchar int vertex_indices\nend_header\n";
  ply.precision(9);
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
    const double t = max_err > 0.0 ? error_mm(i) / max_err : 0.0;
    const int r = int(std::lround(255.0 * t));
    const int b = int(std::lround(255.0 * (1.0 - t)));
    ply << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2)
        << ' ' << r << " 0 " << b << "\n";
  }
  for (Eigen::Index f = 0; f < mesh.faces->rows(); ++f)
    ply << "3 " << (*mesh.faces)(f, 0) << ' ' << (*mesh.faces)(f, 1) << ' '
        << (*mesh.faces)(f, 2) << "\n";
  if (!ply) throw Error("io-error", "write failed: " + ply_path);

  std::string csv_path = ply_path;
  const auto dot = csv_path.find_last_of('.');
  csv_path = (dot == std::string::npos ? csv_path : csv_path.substr(0, dot)) + ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw Error("io-error", "cannot write " + csv_path);
  csv.precision(9);
  for (Eigen::Index i = 0; i < error_mm.size(); ++i) csv << i << "," << error_mm(i) << "\n";
  if (!csv) throw Error("io-error", "write failed: " + csv_path);
}

}  // namespace exmap::metrics
