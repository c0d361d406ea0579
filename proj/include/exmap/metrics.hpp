#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "exmap/flame.hpp"
#include "exmap/mappers.hpp"

// Evaluation protocol: parameter RMSE over the shared expression+jaw
// subspace, vertex RMSE in millimeters, per-vertex error heatmap export, and
// multi-method comparison reports.

namespace exmap::metrics {

/// One mapped frame in a method-agnostic form; methods that do not predict
/// eye rotations leave them unset (treated as identity when deforming).
/// Methods that natively emit a 6D jaw keep the raw values in `jaw6d` so the
/// parameter metric compares them undecoded; others are converted from
/// `jaw` on demand.
struct MethodOutput {
  Eigen::VectorXd expr;
  Eigen::Matrix3d jaw = Eigen::Matrix3d::Identity();
  std::optional<Vec6<double>> jaw6d;
  std::optional<Eigen::Matrix3d> eye_l, eye_r;
};

using MapperFn = std::function<MethodOutput(const data::BlendshapeFrame&)>;

struct NamedMapper {
  std::string name;
  int expr_dim;  // dimensionality the method natively emits
  MapperFn map;
};

NamedMapper make_epm_mapper(mappers::EpmModel& model);
NamedMapper make_ridge_mapper(const mappers::RidgeMapper& mapper);
NamedMapper make_matrix_mapper(const mappers::MatrixMapper& mapper);

/// Comparison subspace: first 50 expression components plus the jaw rotation
/// in 6D; eye parameters are excluded. Errors: RMSE over the 56 values.
double param_rmse(const MethodOutput& pred, const data::ExpressionParams& gt);

/// sqrt(mean squared vertex distance) in millimeters; same topology required.
double vertex_rmse(const flame::Mesh& a, const flame::Mesh& b);
Eigen::VectorXd per_vertex_error_mm(const flame::Mesh& a, const flame::Mesh& b);

/// Supplies a deformation model for a requested expression dimensionality so
/// methods with different native dims deform through compatible bases.
class ModelProvider {
 public:
  virtual ~ModelProvider() = default;
  virtual const flame::FlameLiteModel& model_for(int expr_dim) = 0;
};

/// Seeded generator family: bases share leading columns across dims.
class SynthFamily final : public ModelProvider {
 public:
  SynthFamily(std::uint64_t seed, int vertex_count);
  const flame::FlameLiteModel& model_for(int expr_dim) override;

 private:
  std::uint64_t seed_;
  int vertex_count_;
  std::map<int, flame::FlameLiteModel> cache_;
};

/// A fixed (e.g. file-loaded) model; wider requests are zero-padded.
class FixedModelProvider final : public ModelProvider {
 public:
  explicit FixedModelProvider(flame::FlameLiteModel base);
  const flame::FlameLiteModel& model_for(int expr_dim) override;

 private:
  flame::FlameLiteModel base_;
  std::map<int, flame::FlameLiteModel> cache_;
};

struct MethodEval {
  std::string name;
  double param_rmse = 0.0;
  double vertex_rmse_mm = 0.0;
  std::vector<double> param_series;   // per frame
  std::vector<double> vertex_series;  // per frame, mm
};

struct EvalReport {
  std::vector<MethodEval> methods;
  std::string dataset;
  std::string subspace = "expr[0:50]+jaw6d";

  std::string to_json() const;
  std::string to_markdown() const;  // Method | Param Error | Vertex Error (mm)
};

EvalReport evaluate_methods(std::vector<NamedMapper>& methods,
                            const std::vector<data::PairedSample>& test_set,
                            ModelProvider& provider, const std::string& dataset_name = "");

/// ASCII PLY with a linear blue-to-red colormap over [0, max(error)], plus a
/// CSV (vertex_id, error_mm) next to it with one row per vertex.
void heatmap_export(const flame::Mesh& mesh, const Eigen::VectorXd& error_mm,
                    const std::string& ply_path);

}  // namespace exmap::metrics
