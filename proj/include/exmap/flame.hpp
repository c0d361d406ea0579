#pragma once

#include <Eigen/Sparse>
#include <array>
#include <memory>
#include <string>

#include "exmap/dataset.hpp"
#include "exmap/rotation.hpp"

// Lite parametric head: expression/pose blendshape deformation with linear
// blend skinning over three joints (jaw, left eye, right eye), the geometric
// regularizers, and a seeded synthetic model generator used in place of
// licensed third-party head assets.

namespace exmap::flame {

using FaceMatrix = Eigen::Matrix<std::uint32_t, Eigen::Dynamic, 3>;

struct FlameLiteModel {
  Eigen::MatrixX3d template_vertices;           // V x 3, meters
  std::shared_ptr<const FaceMatrix> faces;      // F x 3
  Eigen::MatrixXd expr_basis;                   // 3V x K_e
  Eigen::MatrixXd pose_basis;                   // 3V x 27
  Eigen::Matrix3d joints;                       // row j = joint position (jaw, eyeL, eyeR)
  Eigen::MatrixX3d skin_weights;                // V x 3, row sums <= 1; rest stays static

  Eigen::Index vertex_count() const { return template_vertices.rows(); }
  Eigen::Index face_count() const { return faces ? faces->rows() : 0; }
  int expr_dim() const { return int(expr_basis.cols()); }
  void validate() const;
};

struct Mesh {
  Eigen::MatrixX3d vertices;
  std::shared_ptr<const FaceMatrix> faces;
};

using JointRotations = std::array<Eigen::Matrix3d, kJointCount>;

JointRotations joint_rotations(const data::ExpressionParams& q);

/// Pose-corrective feature: (R_j - I) flattened row-major per joint, 27 values.
Eigen::Matrix<double, kPoseFeatureCount, 1> pose_feature(const JointRotations& rots);

/// Adapts an expression vector to the model's K_e by truncating or
/// zero-padding.
Eigen::VectorXd adapt_expr(const Eigen::VectorXd& expr, int k_e);

/// Per-vertex affine transforms induced by LBS for fixed joint rotations:
/// v_out = A_v * v_rest + t_v.
struct LbsTransforms {
  Eigen::MatrixXd A;    // V x 9, row-major 3x3 per vertex
  Eigen::MatrixX3d t;   // V x 3
};
LbsTransforms lbs_transforms(const FlameLiteModel& model, const JointRotations& rots);
void lbs_apply(const LbsTransforms& lbs, const Eigen::VectorXd& rest_flat,
               Eigen::MatrixX3d& out);
/// Adjoint of the linear part: returns A_v^T r_v stacked, used for gradients.
Eigen::VectorXd lbs_adjoint(const LbsTransforms& lbs, const Eigen::VectorXd& r_flat);

Mesh deform(const FlameLiteModel& model, const Eigen::VectorXd& expr,
            const JointRotations& rots, const Eigen::VectorXd& d_e = Eigen::VectorXd(),
            const Eigen::VectorXd& d_p = Eigen::VectorXd());
Mesh deform(const FlameLiteModel& model, const data::ExpressionParams& q,
            const Eigen::VectorXd& d_e = Eigen::VectorXd(),
            const Eigen::VectorXd& d_p = Eigen::VectorXd());

/// Full analytic Jacobian of the flattened deformed vertices with respect to
/// [expr(K_e) | jaw6d | eyeL6d | eyeR6d | d_e(K_e) | d_p(27)].
Eigen::MatrixXd deform_jacobian(const FlameLiteModel& model, const Eigen::VectorXd& expr,
                                const std::array<Vec6<double>, kJointCount>& rot6d,
                                const Eigen::VectorXd& d_e, const Eigen::VectorXd& d_p);

/// Uniform graph Laplacian energy: mean over connected vertices of
/// || v_i - mean(neighbors) ||^2. Isolated vertices are excluded and counted.
double laplacian_energy(const Mesh& mesh, std::size_t* isolated_count = nullptr);

/// Sparse uniform Laplacian operator L with rows v - mean(neighbors); rows of
/// isolated vertices are zero.
Eigen::SparseMatrix<double> uniform_laplacian(const FaceMatrix& faces, Eigen::Index n_vertices);

/// ||expr||^2 + ||d_e||^2 + ||d_p||^2; rotations are not penalized.
double flame_param_reg(const data::ExpressionParams& q, const Eigen::VectorXd& d_e,
                       const Eigen::VectorXd& d_p);

/// Seeded head-like ellipsoid model with smooth random bases. The template,
/// topology, joints and weights depend only on (seed, vertex_count); basis
/// column k depends only on (seed, k), so models of different expression
/// dimensionality share their leading columns.
FlameLiteModel synth_model(std::uint64_t seed, int vertex_count, int expr_dim);

void save_model(const FlameLiteModel& model, const std::string& path);
FlameLiteModel load_model(const std::string& path);

}  // namespace exmap::flame
