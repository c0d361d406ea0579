#pragma once

#include <Eigen/Geometry>
#include <string>
#include <vector>

#include "exmap/flame.hpp"

// Binding of Gaussian primitives to mesh triangles. Static appearance
// (opacity, SH, binding) is fixed at bind time; position / rotation / scale
// are recomputed from each deformed mesh.

namespace exmap::rig {

struct GaussianStatic {
  std::uint32_t face_id = 0;
  Eigen::Vector3d bary = Eigen::Vector3d::Constant(1.0 / 3.0);  // entries >= 0, sum 1
  Eigen::Vector3d local_offset = Eigen::Vector3d::Zero();       // face-frame, face-scale units
  Eigen::Quaterniond local_rot = Eigen::Quaterniond::Identity();
  Eigen::Vector3d local_scale = Eigen::Vector3d::Ones();        // face-scale units, > 0
  double opacity = 1.0;
  std::vector<float> sh;  // 3 * (deg+1)^2 values
};

struct GaussianDynamic {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d scale = Eigen::Vector3d::Ones();
};

struct GaussianCloud {
  std::vector<GaussianStatic> statics;
  int sh_degree = 0;
  std::size_t size() const { return statics.size(); }
  int sh_count() const { return 3 * (sh_degree + 1) * (sh_degree + 1); }
  void validate(Eigen::Index n_faces) const;
};

struct WorldGaussian {
  GaussianDynamic dyn;
  double opacity = 1.0;
  std::vector<float> sh;
};

struct FaceFrame {
  Eigen::Vector3d origin;     // triangle centroid
  Eigen::Matrix3d rotation;   // x along first edge, z face normal, y = z cross x
  double scale;               // sqrt(triangle area)
};

inline constexpr double kDegenerateFaceArea = 1e-12;

/// Throws degenerate-input when the triangle area is below 1e-12.
FaceFrame face_frame(const flame::Mesh& mesh, Eigen::Index face_id);

/// Assigns each Gaussian to its nearest triangle by centroid distance (ties
/// break toward the lower face id) and inverts the face frame so that
/// update_gaussians on the same mesh reproduces the input attributes.
GaussianCloud bind_gaussians(const std::vector<WorldGaussian>& gaussians,
                             const flame::Mesh& mesh, int sh_degree);

struct UpdateResult {
  std::vector<GaussianDynamic> dynamics;
  std::size_t degenerate_kept = 0;  // Gaussians that kept previous attributes
};

/// Recomputes dynamic attributes from a deformed mesh. For a Gaussian whose
/// face degenerated this frame, the previous attributes are kept (when given)
/// so a live stream survives transient bad geometry.
UpdateResult update_gaussians(const GaussianCloud& cloud, const flame::Mesh& mesh,
                              const std::vector<GaussianDynamic>* previous = nullptr);

/// Hinged anisotropy penalty: mean over Gaussians of
/// max(0, max_scale / min_scale - kappa)^2.
double anisotropy_penalty(const std::vector<GaussianDynamic>& dynamics, double kappa = 5.0);

/// Seeded test/benchmark cloud: Gaussians scattered near the mesh surface.
GaussianCloud synth_cloud(std::uint64_t seed, const flame::Mesh& mesh, std::size_t count,
                          int sh_degree);

void save_cloud(const GaussianCloud& cloud, const std::string& path);
GaussianCloud load_cloud(const std::string& path);

}  // namespace exmap::rig
