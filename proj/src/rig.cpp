#include "exmap/rig.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "exmap/binio.hpp"
#include "exmap/rotation.hpp"

namespace exmap::rig {

void GaussianCloud::validate(Eigen::Index n_faces) const {
  for (const auto& g : statics) {
    if (g.face_id >= n_faces) throw Error("bad-input", "gaussian bound to invalid face");
    if (g.bary.minCoeff() < -1e-9 || std::abs(g.bary.sum() - 1.0) > 1e-6)
      throw Error("bad-input", "invalid barycentric coordinates");
    if ((g.local_scale.array() <= 0.0).any())
      throw Error("bad-input", "local scale must be positive");
    if (g.sh.size() != std::size_t(sh_count()))
      throw Error("dimension-mismatch", "SH coefficient count mismatch");
  }
}

FaceFrame face_frame(const flame::Mesh& mesh, Eigen::Index face_id) {
  if (!mesh.faces || face_id < 0 || face_id >= mesh.faces->rows())
    throw Error("bad-input", "face id out of range");
  const auto& f = *mesh.faces;
  const Eigen::Vector3d v0 = mesh.vertices.row(f(face_id, 0));
  const Eigen::Vector3d v1 = mesh.vertices.row(f(face_id, 1));
  const Eigen::Vector3d v2 = mesh.vertices.row(f(face_id, 2));
  const Eigen::Vector3d e0 = v1 - v0;
  const Eigen::Vector3d n = e0.cross(v2 - v0);
  const double area = 0.5 * n.norm();
  if (area < kDegenerateFaceArea)
    throw Error("degenerate-input", "degenerate triangle " + std::to_string(face_id));

  FaceFrame frame;
  frame.origin = (v0 + v1 + v2) / 3.0;
  const Eigen::Vector3d x = e0.normalized();
  const Eigen::Vector3d z = n.normalized();
  frame.rotation.col(0) = x;
  frame.rotation.col(1) = z.cross(x);
  frame.rotation.col(2) = z;
  frame.scale = std::sqrt(area);
  return frame;
}

namespace {

// Closest point on a triangle, returned as barycentric coordinates
// (Ericson, Real-Time Collision Detection).
Eigen::Vector3d closest_point_bary(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                   const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  const Eigen::Vector3d ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return {1.0, 0.0, 0.0};
  const Eigen::Vector3d bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return {0.0, 1.0, 0.0};
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double t = d1 / (d1 - d3);
    return {1.0 - t, t, 0.0};
  }
  const Eigen::Vector3d cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return {0.0, 0.0, 1.0};
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double t = d2 / (d2 - d6);
    return {1.0 - t, 0.0, t};
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return {0.0, 1.0 - t, t};
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return {1.0 - v - w, v, w};
}

Eigen::Vector3d anchor_point(const flame::Mesh& mesh, std::uint32_t face_id,
                             const Eigen::Vector3d& bary) {
  const auto& f = *mesh.faces;
  return bary.x() * mesh.vertices.row(f(face_id, 0)).transpose() +
         bary.y() * mesh.vertices.row(f(face_id, 1)).transpose() +
         bary.z() * mesh.vertices.row(f(face_id, 2)).transpose();
}

}  // namespace

GaussianCloud bind_gaussians(const std::vector<WorldGaussian>& gaussians,
                             const flame::Mesh& mesh, int sh_degree) {
  if (!mesh.faces || mesh.faces->rows() == 0) throw Error("bad-input", "empty mesh");
  const auto& f = *mesh.faces;

  Eigen::MatrixX3d centroids(f.rows(), 3);
  for (Eigen::Index t = 0; t < f.rows(); ++t)
    centroids.row(t) = (mesh.vertices.row(f(t, 0)) + mesh.vertices.row(f(t, 1)) +
                        mesh.vertices.row(f(t, 2))) /
                       3.0;

  GaussianCloud cloud;
  cloud.sh_degree = sh_degree;
  cloud.statics.reserve(gaussians.size());
  for (const auto& g : gaussians) {
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < f.rows(); ++t) {
      const double d = (centroids.row(t).transpose() - g.dyn.position).squaredNorm();
      if (d < best_d - 1e-18 || (std::abs(d - best_d) <= 1e-18 && t < best)) {
        best_d = d;
        best = t;
      }
    }
    const FaceFrame frame = face_frame(mesh, best);

    GaussianStatic s;
    s.face_id = std::uint32_t(best);
    s.bary = closest_point_bary(g.dyn.position, mesh.vertices.row(f(best, 0)),
                                mesh.vertices.row(f(best, 1)), mesh.vertices.row(f(best, 2)));
    const Eigen::Vector3d anchor = anchor_point(mesh, s.face_id, s.bary);
    s.local_offset = frame.rotation.transpose() * (g.dyn.position - anchor) / frame.scale;
    s.local_rot = (matrix_to_quaternion(Eigen::Matrix3d(frame.rotation)).conjugate() *
                   g.dyn.rotation)
                      .normalized();
    s.local_scale = g.dyn.scale / frame.scale;
    s.opacity = std::clamp(g.opacity, 0.0, 1.0);
    s.sh = g.sh;
    s.sh.resize(std::size_t(cloud.sh_count()), 0.0f);
    cloud.statics.push_back(std::move(s));
  }
  return cloud;
}

UpdateResult update_gaussians(const GaussianCloud& cloud, const flame::Mesh& mesh,
                              const std::vector<GaussianDynamic>* previous) {
  if (!mesh.faces) throw Error("bad-input", "mesh has no face topology");
  cloud.validate(mesh.faces->rows());
  if (previous && previous->size() != cloud.size())
    throw Error("dimension-mismatch", "previous dynamics count mismatch");

  // Each referenced face frame is computed once per call.
  std::vector<signed char> status(mesh.faces->rows(), 0);  // 0 unknown, 1 ok, -1 degenerate
  std::vector<FaceFrame> frames(mesh.faces->rows());
  std::vector<Eigen::Quaterniond> frame_quats(mesh.faces->rows());

  UpdateResult result;
  result.dynamics.resize(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const GaussianStatic& s = cloud.statics[i];
    auto& st = status[s.face_id];
    if (st == 0) {
      try {
        frames[s.face_id] = face_frame(mesh, s.face_id);
        frame_quats[s.face_id] =
            matrix_to_quaternion(Eigen::Matrix3d(frames[s.face_id].rotation));
        st = 1;
      } catch (const Error&) {
        st = -1;
      }
    }
    if (st < 0) {
      if (!previous)
        throw Error("degenerate-input",
                    "face " + std::to_string(s.face_id) + " degenerated with no fallback");
      result.dynamics[i] = (*previous)[i];
      ++result.degenerate_kept;
      continue;
    }
    const FaceFrame& frame = frames[s.face_id];
    GaussianDynamic d;
    d.position = anchor_point(mesh, s.face_id, s.bary) +
                 frame.rotation * (s.local_offset * frame.scale);
    d.rotation = (frame_quats[s.face_id] * s.local_rot).normalized();
    d.scale = s.local_scale * frame.scale;
    result.dynamics[i] = std::move(d);
  }
  return result;
}

double anisotropy_penalty(const std::vector<GaussianDynamic>& dynamics, double kappa) {
  if (dynamics.empty()) return 0.0;
  double total = 0.0;
  for (const auto& d : dynamics) {
    const double ratio = d.scale.maxCoeff() / d.scale.minCoeff();
    const double over = std::max(0.0, ratio - kappa);
    total += over * over;
  }
  return total / double(dynamics.size());
}

GaussianCloud synth_cloud(std::uint64_t seed, const flame::Mesh& mesh, std::size_t count,
                          int sh_degree) {
  if (!mesh.faces || mesh.faces->rows() == 0) throw Error("bad-input", "empty mesh");
  auto rng = make_rng(seed, 0x6a);
  std::uniform_int_distribution<Eigen::Index> pick_face(0, mesh.faces->rows() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<WorldGaussian> world(count);
  for (auto& g : world) {
    const Eigen::Index t = pick_face(rng);
    double u = unit(rng), v = unit(rng);
    if (u + v > 1.0) { u = 1.0 - u; v = 1.0 - v; }
    const auto& f = *mesh.faces;
    const Eigen::Vector3d p = (1.0 - u - v) * mesh.vertices.row(f(t, 0)).transpose() +
                              u * mesh.vertices.row(f(t, 1)).transpose() +
                              v * mesh.vertices.row(f(t, 2)).transpose();
    g.dyn.position = p + 0.002 * Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
    g.dyn.rotation = Eigen::Quaterniond(normal(rng), normal(rng), normal(rng), normal(rng))
                         .normalized();
    g.dyn.scale = Eigen::Vector3d::Constant(0.003) +
                  0.001 * Eigen::Vector3d(unit(rng), unit(rng), unit(rng));
    g.opacity = unit(rng);
    g.sh.resize(std::size_t(3 * (sh_degree + 1) * (sh_degree + 1)));
    for (auto& c : g.sh) c = float(normal(rng) * 0.2);
  }
  return bind_gaussians(world, mesh, sh_degree);
}

void save_cloud(const GaussianCloud& cloud, const std::string& path) {
  BinWriter w(path);
  w.magic("GSC1");
  w.u32(std::uint32_t(cloud.size()));
  w.u32(std::uint32_t(cloud.sh_degree));
  for (const auto& g : cloud.statics) {
    w.u32(g.face_id);
    for (int i = 0; i < 3; ++i) w.f32(float(g.bary(i)));
    for (int i = 0; i < 3; ++i) w.f32(float(g.local_offset(i)));
    w.f32(float(g.local_rot.w()));
    w.f32(float(g.local_rot.x()));
    w.f32(float(g.local_rot.y()));
    w.f32(float(g.local_rot.z()));
    for (int i = 0; i < 3; ++i) w.f32(float(g.local_scale(i)));
    w.f32(float(g.opacity));
    for (float c : g.sh) w.f32(c);
  }
  w.close();
}

GaussianCloud load_cloud(const std::string& path) {
  BinReader r(path);
  r.expect_magic("GSC1");
  const auto n = r.u32();
  GaussianCloud cloud;
  cloud.sh_degree = int(r.u32());
  cloud.statics.resize(n);
  for (auto& g : cloud.statics) {
    g.face_id = r.u32();
    for (int i = 0; i < 3; ++i) g.bary(i) = r.f32();
    for (int i = 0; i < 3; ++i) g.local_offset(i) = r.f32();
    const float w = r.f32(), x = r.f32(), y = r.f32(), z = r.f32();
    g.local_rot = Eigen::Quaterniond(w, x, y, z);  // kept verbatim; updates renormalize
    for (int i = 0; i < 3; ++i) g.local_scale(i) = r.f32();
    g.opacity = r.f32();
    g.sh.resize(std::size_t(cloud.sh_count()));
    for (auto& c : g.sh) c = r.f32();
  }
  r.expect_eof();
  return cloud;
}

}  // namespace exmap::rig
