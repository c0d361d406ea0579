#include "exmap/flame.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "exmap/binio.hpp"

namespace exmap::flame {

void FlameLiteModel::validate() const {
  const auto v = vertex_count();
  if (v < 4) throw Error("bad-input", "model needs at least 4 vertices");
  if (!faces || faces->rows() < 1) throw Error("bad-input", "model has no faces");
  if ((faces->array() >= std::uint32_t(v)).any())
    throw Error("bad-input", "face indexes an invalid vertex");
  if (expr_basis.rows() != 3 * v || pose_basis.rows() != 3 * v ||
      pose_basis.cols() != kPoseFeatureCount)
    throw Error("dimension-mismatch", "basis tensor shapes do not match vertex count");
  if (!template_vertices.allFinite() || !expr_basis.allFinite() || !pose_basis.allFinite() ||
      !joints.allFinite() || !skin_weights.allFinite())
    throw Error("bad-input", "model tensors must be finite");
  if (skin_weights.rows() != v) throw Error("dimension-mismatch", "skin weight row count");
  if ((skin_weights.array() < 0.0).any() || (skin_weights.array() > 1.0).any())
    throw Error("bad-input", "skin weights must lie in [0,1]");
  if ((skin_weights.rowwise().sum().array() > 1.0 + 1e-9).any())
    throw Error("bad-input", "skin weight row sums must not exceed 1");
}

JointRotations joint_rotations(const data::ExpressionParams& q) {
  return {rot6d_to_matrix(Vec6<double>(q.jaw6d)), rot6d_to_matrix(Vec6<double>(q.eye_l6d)),
          rot6d_to_matrix(Vec6<double>(q.eye_r6d))};
}

Eigen::Matrix<double, kPoseFeatureCount, 1> pose_feature(const JointRotations& rots) {
  Eigen::Matrix<double, kPoseFeatureCount, 1> p;
  for (int j = 0; j < kJointCount; ++j)
    p.segment<9>(9 * j) = flatten_rowmajor<double>(rots[j] - Eigen::Matrix3d::Identity());
  return p;
}

Eigen::VectorXd adapt_expr(const Eigen::VectorXd& expr, int k_e) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(k_e);
  out.head(std::min<Eigen::Index>(expr.size(), k_e)) =
      expr.head(std::min<Eigen::Index>(expr.size(), k_e));
  return out;
}

LbsTransforms lbs_transforms(const FlameLiteModel& model, const JointRotations& rots) {
  const auto v = model.vertex_count();
  LbsTransforms lbs;
  lbs.A.resize(v, 9);
  lbs.t.resize(v, 3);
  for (Eigen::Index i = 0; i < v; ++i) {
    // Accumulated as I + sum w_j (R_j - I) so identity rotations reproduce
    // the rest pose bit-exactly.
    Eigen::Matrix3d a = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    for (int j = 0; j < kJointCount; ++j) {
      const double w = model.skin_weights(i, j);
      if (w == 0.0) continue;
      a += w * (rots[j] - Eigen::Matrix3d::Identity());
      const Eigen::Vector3d joint = model.joints.row(j).transpose();
      t += w * (joint - rots[j] * joint);
    }
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) lbs.A(i, 3 * r + c) = a(r, c);
    lbs.t.row(i) = t.transpose();
  }
  return lbs;
}

void lbs_apply(const LbsTransforms& lbs, const Eigen::VectorXd& rest_flat,
               Eigen::MatrixX3d& out) {
  const auto v = lbs.A.rows();
  out.resize(v, 3);
  for (Eigen::Index i = 0; i < v; ++i) {
    const Eigen::Vector3d p = rest_flat.segment<3>(3 * i);
    for (int r = 0; r < 3; ++r)
      out(i, r) = lbs.A(i, 3 * r) * p.x() + lbs.A(i, 3 * r + 1) * p.y() +
                  lbs.A(i, 3 * r + 2) * p.z() + lbs.t(i, r);
  }
}

Eigen::VectorXd lbs_adjoint(const LbsTransforms& lbs, const Eigen::VectorXd& r_flat) {
  const auto v = lbs.A.rows();
  Eigen::VectorXd out(3 * v);
  for (Eigen::Index i = 0; i < v; ++i) {
    const Eigen::Vector3d r = r_flat.segment<3>(3 * i);
    for (int c = 0; c < 3; ++c)
      out(3 * i + c) =
          lbs.A(i, c) * r.x() + lbs.A(i, 3 + c) * r.y() + lbs.A(i, 6 + c) * r.z();
  }
  return out;
}

namespace {

Eigen::VectorXd rest_pose_flat(const FlameLiteModel& model, const Eigen::VectorXd& e_eff,
                               const Eigen::VectorXd& p_eff) {
  Eigen::VectorXd rest(3 * model.vertex_count());
  for (Eigen::Index i = 0; i < model.vertex_count(); ++i)
    rest.segment<3>(3 * i) = model.template_vertices.row(i).transpose();
  rest.noalias() += model.expr_basis * e_eff;
  rest.noalias() += model.pose_basis * p_eff;
  return rest;
}

Eigen::VectorXd offset_or_zero(const Eigen::VectorXd& v, Eigen::Index n, const char* what) {
  if (v.size() == 0) return Eigen::VectorXd::Zero(n);
  if (v.size() != n)
    throw Error("dimension-mismatch", std::string(what) + " has wrong length");
  if (!v.allFinite()) throw Error("bad-input", std::string(what) + " must be finite");
  return v;
}

}  // namespace

Mesh deform(const FlameLiteModel& model, const Eigen::VectorXd& expr,
            const JointRotations& rots, const Eigen::VectorXd& d_e,
            const Eigen::VectorXd& d_p) {
  const Eigen::VectorXd e_eff =
      adapt_expr(expr, model.expr_dim()) + offset_or_zero(d_e, model.expr_dim(), "d_e");
  const Eigen::VectorXd p_eff =
      pose_feature(rots) + offset_or_zero(d_p, kPoseFeatureCount, "d_p");
  const Eigen::VectorXd rest = rest_pose_flat(model, e_eff, p_eff);
  Mesh mesh;
  mesh.faces = model.faces;
  lbs_apply(lbs_transforms(model, rots), rest, mesh.vertices);
  return mesh;
}

Mesh deform(const FlameLiteModel& model, const data::ExpressionParams& q,
            const Eigen::VectorXd& d_e, const Eigen::VectorXd& d_p) {
  return deform(model, Eigen::VectorXd(q.expr), joint_rotations(q), d_e, d_p);
}

Eigen::MatrixXd deform_jacobian(const FlameLiteModel& model, const Eigen::VectorXd& expr,
                                const std::array<Vec6<double>, kJointCount>& rot6d,
                                const Eigen::VectorXd& d_e, const Eigen::VectorXd& d_p) {
  const auto v = model.vertex_count();
  const int k_e = model.expr_dim();
  JointRotations rots;
  for (int j = 0; j < kJointCount; ++j) rots[j] = rot6d_to_matrix(rot6d[j]);

  const Eigen::VectorXd e_eff =
      adapt_expr(expr, k_e) + offset_or_zero(d_e, k_e, "d_e");
  const Eigen::VectorXd p_eff =
      pose_feature(rots) + offset_or_zero(d_p, kPoseFeatureCount, "d_p");
  const Eigen::VectorXd rest = rest_pose_flat(model, e_eff, p_eff);
  const LbsTransforms lbs = lbs_transforms(model, rots);

  const int n_cols = k_e + 6 * kJointCount + k_e + kPoseFeatureCount;
  Eigen::MatrixXd jac(3 * v, n_cols);

  // Expression and its offset share columns: LBS applied to each basis column.
  Eigen::MatrixX3d tmp;
  Eigen::VectorXd col(3 * v);
  auto lbs_linear = [&](const Eigen::VectorXd& dir, Eigen::Ref<Eigen::VectorXd> dst) {
    for (Eigen::Index i = 0; i < v; ++i) {
      const Eigen::Vector3d p = dir.segment<3>(3 * i);
      for (int r = 0; r < 3; ++r)
        dst(3 * i + r) = lbs.A(i, 3 * r) * p.x() + lbs.A(i, 3 * r + 1) * p.y() +
                         lbs.A(i, 3 * r + 2) * p.z();
    }
  };
  for (int k = 0; k < k_e; ++k) {
    lbs_linear(model.expr_basis.col(k), col);
    jac.col(k) = col;
    jac.col(k_e + 6 * kJointCount + k) = col;
  }
  for (int m = 0; m < kPoseFeatureCount; ++m) {
    lbs_linear(model.pose_basis.col(m), col);
    jac.col(k_e + 6 * kJointCount + k_e + m) = col;
  }

  // 6D rotation columns: the rotation enters through the pose feature and
  // through the LBS transform itself.
  for (int j = 0; j < kJointCount; ++j) {
    const Eigen::Matrix<double, 9, 6> dR = rot6d_to_matrix_jacobian(rot6d[j]);
    const Eigen::Vector3d joint = model.joints.row(j).transpose();
    for (int l = 0; l < 6; ++l) {
      Eigen::Matrix3d dRj;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) dRj(r, c) = dR(3 * r + c, l);
      // Pose-feature path, then LBS.
      lbs_linear(model.pose_basis.middleCols(9 * j, 9) * dR.col(l), col);
      // Direct path: w_j * dR * (v_rest - joint).
      for (Eigen::Index i = 0; i < v; ++i) {
        const double w = model.skin_weights(i, j);
        if (w == 0.0) continue;
        const Eigen::Vector3d p = rest.segment<3>(3 * i) - joint;
        col.segment<3>(3 * i) += w * (dRj * p);
      }
      jac.col(k_e + 6 * j + l) = col;
    }
  }
  return jac;
}

Eigen::SparseMatrix<double> uniform_laplacian(const FaceMatrix& faces,
                                              Eigen::Index n_vertices) {
  std::vector<std::set<Eigen::Index>> nbrs(n_vertices);
  for (Eigen::Index f = 0; f < faces.rows(); ++f) {
    const Eigen::Index a = faces(f, 0), b = faces(f, 1), c = faces(f, 2);
    nbrs[a].insert(b); nbrs[a].insert(c);
    nbrs[b].insert(a); nbrs[b].insert(c);
    nbrs[c].insert(a); nbrs[c].insert(b);
  }
  std::vector<Eigen::Triplet<double>> trip;
  for (Eigen::Index i = 0; i < n_vertices; ++i) {
    if (nbrs[i].empty()) continue;
    trip.emplace_back(i, i, 1.0);
    const double w = -1.0 / double(nbrs[i].size());
    for (auto n : nbrs[i]) trip.emplace_back(i, n, w);
  }
  Eigen::SparseMatrix<double> L(n_vertices, n_vertices);
  L.setFromTriplets(trip.begin(), trip.end());
  return L;
}

double laplacian_energy(const Mesh& mesh, std::size_t* isolated_count) {
  if (!mesh.faces) throw Error("bad-input", "mesh has no face topology");
  if (!mesh.vertices.allFinite()) throw Error("bad-input", "mesh vertices must be finite");
  const auto v = mesh.vertices.rows();
  std::vector<std::set<Eigen::Index>> nbrs(v);
  for (Eigen::Index f = 0; f < mesh.faces->rows(); ++f) {
    const Eigen::Index a = (*mesh.faces)(f, 0), b = (*mesh.faces)(f, 1),
                       c = (*mesh.faces)(f, 2);
    nbrs[a].insert(b); nbrs[a].insert(c);
    nbrs[b].insert(a); nbrs[b].insert(c);
    nbrs[c].insert(a); nbrs[c].insert(b);
  }
  double total = 0.0;
  Eigen::Index connected = 0;
  std::size_t isolated = 0;
  for (Eigen::Index i = 0; i < v; ++i) {
    if (nbrs[i].empty()) {
      ++isolated;
      continue;
    }
    Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
    for (auto n : nbrs[i]) mean += mesh.vertices.row(n);
    mean /= double(nbrs[i].size());
    total += (mesh.vertices.row(i) - mean).squaredNorm();
    ++connected;
  }
  if (isolated_count) *isolated_count = isolated;
  return connected == 0 ? 0.0 : total / double(connected);
}

double flame_param_reg(const data::ExpressionParams& q, const Eigen::VectorXd& d_e,
                       const Eigen::VectorXd& d_p) {
  return q.expr.squaredNorm() + d_e.squaredNorm() + d_p.squaredNorm();
}

namespace {

// Smooth random vertex field: a handful of Gaussian bumps with random
// centers, radii and directions, normalized to a target RMS displacement.
Eigen::VectorXd smooth_field(const Eigen::MatrixX3d& verts, std::mt19937_64& rng,
                             double rms_target) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, int(verts.rows()) - 1);
  std::uniform_real_distribution<double> radius(0.03, 0.07);
  const int n_bumps = 6;
  Eigen::VectorXd field = Eigen::VectorXd::Zero(3 * verts.rows());
  for (int b = 0; b < n_bumps; ++b) {
    const Eigen::RowVector3d center = verts.row(pick(rng));
    const double rho = radius(rng);
    Eigen::Vector3d dir(normal(rng), normal(rng), normal(rng));
    dir.normalize();
    dir *= normal(rng);
    for (Eigen::Index i = 0; i < verts.rows(); ++i) {
      const double d2 = (verts.row(i) - center).squaredNorm();
      field.segment<3>(3 * i) += std::exp(-d2 / (2.0 * rho * rho)) * dir;
    }
  }
  const double rms = std::sqrt(field.squaredNorm() / double(verts.rows()));
  if (rms > 1e-12) field *= rms_target / rms;
  return field;
}

void triangulate_ring_pair(const std::vector<int>& upper, const std::vector<int>& lower,
                           std::vector<Eigen::Vector3i>& faces) {
  const int m = int(upper.size()), n = int(lower.size());
  int i = 0, j = 0;
  while (i < m || j < n) {
    const double next_a = i < m ? double(i + 1) / m : 2.0;
    const double next_b = j < n ? double(j + 1) / n : 2.0;
    if (next_a <= next_b) {
      faces.emplace_back(upper[i % m], lower[j % n], upper[(i + 1) % m]);
      ++i;
    } else {
      faces.emplace_back(upper[i % m], lower[j % n], lower[(j + 1) % n]);
      ++j;
    }
  }
}

}  // namespace

FlameLiteModel synth_model(std::uint64_t seed, int vertex_count, int expr_dim) {
  if (vertex_count < 4) throw Error("bad-input", "need at least 4 vertices");
  if (expr_dim < 1) throw Error("bad-input", "expression dimension must be positive");

  FlameLiteModel model;
  const double ax = 0.075, ay = 0.105, az = 0.085;  // head-like semi-axes, meters

  std::vector<Eigen::Vector3i> face_list;
  if (vertex_count == 4) {
    model.template_vertices.resize(4, 3);
    model.template_vertices << 0, ay, 0, ax, -ay, -az, -ax, -ay, -az, 0, -ay, az;
    face_list = {{0, 1, 2}, {0, 2, 3}, {0, 3, 1}, {1, 3, 2}};
  } else {
    // Poles plus latitude rings; ring sizes follow sin(phi) so triangles stay
    // reasonably shaped for any vertex budget.
    const int interior = vertex_count - 2;
    int n_rings = std::max(1, std::min(interior / 3, int(std::lround(std::sqrt(interior / 2.0)))));
    std::vector<double> phi(n_rings), weight(n_rings);
    double wsum = 0.0;
    for (int r = 0; r < n_rings; ++r) {
      phi[r] = M_PI * (r + 1) / (n_rings + 1);
      weight[r] = std::sin(phi[r]);
      wsum += weight[r];
    }
    std::vector<int> sizes(n_rings, 3);
    int remaining = interior - 3 * n_rings;
    // Largest-remainder distribution of the leftover vertices.
    std::vector<double> frac(n_rings);
    int assigned = 0;
    for (int r = 0; r < n_rings; ++r) {
      const double share = remaining * weight[r] / wsum;
      const int extra = int(share);
      sizes[r] += extra;
      frac[r] = share - extra;
      assigned += extra;
    }
    std::vector<int> order(n_rings);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return frac[a] > frac[b]; });
    for (int k = 0; k < remaining - assigned; ++k) sizes[order[k % n_rings]] += 1;

    model.template_vertices.resize(vertex_count, 3);
    model.template_vertices.row(0) << 0, ay, 0;
    model.template_vertices.row(vertex_count - 1) << 0, -ay, 0;
    std::vector<std::vector<int>> rings(n_rings);
    int next = 1;
    for (int r = 0; r < n_rings; ++r) {
      for (int k = 0; k < sizes[r]; ++k) {
        const double theta = 2.0 * M_PI * k / sizes[r];
        model.template_vertices.row(next) << ax * std::sin(phi[r]) * std::cos(theta),
            ay * std::cos(phi[r]), az * std::sin(phi[r]) * std::sin(theta);
        rings[r].push_back(next++);
      }
    }
    for (int k = 0; k < sizes[0]; ++k)
      face_list.emplace_back(0, rings[0][k], rings[0][(k + 1) % sizes[0]]);
    for (int r = 0; r + 1 < n_rings; ++r)
      triangulate_ring_pair(rings[r], rings[r + 1], face_list);
    const auto& last = rings[n_rings - 1];
    for (int k = 0; k < int(last.size()); ++k)
      face_list.emplace_back(vertex_count - 1, last[(k + 1) % last.size()], last[k]);
  }

  // Fix winding so every face normal points away from the centroid.
  auto faces = std::make_shared<FaceMatrix>(face_list.size(), 3);
  for (std::size_t f = 0; f < face_list.size(); ++f) {
    Eigen::Vector3i tri = face_list[f];
    const Eigen::Vector3d v0 = model.template_vertices.row(tri[0]);
    const Eigen::Vector3d v1 = model.template_vertices.row(tri[1]);
    const Eigen::Vector3d v2 = model.template_vertices.row(tri[2]);
    const Eigen::Vector3d n = (v1 - v0).cross(v2 - v0);
    if (n.dot((v0 + v1 + v2) / 3.0) < 0.0) std::swap(tri[1], tri[2]);
    for (int c = 0; c < 3; ++c) (*faces)(f, c) = std::uint32_t(tri[c]);
  }
  model.faces = std::move(faces);

  model.expr_basis.resize(3 * vertex_count, expr_dim);
  for (int k = 0; k < expr_dim; ++k) {
    auto rng = make_rng(seed, mix64(0xe0, std::uint64_t(k)));
    model.expr_basis.col(k) = smooth_field(model.template_vertices, rng, 0.004);
  }
  model.pose_basis.resize(3 * vertex_count, kPoseFeatureCount);
  for (int k = 0; k < kPoseFeatureCount; ++k) {
    auto rng = make_rng(seed, mix64(0xe1, std::uint64_t(k)));
    model.pose_basis.col(k) = smooth_field(model.template_vertices, rng, 0.0015);
  }

  model.joints.row(0) << 0.0, -0.06, 0.04;    // jaw
  model.joints.row(1) << -0.03, 0.025, 0.065; // left eye
  model.joints.row(2) << 0.03, 0.025, 0.065;  // right eye

  const Eigen::RowVector3d jaw_center(0.0, -0.08, 0.04);
  model.skin_weights.resize(vertex_count, 3);
  for (int i = 0; i < vertex_count; ++i) {
    const Eigen::RowVector3d p = model.template_vertices.row(i);
    double g_jaw = std::exp(-(p - jaw_center).squaredNorm() / (2.0 * 0.06 * 0.06));
    double g_el = std::exp(-(p - model.joints.row(1)).squaredNorm() / (2.0 * 0.025 * 0.025));
    double g_er = std::exp(-(p - model.joints.row(2)).squaredNorm() / (2.0 * 0.025 * 0.025));
    Eigen::RowVector3d w(g_jaw, g_el, g_er);
    const double sum = w.sum();
    if (sum > 0.97) w *= 0.97 / sum;
    model.skin_weights.row(i) = w;
  }

  model.validate();
  return model;
}

void save_model(const FlameLiteModel& model, const std::string& path) {
  model.validate();
  BinWriter w(path);
  w.magic("FLM1");
  w.u32(std::uint32_t(model.vertex_count()));
  w.u32(std::uint32_t(model.face_count()));
  w.u32(std::uint32_t(model.expr_dim()));
  w.matrix_f32(model.template_vertices);
  w.matrix_u32(*model.faces);
  w.matrix_f32(model.expr_basis);
  w.matrix_f32(model.pose_basis);
  w.matrix_f32(model.joints);
  w.matrix_f32(model.skin_weights);
  w.close();
}

FlameLiteModel load_model(const std::string& path) {
  BinReader r(path);
  r.expect_magic("FLM1");
  const auto v = r.u32(), f = r.u32(), k = r.u32();
  FlameLiteModel m;
  m.template_vertices.resize(v, 3);
  r.matrix_f32_into(m.template_vertices);
  auto faces = std::make_shared<FaceMatrix>(f, 3);
  r.matrix_u32_into(*faces);
  m.faces = std::move(faces);
  m.expr_basis.resize(3 * Eigen::Index(v), k);
  r.matrix_f32_into(m.expr_basis);
  m.pose_basis.resize(3 * Eigen::Index(v), kPoseFeatureCount);
  r.matrix_f32_into(m.pose_basis);
  r.matrix_f32_into(m.joints);
  m.skin_weights.resize(v, 3);
  r.matrix_f32_into(m.skin_weights);
  r.expect_eof();
  m.validate();
  return m;
}

}  // namespace exmap::flame
