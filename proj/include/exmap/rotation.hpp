#pragma once

#include <Eigen/Geometry>
#include <cmath>
#include <optional>
#include <random>

#include "exmap/common.hpp"

// Rotation representations used across the pipeline: 6D (first two columns
// of a rotation matrix, orthonormalized on decode), 3x3 matrices, axis-angle
// and quaternions. All free functions, templated on scalar.

namespace exmap {

inline constexpr double kRot6dDegenerateTol = 1e-8;

template <typename T>
Vec6<T> identity_rot6d() {
  Vec6<T> r;
  r << T(1), T(0), T(0), T(0), T(1), T(0);
  return r;
}

/// Gram-Schmidt decode. Columns of the result are (b1, b2, b1 x b2).
template <typename T>
std::optional<Mat3<T>> try_rot6d_to_matrix(const Vec6<T>& r) {
  const Vec3<T> a1 = r.template head<3>();
  const Vec3<T> a2 = r.template tail<3>();
  const T n1 = a1.norm();
  if (n1 <= T(kRot6dDegenerateTol)) return std::nullopt;
  const Vec3<T> b1 = a1 / n1;
  Vec3<T> u2 = a2 - a2.dot(b1) * b1;
  const T n2 = u2.norm();
  if (n2 <= T(kRot6dDegenerateTol) || a2.norm() <= T(kRot6dDegenerateTol)) return std::nullopt;
  const Vec3<T> b2 = u2 / n2;
  Mat3<T> m;
  m.col(0) = b1;
  m.col(1) = b2;
  m.col(2) = b1.cross(b2);
  return m;
}

template <typename T>
Mat3<T> rot6d_to_matrix(const Vec6<T>& r) {
  auto m = try_rot6d_to_matrix(r);
  if (!m) throw Error("degenerate-input", "6D rotation is not orthonormalizable");
  return *m;
}

template <typename T>
Vec6<T> matrix_to_rot6d(const Mat3<T>& m) {
  Vec6<T> r;
  r.template head<3>() = m.col(0);
  r.template tail<3>() = m.col(1);
  return r;
}

/// Rodrigues formula; series expansion near zero angle.
template <typename T>
Mat3<T> axis_angle_to_matrix(const Vec3<T>& v) {
  const T theta2 = v.squaredNorm();
  const T theta = std::sqrt(theta2);
  T s, c;  // sin(t)/t and (1-cos(t))/t^2
  if (theta < T(1e-8)) {
    s = T(1) - theta2 / T(6);
    c = T(0.5) - theta2 / T(24);
  } else {
    s = std::sin(theta) / theta;
    c = (T(1) - std::cos(theta)) / theta2;
  }
  Mat3<T> k = Mat3<T>::Zero();
  k(0, 1) = -v.z(); k(0, 2) = v.y();
  k(1, 0) = v.z();  k(1, 2) = -v.x();
  k(2, 0) = -v.y(); k(2, 1) = v.x();
  return Mat3<T>::Identity() + s * k + c * (k * k);
}

/// Stable branching extraction; w is canonicalized to be nonnegative.
template <typename T>
Eigen::Quaternion<T> matrix_to_quaternion(const Mat3<T>& m) {
  Eigen::Quaternion<T> q(m);
  q.normalize();
  if (q.w() < T(0)) q.coeffs() = -q.coeffs();
  return q;
}

template <typename T>
Vec3<T> matrix_to_axis_angle(const Mat3<T>& m) {
  const Eigen::Quaternion<T> q = matrix_to_quaternion(m);
  const Vec3<T> im(q.x(), q.y(), q.z());
  const T n = im.norm();
  if (n < T(1e-12)) return Vec3<T>::Zero();
  const T theta = T(2) * std::atan2(n, q.w());
  return im * (theta / n);
}

template <typename T>
bool is_rotation(const Mat3<T>& m, T tol = T(1e-6)) {
  const Mat3<T> e = m.transpose() * m - Mat3<T>::Identity();
  return e.cwiseAbs().maxCoeff() < tol && std::abs(m.determinant() - T(1)) < tol;
}

/// Row-major flattening used for pose features and rotation Jacobians:
/// flat[3*i + j] = R(i, j).
template <typename T>
Eigen::Matrix<T, 9, 1> flatten_rowmajor(const Mat3<T>& m) {
  Eigen::Matrix<T, 9, 1> f;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) f(3 * i + j) = m(i, j);
  return f;
}

/// d flatten_rowmajor(rot6d_to_matrix(r)) / d r, a 9x6 matrix.
template <typename T>
Eigen::Matrix<T, 9, 6> rot6d_to_matrix_jacobian(const Vec6<T>& r) {
  const Vec3<T> a1 = r.template head<3>();
  const Vec3<T> a2 = r.template tail<3>();
  const T n1 = a1.norm();
  if (n1 <= T(kRot6dDegenerateTol))
    throw Error("degenerate-input", "6D rotation is not orthonormalizable");
  const Vec3<T> b1 = a1 / n1;
  const Mat3<T> P1 = (Mat3<T>::Identity() - b1 * b1.transpose()) / n1;  // db1/da1
  const Vec3<T> u2 = a2 - a2.dot(b1) * b1;
  const T n2 = u2.norm();
  if (n2 <= T(kRot6dDegenerateTol))
    throw Error("degenerate-input", "6D rotation is not orthonormalizable");
  const Vec3<T> b2 = u2 / n2;

  // u2 = a2 - (b1.a2) b1
  const Mat3<T> du2_da2 = Mat3<T>::Identity() - b1 * b1.transpose();
  const Mat3<T> du2_db1 = -(a2.dot(b1)) * Mat3<T>::Identity() - b1 * a2.transpose();
  const Mat3<T> du2_da1 = du2_db1 * P1;
  const Mat3<T> P2 = (Mat3<T>::Identity() - b2 * b2.transpose()) / n2;  // db2/du2

  const Mat3<T> db1_da1 = P1;
  const Mat3<T> db2_da1 = P2 * du2_da1;
  const Mat3<T> db2_da2 = P2 * du2_da2;

  auto skew = [](const Vec3<T>& v) {
    Mat3<T> k = Mat3<T>::Zero();
    k(0, 1) = -v.z(); k(0, 2) = v.y();
    k(1, 0) = v.z();  k(1, 2) = -v.x();
    k(2, 0) = -v.y(); k(2, 1) = v.x();
    return k;
  };
  // b3 = b1 x b2 => db3 = -[b2]x db1 + [b1]x db2
  const Mat3<T> db3_da1 = -skew(b2) * db1_da1 + skew(b1) * db2_da1;
  const Mat3<T> db3_da2 = skew(b1) * db2_da2;

  Eigen::Matrix<T, 9, 6> jac;
  for (int row = 0; row < 3; ++row) {     // matrix row index
    for (int k = 0; k < 3; ++k) {         // input component within a1 / a2
      jac(3 * row + 0, k) = db1_da1(row, k);
      jac(3 * row + 0, 3 + k) = T(0);
      jac(3 * row + 1, k) = db2_da1(row, k);
      jac(3 * row + 1, 3 + k) = db2_da2(row, k);
      jac(3 * row + 2, k) = db3_da1(row, k);
      jac(3 * row + 2, 3 + k) = db3_da2(row, k);
    }
  }
  return jac;
}

template <typename T, typename Rng>
Mat3<T> random_rotation(Rng& rng) {
  std::normal_distribution<T> normal(T(0), T(1));
  Eigen::Quaternion<T> q(normal(rng), normal(rng), normal(rng), normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

}  // namespace exmap
