#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "kinefisher/constants.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/rng.hpp"

namespace kinefisher {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

/// Element of SO(3). Construction through from_matrix() checks the group
/// invariants; unchecked() is for matrices that are rotations by construction.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation from_matrix(const Mat3& m, double tol = kTol.rotation) {
    if (!m.allFinite()) throw InvalidArgument("rotation has non-finite entries");
    if ((m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() > tol ||
        std::abs(m.determinant() - 1.0) > tol) {
      throw InvalidArgument("matrix is not in SO(3)");
    }
    return Rotation(m);
  }
  static Rotation unchecked(const Mat3& m) { return Rotation(m); }
  static Rotation identity() { return Rotation(); }

  [[nodiscard]] const Mat3& matrix() const { return m_; }
  [[nodiscard]] Rotation transpose() const { return Rotation(m_.transpose()); }
  [[nodiscard]] Rotation inverse() const { return transpose(); }

  friend Rotation operator*(const Rotation& a, const Rotation& b) {
    return Rotation(a.m_ * b.m_);
  }
  friend Vec3 operator*(const Rotation& a, const Vec3& v) { return a.m_ * v; }
  friend bool operator==(const Rotation& a, const Rotation& b) { return a.m_ == b.m_; }

  [[nodiscard]] bool is_valid(double tol = kTol.rotation) const {
    return m_.allFinite() &&
           (m_.transpose() * m_ - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(m_.determinant() - 1.0) <= tol;
  }

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

/// Unit quaternion stored as (w, i, j, k).
struct UnitQuaternion {
  Vec4 x = Vec4(1.0, 0.0, 0.0, 0.0);
};

/// Rotation vector: axis times angle in radians.
struct AxisAngle {
  Vec3 v = Vec3::Zero();
};

/// F = u * diag(s) * v^T with u, v in SO(3) and s1 >= s2 >= |s3|.
struct ProperSvd {
  Rotation u;
  Vec3 s = Vec3::Zero();
  Rotation v;

  [[nodiscard]] Mat3 reconstruct() const {
    return u.matrix() * s.asDiagonal() * v.matrix().transpose();
  }
};

namespace detail {

// Orthonormal vectors spanning range(P), chosen greedily from the projected
// canonical basis vectors with the largest norm (lowest index on ties).
inline void canonical_span(const Mat3& projector, int count, std::vector<Vec3>& out) {
  std::vector<Vec3> chosen;
  for (int r = 0; r < count; ++r) {
    double best_norm = -1.0;
    Vec3 best_vec = Vec3::Zero();
    for (int k = 0; k < 3; ++k) {
      Vec3 w = projector.col(k);
      for (const auto& c : chosen) w -= c * c.dot(w);
      const double n = w.norm();
      if (n > best_norm * (1.0 + 1e-12)) {
        best_norm = n;
        best_vec = w;
      }
    }
    Vec3 c = best_vec / best_norm;
    // Re-orthogonalize for accuracy.
    for (const auto& prev : chosen) c -= prev * prev.dot(c);
    c.normalize();
    chosen.push_back(c);
  }
  out.insert(out.end(), chosen.begin(), chosen.end());
}

}  // namespace detail

/**
 * Proper singular value decomposition of a 3x3 matrix.
 *
 * Both factors are rotations; the sign of the smallest singular value absorbs
 * det(F). Repeated or vanishing singular values are resolved deterministically:
 * within each group of (numerically) equal singular values the right singular
 * vectors are the column-pivoted projections of the canonical basis onto the
 * group's subspace, and left vectors for vanishing singular values are
 * completed the same way. F = 0 yields (I, 0, I).
 */
inline ProperSvd proper_svd(const Mat3& f) {
  if (!f.allFinite()) throw InvalidArgument("proper_svd: non-finite input");

  Eigen::JacobiSVD<Mat3> svd(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sigma = svd.singularValues();
  const Mat3 v_raw = svd.matrixV();
  const double tol = kTol.svd_degenerate * sigma(0);
  const auto is_zero = [&](int i) { return sigma(0) == 0.0 || sigma(i) <= tol; };

  std::vector<Vec3> v_cols;
  std::vector<Vec3> u_cols;
  int i = 0;
  while (i < 3) {
    int j = i + 1;
    while (j < 3 && sigma(j - 1) - sigma(j) <= tol && is_zero(i) == is_zero(j)) ++j;
    Mat3 proj = Mat3::Zero();
    for (int k = i; k < j; ++k) proj += v_raw.col(k) * v_raw.col(k).transpose();
    detail::canonical_span(proj, j - i, v_cols);
    i = j;
  }

  int nonzero = 0;
  for (int k = 0; k < 3; ++k) {
    if (is_zero(k)) break;
    Vec3 u = f * v_cols[k] / sigma(k);
    for (const auto& prev : u_cols) u -= prev * prev.dot(u);
    u.normalize();
    u_cols.push_back(u);
    ++nonzero;
  }
  if (nonzero < 3) {
    Mat3 proj = Mat3::Identity();
    for (const auto& u : u_cols) proj -= u * u.transpose();
    detail::canonical_span(proj, 3 - nonzero, u_cols);
  }

  Mat3 u_mat;
  Mat3 v_mat;
  for (int k = 0; k < 3; ++k) {
    u_mat.col(k) = u_cols[k];
    v_mat.col(k) = v_cols[k];
  }
  const double du = u_mat.determinant() < 0.0 ? -1.0 : 1.0;
  const double dv = v_mat.determinant() < 0.0 ? -1.0 : 1.0;
  u_mat.col(2) *= du;
  v_mat.col(2) *= dv;

  ProperSvd out;
  for (int k = 0; k < 3; ++k) {
    out.s(k) = u_mat.col(k).dot(f * v_mat.col(k));
  }
  out.u = Rotation::unchecked(u_mat);
  out.v = Rotation::unchecked(v_mat);
  return out;
}

inline Rotation axis_angle_to_matrix(const AxisAngle& gamma) {
  if (!gamma.v.allFinite()) throw InvalidArgument("axis-angle has non-finite entries");
  const double theta = gamma.v.norm();
  const Mat3 k = skew(gamma.v);
  double a;
  double b;
  if (theta < 1e-6) {
    const double t2 = theta * theta;
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Rotation::unchecked(Mat3::Identity() + a * k + b * k * k);
}

/// Derivatives dR/dgamma_k for k = 0, 1, 2 of the Rodrigues map.
inline std::array<Mat3, 3> axis_angle_jacobian(const AxisAngle& gamma) {
  const double theta = gamma.v.norm();
  const Mat3 k = skew(gamma.v);
  double a;
  double b;
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    a = 0.5 - t2 / 24.0;
    b = 1.0 / 6.0 - t2 / 120.0;
  } else {
    a = (1.0 - std::cos(theta)) / (theta * theta);
    b = (theta - std::sin(theta)) / (theta * theta * theta);
  }
  const Mat3 left_jac = Mat3::Identity() + a * k + b * k * k;
  const Mat3 r = axis_angle_to_matrix(gamma).matrix();
  std::array<Mat3, 3> out;
  for (int c = 0; c < 3; ++c) out[c] = skew(left_jac.col(c)) * r;
  return out;
}

inline Rotation quaternion_to_matrix(const UnitQuaternion& q) {
  const double n = q.x.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw InvalidArgument("quaternion_to_matrix: zero or non-finite quaternion");
  }
  const Vec4 x = q.x / n;
  const double w = x(0), i = x(1), j = x(2), k = x(3);
  Mat3 m;
  m << w * w + i * i - j * j - k * k, 2.0 * (i * j - w * k), 2.0 * (i * k + w * j),
      2.0 * (i * j + w * k), w * w - i * i + j * j - k * k, 2.0 * (j * k - w * i),
      2.0 * (i * k - w * j), 2.0 * (j * k + w * i), w * w - i * i - j * j + k * k;
  return Rotation::unchecked(m);
}

/// Inverse of the double cover with the canonical sign: w >= 0, and when
/// w = 0 the first nonzero of (i, j, k) is positive.
inline UnitQuaternion matrix_to_quaternion(const Rotation& r) {
  const Mat3& m = r.matrix();
  const double tr = m.trace();
  Vec4 q;
  if (tr >= m(0, 0) && tr >= m(1, 1) && tr >= m(2, 2)) {
    const double s = 2.0 * std::sqrt(std::max(1.0 + tr, 0.0));
    q << 0.25 * s, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s, (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2)) {
    const double s = 2.0 * std::sqrt(std::max(1.0 + m(0, 0) - m(1, 1) - m(2, 2), 0.0));
    q << (m(2, 1) - m(1, 2)) / s, 0.25 * s, (m(0, 1) + m(1, 0)) / s, (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) >= m(2, 2)) {
    const double s = 2.0 * std::sqrt(std::max(1.0 - m(0, 0) + m(1, 1) - m(2, 2), 0.0));
    q << (m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, 0.25 * s, (m(1, 2) + m(2, 1)) / s;
  } else {
    const double s = 2.0 * std::sqrt(std::max(1.0 - m(0, 0) - m(1, 1) + m(2, 2), 0.0));
    q << (m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s, (m(1, 2) + m(2, 1)) / s, 0.25 * s;
  }
  q.normalize();
  bool flip = q(0) < 0.0;
  if (q(0) == 0.0) {
    for (int k = 1; k < 4; ++k) {
      if (q(k) != 0.0) {
        flip = q(k) < 0.0;
        break;
      }
    }
  }
  if (flip) q = -q;
  return {q};
}

/// Log map, angle in [0, pi].
inline AxisAngle matrix_to_axis_angle(const Rotation& r) {
  const Vec4 q = matrix_to_quaternion(r).x;
  const Vec3 im = q.tail<3>();
  const double n = im.norm();
  if (n == 0.0) return {};
  const double theta = 2.0 * std::atan2(n, q(0));
  return {im * (theta / n)};
}

inline double geodesic_distance(const Rotation& r1, const Rotation& r2) {
  const double c = ((r1.matrix().transpose() * r2.matrix()).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

/// Haar-uniform rotation from a uniform unit quaternion.
inline Rotation haar_random_rotation(RngStream& rng) {
  Vec4 g;
  do {
    for (int k = 0; k < 4; ++k) g(k) = rng.normal();
  } while (g.squaredNorm() == 0.0);
  return quaternion_to_matrix({g});
}

/// Row-major flattening used by the JSON formats.
inline std::array<double, 9> to_row_major(const Mat3& m) {
  std::array<double, 9> out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[3 * r + c] = m(r, c);
  return out;
}

inline Mat3 from_row_major(std::span<const double> a) {
  if (a.size() != 9) throw InvalidArgument("expected 9 row-major entries");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = a[3 * r + c];
  return m;
}

}  // namespace kinefisher
