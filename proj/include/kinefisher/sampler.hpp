#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "kinefisher/constants.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/rng.hpp"
#include "kinefisher/so3.hpp"

namespace kinefisher {

/// Unique root of sum_i 1 / (b + 2 a_i) = 1 for a_0 = 0 <= a_i.
inline double optimal_b(const Vec4& a) {
  if (!a.allFinite() || std::abs(a(0)) > 1e-12 || a.minCoeff() < -1e-9) {
    throw InvalidArgument("optimal_b expects a_0 = 0 and nonnegative eigenvalues");
  }
  if (a.isZero()) return 4.0;  // uniform target: proposal equals target
  const auto residual = [&](double b, double& slope) {
    double f = -1.0;
    slope = 0.0;
    for (int i = 0; i < 4; ++i) {
      const double t = 1.0 / (b + 2.0 * a(i));
      f += t;
      slope -= t * t;
    }
    return f;
  };
  // The a_0 = 0 term alone gives f(b) > 0 on (0, 1), and f(4) <= 0, so the
  // root lies in [1, 4]. f is convex and decreasing: Newton from the left
  // increases monotonically to the root.
  double b = 1.0;
  for (int it = 0; it < 200; ++it) {
    double slope = 0.0;
    const double f = residual(b, slope);
    if (std::abs(f) <= 1e-15) break;
    const double next = b - f / slope;
    if (!(next > b) || next == b) break;
    b = std::min(next, 4.0);
  }
  return b;
}

/// Bingham target exp(-x^T A x) on S^3 and its angular central Gaussian
/// envelope with parameter Omega = I + (2 / b) A.
struct BinghamParams {
  Vec4 a = Vec4::Zero();
  double b = 4.0;
  Vec4 omega = Vec4::Ones();
  double big_m = 1.0;

  static BinghamParams from_a(const Vec4& a, std::optional<double> b_override = std::nullopt) {
    BinghamParams p;
    p.a = a;
    p.b = b_override ? *b_override : optimal_b(a);
    if (!(p.b > 0.0)) throw InvalidArgument("proposal parameter b must be positive");
    p.omega = Vec4::Ones() + (2.0 / p.b) * a;
    p.big_m = std::exp((p.b - 4.0) / 2.0) * (4.0 / p.b) * (4.0 / p.b);
    return p;
  }
  static BinghamParams from_singular_values(const Vec3& s,
                                            std::optional<double> b_override = std::nullopt) {
    return from_a(detail::bingham_parameters(s), b_override);
  }

  /// exp(-x^T A x) / (M (x^T Omega x)^-2); at most 1 for a valid envelope.
  [[nodiscard]] double acceptance_ratio(const Vec4& x) const {
    const double q = x.dot(omega.cwiseProduct(x));
    return std::exp(-x.dot(a.cwiseProduct(x))) * q * q / big_m;
  }
};

/// Base noise of an accepted proposal, enough to replay the draw.
struct NoiseRecord {
  Vec4 eps = Vec4::Zero();
  int rejected = 0;
};

struct SamplerOptions {
  std::optional<double> b;  ///< overrides optimal_b when set
  int iteration_cap = kSamplerIterationCap;
};

namespace detail {

// y = Omega^{-1/2} eps, x = y / |y|.
inline Vec4 acg_direction(const Vec4& eps, const Vec4& omega) {
  const Vec4 y = eps.cwiseQuotient(omega.cwiseSqrt());
  return y / y.norm();
}

inline Rotation compose_sample(const ProperSvd& svd, const Vec4& x) {
  return Rotation::unchecked(svd.u.matrix() * quaternion_to_matrix({x}).matrix() *
                             svd.v.matrix().transpose());
}

}  // namespace detail

/// Rejection sampler for the Bingham density with the ACG proposal.
inline std::pair<UnitQuaternion, NoiseRecord> sample_bingham_quaternion(
    const BinghamParams& p, RngStream& rng, int iteration_cap = kSamplerIterationCap) {
  NoiseRecord rec;
  for (int it = 0; it < iteration_cap; ++it) {
    Vec4 eps;
    for (int k = 0; k < 4; ++k) eps(k) = rng.normal();
    const Vec4 x = detail::acg_direction(eps, p.omega);
    const double w = rng.uniform();
    if (w < p.acceptance_ratio(x)) {
      rec.eps = eps;
      return {UnitQuaternion{x}, rec};
    }
    ++rec.rejected;
  }
  throw SamplerStall("rejection sampler exceeded " + std::to_string(iteration_cap) +
                     " proposals (b = " + std::to_string(p.b) + ")");
}

inline std::pair<Rotation, NoiseRecord> sample_matrix_fisher(const ProperSvd& svd, RngStream& rng,
                                                             const SamplerOptions& opts = {}) {
  const auto params = BinghamParams::from_singular_values(svd.s, opts.b);
  auto [q, rec] = sample_bingham_quaternion(params, rng, opts.iteration_cap);
  return {detail::compose_sample(svd, q.x), rec};
}

inline std::pair<Rotation, NoiseRecord> sample_matrix_fisher(const MatrixFisher& d, RngStream& rng,
                                                             const SamplerOptions& opts = {}) {
  return sample_matrix_fisher(d.svd(), rng, opts);
}

/// Deterministic map (F, eps) -> R, skipping the accept/reject step. Replays
/// the original draw bit-exactly when F and the options are unchanged.
inline Rotation fixed_noise_resample(const ProperSvd& svd, const NoiseRecord& noise,
                                     const SamplerOptions& opts = {}) {
  const auto params = BinghamParams::from_singular_values(svd.s, opts.b);
  return detail::compose_sample(svd, detail::acg_direction(noise.eps, params.omega));
}

inline Rotation fixed_noise_resample(const MatrixFisher& d, const NoiseRecord& noise,
                                     const SamplerOptions& opts = {}) {
  return fixed_noise_resample(d.svd(), noise, opts);
}

namespace detail {

inline Mat3 quaternion_matrix_differential(const Vec4& x, const Vec4& dx) {
  const double w = x(0), i = x(1), j = x(2), k = x(3);
  const double dw = dx(0), di = dx(1), dj = dx(2), dk = dx(3);
  Mat3 m;
  m(0, 0) = 2.0 * (w * dw + i * di - j * dj - k * dk);
  m(1, 1) = 2.0 * (w * dw - i * di + j * dj - k * dk);
  m(2, 2) = 2.0 * (w * dw - i * di - j * dj + k * dk);
  m(0, 1) = 2.0 * (di * j + i * dj - dw * k - w * dk);
  m(1, 0) = 2.0 * (di * j + i * dj + dw * k + w * dk);
  m(0, 2) = 2.0 * (di * k + i * dk + dw * j + w * dj);
  m(2, 0) = 2.0 * (di * k + i * dk - dw * j - w * dj);
  m(1, 2) = 2.0 * (dj * k + j * dk - dw * i - w * di);
  m(2, 1) = 2.0 * (dj * k + j * dk + dw * i + w * di);
  return m;
}

inline double regularized_inverse(double x, double floor) {
  if (floor > 0.0) return x / (x * x + floor * floor);
  return x == 0.0 ? 0.0 : 1.0 / x;
}

/**
 * Reverse-mode step through F = U diag(s) V^T for an output R = U Q V^T.
 *
 * `h` is U^T (dL/dR) V, `s_bar` the adjoint of the singular values collected
 * from Q's own dependence on s. The frame rotations split into a part that
 * is singular when s_i = s_j and a part singular when s_i = -s_j; `floor`
 * (0 = exact) Tikhonov-regularizes both inverses.
 */
inline Mat3 svd_frame_vjp(const ProperSvd& svd, const Mat3& h, const Mat3& q, const Vec3& s_bar,
                          double floor) {
  const Vec3& s = svd.s;
  const Mat3 mu = h * q.transpose();
  const Mat3 mv = q.transpose() * h;
  Mat3 p_bar = Mat3::Zero();
  for (int k = 0; k < 3; ++k) p_bar(k, k) = s_bar(k);
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      const double a_bar = mu(i, j) - mu(j, i);
      const double c_bar = -(mv(i, j) - mv(j, i));
      const double sym_bar = (a_bar + c_bar) * regularized_inverse(s(j) - s(i), floor);
      const double asym_bar = (a_bar - c_bar) * regularized_inverse(s(j) + s(i), floor);
      p_bar(i, j) += 0.5 * (sym_bar + asym_bar);
      p_bar(j, i) += 0.5 * (sym_bar - asym_bar);
    }
  }
  return svd.u.matrix() * p_bar * svd.v.matrix().transpose();
}

}  // namespace detail

/// Adjoints of a sample R = U Q V^T under U -> U exp(xi), V -> V exp(eta)
/// and of the singular values, free of the 1 / (s_i - s_j) terms of dL/dF.
struct FrameAdjoint {
  Vec3 u = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 s = Vec3::Zero();
};

namespace detail {

inline FrameAdjoint frame_adjoint(const Mat3& h, const Mat3& q, const Vec3& s_bar) {
  FrameAdjoint out;
  for (int m = 0; m < 3; ++m) {
    const Mat3 e = skew(Vec3::Unit(m));
    out.u(m) = h.cwiseProduct(e * q).sum();
    out.v(m) = -h.cwiseProduct(q * e).sum();
  }
  out.s = s_bar;
  return out;
}

// dL/ds through the ACG direction x(s, eps) for fixed frames.
inline Vec3 sample_s_bar(const Vec3& s, const NoiseRecord& noise, const Mat3& h,
                         const SamplerOptions& opts) {
  const Vec4 a = bingham_parameters(s);
  const auto params = BinghamParams::from_a(a, opts.b);
  const double b = params.b;
  const Vec4& omega = params.omega;
  const Vec4 y = noise.eps.cwiseQuotient(omega.cwiseSqrt());
  const double ynorm = y.norm();
  const Vec4 x = y / ynorm;
  // da_i / ds_k
  Eigen::Matrix<double, 4, 3> da;
  da << 0, 0, 0, 0, 2, 2, 2, 0, 2, 2, 2, 0;
  Eigen::RowVector3d db = Eigen::RowVector3d::Zero();
  if (!opts.b) {
    Vec4 inv2;
    for (int i = 0; i < 4; ++i) {
      const double t = 1.0 / (b + 2.0 * a(i));
      inv2(i) = t * t;
    }
    const Vec4 db_da = -2.0 * inv2 / inv2.sum();
    db = db_da.transpose() * da;
  }
  Vec3 s_bar;
  for (int k = 0; k < 3; ++k) {
    Vec4 domega;
    for (int i = 0; i < 4; ++i) domega(i) = 2.0 * da(i, k) / b - 2.0 * a(i) * db(k) / (b * b);
    Vec4 dy;
    for (int i = 0; i < 4; ++i) dy(i) = -0.5 * noise.eps(i) * std::pow(omega(i), -1.5) * domega(i);
    const Vec4 dx = (dy - x * x.dot(dy)) / ynorm;
    s_bar(k) = (h.cwiseProduct(quaternion_matrix_differential(x, dx))).sum();
  }
  return s_bar;
}

}  // namespace detail

/// Frame form of fixed_noise_vjp.
inline FrameAdjoint fixed_noise_frame_vjp(const ProperSvd& svd, const NoiseRecord& noise,
                                          const Mat3& r_bar, const SamplerOptions& opts = {}) {
  const auto params = BinghamParams::from_singular_values(svd.s, opts.b);
  const Vec4 x = detail::acg_direction(noise.eps, params.omega);
  const Mat3 q = quaternion_to_matrix({x}).matrix();
  const Mat3 h = svd.u.matrix().transpose() * r_bar * svd.v.matrix();
  return detail::frame_adjoint(h, q, detail::sample_s_bar(svd.s, noise, h, opts));
}

/**
 * Pathwise gradient of the fixed-noise map: given dL/dR for
 * R = fixed_noise_resample(F, eps), returns dL/dF. The accept/reject step is
 * treated as locally constant.
 */
inline Mat3 fixed_noise_vjp(const ProperSvd& svd, const NoiseRecord& noise, const Mat3& r_bar,
                            const SamplerOptions& opts = {}, double svd_floor = 0.0) {
  const auto params = BinghamParams::from_singular_values(svd.s, opts.b);
  const Vec4 x = detail::acg_direction(noise.eps, params.omega);
  const Mat3 q = quaternion_to_matrix({x}).matrix();
  const Mat3 h = svd.u.matrix().transpose() * r_bar * svd.v.matrix();
  return detail::svd_frame_vjp(svd, h, q, detail::sample_s_bar(svd.s, noise, h, opts), svd_floor);
}

/// Frame form of mode_vjp.
inline FrameAdjoint mode_frame_vjp(const ProperSvd& svd, const Mat3& mode_bar) {
  const Mat3 h = svd.u.matrix().transpose() * mode_bar * svd.v.matrix();
  return detail::frame_adjoint(h, Mat3::Identity(), Vec3::Zero());
}

/// dL/dF for the mode U V^T given dL/d(mode).
inline Mat3 mode_vjp(const ProperSvd& svd, const Mat3& mode_bar) {
  const Mat3 h = svd.u.matrix().transpose() * mode_bar * svd.v.matrix();
  return detail::svd_frame_vjp(svd, h, Mat3::Identity(), Vec3::Zero(), 0.0);
}

}  // namespace kinefisher
