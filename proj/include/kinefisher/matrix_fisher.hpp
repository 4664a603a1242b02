#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kinefisher/constants.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/quadrature.hpp"
#include "kinefisher/so3.hpp"

namespace kinefisher {

/// k_i = s_j + s_k for (i, j, k) in {(1,2,3), (2,3,1), (3,1,2)}.
struct Concentrations {
  Vec3 k = Vec3::Zero();
};

/**
 * Moments of Q ~ M(diag(s)) in the singular-value frame.
 *
 * mean(i) = E[Q_ii]; off-diagonal expectations vanish by symmetry.
 * cov(i, j) = Cov(Q_ii, Q_jj) is the Hessian of log c with respect to s.
 */
struct FisherMoments {
  double log_c = 0.0;
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity() / 3.0;
};

namespace detail {

// Signs of x_m^2 in Q_ii = sum_m sigma_im x_m^2 for the quaternion (w, i, j, k).
inline const Eigen::Matrix<double, 3, 4>& quaternion_diag_signs() {
  static const Eigen::Matrix<double, 3, 4> signs = [] {
    Eigen::Matrix<double, 3, 4> m;
    m << 1, 1, -1, -1, 1, -1, 1, -1, 1, -1, -1, 1;
    return m;
  }();
  return signs;
}

/// Maps arbitrary s onto the canonical s1 >= s2 >= |s3| by a permutation and
/// an even number of sign flips; both leave c(diag(s)) unchanged.
struct CanonicalForm {
  Vec3 s = Vec3::Zero();
  std::array<int, 3> perm{0, 1, 2};  ///< canonical i comes from input perm[i]
  Vec3 sign = Vec3::Ones();
};

inline CanonicalForm canonicalize(const Vec3& s) {
  CanonicalForm c;
  std::stable_sort(c.perm.begin(), c.perm.end(),
                   [&](int a, int b) { return std::abs(s(a)) > std::abs(s(b)); });
  double parity = 1.0;
  for (int i = 0; i < 3; ++i) {
    c.sign(i) = s(c.perm[i]) < 0.0 ? -1.0 : 1.0;
    parity *= c.sign(i);
  }
  if (parity < 0.0) c.sign(2) = -c.sign(2);
  for (int i = 0; i < 3; ++i) c.s(i) = c.sign(i) * s(c.perm[i]);
  return c;
}

// Pair sums of proper singular values are nonnegative; clamping removes
// rounding below zero when s_3 = -s_2.
inline Eigen::Vector4d bingham_parameters(const Vec3& s) {
  return Eigen::Vector4d(0.0, 2.0 * std::max(s(1) + s(2), 0.0), 2.0 * std::max(s(0) + s(2), 0.0),
                         2.0 * std::max(s(0) + s(1), 0.0));
}

inline void check_cap(const Vec3& s) {
  if (!s.allFinite()) throw InvalidArgument("singular values are not finite");
  const double top = s.cwiseAbs().maxCoeff();
  if (top > kConcentrationCap * (1.0 + 1e-9)) {
    throw ConcentrationOverflow("concentration " + std::to_string(top) + " exceeds cap " +
                                std::to_string(kConcentrationCap));
  }
}

}  // namespace detail

/// log c, E[Q_ii] and Cov(Q_ii, Q_jj) for F = diag(s), any ordering or signs.
inline FisherMoments fisher_moments(const Vec3& s, int order = default_quadrature_order()) {
  detail::check_cap(s);
  const auto canon = detail::canonicalize(s);
  FisherMoments out;
  if (canon.s(0) == 0.0) {
    out.log_c = 0.0;
    out.mean.setZero();
    // Haar: E[Q_ii^2] = 1/3 and E[Q_ii Q_jj] = 0 for i != j.
    out.cov = Mat3::Identity() / 3.0;
    return out;
  }
  const auto bm = quadrature::bingham_moments(detail::bingham_parameters(canon.s), order);
  const auto& sig = detail::quaternion_diag_signs();
  const Vec3 mean_c = sig * bm.second;
  const Mat3 second_c = sig * bm.fourth * sig.transpose();
  const Mat3 cov_c = second_c - mean_c * mean_c.transpose();
  out.log_c = canon.s.sum() + bm.log_normalizer;
  for (int i = 0; i < 3; ++i) {
    out.mean(canon.perm[i]) = canon.sign(i) * mean_c(i);
    for (int j = 0; j < 3; ++j) {
      out.cov(canon.perm[i], canon.perm[j]) = canon.sign(i) * canon.sign(j) * cov_c(i, j);
    }
  }
  return out;
}

/// log of the normalizing constant with respect to the Haar probability
/// measure, so the uniform case gives 0.
inline double log_norm_const(const Vec3& s, int order = default_quadrature_order()) {
  return fisher_moments(s, order).log_c;
}

/**
 * Matrix-Fisher distribution on SO(3), p(R) = exp(tr(F^T R)) / c(F).
 *
 * The proper SVD, log c(F) and the frame moments are computed once at
 * construction.
 */
class MatrixFisher {
 public:
  MatrixFisher() : MatrixFisher(Mat3::Zero()) {}
  explicit MatrixFisher(const Mat3& f, int order = default_quadrature_order())
      : f_(f), svd_(proper_svd(f)), order_(order) {
    moments_ = fisher_moments(svd_.s, order);
  }

  static MatrixFisher from_singular_values(const Vec3& s, int order = default_quadrature_order()) {
    return MatrixFisher(Mat3(s.asDiagonal()), order);
  }

  [[nodiscard]] const Mat3& f() const { return f_; }
  [[nodiscard]] const ProperSvd& svd() const { return svd_; }
  [[nodiscard]] const Vec3& singular_values() const { return svd_.s; }
  [[nodiscard]] double log_c() const { return moments_.log_c; }
  [[nodiscard]] const FisherMoments& moments() const { return moments_; }
  [[nodiscard]] int quadrature_order() const { return order_; }
  [[nodiscard]] bool is_uniform() const { return svd_.s(0) == 0.0; }

 private:
  Mat3 f_;
  ProperSvd svd_;
  FisherMoments moments_;
  int order_;
};

inline double log_pdf(const Rotation& r, const MatrixFisher& d) {
  return (d.f().transpose() * r.matrix()).trace() - d.log_c();
}

inline Rotation mode(const MatrixFisher& d) {
  const Vec3& s = d.singular_values();
  if (!(s(0) + s(1) > 0.0)) throw ModeUndefined("mode of a uniform matrix-Fisher distribution");
  return d.svd().u * d.svd().v.transpose();
}

inline Concentrations concentrations(const MatrixFisher& d) {
  const Vec3& s = d.singular_values();
  return {Vec3(s(1) + s(2), s(2) + s(0), s(0) + s(1))};
}

/// E[R]; also the gradient of log c with respect to F.
inline Mat3 expected_rotation(const MatrixFisher& d) {
  return d.svd().u.matrix() * d.moments().mean.asDiagonal() * d.svd().v.matrix().transpose();
}

/// KL(M(F) || uniform) = tr(F^T E[R]) - log c(F).
inline double kl_to_uniform(const MatrixFisher& d) {
  const double kl = d.singular_values().dot(d.moments().mean) - d.log_c();
  return std::max(kl, 0.0);
}

/// Gradient of kl_to_uniform with respect to F: Cov(vec R) applied to F.
inline Mat3 kl_to_uniform_gradient(const MatrixFisher& d) {
  const Vec3 g = d.moments().cov * d.singular_values();
  return d.svd().u.matrix() * g.asDiagonal() * d.svd().v.matrix().transpose();
}

namespace detail {

// Moment matching on the singular values: minimize log c(s) - d^T s over the
// box |s_i| <= cap. Convex, gradient mean(s) - d, Hessian cov(s).
inline Vec3 solve_moment_equations_newton(const Vec3& d, int order, bool& converged) {
  const double cap = kConcentrationCap;
  Vec3 s = Vec3::Zero();
  auto fm = fisher_moments(s, order);
  auto objective = [&](const FisherMoments& m, const Vec3& x) { return m.log_c - d.dot(x); };
  double obj = objective(fm, s);
  converged = false;
  for (int iter = 0; iter < 200; ++iter) {
    const Vec3 grad = fm.mean - d;
    std::array<bool, 3> free{};
    int nfree = 0;
    bool done = true;
    for (int i = 0; i < 3; ++i) {
      const bool at_upper = s(i) >= cap && grad(i) < 0.0;
      const bool at_lower = s(i) <= -cap && grad(i) > 0.0;
      free[i] = !(at_upper || at_lower);
      if (free[i]) {
        ++nfree;
        if (std::abs(grad(i)) > kTol.mle_moment) done = false;
      }
    }
    if (done) {
      converged = true;
      return s;
    }
    Vec3 step = Vec3::Zero();
    {
      std::vector<int> idx;
      for (int i = 0; i < 3; ++i)
        if (free[i]) idx.push_back(i);
      Eigen::MatrixXd h(nfree, nfree);
      Eigen::VectorXd g(nfree);
      for (int a = 0; a < nfree; ++a) {
        g(a) = grad(idx[a]);
        for (int b = 0; b < nfree; ++b) h(a, b) = fm.cov(idx[a], idx[b]);
      }
      h.diagonal().array() += 1e-14;
      const Eigen::VectorXd dx = -h.ldlt().solve(g);
      for (int a = 0; a < nfree; ++a) step(idx[a]) = dx(a);
    }
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Vec3 trial = (s + t * step).cwiseMax(-cap).cwiseMin(cap);
      const auto tm = fisher_moments(trial, order);
      const double tobj = objective(tm, trial);
      if (tobj <= obj + 1e-4 * grad.dot(trial - s) || (trial - s).norm() < 1e-15) {
        accepted = (trial - s).norm() > 0.0 || tobj < obj;
        s = trial;
        fm = tm;
        obj = tobj;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) return s;
  }
  return s;
}

// Coordinate bisection sweeps: E[Q_ii] is increasing in s_i.
inline Vec3 solve_moment_equations_bisection(const Vec3& d, int order, Vec3 s) {
  const double cap = kConcentrationCap;
  for (int sweep = 0; sweep < 500; ++sweep) {
    double change = 0.0;
    for (int i = 0; i < 3; ++i) {
      double lo = -cap;
      double hi = cap;
      Vec3 probe = s;
      while (hi - lo > kTol.mle_bisection) {
        probe(i) = 0.5 * (lo + hi);
        if (fisher_moments(probe, order).mean(i) < d(i)) {
          lo = probe(i);
        } else {
          hi = probe(i);
        }
      }
      const double next = 0.5 * (lo + hi);
      change = std::max(change, std::abs(next - s(i)));
      s(i) = next;
    }
    if (change < kTol.mle_bisection) break;
  }
  return s;
}

}  // namespace detail

/**
 * Moment-matching fit: the returned distribution has E[R] equal to the sample
 * mean matrix, with singular values clipped at the concentration cap (which
 * is where all-identical samples end up).
 */
inline MatrixFisher mle_fit(std::span<const Rotation> samples,
                            int order = default_quadrature_order()) {
  if (samples.size() < 2) throw InvalidArgument("mle_fit needs at least 2 samples");
  Mat3 mean = Mat3::Zero();
  for (const auto& r : samples) mean += r.matrix();
  mean /= static_cast<double>(samples.size());
  const ProperSvd frame = proper_svd(mean);
  bool converged = false;
  Vec3 s = detail::solve_moment_equations_newton(frame.s, order, converged);
  if (!converged) s = detail::solve_moment_equations_bisection(frame.s, order, s);
  return MatrixFisher(frame.u.matrix() * s.asDiagonal() * frame.v.matrix().transpose(), order);
}

/// Projects F onto |s_i| <= cap by clipping its proper singular values.
inline Mat3 clip_concentration(const Mat3& f) {
  const ProperSvd svd = proper_svd(f);
  if (svd.s.cwiseAbs().maxCoeff() <= kConcentrationCap) return f;
  const Vec3 s = svd.s.cwiseMax(-kConcentrationCap).cwiseMin(kConcentrationCap);
  return svd.u.matrix() * s.asDiagonal() * svd.v.matrix().transpose();
}

}  // namespace kinefisher
