#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "kinefisher/errors.hpp"

namespace kinefisher::quadrature {

/// Gauss-Legendre nodes and weights on [-1, 1].
struct GaussLegendre {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline GaussLegendre compute_gauss_legendre(int n) {
  if (n < 1) throw InvalidArgument("Gauss-Legendre order must be positive");
  // P_n(x) by recurrence, derivative from (x^2 - 1) P_n' = n (x P_n - P_{n-1}).
  const auto legendre = [n](double x, double& dp) {
    double p0 = 1.0;
    double p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = n * (x * p1 - p0) / (x * x - 1.0);
    return p1;
  };
  GaussLegendre gl;
  gl.nodes.resize(n);
  gl.weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 1.0;
    for (int it = 0; it < 100; ++it) {
      const double dx = legendre(x, dp) / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    legendre(x, dp);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    gl.nodes[i] = -x;
    gl.weights[i] = w;
    gl.nodes[n - 1 - i] = x;
    gl.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) gl.nodes[n / 2] = 0.0;
  return gl;
}

/// Cached rule; safe to call from several threads.
inline const GaussLegendre& gauss_legendre(int n) {
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<GaussLegendre>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<GaussLegendre>(compute_gauss_legendre(n));
  return *slot;
}

/// One-dimensional rule on [0, length].
struct Rule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/**
 * Composite Gauss-Legendre rule on [0, length] with panels that double in
 * width starting from `scale`, for integrands with a peak of that width at 0.
 * Roughly `order` nodes in total, at least 6 per panel.
 */
inline Rule graded_rule(double length, double scale, int order) {
  std::vector<double> breaks{0.0};
  if (scale > 0.0 && scale < 0.25 * length) {
    double b = scale;
    while (b < 0.5 * length) {
      breaks.push_back(b);
      b *= 2.0;
    }
  }
  breaks.push_back(length);
  const int panels = static_cast<int>(breaks.size()) - 1;
  const int per_panel = std::max(6, (order + panels - 1) / panels);
  const auto& gl = gauss_legendre(per_panel);
  Rule rule;
  rule.nodes.reserve(panels * per_panel);
  rule.weights.reserve(panels * per_panel);
  for (int p = 0; p < panels; ++p) {
    const double half = 0.5 * (breaks[p + 1] - breaks[p]);
    const double mid = 0.5 * (breaks[p + 1] + breaks[p]);
    for (int k = 0; k < per_panel; ++k) {
      rule.nodes.push_back(mid + half * gl.nodes[k]);
      rule.weights.push_back(half * gl.weights[k]);
    }
  }
  return rule;
}

/// Normalizer and even moments of the Bingham density exp(-x^T diag(a) x)
/// on S^3, relative to the uniform probability measure.
struct BinghamMoments {
  double log_normalizer = 0.0;
  Eigen::Vector4d second = Eigen::Vector4d::Constant(0.25);  ///< E[x_i^2]
  Eigen::Matrix4d fourth = Eigen::Matrix4d::Zero();          ///< E[x_i^2 x_j^2]
};

/**
 * Tensor-product quadrature in hyperspherical angles
 *   x = (cos t1, sin t1 cos t2, sin t1 sin t2 cos p, sin t1 sin t2 sin p).
 * The integrand is even in every coordinate, so each angle runs over
 * [0, pi/2]. Requires 0 = a0 <= a1 <= a2 <= a3, which puts the mass peak at
 * angle 0 in every coordinate; each angle gets a graded rule sized to the
 * sharpest curvature it can see.
 */
inline BinghamMoments bingham_moments(const Eigen::Vector4d& a_in, int order) {
  Eigen::Vector4d a = a_in.cwiseMax(0.0);
  if (!a.allFinite()) throw InvalidArgument("bingham_moments: non-finite parameters");
  const double half_pi = 0.5 * std::numbers::pi;
  const auto scale_for = [](double curvature) {
    return curvature > 1.0 ? 1.0 / std::sqrt(curvature) : 1e300;
  };
  const Rule r1 = graded_rule(half_pi, scale_for(a(3)), order);
  const Rule r2 = graded_rule(half_pi, scale_for(a(3) - a(1)), order);
  const Rule r3 = graded_rule(half_pi, scale_for(a(3) - a(2)), order);

  const std::size_t n1 = r1.nodes.size();
  std::vector<double> sin2_1(n1), cos2_1(n1), w1(n1);
  for (std::size_t r = 0; r < n1; ++r) {
    const double s = std::sin(r1.nodes[r]);
    sin2_1[r] = s * s;
    cos2_1[r] = 1.0 - s * s;
    w1[r] = r1.weights[r] * s * s;
  }

  double z = 0.0;
  Eigen::Vector4d m2 = Eigen::Vector4d::Zero();
  Eigen::Matrix4d m4 = Eigen::Matrix4d::Zero();
  for (std::size_t p = 0; p < r3.nodes.size(); ++p) {
    const double sp = std::sin(r3.nodes[p]);
    const double sin2p = sp * sp;
    const double cos2p = 1.0 - sin2p;
    const double g = a(2) * cos2p + a(3) * sin2p;
    for (std::size_t q = 0; q < r2.nodes.size(); ++q) {
      const double sq = std::sin(r2.nodes[q]);
      const double sin2q = sq * sq;
      const double cos2q = 1.0 - sin2q;
      const double h = a(1) * cos2q + g * sin2q;
      double t0 = 0.0, tc = 0.0, ts = 0.0, tcc = 0.0, tcs = 0.0, tss = 0.0;
      for (std::size_t r = 0; r < n1; ++r) {
        const double e = w1[r] * std::exp(-sin2_1[r] * h);
        const double c = cos2_1[r];
        const double s = sin2_1[r];
        t0 += e;
        tc += e * c;
        ts += e * s;
        tcc += e * c * c;
        tcs += e * c * s;
        tss += e * s * s;
      }
      const double w = r3.weights[p] * r2.weights[q] * sq;
      const double f1 = cos2q;
      const double f2 = sin2q * cos2p;
      const double f3 = sin2q * sin2p;
      z += w * t0;
      m2(0) += w * tc;
      m2(1) += w * ts * f1;
      m2(2) += w * ts * f2;
      m2(3) += w * ts * f3;
      m4(0, 0) += w * tcc;
      m4(0, 1) += w * tcs * f1;
      m4(0, 2) += w * tcs * f2;
      m4(0, 3) += w * tcs * f3;
      m4(1, 1) += w * tss * f1 * f1;
      m4(1, 2) += w * tss * f1 * f2;
      m4(1, 3) += w * tss * f1 * f3;
      m4(2, 2) += w * tss * f2 * f2;
      m4(2, 3) += w * tss * f2 * f3;
      m4(3, 3) += w * tss * f3 * f3;
    }
  }
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < i; ++j) m4(i, j) = m4(j, i);

  BinghamMoments out;
  out.log_normalizer = std::log(z * 8.0 / (std::numbers::pi * std::numbers::pi));
  out.second = m2 / z;
  out.fourth = m4 / z;
  return out;
}

}  // namespace kinefisher::quadrature
