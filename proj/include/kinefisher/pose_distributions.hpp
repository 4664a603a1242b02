#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kinefisher/body_model.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/rng.hpp"
#include "kinefisher/sampler.hpp"
#include "kinefisher/so3.hpp"

namespace kinefisher {

/// Diagonal Gaussian over shape coefficients.
struct ShapeDist {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma2;

  static ShapeDist standard(int dims) {
    return {Eigen::VectorXd::Zero(dims), Eigen::VectorXd::Ones(dims)};
  }

  void validate() const {
    if (mu.size() != sigma2.size()) throw InvalidArgument("shape mean and variance sizes differ");
    if (!mu.allFinite() || !sigma2.allFinite()) throw InvalidArgument("non-finite shape parameters");
    if (sigma2.size() > 0 && !(sigma2.minCoeff() > 0.0))
      throw InvalidArgument("shape variances must be positive");
  }
};

inline double shape_log_pdf(const Eigen::VectorXd& beta, const ShapeDist& d) {
  d.validate();
  if (beta.size() != d.mu.size()) throw InvalidArgument("shape vector dimension mismatch");
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  double out = 0.0;
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    const double r = beta(i) - d.mu(i);
    out -= 0.5 * (log_2pi + std::log(d.sigma2(i)) + r * r / d.sigma2(i));
  }
  return out;
}

/// beta = mu + sigma * eps.
inline Eigen::VectorXd shape_from_noise(const ShapeDist& d, const Eigen::VectorXd& eps) {
  return d.mu + d.sigma2.cwiseSqrt().cwiseProduct(eps);
}

inline std::pair<Eigen::VectorXd, Eigen::VectorXd> shape_sample_reparam(const ShapeDist& d,
                                                                         RngStream& rng) {
  d.validate();
  Eigen::VectorXd eps(d.mu.size());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = rng.normal();
  return {shape_from_noise(d, eps), eps};
}

enum class DistributionMode { independent, hierarchical };

inline std::string to_string(DistributionMode m) {
  return m == DistributionMode::independent ? "independent" : "hierarchical";
}

inline DistributionMode parse_distribution_mode(const std::string& s) {
  if (s == "independent") return DistributionMode::independent;
  if (s == "hierarchical") return DistributionMode::hierarchical;
  throw InvalidArgument("unknown distribution mode '" + s + "'");
}

/// Summary of an ancestor's distribution: principal frame, singular values, mode.
struct ParentSummary {
  int joint = 0;
  Rotation u;
  Vec3 s = Vec3::Zero();
  std::optional<Rotation> mode;  ///< empty for a uniform ancestor
};

/// Non-root ancestors of `joint`, root-first.
inline std::vector<int> ancestor_path(const BodyModel& model, int joint) {
  std::vector<int> out;
  for (int j = model.parents[joint]; j > 0; j = model.parents[j]) out.insert(out.begin(), j);
  return out;
}

/**
 * Distribution over bodies: one matrix-Fisher per non-root joint (index i - 1
 * for joint i), a diagonal Gaussian over shape, and point estimates of the
 * global rotation and camera.
 */
struct BodyDistribution {
  std::vector<MatrixFisher> joints;
  ShapeDist shape;
  AxisAngle gamma;
  Camera camera;
  DistributionMode mode_flag = DistributionMode::independent;
  std::vector<std::vector<ParentSummary>> parent_context;  ///< per non-root joint

  [[nodiscard]] const MatrixFisher& joint(int i) const { return joints.at(i - 1); }
};

/// Fills parent_context from the current joint distributions.
inline void refresh_parent_context(const BodyModel& model, BodyDistribution& d) {
  d.parent_context.assign(d.joints.size(), {});
  if (d.mode_flag != DistributionMode::hierarchical) return;
  for (int i = 1; i < model.num_joints(); ++i) {
    for (int j : ancestor_path(model, i)) {
      const MatrixFisher& f = d.joint(j);
      ParentSummary ps{j, f.svd().u, f.singular_values(), std::nullopt};
      if (f.singular_values()(0) + f.singular_values()(1) > 0.0) ps.mode = mode(f);
      d.parent_context[i - 1].push_back(ps);
    }
  }
}

inline void check_distribution(const BodyModel& model, const BodyDistribution& d) {
  if (static_cast<int>(d.joints.size()) != model.num_joints() - 1)
    throw InvalidArgument("distribution has " + std::to_string(d.joints.size()) +
                          " joint entries, model needs " + std::to_string(model.num_joints() - 1));
  if (d.shape.mu.size() != model.num_betas()) throw InvalidArgument("shape dimension mismatch");
  d.shape.validate();
}

inline double body_log_pdf(std::span<const Rotation> rots, const Eigen::VectorXd& beta,
                           const BodyDistribution& d) {
  if (rots.size() != d.joints.size()) throw InvalidArgument("rotation count mismatch");
  double out = shape_log_pdf(beta, d.shape);
  for (std::size_t i = 0; i < rots.size(); ++i) out += log_pdf(rots[i], d.joints[i]);
  return out;
}

struct BodySample {
  std::vector<Rotation> rots;
  Eigen::VectorXd beta;
  std::vector<NoiseRecord> noise;
  Eigen::VectorXd shape_eps;
  Points3 vertices;
  Points3 joints3d;
};

namespace detail {

inline RngStream body_stream(const RngStream& rng, std::size_t n) { return rng.split("body", n); }

}  // namespace detail

/// One body per index n, each drawn from its own substream of `rng`.
inline std::vector<BodySample> sample_bodies(const BodyModel& model, const BodyDistribution& d,
                                             int k, const RngStream& rng,
                                             const SamplerOptions& opts = {}) {
  if (k < 1) throw InvalidArgument("sample count must be at least 1");
  check_distribution(model, d);
  std::vector<BodySample> out(k);
  for (int n = 0; n < k; ++n) {
    const RngStream base = detail::body_stream(rng, n);
    BodySample& b = out[n];
    for (int i = 1; i < model.num_joints(); ++i) {
      RngStream js = base.split("joint", i);
      auto [r, rec] = sample_matrix_fisher(d.joint(i), js, opts);
      b.rots.push_back(r);
      b.noise.push_back(rec);
    }
    RngStream ss = base.split("shape");
    std::tie(b.beta, b.shape_eps) = shape_sample_reparam(d.shape, ss);
    const BodyGeometry g = pose_body(model, b.rots, d.gamma, b.beta);
    b.vertices = g.vertices;
    b.joints3d = g.joints;
  }
  return out;
}

/// Rebuilds a sample from its noise records through the fixed-noise maps.
inline BodySample replay_body(const BodyModel& model, const BodyDistribution& d,
                              const BodySample& noise, const SamplerOptions& opts = {}) {
  BodySample b;
  b.noise = noise.noise;
  b.shape_eps = noise.shape_eps;
  for (std::size_t i = 0; i < d.joints.size(); ++i)
    b.rots.push_back(fixed_noise_resample(d.joints[i], noise.noise.at(i), opts));
  b.beta = shape_from_noise(d.shape, b.shape_eps);
  const BodyGeometry g = pose_body(model, b.rots, d.gamma, b.beta);
  b.vertices = g.vertices;
  b.joints3d = g.joints;
  return b;
}

inline BodyGeometry mode_body(const BodyModel& model, const BodyDistribution& d) {
  check_distribution(model, d);
  std::vector<Rotation> rots;
  for (const auto& j : d.joints) rots.push_back(mode(j));
  return pose_body(model, rots, d.gamma, d.shape.mu);
}

/// Mean distance of each vertex from its sample mean over k bodies.
inline Eigen::VectorXd per_vertex_uncertainty(const BodyModel& model, const BodyDistribution& d,
                                              int k, const RngStream& rng,
                                              const SamplerOptions& opts = {}) {
  if (k < 2) throw InvalidArgument("uncertainty needs at least 2 samples");
  const auto samples = sample_bodies(model, d, k, rng, opts);
  Points3 mean = Points3::Zero(model.num_vertices(), 3);
  for (const auto& s : samples) mean += s.vertices;
  mean /= static_cast<double>(k);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(model.num_vertices());
  for (const auto& s : samples) out += (s.vertices - mean).rowwise().norm();
  return out / static_cast<double>(k);
}

/// Joint with the largest skinning weight for each vertex (lowest index on ties).
inline std::vector<int> dominant_joint(const BodyModel& model) {
  std::vector<int> out(model.num_vertices());
  for (int v = 0; v < model.num_vertices(); ++v) {
    Eigen::Index j = 0;
    model.skin_weights.row(v).maxCoeff(&j);
    out[v] = static_cast<int>(j);
  }
  return out;
}

}  // namespace kinefisher
