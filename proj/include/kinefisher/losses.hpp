#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "kinefisher/body_model.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/pose_distributions.hpp"
#include "kinefisher/so3.hpp"

namespace kinefisher {

/// Named loss terms, their weights and the weighted total.
struct LossReport {
  double total = 0.0;
  std::map<std::string, double> terms;
  std::map<std::string, double> weights;
  double grad_norm = 0.0;

  void add(const std::string& name, double value, double weight = 1.0) {
    terms[name] += value;
    weights[name] = weight;
    total = 0.0;
    for (const auto& [k, v] : terms) total += weights[k] * v;
  }

  [[nodiscard]] double term(const std::string& name) const {
    const auto it = terms.find(name);
    return it == terms.end() ? 0.0 : it->second;
  }
};

inline const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"shape_nll", "pose_nll",    "global",
                                              "reproj_2d", "reproj_mode", "kl_reg"};
  return names;
}

struct ShapeNll {
  double value = 0.0;
  Eigen::VectorXd grad_mu;
  Eigen::VectorXd grad_sigma2;
};

/// Negative Gaussian log-likelihood of the label shape.
inline ShapeNll shape_nll(const Eigen::VectorXd& beta_gt, const ShapeDist& d) {
  ShapeNll out;
  out.value = -shape_log_pdf(beta_gt, d);
  const Eigen::ArrayXd r = (beta_gt - d.mu).array();
  const Eigen::ArrayXd v = d.sigma2.array();
  out.grad_mu = (-r / v).matrix();
  out.grad_sigma2 = (0.5 / v - 0.5 * r * r / (v * v)).matrix();
  return out;
}

struct PoseNll {
  double value = 0.0;
  Mat3 grad_f = Mat3::Zero();
};

/// log c(F) - tr(F^T R_gt); the gradient is E[R] - R_gt.
inline PoseNll pose_nll(const Rotation& r_gt, const MatrixFisher& d) {
  PoseNll out;
  out.value = d.log_c() - (d.f().transpose() * r_gt.matrix()).trace();
  out.grad_f = expected_rotation(d) - r_gt.matrix();
  return out;
}

struct GlobalRotLoss {
  double value = 0.0;
  Vec3 grad_gamma_hat = Vec3::Zero();
};

/// ||R(gamma_gt) - R(gamma_hat)||_F^2, with the gradient in gamma_hat.
inline GlobalRotLoss global_rot_loss(const AxisAngle& gamma_gt, const AxisAngle& gamma_hat) {
  const Mat3 a = axis_angle_to_matrix(gamma_gt).matrix();
  const Mat3 b = axis_angle_to_matrix(gamma_hat).matrix();
  GlobalRotLoss out;
  out.value = (a - b).squaredNorm();
  const Mat3 b_bar = 2.0 * (b - a);
  const auto jac = axis_angle_jacobian(gamma_hat);
  for (int c = 0; c < 3; ++c) out.grad_gamma_hat(c) = b_bar.cwiseProduct(jac[c]).sum();
  return out;
}

struct ReprojLoss {
  double value = 0.0;
  std::vector<Points2> grad;  ///< dL/d(sample2d) per sample
};

/**
 * Visibility-masked squared reprojection error summed over K samples and
 * divided by K * sum(vis). No visible joints gives zero loss and gradient.
 */
inline ReprojLoss reproj_2d_sample_loss(std::span<const Points2> samples2d, const Points2& j2d,
                                        std::span<const int> vis) {
  if (static_cast<Eigen::Index>(vis.size()) != j2d.rows())
    throw InvalidArgument("visibility mask length differs from target count");
  ReprojLoss out;
  double visible = 0.0;
  for (int w : vis) visible += w != 0 ? 1.0 : 0.0;
  for (const auto& s : samples2d) {
    if (s.rows() != j2d.rows()) throw InvalidArgument("sample and target joint counts differ");
    out.grad.push_back(Points2::Zero(s.rows(), 2));
  }
  if (visible == 0.0 || samples2d.empty()) return out;
  const double norm = 1.0 / (static_cast<double>(samples2d.size()) * visible);
  for (std::size_t k = 0; k < samples2d.size(); ++k) {
    for (Eigen::Index l = 0; l < j2d.rows(); ++l) {
      if (vis[l] == 0) continue;
      const Eigen::RowVector2d r = samples2d[k].row(l) - j2d.row(l);
      out.value += norm * r.squaredNorm();
      out.grad[k].row(l) = 2.0 * norm * r;
    }
  }
  return out;
}

struct ShapePriorKl {
  double value = 0.0;
  Eigen::VectorXd grad_mu;
  Eigen::VectorXd grad_sigma2;
};

/// KL(N(mu, diag sigma2) || N(0, std^2 I)).
inline ShapePriorKl shape_prior_kl(const ShapeDist& d, double prior_std) {
  d.validate();
  const double t2 = prior_std * prior_std;
  const Eigen::ArrayXd v = d.sigma2.array();
  const Eigen::ArrayXd m = d.mu.array();
  ShapePriorKl out;
  out.value = 0.5 * (v / t2 + m * m / t2 - 1.0 - (v / t2).log()).sum();
  out.grad_mu = (m / t2).matrix();
  out.grad_sigma2 = (0.5 / t2 - 0.5 / v).matrix();
  return out;
}

}  // namespace kinefisher
