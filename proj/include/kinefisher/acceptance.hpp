#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "kinefisher/body_model.hpp"
#include "kinefisher/fitting.hpp"
#include "kinefisher/losses.hpp"
#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/pose_distributions.hpp"
#include "kinefisher/rng.hpp"
#include "kinefisher/sampler.hpp"
#include "kinefisher/so3.hpp"

/**
 * The acceptance suite. Each criterion is a deterministic function of the
 * seed; the report text carries no timings, so two runs with the same seed
 * produce identical bytes. Timings are returned separately.
 */
namespace kinefisher::acceptance {

struct CriterionResult {
  int id = 0;
  std::string title;
  bool pass = false;
  std::vector<std::string> details;
  double seconds = 0.0;
  double budget_seconds = 0.0;
};

using Log = std::function<void(const std::string&)>;

namespace detail {

inline std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

inline Rotation random_rotation(RngStream& rng) { return haar_random_rotation(rng); }

/// Proper singular values with s1 <= top, random sign on s3.
inline Vec3 random_singular_values(RngStream& rng, double top) {
  Vec3 s(top * rng.uniform(), top * rng.uniform(), top * rng.uniform());
  std::sort(s.data(), s.data() + 3, std::greater<>());
  if (rng.uniform() < 0.5) s(2) = -s(2);
  return s;
}

inline Mat3 random_f(RngStream& rng, double top) {
  const Vec3 s = random_singular_values(rng, top);
  return random_rotation(rng).matrix() * s.asDiagonal() * random_rotation(rng).matrix().transpose();
}

}  // namespace detail

using detail::fmt;

// 1 -------------------------------------------------------------------------

inline CriterionResult normalizing_constant_oracle(std::uint64_t seed) {
  CriterionResult r{1, "normalizing-constant oracle vs Haar Monte Carlo", true, {}, 0.0, 120.0};
  const std::vector<Vec3> cases{{0, 0, 0}, {1, 2, 3}, {5, 5, 5}, {2, 2, -1}, {10, 1, 0.5}};
  const int n = 1000000;
  RngStream base = RngStream(seed).split("criterion1");
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const Vec3& s = cases[c];
    const double quad = log_norm_const(s);
    if (s.isZero()) {
      const bool ok = quad == 0.0;
      r.pass = r.pass && ok;
      r.details.push_back(fmt("s=(0,0,0) log c=%.17g exact zero: %s", quad, ok ? "yes" : "no"));
      continue;
    }
    RngStream rng = base.split("case", c);
    const double shift = s.cwiseAbs().sum();
    double sum = 0.0, sum2 = 0.0;
    for (int k = 0; k < n; ++k) {
      const Mat3 m = haar_random_rotation(rng).matrix();
      const double w = std::exp(s(0) * m(0, 0) + s(1) * m(1, 1) + s(2) * m(2, 2) - shift);
      sum += w;
      sum2 += w * w;
    }
    const double mean = sum / n;
    const double var = std::max(sum2 / n - mean * mean, 0.0);
    const double se_log = std::sqrt(var / n) / mean;
    const double mc = shift + std::log(mean);
    const double z = std::abs(quad - mc) / se_log;
    const bool ok = z <= 3.0;
    r.pass = r.pass && ok;
    r.details.push_back(fmt("s=(%g,%g,%g) quadrature=%.6f monte_carlo=%.6f se=%.2e z=%.2f %s", s(0),
                            s(1), s(2), quad, mc, se_log, z, ok ? "ok" : "FAIL"));
  }
  return r;
}

// 2 -------------------------------------------------------------------------

inline CriterionResult gradient_identity(std::uint64_t seed) {
  CriterionResult r{2, "gradient identity dlog c/dF = E[R] by central differences", true, {}, 0.0, 60.0};
  RngStream rng = RngStream(seed).split("criterion2");
  const double h = 1e-5;
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Mat3 f = detail::random_f(rng, 10.0);
    const Mat3 er = expected_rotation(MatrixFisher(f));
    Mat3 fd;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        Mat3 fp = f, fm = f;
        fp(a, b) += h;
        fm(a, b) -= h;
        fd(a, b) = (MatrixFisher(fp).log_c() - MatrixFisher(fm).log_c()) / (2.0 * h);
      }
    }
    worst = std::max(worst, (fd - er).cwiseAbs().maxCoeff());
  }
  r.pass = worst <= 1e-3;
  r.details.push_back(fmt("20 random F with s1 <= 10: max entrywise |fd - E[R]| = %.3e (limit 1e-3)", worst));
  return r;
}

// 3 -------------------------------------------------------------------------

inline CriterionResult sampler_validity(std::uint64_t seed) {
  CriterionResult r{3, "sampler validity", true, {}, 0.0, 180.0};
  const RngStream base = RngStream(seed).split("criterion3");

  // Envelope: half uniform probes on S^3, half drawn from the proposal itself.
  RngStream conc = base.split("concentrations");
  double worst_ratio = 0.0;
  for (int c = 0; c < 100; ++c) {
    const double top = std::exp(std::log(1e-3) + conc.uniform() * (std::log(kConcentrationCap) - std::log(1e-3)));
    Vec3 s(top, top * conc.uniform(), 0.0);
    s(2) = s(1) * conc.uniform() * (conc.uniform() < 0.5 ? -1.0 : 1.0);
    const auto p = BinghamParams::from_singular_values(s);
    RngStream probes = base.split("probes", c);
    for (int k = 0; k < 100000; ++k) {
      Vec4 e(probes.normal(), probes.normal(), probes.normal(), probes.normal());
      const Vec4 x = k % 2 == 0 ? Vec4(e / e.norm()) : kinefisher::detail::acg_direction(e, p.omega);
      worst_ratio = std::max(worst_ratio, p.acceptance_ratio(x));
    }
  }
  const bool env_ok = worst_ratio <= 1.0 + 1e-9;
  r.details.push_back(fmt("envelope: max ratio %.12f over 1e5 probes x 100 concentrations %s",
                          worst_ratio, env_ok ? "ok" : "FAIL"));

  // Mean rotation.
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(2.0, 1.0, 0.5));
  RngStream draws = base.split("mean");
  Mat3 mean = Mat3::Zero();
  const int n = 50000;
  for (int k = 0; k < n; ++k) mean += sample_matrix_fisher(d, draws).first.matrix();
  mean /= n;
  const double mean_err = (mean - expected_rotation(d)).cwiseAbs().maxCoeff();
  const bool mean_ok = mean_err <= 0.01;
  r.details.push_back(fmt("F=diag(2,1,0.5): max entrywise |empirical - quadrature E[R]| = %.4f over 5e4 draws %s",
                          mean_err, mean_ok ? "ok" : "FAIL"));

  // Uniform: trace t = 1 + 2 cos(theta) with P(T <= t) = 1 - (theta - sin theta) / pi.
  const MatrixFisher uniform;
  RngStream udraws = base.split("uniform");
  std::vector<double> tr(n);
  for (int k = 0; k < n; ++k) tr[k] = sample_matrix_fisher(uniform, udraws).first.matrix().trace();
  std::sort(tr.begin(), tr.end());
  double ks = 0.0;
  for (int k = 0; k < n; ++k) {
    const double theta = std::acos(std::clamp((tr[k] - 1.0) / 2.0, -1.0, 1.0));
    const double cdf = 1.0 - (theta - std::sin(theta)) / std::numbers::pi;
    ks = std::max({ks, std::abs(cdf - static_cast<double>(k) / n), std::abs(cdf - static_cast<double>(k + 1) / n)});
  }
  const bool ks_ok = ks <= 0.02;
  r.details.push_back(fmt("F=0: Kolmogorov distance of trace distribution %.4f (limit 0.02) %s", ks,
                          ks_ok ? "ok" : "FAIL"));
  r.pass = env_ok && mean_ok && ks_ok;
  return r;
}

// 4 -------------------------------------------------------------------------

inline CriterionResult mle_round_trip(std::uint64_t seed) {
  CriterionResult r{4, "maximum-likelihood round trip", true, {}, 0.0, 30.0};
  const Vec3 s_true(4.0, 2.0, 1.0);
  const MatrixFisher d = MatrixFisher::from_singular_values(s_true);
  RngStream rng = RngStream(seed).split("criterion4");
  std::vector<Rotation> samples;
  for (int k = 0; k < 10000; ++k) samples.push_back(sample_matrix_fisher(d, rng).first);
  const MatrixFisher fit = mle_fit(samples);
  const double angle = geodesic_distance(mode(fit), mode(d)) * 180.0 / std::numbers::pi;
  const Vec3 rel = (fit.singular_values() - s_true).cwiseQuotient(s_true).cwiseAbs();
  r.pass = angle <= 2.0 && rel.maxCoeff() <= 0.10;
  r.details.push_back(fmt("mode error %.3f deg (limit 2), singular values (%.4f, %.4f, %.4f), max relative error %.4f (limit 0.1)",
                          angle, fit.singular_values()(0), fit.singular_values()(1),
                          fit.singular_values()(2), rel.maxCoeff()));
  return r;
}

// 5 -------------------------------------------------------------------------

namespace detail {

struct ReprojSetup {
  BodyDistribution dist;
  Points2 target;
  std::vector<int> vis;
  std::vector<BodySample> noise;
};

/// Loss of the replayed samples; fills dL/dF_i, dL/dmu and dL/dsigma2 when asked.
inline double reproj_loss(const BodyModel& model, const JointMap& map, const ReprojSetup& s,
                          std::vector<Mat3>* g_f = nullptr, Eigen::VectorXd* g_mu = nullptr,
                          Eigen::VectorXd* g_sigma2 = nullptr) {
  std::vector<Points2> proj;
  std::vector<JointMap::Tape> tapes(s.noise.size());
  std::vector<std::vector<Mat3>> rots(s.noise.size());
  for (std::size_t k = 0; k < s.noise.size(); ++k) {
    const BodySample b = replay_body(model, s.dist, s.noise[k]);
    for (const auto& r : b.rots) rots[k].push_back(r.matrix());
    const Points3 j3 = map.forward(rots[k], s.dist.gamma, b.beta, &tapes[k]);
    proj.push_back(project_weak_perspective(j3, s.dist.camera));
  }
  const ReprojLoss loss = reproj_2d_sample_loss(proj, s.target, s.vis);
  if (g_f) {
    const int nj = model.num_joints();
    g_f->assign(nj - 1, Mat3::Zero());
    *g_mu = Eigen::VectorXd::Zero(model.num_betas());
    *g_sigma2 = Eigen::VectorXd::Zero(model.num_betas());
    const Eigen::ArrayXd sigma = s.dist.shape.sigma2.array().sqrt();
    for (std::size_t k = 0; k < s.noise.size(); ++k) {
      Points3 jbar = Points3::Zero(nj, 3);
      jbar.leftCols<2>() = s.dist.camera.s * loss.grad[k];
      const auto g = map.backward(tapes[k], jbar);
      for (int i = 1; i < nj; ++i)
        (*g_f)[i - 1] += fixed_noise_vjp(s.dist.joint(i).svd(), s.noise[k].noise[i - 1], g.rots[i - 1]);
      *g_mu += g.beta;
      *g_sigma2 += (g.beta.array() * s.noise[k].shape_eps.array() / (2.0 * sigma)).matrix();
    }
  }
  return loss.value;
}

}  // namespace detail

inline CriterionResult loss_gradients(std::uint64_t seed, const BodyModel& model) {
  CriterionResult r{5, "loss-gradient suite", true, {}, 0.0, 120.0};
  const RngStream base = RngStream(seed).split("criterion5");
  const int configs = 20;

  // shape_nll: central differences in mu and sigma2.
  double shape_worst = 0.0;
  {
    RngStream rng = base.split("shape");
    const int dims = model.num_betas();
    for (int t = 0; t < configs; ++t) {
      ShapeDist d{Eigen::VectorXd(dims), Eigen::VectorXd(dims)};
      Eigen::VectorXd beta(dims);
      for (int b = 0; b < dims; ++b) {
        d.mu(b) = rng.normal();
        d.sigma2(b) = 0.2 + 2.0 * rng.uniform();
        beta(b) = 1.5 * rng.normal();
      }
      const ShapeNll a = shape_nll(beta, d);
      Eigen::VectorXd analytic(2 * dims), fd(2 * dims);
      analytic << a.grad_mu, a.grad_sigma2;
      for (int k = 0; k < 2 * dims; ++k) {
        ShapeDist p = d, m = d;
        double& xp = k < dims ? p.mu(k) : p.sigma2(k - dims);
        double& xm = k < dims ? m.mu(k) : m.sigma2(k - dims);
        const double h = 1e-5 * std::max(1.0, std::abs(xp));
        xp += h;
        xm -= h;
        fd(k) = (shape_nll(beta, p).value - shape_nll(beta, m).value) / (2.0 * h);
      }
      shape_worst = std::max(shape_worst, (analytic - fd).norm() / fd.norm());
    }
  }
  const bool shape_ok = shape_worst <= 1e-6;
  r.details.push_back(fmt("shape_nll: max relative gradient error %.3e over %d configurations (limit 1e-6) %s",
                          shape_worst, configs, shape_ok ? "ok" : "FAIL"));

  // pose_nll: central differences in F.
  double pose_worst = 0.0;
  {
    RngStream rng = base.split("pose");
    const double h = 1e-5;
    for (int t = 0; t < configs; ++t) {
      const Mat3 f = detail::random_f(rng, 10.0);
      const Rotation gt = haar_random_rotation(rng);
      const PoseNll a = pose_nll(gt, MatrixFisher(f));
      Mat3 fd;
      for (int i = 0; i < 9; ++i) {
        Mat3 fp = f, fm = f;
        fp(i / 3, i % 3) += h;
        fm(i / 3, i % 3) -= h;
        fd(i / 3, i % 3) = (pose_nll(gt, MatrixFisher(fp)).value - pose_nll(gt, MatrixFisher(fm)).value) / (2.0 * h);
      }
      pose_worst = std::max(pose_worst, (a.grad_f - fd).cwiseAbs().maxCoeff());
    }
  }
  const bool pose_ok = pose_worst <= 1e-3;
  r.details.push_back(fmt("pose_nll: max entrywise gradient error %.3e over %d configurations (limit 1e-3) %s",
                          pose_worst, configs, pose_ok ? "ok" : "FAIL"));

  // Reprojection: pathwise gradient against fixed-noise central differences.
  double reproj_worst = 0.0;
  {
    const JointMap map(model);
    const int order = 16;  // moments are not used by the sample path
    RngStream rng = base.split("reproj");
    for (int t = 0; t < configs; ++t) {
      detail::ReprojSetup s;
      for (int i = 1; i < model.num_joints(); ++i)
        s.dist.joints.emplace_back(detail::random_f(rng, 8.0), order);
      const int nb = model.num_betas();
      s.dist.shape = {Eigen::VectorXd(nb), Eigen::VectorXd(nb)};
      for (int b = 0; b < nb; ++b) {
        s.dist.shape.mu(b) = rng.normal();
        s.dist.shape.sigma2(b) = 0.1 + rng.uniform();
      }
      s.dist.gamma.v = Vec3(0.3 * rng.normal(), 0.3 * rng.normal(), 0.3 * rng.normal());
      s.dist.camera = {100.0 + 50.0 * rng.uniform(), 128.0, 128.0};
      s.target = Points2(model.num_joints(), 2);
      s.vis.assign(model.num_joints(), 1);
      for (int l = 0; l < model.num_joints(); ++l) {
        s.target(l, 0) = 256.0 * rng.uniform();
        s.target(l, 1) = 256.0 * rng.uniform();
        if (rng.uniform() < 0.2) s.vis[l] = 0;
      }
      s.noise = sample_bodies(model, s.dist, 4, rng.split("bodies"));

      std::vector<Mat3> g_f;
      Eigen::VectorXd g_mu, g_sigma2;
      detail::reproj_loss(model, map, s, &g_f, &g_mu, &g_sigma2);
      std::vector<double> analytic, fd;
      const auto central = [&](auto&& perturb, double h) {
        detail::ReprojSetup p = s, m = s;
        perturb(p, h);
        perturb(m, -h);
        return (detail::reproj_loss(model, map, p) - detail::reproj_loss(model, map, m)) / (2.0 * h);
      };
      for (int i = 1; i < model.num_joints(); ++i) {
        for (int e = 0; e < 9; ++e) {
          analytic.push_back(g_f[i - 1](e / 3, e % 3));
          fd.push_back(central(
              [&](detail::ReprojSetup& q, double h) {
                Mat3 f = q.dist.joints[i - 1].f();
                f(e / 3, e % 3) += h;
                q.dist.joints[i - 1] = MatrixFisher(f, order);
              },
              1e-6));
        }
      }
      for (int b = 0; b < nb; ++b) {
        analytic.push_back(g_mu(b));
        fd.push_back(central([&](detail::ReprojSetup& q, double h) { q.dist.shape.mu(b) += h; }, 1e-6));
        analytic.push_back(g_sigma2(b));
        fd.push_back(central([&](detail::ReprojSetup& q, double h) { q.dist.shape.sigma2(b) += h; }, 1e-7));
      }
      const Eigen::Map<Eigen::VectorXd> va(analytic.data(), static_cast<Eigen::Index>(analytic.size()));
      const Eigen::Map<Eigen::VectorXd> vf(fd.data(), static_cast<Eigen::Index>(fd.size()));
      reproj_worst = std::max(reproj_worst, (va - vf).norm() / vf.norm());
    }
  }
  const bool reproj_ok = reproj_worst <= 1e-2;
  r.details.push_back(fmt("reproj_2d: max relative pathwise gradient error %.3e over %d configurations (limit 1e-2) %s",
                          reproj_worst, configs, reproj_ok ? "ok" : "FAIL"));
  r.pass = shape_ok && pose_ok && reproj_ok;
  return r;
}

// 6 -------------------------------------------------------------------------

namespace detail {

/// Forward kinematics with 4x4 homogeneous transforms, written independently
/// of pose_body: G_i = G_parent [R_i, J_i - J_parent; 0, 1].
inline BodyGeometry homogeneous_pose(const BodyModel& model, std::span<const Rotation> rots,
                                     const AxisAngle& gamma, const Eigen::VectorXd& beta) {
  const int nv = model.num_vertices();
  const int nj = model.num_joints();
  Eigen::MatrixXd rest(nv, 3);
  for (int v = 0; v < nv; ++v)
    for (int c = 0; c < 3; ++c)
      rest(v, c) = model.template_vertices(v, c) + model.shape_basis.row(3 * v + c).dot(beta);
  const Eigen::MatrixXd joints = model.joint_regressor * rest;
  std::vector<Eigen::Matrix4d> g(nj);
  for (int i = 0; i < nj; ++i) {
    Eigen::Matrix4d local = Eigen::Matrix4d::Identity();
    if (i == 0) {
      const double theta = gamma.v.norm();
      Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
      if (theta > 0.0) rot = Eigen::AngleAxisd(theta, gamma.v / theta).toRotationMatrix();
      local.topLeftCorner<3, 3>() = rot;
      local.topRightCorner<3, 1>() = joints.row(0).transpose();
      g[0] = local;
    } else {
      const int p = model.parents[i];
      local.topLeftCorner<3, 3>() = rots[i - 1].matrix();
      local.topRightCorner<3, 1>() = (joints.row(i) - joints.row(p)).transpose();
      g[i] = g[p] * local;
    }
  }
  BodyGeometry out;
  out.vertices = Points3::Zero(nv, 3);
  for (int v = 0; v < nv; ++v) {
    Eigen::Vector4d acc = Eigen::Vector4d::Zero();
    for (int j = 0; j < nj; ++j) {
      const double w = model.skin_weights(v, j);
      if (w == 0.0) continue;
      Eigen::Vector4d local;
      local << (rest.row(v) - joints.row(j)).transpose(), 1.0;
      acc += w * (g[j] * local);
    }
    out.vertices.row(v) = acc.head<3>().transpose();
  }
  out.joints = model.joint_regressor * out.vertices;
  return out;
}

inline double max_diff(const Points3& a, const Points3& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace detail

inline CriterionResult kinematics_oracle(std::uint64_t seed, const BodyModel& model) {
  CriterionResult r{6, "kinematics oracle", true, {}, 0.0, 10.0};
  RngStream rng = RngStream(seed).split("criterion6");
  double fk = 0.0, rigid = 0.0, rest_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::vector<Rotation> rots;
    for (int i = 1; i < model.num_joints(); ++i) rots.push_back(haar_random_rotation(rng));
    Eigen::VectorXd beta(model.num_betas());
    for (int b = 0; b < model.num_betas(); ++b) beta(b) = 1.5 * rng.normal();
    const AxisAngle gamma{Vec3(rng.normal(), rng.normal(), rng.normal())};

    const BodyGeometry lib = pose_body(model, rots, gamma, beta);
    const BodyGeometry ref = detail::homogeneous_pose(model, rots, gamma, beta);
    fk = std::max({fk, detail::max_diff(lib.vertices, ref.vertices), detail::max_diff(lib.joints, ref.joints)});

    // Rotating the whole body about the root equals posing with gamma.
    const BodyGeometry plain = pose_body(model, rots, AxisAngle{}, beta);
    const BodyGeometry rest = shaped_rest(model, beta);
    const Eigen::RowVector3d root = rest.joints.row(0);
    const Mat3 rg = axis_angle_to_matrix(gamma).matrix();
    const Points3 turned = ((plain.vertices.rowwise() - root) * rg.transpose()).rowwise() + root;
    rigid = std::max(rigid, detail::max_diff(turned, lib.vertices));

    const std::vector<Rotation> ident(model.num_joints() - 1);
    const BodyGeometry at_rest = pose_body(model, ident, AxisAngle{}, beta);
    rest_err = std::max({rest_err, detail::max_diff(at_rest.vertices, rest.vertices),
                         detail::max_diff(at_rest.joints, rest.joints)});
  }
  r.pass = fk <= 1e-9 && rigid <= 1e-9 && rest_err <= 1e-9;
  r.details.push_back(fmt("100 random poses: homogeneous FK max diff %.2e, rigid global rotation %.2e, rest pose %.2e (limit 1e-9)",
                          fk, rigid, rest_err));
  return r;
}

// 7 and 8 -------------------------------------------------------------------

struct SceneEval {
  double mode = 0.0;
  double sample = 0.0;
};

/// Visible 2D joint error of the mode body and the mean over `k` samples.
inline SceneEval evaluate_fit(const BodyModel& model, const BodyDistribution& d, const Scene& scene,
                              int k, const RngStream& rng) {
  SceneEval e;
  e.mode = visible_2d_error(mode_body(model, d).joints, d.camera, scene);
  for (const auto& s : sample_bodies(model, d, k, rng))
    e.sample += visible_2d_error(s.joints3d, d.camera, scene) / k;
  return e;
}

inline constexpr int kTrendScenes = 20;
inline constexpr int kEvalSamples = 100;

inline CriterionResult occlusion_trend(std::uint64_t seed, const BodyModel& model, const Log& log = {}) {
  CriterionResult r{7, "occlusion-uncertainty trend (hierarchical fits, left elbow and wrist masked)", true, {}, 0.0, 600.0};
  const int le = model.joint_index("l_elbow"), lw = model.joint_index("l_wrist");
  const int re = model.joint_index("r_elbow"), rw = model.joint_index("r_wrist");
  const std::vector<int> dom = dominant_joint(model);
  const RngStream base = RngStream(seed).split("criterion7");
  int ok_a = 0, ok_b = 0;
  for (int k = 0; k < kTrendScenes; ++k) {
    const RngStream sk = base.split("scene", k);
    Scene scene = generate_scene(model, SceneConfig{}, sk);
    scene.vis[le] = scene.vis[lw] = 0;
    scene.vis[re] = scene.vis[rw] = 1;
    FitConfig cfg;
    cfg.mode = DistributionMode::hierarchical;
    RngStream fit_seed = sk.split("fit");
    cfg.seed = fit_seed.next_u64();
    try {
      const FitResult fit = fit_to_observation(model, scene, cfg);
      const auto kbar = [&](int j) { return concentrations(fit.dist.joint(j)).k.mean(); };
      const double k_masked = 0.5 * (kbar(le) + kbar(lw));
      const double k_visible = 0.5 * (kbar(re) + kbar(rw));
      const Eigen::VectorXd unc = per_vertex_uncertainty(model, fit.dist, kEvalSamples, sk.split("uncertainty"));
      double um = 0.0, uv = 0.0;
      int nm = 0, nv = 0;
      for (int v = 0; v < model.num_vertices(); ++v) {
        if (dom[v] == le || dom[v] == lw) {
          um += unc(v);
          ++nm;
        } else if (dom[v] == re || dom[v] == rw) {
          uv += unc(v);
          ++nv;
        }
      }
      um /= nm;
      uv /= nv;
      const bool a = k_masked <= 0.5 * k_visible;
      const bool b = um >= 2.0 * uv;
      ok_a += a;
      ok_b += b;
      r.details.push_back(fmt("scene %2d: concentration masked %.3f visible %.3f %s | uncertainty masked %.4f visible %.4f %s",
                              k, k_masked, k_visible, a ? "ok" : "FAIL", um, uv, b ? "ok" : "FAIL"));
    } catch (const Error& e) {
      r.details.push_back(fmt("scene %2d: fit failed: %s", k, e.what()));
    }
    if (log) log(r.details.back());
  }
  r.pass = ok_a == kTrendScenes && ok_b == kTrendScenes;
  r.details.push_back(fmt("(a) masked concentration <= 1/2 visible on %d/%d scenes; (b) masked uncertainty >= 2x visible on %d/%d scenes",
                          ok_a, kTrendScenes, ok_b, kTrendScenes));
  return r;
}

inline CriterionResult sample_loss_trend(std::uint64_t seed, const BodyModel& model, const Log& log = {}) {
  CriterionResult r{8, "sample-loss trend", true, {}, 0.0, 900.0};
  const RngStream base = RngStream(seed).split("criterion8");
  int gap_ok = 0, hier_ok = 0;
  for (int k = 0; k < kTrendScenes; ++k) {
    const RngStream sk = base.split("scene", k);
    const Scene scene = generate_scene(model, SceneConfig{}, sk);
    FitConfig ind;
    ind.mode = DistributionMode::independent;
    RngStream fit_seed = sk.split("fit");
    ind.seed = fit_seed.next_u64();
    FitConfig hier = ind;
    hier.mode = DistributionMode::hierarchical;
    FitConfig no_samples = ind;
    no_samples.sample_weight = 0.0;
    try {
      const RngStream ev = sk.split("evaluate");
      const SceneEval ei = evaluate_fit(model, fit_to_observation(model, scene, ind).dist, scene, kEvalSamples, ev);
      const SceneEval eh = evaluate_fit(model, fit_to_observation(model, scene, hier).dist, scene, kEvalSamples, ev);
      const SceneEval en = evaluate_fit(model, fit_to_observation(model, scene, no_samples).dist, scene, kEvalSamples, ev);
      const bool gap = ei.sample - ei.mode < en.sample - en.mode;
      const bool h = eh.sample <= ei.sample;
      gap_ok += gap;
      hier_ok += h;
      r.details.push_back(fmt("scene %2d: mode/sample px independent %.2f/%.2f, without sample loss %.2f/%.2f, hierarchical %.2f/%.2f | gap %s, hierarchical %s",
                              k, ei.mode, ei.sample, en.mode, en.sample, eh.mode, eh.sample,
                              gap ? "ok" : "FAIL", h ? "ok" : "FAIL"));
    } catch (const Error& e) {
      r.details.push_back(fmt("scene %2d: fit failed: %s", k, e.what()));
    }
    if (log) log(r.details.back());
  }
  r.pass = gap_ok >= 15 && hier_ok >= 15;
  r.details.push_back(fmt("sample loss narrows the sample-mode gap on %d/%d scenes (need 15); hierarchical sample error <= independent on %d/%d scenes (need 15)",
                          gap_ok, kTrendScenes, hier_ok, kTrendScenes));
  return r;
}

// Suite ---------------------------------------------------------------------

inline const std::vector<int>& all_criteria() {
  static const std::vector<int> ids{1, 2, 3, 4, 5, 6, 7, 8};
  return ids;
}

inline std::vector<CriterionResult> run(std::uint64_t seed, const std::vector<int>& ids, const Log& log = {}) {
  const BodyModel model = make_toy_model();
  std::vector<CriterionResult> out;
  for (int id : ids) {
    if (log) log(fmt("criterion %d ...", id));
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult r;
    switch (id) {
      case 1: r = normalizing_constant_oracle(seed); break;
      case 2: r = gradient_identity(seed); break;
      case 3: r = sampler_validity(seed); break;
      case 4: r = mle_round_trip(seed); break;
      case 5: r = loss_gradients(seed, model); break;
      case 6: r = kinematics_oracle(seed, model); break;
      case 7: r = occlusion_trend(seed, model, log); break;
      case 8: r = sample_loss_trend(seed, model, log); break;
      default: throw InvalidArgument("unknown criterion " + std::to_string(id));
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) log(fmt("criterion %d %s (%.1f s)", id, r.pass ? "PASS" : "FAIL", r.seconds));
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string status_line(const CriterionResult& r) {
  return fmt("[%s] criterion %d: %s", r.pass ? "PASS" : "FAIL", r.id, r.title.c_str());
}

/// Deterministic report: no timings, no paths.
inline std::string report_text(std::uint64_t seed, const std::vector<CriterionResult>& results) {
  std::string out = "kinefisher acceptance report\n";
  out += "seed " + std::to_string(seed) + "\n";
  out += "quadrature order " + std::to_string(default_quadrature_order()) + "\n\n";
  int passed = 0;
  for (const auto& r : results) {
    out += status_line(r) + "\n";
    for (const auto& d : r.details) out += "    " + d + "\n";
    passed += r.pass;
  }
  out += "\n" + std::to_string(passed) + "/" + std::to_string(results.size()) + " criteria passed\n";
  return out;
}

}  // namespace kinefisher::acceptance
