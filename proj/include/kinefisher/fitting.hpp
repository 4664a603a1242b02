#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kinefisher/body_model.hpp"
#include "kinefisher/constants.hpp"
#include "kinefisher/errors.hpp"
#include "kinefisher/losses.hpp"
#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/pose_distributions.hpp"
#include "kinefisher/rng.hpp"
#include "kinefisher/sampler.hpp"
#include "kinefisher/so3.hpp"

namespace kinefisher {

struct FitConfig {
  int steps = 500;            ///< independent mode, and the hierarchical polish pass
  int stage_steps = 60;       ///< per hierarchical stage
  bool polish = true;
  int samples = 8;            ///< K
  double kl_weight = 0.01;    ///< lambda
  double sample_weight = 1.0;
  double mode_weight = 1.0;
  double learning_rate = 0.05;
  double lr_increase = 1.25;
  double lr_decrease = 0.5;
  int max_backtracks = 30;
  double tolerance = 1e-12;   ///< relative decrease below which a step counts as stalled
  int patience = 20;          ///< stalled steps before stopping
  int resample_every = 25;    ///< accepted steps per noise epoch, 0 = redraw only on stalls
  int max_epochs = 50;        ///< noise redraws allowed when the line search stalls
  std::uint64_t seed = 0;
  DistributionMode mode = DistributionMode::independent;
  int quadrature_order = 16;  ///< inside the fitter; results use the library default
  double init_f = 0.1;
  double init_jitter = 0.2;   ///< relative, breaks the SVD tie of init_f * I
  double shape_prior_std = 1.25;
  std::optional<double> sampler_b;

  void validate() const {
    if (samples < 1) throw InvalidArgument("K must be at least 1");
    if (kl_weight < 0.0) throw InvalidArgument("kl weight must be nonnegative");
    if (steps < 0 || stage_steps < 0) throw InvalidArgument("step counts must be nonnegative");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
    if (sample_weight < 0.0 || mode_weight < 0.0) throw InvalidArgument("loss weights must be nonnegative");
  }
};

struct TraceRow {
  int step = 0;
  int stage = 0;
  int epoch = 0;  ///< Monte-Carlo noise epoch; the objective is fixed within (stage, epoch)
  LossReport report;
  double step_size = 0.0;
};

struct FitResult {
  BodyDistribution dist;
  std::vector<TraceRow> trace;
};

/// Flat parameter vector: F rows per non-root joint, mu, log sigma2, gamma,
/// then camera as (log(s / s0), tx / s0, ty / s0).
struct ParamLayout {
  int joints = 0;  ///< non-root joints
  int betas = 0;
  double camera_scale = 1.0;

  [[nodiscard]] int f(int i) const { return 9 * (i - 1); }
  [[nodiscard]] int mu() const { return 9 * joints; }
  [[nodiscard]] int log_sigma2() const { return mu() + betas; }
  [[nodiscard]] int gamma() const { return log_sigma2() + betas; }
  [[nodiscard]] int camera() const { return gamma() + 3; }
  [[nodiscard]] int size() const { return camera() + 3; }

  [[nodiscard]] Mat3 get_f(const Eigen::VectorXd& x, int i) const {
    return Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(x.data() + f(i));
  }
  void set_f(Eigen::VectorXd& x, int i, const Mat3& m) const {
    Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(x.data() + f(i)) = m;
  }
  [[nodiscard]] Camera get_camera(const Eigen::VectorXd& x) const {
    const int c = camera();
    return {camera_scale * std::exp(x(c)), camera_scale * x(c + 1), camera_scale * x(c + 2)};
  }
  void set_camera(Eigen::VectorXd& x, const Camera& cam) const {
    const int c = camera();
    x(c) = std::log(cam.s / camera_scale);
    x(c + 1) = cam.tx / camera_scale;
    x(c + 2) = cam.ty / camera_scale;
  }
};

inline constexpr double kMinLogSigma2 = -13.815510557964274;  // log(1e-6)
inline constexpr double kMaxLogSigma2 = 4.605170185988092;    // log(100)

namespace detail {

/// An objective whose gradient holds SvdChart coordinates in the F blocks,
/// taken in the frames that `frames` returns for the same point.
struct Objective {
  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*, LossReport*)> evaluate;
  std::function<std::vector<ProperSvd>(const Eigen::VectorXd&)> frames;
};

inline void project_parameters(const ParamLayout& lay, Eigen::VectorXd& x) {
  for (int i = 1; i <= lay.joints; ++i) lay.set_f(x, i, clip_concentration(lay.get_f(x, i)));
  for (int b = 0; b < lay.betas; ++b) {
    double& v = x(lay.log_sigma2() + b);
    v = std::clamp(v, kMinLogSigma2, kMaxLogSigma2);
  }
}

inline std::string trace_tail(const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  const std::size_t from = trace.size() > 5 ? trace.size() - 5 : 0;
  for (std::size_t r = from; r < trace.size(); ++r)
    os << "\n  step " << trace[r].step << " stage " << trace[r].stage << " total "
       << trace[r].report.total << " step_size " << trace[r].step_size;
  return os.str();
}

/// Callbacks that let a stochastic objective track the iterate.
struct MinimizeHooks {
  std::function<void(const Eigen::VectorXd&)> on_accept;
  /// Redraws the noise at x; returns the new epoch index, or -1 to stop.
  /// `stalled` is false for a scheduled redraw.
  std::function<int(const Eigen::VectorXd&, bool stalled)> next_epoch;
  int epoch_steps = 0;  ///< accepted steps between scheduled redraws, 0 = none
};

/// Re-signs a proper SVD (u, v) -> (u D, v D), D a proper diagonal sign
/// matrix, to stay closest to a reference frame. F is unchanged.
inline ProperSvd align_svd(const ProperSvd& svd, const ProperSvd& ref) {
  static const std::array<Vec3, 4> signs{Vec3(1, 1, 1), Vec3(-1, -1, 1), Vec3(-1, 1, -1),
                                         Vec3(1, -1, -1)};
  const Vec3 cu = (ref.u.matrix().transpose() * svd.u.matrix()).diagonal();
  const Vec3 cv = (ref.v.matrix().transpose() * svd.v.matrix()).diagonal();
  int best = 0;
  double score = -1e300;
  for (int k = 0; k < 4; ++k) {
    const double sc = signs[k].dot(cu + cv);
    if (sc > score) {
      score = sc;
      best = k;
    }
  }
  if (best == 0) return svd;
  const Mat3 d = signs[best].asDiagonal();
  return {Rotation::unchecked(svd.u.matrix() * d), svd.s, Rotation::unchecked(svd.v.matrix() * d)};
}

/**
 * Local chart of F around its proper SVD: rotations of U and V by small
 * angles and log steps on the singular values (additive near zero). Sampled
 * and modal rotations move by at most the frame angle, so steps stay
 * well-scaled when singular values are close to each other or to zero.
 */
struct SvdChart {
  static constexpr double kFloor = 0.05;

  ProperSvd svd;
  Vec3 scale;  ///< ds / dt per singular-value coordinate

  explicit SvdChart(const ProperSvd& f) : svd(f) {
    for (int k = 0; k < 3; ++k) scale(k) = std::abs(svd.s(k)) >= kFloor ? svd.s(k) : kFloor;
  }

  /// Chart gradient, ordered (U angles, V angles, singular values).
  [[nodiscard]] Eigen::Matrix<double, 9, 1> gradient(const FrameAdjoint& adj) const {
    Eigen::Matrix<double, 9, 1> out;
    out << adj.u, adj.v, adj.s.cwiseProduct(scale);
    return out;
  }

  /// Chart gradient from dL/dF.
  [[nodiscard]] Eigen::Matrix<double, 9, 1> gradient(const Mat3& g) const {
    const Mat3 h = svd.u.matrix().transpose() * g * svd.v.matrix();
    return gradient(detail::frame_adjoint(h, svd.s.asDiagonal(), h.diagonal()));
  }

  [[nodiscard]] Mat3 retract(const Eigen::Matrix<double, 9, 1>& step) const {
    const Mat3 u = svd.u.matrix() * axis_angle_to_matrix({step.head<3>()}).matrix();
    const Mat3 v = svd.v.matrix() * axis_angle_to_matrix({step.segment<3>(3)}).matrix();
    Vec3 s = svd.s;
    for (int k = 0; k < 3; ++k) {
      // Multiplicative away from zero, so a step never flips a sign.
      s(k) = std::abs(s(k)) >= kFloor ? s(k) * std::exp(step(6 + k)) : s(k) + kFloor * step(6 + k);
    }
    return u * s.asDiagonal() * v.transpose();
  }
};

/**
 * Limited-memory quasi-Newton descent with Armijo backtracking.
 *
 * F blocks are stepped in their SvdChart, everything else directly. The
 * initial inverse metric is an RMS diagonal of recent gradients. Only steps that satisfy the sufficient-decrease condition are
 * taken, so the objective is non-increasing along the trace within an epoch.
 */
inline Eigen::VectorXd minimize(const Objective& objective, Eigen::VectorXd x,
                                const Eigen::VectorXd& free, const ParamLayout& lay,
                                const FitConfig& cfg, int steps, int stage, int& step_counter,
                                std::vector<TraceRow>& trace, const MinimizeHooks& hooks = {},
                                int epoch = 0) {
  Eigen::VectorXd g(x.size());
  LossReport report;
  const auto evaluate_start = [&] {
    const double f = objective.evaluate(x, &g, &report);
    if (!std::isfinite(f))
      throw OptimizationFailure("objective is not finite at the starting point" + trace_tail(trace));
    g = g.cwiseProduct(free);
    report.grad_norm = g.norm();
    trace.push_back({step_counter, stage, epoch, report, 0.0});
    return f;
  };
  std::vector<SvdChart> charts;
  const auto update_charts = [&] {
    charts.clear();
    for (const ProperSvd& f : objective.frames(x)) charts.emplace_back(f);
  };

  const int memory = 10;
  std::vector<Eigen::VectorXd> s_hist, y_hist;
  std::vector<double> rho;
  const auto reset_memory = [&] {
    s_hist.clear();
    y_hist.clear();
    rho.clear();
  };

  double fx = evaluate_start();
  update_charts();
  double alpha = cfg.learning_rate;
  int epoch_length = 0;
  const auto start_epoch = [&](int next) {
    reset_memory();
    epoch = next;
    epoch_length = 0;
    fx = evaluate_start();
    update_charts();
    alpha = cfg.learning_rate;
  };
  Eigen::VectorXd v = g.cwiseAbs2();
  int stalled = 0;
  for (int it = 0; it < steps; ++it) {
    // Coordinates held at a bound whose descent points outward sit out this
    // step; otherwise the projection undoes the step and the search stalls.
    Eigen::VectorXd active = free;
    for (int i = 1; i <= lay.joints; ++i) {
      if (free(lay.f(i)) == 0.0) continue;
      for (int k = 0; k < 3; ++k) {
        const int c = lay.f(i) + 6 + k;
        // Clipped values come back from the SVD a few ulps short of the cap.
        if (std::abs(charts[i - 1].svd.s(k)) >= kConcentrationCap * (1.0 - 1e-9) && g(c) < 0.0)
          active(c) = 0.0;
      }
    }
    for (int b = 0; b < lay.betas; ++b) {
      const int c = lay.log_sigma2() + b;
      if ((x(c) <= kMinLogSigma2 && g(c) > 0.0) || (x(c) >= kMaxLogSigma2 && g(c) < 0.0)) active(c) = 0.0;
    }
    const Eigen::VectorXd ga = g.cwiseProduct(active);
    if (ga.squaredNorm() == 0.0) break;
    v = 0.9 * v + 0.1 * g.cwiseAbs2();
    const double floor = 1e-12 * std::sqrt(v.maxCoeff());
    const Eigen::VectorXd diag = (v.cwiseSqrt().array() + floor + 1e-300).inverse().matrix();

    // Two-loop recursion with a scaled diagonal initial metric.
    Eigen::VectorXd q = ga;
    std::vector<double> coef(s_hist.size());
    for (int k = static_cast<int>(s_hist.size()) - 1; k >= 0; --k) {
      coef[k] = rho[k] * s_hist[k].dot(q);
      q -= coef[k] * y_hist[k];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) {
      const Eigen::VectorXd& y = y_hist.back();
      gamma = s_hist.back().dot(y) / y.dot(diag.cwiseProduct(y));
    }
    Eigen::VectorXd dir = gamma * diag.cwiseProduct(q);
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double b = rho[k] * y_hist[k].dot(dir);
      dir += (coef[k] - b) * s_hist[k];
    }
    dir = -dir.cwiseProduct(active);
    bool quasi_newton = !s_hist.empty();
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      dir = -diag.cwiseProduct(ga);
      slope = g.dot(dir);
      quasi_newton = false;
      reset_memory();
    }

    bool accepted = false;
    Eigen::VectorXd xn;
    Eigen::VectorXd gn(x.size());
    LossReport rn;
    double fn = fx;
    // No coordinate moves by more than one unit (radian, e-fold) per step.
    double a = std::min(quasi_newton ? 1.0 : alpha, 1.0 / dir.cwiseAbs().maxCoeff());
    for (int bt = 0; bt <= cfg.max_backtracks; ++bt, a *= cfg.lr_decrease) {
      xn = x + a * dir;
      for (int i = 1; i <= lay.joints; ++i) {
        if (free(lay.f(i)) == 0.0) continue;
        lay.set_f(xn, i, charts[i - 1].retract(a * dir.segment<9>(lay.f(i))));
      }
      if (!xn.allFinite()) continue;
      project_parameters(lay, xn);
      if ((xn - x).cwiseAbs().maxCoeff() == 0.0) break;
      fn = objective.evaluate(xn, &gn, &rn);
      if (std::isfinite(fn) && fn <= fx + 1e-4 * a * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      const int next = hooks.next_epoch ? hooks.next_epoch(x, true) : -1;
      if (next < 0) break;
      start_epoch(next);
      continue;
    }
    const double decrease = fx - fn;
    const Eigen::VectorXd sk = a * dir;
    const Eigen::VectorXd yk = gn.cwiseProduct(free) - g;
    x = xn;
    fx = fn;
    g = gn.cwiseProduct(free);
    rn.grad_norm = g.norm();
    const double sy = sk.dot(yk);
    if (sy > 1e-12 * sk.norm() * yk.norm()) {
      if (static_cast<int>(s_hist.size()) == memory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho.erase(rho.begin());
      }
      s_hist.push_back(sk);
      y_hist.push_back(yk);
      rho.push_back(1.0 / sy);
    }
    if (hooks.on_accept) hooks.on_accept(x);
    update_charts();
    ++step_counter;
    trace.push_back({step_counter, stage, epoch, rn, a});
    if (!quasi_newton) alpha = std::min(a * cfg.lr_increase, 1.0);
    stalled = decrease <= cfg.tolerance * (1.0 + std::abs(fx)) ? stalled + 1 : 0;
    if (stalled >= cfg.patience) break;
    if (hooks.epoch_steps > 0 && ++epoch_length >= hooks.epoch_steps && it + 1 < steps) {
      const int next = hooks.next_epoch ? hooks.next_epoch(x, false) : -1;
      if (next >= 0) start_epoch(next);
    }
  }
  if (!std::isfinite(fx)) throw OptimizationFailure("objective diverged" + trace_tail(trace));
  return x;
}

inline BodyDistribution unpack(const BodyModel& model, const ParamLayout& lay,
                               const Eigen::VectorXd& x, DistributionMode flag, int order) {
  BodyDistribution d;
  for (int i = 1; i <= lay.joints; ++i) d.joints.emplace_back(lay.get_f(x, i), order);
  d.shape.mu = x.segment(lay.mu(), lay.betas);
  d.shape.sigma2 = x.segment(lay.log_sigma2(), lay.betas).array().exp().matrix();
  d.gamma.v = x.segment<3>(lay.gamma());
  d.camera = lay.get_camera(x);
  d.mode_flag = flag;
  refresh_parent_context(model, d);
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fitting to labels

struct LabelExample {
  std::vector<Rotation> rots;
  Eigen::VectorXd beta;
  AxisAngle gamma;
};

/**
 * Maximum likelihood over {F_i}, mu, sigma2 and the point estimate gamma:
 * mean over the dataset of the shape NLL, the per-joint pose NLL and the
 * global rotation loss.
 */
inline FitResult fit_to_labels(const BodyModel& model, std::span<const LabelExample> data,
                               const FitConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw InvalidArgument("label dataset is empty");
  ParamLayout lay{model.num_joints() - 1, model.num_betas(), 1.0};
  const double n = static_cast<double>(data.size());
  std::vector<Mat3> mean_rot(lay.joints + 1, Mat3::Zero());
  Eigen::VectorXd beta_mean = Eigen::VectorXd::Zero(lay.betas);
  for (const auto& ex : data) {
    if (static_cast<int>(ex.rots.size()) != lay.joints || ex.beta.size() != lay.betas)
      throw InvalidArgument("label dimensions do not match the model");
    for (int i = 1; i <= lay.joints; ++i) mean_rot[i] += ex.rots[i - 1].matrix() / n;
    beta_mean += ex.beta / n;
  }

  detail::Objective objective;
  objective.frames = [&](const Eigen::VectorXd& x) {
    std::vector<ProperSvd> out;
    for (int i = 1; i <= lay.joints; ++i) out.push_back(proper_svd(lay.get_f(x, i)));
    return out;
  };
  objective.evaluate = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad, LossReport* rep) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
    double pose = 0.0;
    for (int i = 1; i <= lay.joints; ++i) {
      const Mat3 f = lay.get_f(x, i);
      const ProperSvd svd = proper_svd(f);
      const FisherMoments mom = fisher_moments(svd.s, cfg.quadrature_order);
      pose += mom.log_c - (f.transpose() * mean_rot[i]).trace();
      const Mat3 er = svd.u.matrix() * mom.mean.asDiagonal() * svd.v.matrix().transpose();
      g.segment<9>(lay.f(i)) = detail::SvdChart(svd).gradient(Mat3(er - mean_rot[i]));
    }
    ShapeDist sd{x.segment(lay.mu(), lay.betas),
                 x.segment(lay.log_sigma2(), lay.betas).array().exp().matrix()};
    double shape = 0.0;
    Eigen::VectorXd g_mu = Eigen::VectorXd::Zero(lay.betas);
    Eigen::VectorXd g_s2 = Eigen::VectorXd::Zero(lay.betas);
    double global = 0.0;
    Vec3 g_gamma = Vec3::Zero();
    const AxisAngle gamma_hat{x.segment<3>(lay.gamma())};
    for (const auto& ex : data) {
      const auto sn = shape_nll(ex.beta, sd);
      shape += sn.value / n;
      g_mu += sn.grad_mu / n;
      g_s2 += sn.grad_sigma2 / n;
      const auto gl = global_rot_loss(ex.gamma, gamma_hat);
      global += gl.value / n;
      g_gamma += gl.grad_gamma_hat / n;
    }
    g.segment(lay.mu(), lay.betas) = g_mu;
    g.segment(lay.log_sigma2(), lay.betas) = g_s2.cwiseProduct(sd.sigma2);
    g.segment<3>(lay.gamma()) = g_gamma;
    if (grad) *grad = g;
    LossReport r;
    r.add("shape_nll", shape);
    r.add("pose_nll", pose);
    r.add("global", global);
    if (rep) *rep = r;
    return r.total;
  };

  Eigen::VectorXd x = Eigen::VectorXd::Zero(lay.size());
  for (int i = 1; i <= lay.joints; ++i) lay.set_f(x, i, cfg.init_f * Mat3::Identity());
  Eigen::VectorXd free = Eigen::VectorXd::Ones(lay.size());
  free.segment<3>(lay.camera()).setZero();
  FitResult res;
  int counter = 0;
  x = detail::minimize(objective, x, free, lay, cfg, cfg.steps, 0, counter, res.trace);
  res.dist = detail::unpack(model, lay, x, cfg.mode, cfg.quadrature_order);
  return res;
}

// ---------------------------------------------------------------------------
// Fitting to 2D observations

/// Camera that maps the rest body's joint box onto the visible targets' box.
inline Camera initial_camera(const BodyModel& model, const Scene& scene) {
  const Points3 rest = model.joint_regressor * model.template_vertices;
  Eigen::Vector2d lo2 = Eigen::Vector2d::Constant(1e300), hi2 = -lo2;
  Eigen::Vector2d lo3 = lo2, hi3 = hi2;
  for (int l = 0; l < model.num_joints(); ++l) {
    if (scene.vis[l] == 0) continue;
    lo2 = lo2.cwiseMin(scene.j2d.row(l).transpose());
    hi2 = hi2.cwiseMax(scene.j2d.row(l).transpose());
    lo3 = lo3.cwiseMin(rest.row(l).head<2>().transpose());
    hi3 = hi3.cwiseMax(rest.row(l).head<2>().transpose());
  }
  const double e3 = (hi3 - lo3).maxCoeff();
  const double e2 = (hi2 - lo2).maxCoeff();
  Camera cam;
  cam.s = e3 > 0.0 && e2 > 0.0 ? e2 / e3 : 0.5 * scene.canvas;
  const Eigen::Vector2d c2 = 0.5 * (lo2 + hi2);
  const Eigen::Vector2d c3 = 0.5 * (lo3 + hi3);
  cam.tx = c2.x() - cam.s * c3.x();
  cam.ty = c2.y() - cam.s * c3.y();
  return cam;
}

/**
 * Objective for one observation: K-sample reprojection loss, optional mode
 * reprojection loss, and KL regularizers.
 *
 * Each noise epoch draws K bodies by rejection sampling at a given point and
 * keeps their accepted base noise; samples elsewhere come from the
 * fixed-noise map. Within an epoch the objective is a smooth deterministic
 * function of the parameters, and at the epoch's draw point every sample is
 * an exact draw. F gradients are SvdChart coordinates in the frames().
 */
class ObservationObjective {
 public:
  ObservationObjective(const BodyModel& model, const Scene& scene, const FitConfig& cfg,
                       const ParamLayout& lay)
      : model_(model), map_(model), scene_(scene), cfg_(cfg), lay_(lay) {
    loss_joints_.assign(model.num_joints(), 1);
    sampled_.assign(model.num_joints(), 1);
    kl_joints_.assign(model.num_joints(), 1);
  }

  /// Draws the noise of `epoch` at x from its own substreams.
  void set_epoch(int epoch, const Eigen::VectorXd& x) {
    epoch_ = epoch;
    noise_.clear();
    shape_eps_.clear();
    SamplerOptions opts;
    opts.b = cfg_.sampler_b;
    const RngStream root = RngStream(cfg_.seed).split("fit").split("epoch", epoch);
    for (int k = 0; k < cfg_.samples; ++k) {
      const RngStream sk = root.split("sample", k);
      std::vector<NoiseRecord> js;
      for (int i = 1; i <= lay_.joints; ++i) {
        RngStream stream = sk.split("joint", i);
        js.push_back(sample_matrix_fisher(proper_svd(lay_.get_f(x, i)), stream, opts).second);
      }
      noise_.push_back(std::move(js));
      RngStream ss = sk.split("shape");
      Eigen::VectorXd eps(lay_.betas);
      for (int b = 0; b < lay_.betas; ++b) eps(b) = ss.normal();
      shape_eps_.push_back(eps);
    }
  }
  [[nodiscard]] int epoch() const { return epoch_; }

  /// Fixes the SVD sign convention of every joint to the frames at x, so the
  /// sample map stays continuous along the optimization path.
  void set_reference(const Eigen::VectorXd& x) {
    const int nj = model_.num_joints();
    std::vector<ProperSvd> next(nj);
    for (int i = 1; i < nj; ++i) {
      next[i] = proper_svd(lay_.get_f(x, i));
      if (!refs_.empty()) next[i] = detail::align_svd(next[i], refs_[i]);
    }
    refs_ = std::move(next);
  }

  /// Frames of the gradient charts at the last reference point.
  [[nodiscard]] std::vector<ProperSvd> frames() const {
    return {refs_.begin() + 1, refs_.end()};
  }

  /// Restricts the objective: 2D targets used, joints drawn, joints regularized.
  void set_scope(std::vector<int> loss_joints, std::vector<int> sampled, std::vector<int> kl_joints) {
    loss_joints_ = std::move(loss_joints);
    sampled_ = std::move(sampled);
    kl_joints_ = std::move(kl_joints);
  }

  double operator()(const Eigen::VectorXd& x, Eigen::VectorXd* grad, LossReport* rep) const {
    const int nj = model_.num_joints();
    Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
    std::vector<ProperSvd> svd(nj);
    for (int i = 1; i < nj; ++i) {
      svd[i] = proper_svd(lay_.get_f(x, i));
      if (!refs_.empty()) svd[i] = detail::align_svd(svd[i], refs_[i]);
    }
    const Eigen::VectorXd mu = x.segment(lay_.mu(), lay_.betas);
    const Eigen::VectorXd sigma = (0.5 * x.segment(lay_.log_sigma2(), lay_.betas).array()).exp().matrix();
    const AxisAngle gamma{x.segment<3>(lay_.gamma())};
    const Camera cam = lay_.get_camera(x);
    SamplerOptions opts;
    opts.b = cfg_.sampler_b;

    std::vector<int> vis(nj);
    for (int l = 0; l < nj; ++l) vis[l] = scene_.vis[l] != 0 && loss_joints_[l] != 0 ? 1 : 0;

    double cam_s_bar = 0.0;
    Eigen::Vector2d cam_t_bar = Eigen::Vector2d::Zero();
    Vec3 gamma_bar = Vec3::Zero();
    Eigen::VectorXd mu_bar = Eigen::VectorXd::Zero(lay_.betas);
    Eigen::VectorXd ls_bar = Eigen::VectorXd::Zero(lay_.betas);
    std::vector<FrameAdjoint> f_bar(nj);
    const auto accumulate = [](FrameAdjoint& acc, const FrameAdjoint& a) {
      acc.u += a.u;
      acc.v += a.v;
      acc.s += a.s;
    };

    // One forward/backward pass through the body for fixed rotations and shape.
    const auto reproject = [&](const std::vector<Mat3>& rots, const Eigen::VectorXd& beta,
                               double norm, double weight, std::vector<Mat3>& rot_bar,
                               Eigen::VectorXd& beta_bar) {
      JointMap::Tape tape;
      const Points3 j3 = map_.forward(rots, gamma, beta, &tape);
      const Points2 p = project_weak_perspective(j3, cam);
      double loss = 0.0;
      Points3 j3_bar = Points3::Zero(nj, 3);
      for (int l = 0; l < nj; ++l) {
        if (vis[l] == 0) continue;
        const Eigen::RowVector2d r = p.row(l) - scene_.j2d.row(l);
        loss += norm * r.squaredNorm();
        const Eigen::RowVector2d gp = 2.0 * weight * norm * r;
        j3_bar(l, 0) = cam.s * gp(0);
        j3_bar(l, 1) = cam.s * gp(1);
        cam_s_bar += gp(0) * j3(l, 0) + gp(1) * j3(l, 1);
        cam_t_bar += gp.transpose();
      }
      const auto jg = map_.backward(tape, j3_bar);
      gamma_bar += jg.gamma;
      rot_bar = jg.rots;
      beta_bar = jg.beta;
      return loss;
    };

    int visible = 0;
    for (int w : vis) visible += w;
    LossReport report;
    double sample_loss = 0.0;
    double mode_loss = 0.0;
    if (visible > 0 && cfg_.sample_weight > 0.0) {
      const double norm = 1.0 / (static_cast<double>(cfg_.samples) * visible);
      for (int k = 0; k < cfg_.samples; ++k) {
        std::vector<Mat3> rots(nj - 1, Mat3::Identity());
        const std::vector<NoiseRecord>& noise = noise_[k];
        for (int i = 1; i < nj; ++i) {
          if (sampled_[i]) rots[i - 1] = fixed_noise_resample(svd[i], noise[i - 1], opts).matrix();
        }
        const Eigen::VectorXd beta = mu + sigma.cwiseProduct(shape_eps_[k]);
        std::vector<Mat3> rot_bar;
        Eigen::VectorXd beta_bar;
        sample_loss += reproject(rots, beta, norm, cfg_.sample_weight, rot_bar, beta_bar);
        mu_bar += beta_bar;
        ls_bar += beta_bar.cwiseProduct(shape_eps_[k]).cwiseProduct(sigma) * 0.5;
        for (int i = 1; i < nj; ++i) {
          if (!sampled_[i] || !free_joint(i)) continue;
          accumulate(f_bar[i], fixed_noise_frame_vjp(svd[i], noise[i - 1], rot_bar[i - 1], opts));
        }
      }
      report.add("reproj_2d", sample_loss, cfg_.sample_weight);
    }
    if (visible > 0 && cfg_.mode_weight > 0.0) {
      std::vector<Mat3> rots(nj - 1, Mat3::Identity());
      for (int i = 1; i < nj; ++i) {
        if (!sampled_[i]) continue;
        if (!(svd[i].s(0) + svd[i].s(1) > 0.0)) throw ModeUndefined("joint distribution became uniform");
        rots[i - 1] = svd[i].u.matrix() * svd[i].v.matrix().transpose();
      }
      std::vector<Mat3> rot_bar;
      Eigen::VectorXd beta_bar;
      mode_loss = reproject(rots, mu, 1.0 / visible, cfg_.mode_weight, rot_bar, beta_bar);
      mu_bar += beta_bar;
      for (int i = 1; i < nj; ++i) {
        if (!sampled_[i] || !free_joint(i)) continue;
        accumulate(f_bar[i], mode_frame_vjp(svd[i], rot_bar[i - 1]));
      }
      report.add("reproj_mode", mode_loss, cfg_.mode_weight);
    }

    double kl = 0.0;
    for (int i = 1; i < nj; ++i) {
      if (!kl_joints_[i]) continue;
      const FisherMoments mom = fisher_moments(svd[i].s, cfg_.quadrature_order);
      kl += std::max(svd[i].s.dot(mom.mean) - mom.log_c, 0.0);
      f_bar[i].s += cfg_.kl_weight * (mom.cov * svd[i].s);
    }
    const ShapeDist sd{mu, sigma.cwiseAbs2()};
    const auto skl = shape_prior_kl(sd, cfg_.shape_prior_std);
    kl += skl.value;
    mu_bar += cfg_.kl_weight * skl.grad_mu;
    ls_bar += cfg_.kl_weight * skl.grad_sigma2.cwiseProduct(sd.sigma2);
    report.add("kl_reg", kl, cfg_.kl_weight);

    if (grad) {
      for (int i = 1; i < nj; ++i) g.segment<9>(lay_.f(i)) = detail::SvdChart(svd[i]).gradient(f_bar[i]);
      g.segment(lay_.mu(), lay_.betas) = mu_bar;
      g.segment(lay_.log_sigma2(), lay_.betas) = ls_bar;
      g.segment<3>(lay_.gamma()) = gamma_bar;
      const int c = lay_.camera();
      g(c) = cam_s_bar * cam.s;
      g(c + 1) = cam_t_bar(0) * lay_.camera_scale;
      g(c + 2) = cam_t_bar(1) * lay_.camera_scale;
      *grad = g;
    }
    if (rep) *rep = report;
    return report.total;
  }

  /// Joints whose F receives gradient; others are treated as constants.
  void set_free_joints(std::vector<int> free) { free_joints_ = std::move(free); }

 private:
  [[nodiscard]] bool free_joint(int i) const { return free_joints_.empty() || free_joints_[i] != 0; }

  const BodyModel& model_;
  JointMap map_;
  const Scene& scene_;
  FitConfig cfg_;
  ParamLayout lay_;
  std::vector<std::vector<NoiseRecord>> noise_;  ///< [sample][joint - 1]
  std::vector<Eigen::VectorXd> shape_eps_;
  std::vector<int> loss_joints_;
  std::vector<int> sampled_;
  std::vector<int> kl_joints_;
  std::vector<int> free_joints_;
  std::vector<ProperSvd> refs_;
  int epoch_ = 0;
};

/**
 * Per-instance fit of a body distribution to 2D joints.
 *
 * Independent mode optimizes everything jointly. Hierarchical mode walks the
 * tree by depth: stage 0 fits shape, global rotation and camera on the joints
 * next to the root; stage d frees the distributions of depth-d joints with
 * the targets of depth <= d + 1, while shallower distributions stay frozen
 * and keep being sampled. A joint polish pass follows when enabled.
 */
inline FitResult fit_to_observation(const BodyModel& model, const Scene& scene, const FitConfig& cfg) {
  cfg.validate();
  const int nj = model.num_joints();
  if (scene.j2d.rows() != nj || static_cast<int>(scene.vis.size()) != nj)
    throw InvalidArgument("scene joint count does not match the model");
  if (scene.num_visible() < 4)
    throw InsufficientObservation("need at least 4 visible joints, scene has " +
                                  std::to_string(scene.num_visible()));
  const Camera cam0 = initial_camera(model, scene);
  ParamLayout lay{nj - 1, model.num_betas(), cam0.s};
  Eigen::VectorXd x = Eigen::VectorXd::Zero(lay.size());
  RngStream jitter = RngStream(cfg.seed).split("init");
  for (int i = 1; i < nj; ++i) {
    // F = init_f * I has a fully degenerate SVD, where the sampled rotation
    // is not differentiable in F; a small seeded offset separates the
    // singular values.
    Mat3 f = cfg.init_f * Mat3::Identity();
    for (int a = 0; a < 9; ++a) f(a / 3, a % 3) += cfg.init_jitter * cfg.init_f * jitter.normal();
    lay.set_f(x, i, f);
  }
  lay.set_camera(x, cam0);

  ObservationObjective objective(model, scene, cfg, lay);
  detail::Objective fn;
  fn.evaluate = [&](const Eigen::VectorXd& p, Eigen::VectorXd* g, LossReport* r) {
    return objective(p, g, r);
  };
  fn.frames = [&](const Eigen::VectorXd&) { return objective.frames(); };
  objective.set_reference(x);
  FitResult res;
  int counter = 0;
  int stall_redraws = 0;
  int next_epoch = 0;
  const std::vector<int> all(nj, 1);
  const bool stochastic = cfg.sample_weight > 0.0;
  detail::MinimizeHooks hooks;
  hooks.epoch_steps = stochastic ? cfg.resample_every : 0;
  hooks.on_accept = [&](const Eigen::VectorXd& p) { objective.set_reference(p); };
  hooks.next_epoch = [&](const Eigen::VectorXd& p, bool stalled) {
    if (!stochastic) return -1;
    if (stalled && stall_redraws++ >= cfg.max_epochs) return -1;
    objective.set_epoch(next_epoch++, p);
    return objective.epoch();
  };
  const auto run = [&](const Eigen::VectorXd& free, int steps, int stage) {
    objective.set_epoch(next_epoch++, x);
    x = detail::minimize(fn, x, free, lay, cfg, steps, stage, counter, res.trace, hooks,
                         objective.epoch());
  };

  const auto shared_mask = [&] {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(lay.size());
    m.segment(lay.mu(), lay.size() - lay.mu()).setOnes();
    return m;
  };

  if (cfg.mode == DistributionMode::hierarchical) {
    const std::vector<int> depth = model.depths();
    const int max_depth = *std::max_element(depth.begin(), depth.end());
    for (int d = 0; d <= max_depth; ++d) {
      std::vector<int> loss(nj), sampled(nj), stage_joints(nj);
      for (int l = 0; l < nj; ++l) {
        // Targets up to depth d + 1, reaching past hidden joints to the first
        // visible ones so that every stage joint sees some observation.
        bool reach = true;
        for (int a = model.parents[l]; a >= 0 && depth[a] > d; a = model.parents[a])
          reach = reach && scene.vis[a] == 0;
        loss[l] = reach;
        sampled[l] = l > 0 && depth[l] <= d;
        stage_joints[l] = l > 0 && depth[l] == d;
      }
      Eigen::VectorXd free = shared_mask();
      for (int i = 1; i < nj; ++i)
        if (stage_joints[i]) free.segment(lay.f(i), 9).setOnes();
      objective.set_scope(loss, sampled, stage_joints);
      objective.set_free_joints(stage_joints);
      run(free, cfg.stage_steps, d);
    }
    if (cfg.polish) {
      objective.set_scope(all, all, all);
      objective.set_free_joints({});
      run(Eigen::VectorXd::Ones(lay.size()), cfg.steps, max_depth + 1);
    }
  } else {
    run(Eigen::VectorXd::Ones(lay.size()), cfg.steps, 0);
  }
  res.dist = detail::unpack(model, lay, x, cfg.mode, kDefaultQuadratureOrder);
  return res;
}

/// Mean 2D distance over visible joints between projected joints and targets.
inline double visible_2d_error(const Points3& joints3d, const Camera& cam, const Scene& scene) {
  const Points2 p = project_weak_perspective(joints3d, cam);
  double sum = 0.0;
  int n = 0;
  for (int l = 0; l < p.rows(); ++l) {
    if (scene.vis[l] == 0) continue;
    sum += (p.row(l) - scene.j2d.row(l)).norm();
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

}  // namespace kinefisher
