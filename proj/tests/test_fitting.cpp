#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>

#include "kinefisher/fitting.hpp"

using namespace kinefisher;

namespace {

using Vec9 = Eigen::Matrix<double, 9, 1>;

Scene small_scene(const BodyModel& m, std::uint64_t seed) {
  SceneConfig cfg;
  cfg.removal_prob = 0.0;
  return generate_scene(m, cfg, RngStream(seed));
}

}  // namespace

TEST(FitConfig, ValidateRejectsBadValues) {
  FitConfig c;
  EXPECT_NO_THROW(c.validate());
  c.samples = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.kl_weight = -1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = {};
  c.sample_weight = -0.5;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(SvdChart, RetractZeroIsIdentityAndKeepsSigns) {
  const Mat3 f = Vec3(3, 1, -0.5).asDiagonal();
  const detail::SvdChart chart(proper_svd(f));
  EXPECT_LT((chart.retract(Vec9::Zero()) - f).cwiseAbs().maxCoeff(), 1e-14);
  Vec9 big = Vec9::Zero();
  big.tail<3>() = Vec3(-5, -5, -5);
  const Vec3 s = proper_svd(chart.retract(big)).s;
  EXPECT_LT(s(2), 0.0);
}

TEST(AlignSvd, PreservesMatrixAndTracksReference) {
  RngStream rng(91);
  for (int t = 0; t < 50; ++t) {
    const Mat3 f = haar_random_rotation(rng).matrix() * Vec3(4, 2, 1).asDiagonal() *
                   haar_random_rotation(rng).matrix().transpose();
    const ProperSvd ref = proper_svd(f);
    // Same matrix, frames flipped by a proper sign pattern.
    const Mat3 d = Vec3(-1, -1, 1).asDiagonal();
    const ProperSvd flipped{Rotation::unchecked(ref.u.matrix() * d), ref.s, Rotation::unchecked(ref.v.matrix() * d)};
    const ProperSvd back = detail::align_svd(flipped, ref);
    EXPECT_LT((back.u.matrix() - ref.u.matrix()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((back.reconstruct() - f).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FitToLabels, RecoversGeneratingDistribution) {
  ToyModelConfig mc;
  mc.num_joints = 5;
  mc.vertices_per_bone = 6;
  mc.num_betas = 3;
  const BodyModel m = make_toy_model(mc);
  RngStream rng(92);
  std::vector<MatrixFisher> truth;
  for (int i = 1; i < m.num_joints(); ++i)
    truth.push_back(MatrixFisher(haar_random_rotation(rng).matrix() * Vec3(12, 8, 3).asDiagonal()));
  const ShapeDist shape{Eigen::Vector3d(0.5, -1.0, 0.2), Eigen::Vector3d(0.3, 1.0, 2.0)};
  const AxisAngle gamma{Vec3(0.2, 0.5, -0.1)};
  std::vector<LabelExample> data;
  for (int n = 0; n < 3000; ++n) {
    LabelExample ex;
    for (const auto& t : truth) ex.rots.push_back(sample_matrix_fisher(t, rng).first);
    ex.beta = shape_sample_reparam(shape, rng).first;
    ex.gamma = gamma;
    data.push_back(ex);
  }
  FitConfig cfg;
  cfg.steps = 400;
  const FitResult res = fit_to_labels(m, data, cfg);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    EXPECT_LT(geodesic_distance(mode(res.dist.joints[i]), mode(truth[i])), 0.05);
    const Vec3 s = res.dist.joints[i].singular_values();
    EXPECT_LT((s - truth[i].singular_values()).cwiseAbs().maxCoeff() / 12.0, 0.15) << s.transpose();
  }
  EXPECT_LT((res.dist.shape.mu - shape.mu).cwiseAbs().maxCoeff(), 0.1);
  EXPECT_LT((res.dist.shape.sigma2 - shape.sigma2).cwiseQuotient(shape.sigma2).cwiseAbs().maxCoeff(), 0.15);
  EXPECT_LT(geodesic_distance(axis_angle_to_matrix(res.dist.gamma), axis_angle_to_matrix(gamma)), 1e-3);
  for (std::size_t k = 1; k < res.trace.size(); ++k)
    EXPECT_LE(res.trace[k].report.total, res.trace[k - 1].report.total + 1e-12);
}

TEST(FitToLabels, RejectsMismatchedLabels) {
  const BodyModel m = make_toy_model();
  std::vector<LabelExample> data(1);
  data[0].rots.resize(3);
  data[0].beta = Eigen::VectorXd::Zero(m.num_betas());
  EXPECT_THROW(fit_to_labels(m, data, FitConfig{}), InvalidArgument);
  EXPECT_THROW(fit_to_labels(m, std::vector<LabelExample>{}, FitConfig{}), InvalidArgument);
}

// Chart-coordinate gradient of the full observation objective against
// central differences, in both sampled and mode-only configurations.
TEST(ObservationObjective, GradientMatchesChartFiniteDifferences) {
  const BodyModel m = make_toy_model();
  Scene scene = small_scene(m, 93);
  scene.vis[5] = 0;
  for (double sample_weight : {1.0, 0.0}) {
    FitConfig cfg;
    cfg.samples = 3;
    cfg.seed = 4;
    cfg.kl_weight = 0.1;
    cfg.sample_weight = sample_weight;
    // Keeps quadrature error in the KL derivative below the tolerance.
    cfg.quadrature_order = 64;
    const Camera cam = initial_camera(m, scene);
    const ParamLayout lay{m.num_joints() - 1, m.num_betas(), cam.s};
    RngStream rng(94);
    Eigen::VectorXd x(lay.size());
    for (int i = 0; i < x.size(); ++i) x(i) = 0.3 * rng.normal();
    for (int i = 1; i < m.num_joints(); ++i) {
      const Mat3 f = haar_random_rotation(rng).matrix() *
                     Vec3(4 + 4 * rng.uniform(), 2 + rng.uniform(), rng.uniform()).asDiagonal() *
                     haar_random_rotation(rng).matrix().transpose();
      lay.set_f(x, i, f);
    }
    lay.set_camera(x, cam);
    ObservationObjective obj(m, scene, cfg, lay);
    obj.set_reference(x);
    obj.set_epoch(0, x);
    Eigen::VectorXd g;
    obj(x, &g, nullptr);
    const auto frames = obj.frames();
    const double h = 1e-6;
    const auto check = [&](double analytic, double fd, const std::string& what) {
      EXPECT_NEAR(analytic, fd, 1e-5 * std::max(1.0, std::abs(fd))) << what << " w=" << sample_weight;
    };
    for (int i = 1; i < m.num_joints(); i += 3) {
      const detail::SvdChart chart(frames[i - 1]);
      for (int c = 0; c < 9; ++c) {
        Vec9 step = Vec9::Zero();
        step(c) = h;
        Eigen::VectorXd p = x, q = x;
        lay.set_f(p, i, chart.retract(step));
        lay.set_f(q, i, chart.retract(-step));
        check(g(lay.f(i) + c), (obj(p, nullptr, nullptr) - obj(q, nullptr, nullptr)) / (2 * h),
              "joint " + std::to_string(i) + " coord " + std::to_string(c));
      }
    }
    for (int k = lay.mu(); k < lay.size(); ++k) {
      Eigen::VectorXd p = x, q = x;
      p(k) += h;
      q(k) -= h;
      check(g(k), (obj(p, nullptr, nullptr) - obj(q, nullptr, nullptr)) / (2 * h), "param " + std::to_string(k));
    }
  }
}

TEST(ObservationObjective, EpochNoiseIsReproducible) {
  const BodyModel m = make_toy_model();
  const Scene scene = small_scene(m, 95);
  FitConfig cfg;
  cfg.samples = 2;
  const ParamLayout lay{m.num_joints() - 1, m.num_betas(), 1.0};
  Eigen::VectorXd x = Eigen::VectorXd::Zero(lay.size());
  for (int i = 1; i < m.num_joints(); ++i) lay.set_f(x, i, Mat3(Vec3(3, 2, 1).asDiagonal()));
  ObservationObjective a(m, scene, cfg, lay), b(m, scene, cfg, lay);
  a.set_reference(x);
  b.set_reference(x);
  a.set_epoch(2, x);
  b.set_epoch(1, x);
  b.set_epoch(2, x);
  EXPECT_EQ(a(x, nullptr, nullptr), b(x, nullptr, nullptr));
  b.set_epoch(3, x);
  EXPECT_NE(a(x, nullptr, nullptr), b(x, nullptr, nullptr));
}

TEST(FitToObservation, TraceMonotoneWithinEpochAndDeterministic) {
  const BodyModel m = make_toy_model();
  const Scene scene = small_scene(m, 96);
  for (auto mode : {DistributionMode::independent, DistributionMode::hierarchical}) {
    FitConfig cfg;
    cfg.mode = mode;
    cfg.steps = 60;
    cfg.stage_steps = 15;
    cfg.samples = 4;
    cfg.seed = 3;
    const FitResult a = fit_to_observation(m, scene, cfg);
    const FitResult b = fit_to_observation(m, scene, cfg);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t k = 0; k < a.trace.size(); ++k) EXPECT_EQ(a.trace[k].report.total, b.trace[k].report.total);
    for (std::size_t k = 1; k < a.trace.size(); ++k) {
      const auto& prev = a.trace[k - 1];
      const auto& cur = a.trace[k];
      if (prev.stage == cur.stage && prev.epoch == cur.epoch) {
        EXPECT_LE(cur.report.total, prev.report.total + 1e-9);
      }
      EXPECT_LE(prev.step, cur.step);
    }
    EXPECT_EQ(a.dist.mode_flag, mode);
    EXPECT_NO_THROW(check_distribution(m, a.dist));
    // Stages change the target set, so only a single-stage fit compares ends.
    if (mode == DistributionMode::independent) {
      EXPECT_LT(a.trace.back().report.term("reproj_mode"), a.trace.front().report.term("reproj_mode"));
    }
    if (mode == DistributionMode::hierarchical) {
      std::map<int, int> stages;
      for (const auto& r : a.trace) ++stages[r.stage];
      const std::vector<int> depth = m.depths();
      EXPECT_EQ(static_cast<int>(stages.size()), *std::max_element(depth.begin(), depth.end()) + 2);
    }
  }
}

TEST(FitToObservation, ReducesReprojectionError) {
  const BodyModel m = make_toy_model();
  const Scene scene = small_scene(m, 97);
  FitConfig cfg;
  cfg.steps = 200;
  cfg.seed = 1;
  const FitResult r = fit_to_observation(m, scene, cfg);
  const double err = visible_2d_error(mode_body(m, r.dist).joints, r.dist.camera, scene);
  EXPECT_LT(err, 12.0);
}

TEST(FitToObservation, TooFewVisibleJointsThrows) {
  const BodyModel m = make_toy_model();
  Scene scene = small_scene(m, 98);
  std::fill(scene.vis.begin(), scene.vis.end(), 0);
  scene.vis[0] = scene.vis[1] = scene.vis[2] = 1;
  EXPECT_THROW(fit_to_observation(m, scene, FitConfig{}), InsufficientObservation);
}

TEST(VisibleError, IgnoresHiddenJoints) {
  const BodyModel m = make_toy_model();
  Scene scene = small_scene(m, 99);
  const BodyGeometry g = pose_body(m, scene.gt->rots, scene.gt->gamma, scene.gt->beta);
  scene.j2d = project_weak_perspective(g.joints, scene.gt->camera);
  scene.j2d(3, 0) += 1000.0;
  scene.vis[3] = 0;
  EXPECT_NEAR(visible_2d_error(g.joints, scene.gt->camera, scene), 0.0, 1e-9);
}

namespace {

BodyModel label_model() {
  ToyModelConfig mc;
  mc.num_joints = 5;
  mc.vertices_per_bone = 6;
  mc.num_betas = 3;
  return make_toy_model(mc);
}

std::vector<LabelExample> diagonal_labels(const BodyModel& m, int n, RngStream& rng) {
  const MatrixFisher truth(Mat3(Vec3(4, 2, 1).asDiagonal()));
  std::vector<LabelExample> data(n);
  for (auto& ex : data) {
    for (int i = 1; i < m.num_joints(); ++i) ex.rots.push_back(sample_matrix_fisher(truth, rng).first);
    ex.beta = Eigen::VectorXd(m.num_betas());
    for (int b = 0; b < m.num_betas(); ++b) ex.beta(b) = rng.normal();
  }
  return data;
}

}  // namespace

TEST(FitToLabels, IdenticalLabelsSaturate) {
  const BodyModel m = label_model();
  RngStream rng(93);
  LabelExample ex;
  for (int i = 1; i < m.num_joints(); ++i) ex.rots.push_back(haar_random_rotation(rng));
  ex.beta = Eigen::Vector3d(0.3, -0.2, 1.0);
  ex.gamma.v = Vec3(0.1, 0.0, 0.0);
  const std::vector<LabelExample> data(20, ex);
  FitConfig cfg;
  cfg.steps = 1000;
  const FitResult res = fit_to_labels(m, data, cfg);
  for (std::size_t i = 0; i < ex.rots.size(); ++i) {
    const MatrixFisher& d = res.dist.joints[i];
    EXPECT_LT(geodesic_distance(mode(d), ex.rots[i]), 1e-3);
    EXPECT_NEAR(d.singular_values()(0), kConcentrationCap, 1e-9 * kConcentrationCap);
    EXPECT_NEAR(d.singular_values()(1), kConcentrationCap, 1e-9 * kConcentrationCap);
    EXPECT_GE(concentrations(d).k.minCoeff(), kConcentrationCap * (1.0 - 1e-9));
  }
  EXPECT_LT((res.dist.shape.mu - ex.beta).cwiseAbs().maxCoeff(), 1e-3);
}

// At a thousand labels the fit must agree with moment matching on the same
// data; the sampling error of s3 itself is too large to compare with truth.
TEST(FitToLabels, AgreesWithMomentMatchingOnTheSameData) {
  const BodyModel m = label_model();
  RngStream rng(94);
  const auto data = diagonal_labels(m, 1000, rng);
  FitConfig cfg;
  cfg.steps = 400;
  const FitResult res = fit_to_labels(m, data, cfg);
  for (int i = 1; i < m.num_joints(); ++i) {
    std::vector<Rotation> rots;
    for (const auto& ex : data) rots.push_back(ex.rots[i - 1]);
    const MatrixFisher ref = mle_fit(rots);
    const MatrixFisher& d = res.dist.joints[i - 1];
    EXPECT_LT(geodesic_distance(mode(d), mode(ref)) * 180.0 / std::numbers::pi, 2.0);
    const Vec3 rel = (d.singular_values() - ref.singular_values()).cwiseQuotient(ref.singular_values());
    EXPECT_LT(rel.cwiseAbs().maxCoeff(), 0.10) << d.singular_values().transpose();
    EXPECT_LT(geodesic_distance(mode(d), Rotation()) * 180.0 / std::numbers::pi, 2.0);
  }
}

TEST(FitToLabels, RecoversDiagonalTruthFromTenThousandLabels) {
  const BodyModel m = label_model();
  RngStream rng(95);
  const auto data = diagonal_labels(m, 10000, rng);
  FitConfig cfg;
  cfg.steps = 400;
  const FitResult res = fit_to_labels(m, data, cfg);
  for (const MatrixFisher& d : res.dist.joints) {
    EXPECT_LT(geodesic_distance(mode(d), Rotation()) * 180.0 / std::numbers::pi, 2.0);
    const Vec3 rel = (d.singular_values() - Vec3(4, 2, 1)).cwiseQuotient(Vec3(4, 2, 1));
    EXPECT_LT(rel.cwiseAbs().maxCoeff(), 0.10) << d.singular_values().transpose();
  }
}

TEST(FitToObservation, NoiselessHierarchicalModeWithinTwoPixels) {
  const BodyModel m = make_toy_model();
  SceneConfig sc;
  sc.noise_px = 0.0;
  sc.removal_prob = 0.0;
  const Scene scene = generate_scene(m, sc, RngStream(100));
  FitConfig cfg;
  cfg.mode = DistributionMode::hierarchical;
  cfg.seed = 100;
  const FitResult r = fit_to_observation(m, scene, cfg);
  EXPECT_LT(visible_2d_error(mode_body(m, r.dist).joints, r.dist.camera, scene), 2.0);
}

TEST(FitToObservation, MaskedLimbIsLessConcentrated) {
  const BodyModel m = make_toy_model();
  Scene scene = generate_scene(m, SceneConfig{}, RngStream(101));
  const int le = m.joint_index("l_elbow"), lw = m.joint_index("l_wrist");
  const int re = m.joint_index("r_elbow"), rw = m.joint_index("r_wrist");
  scene.vis[le] = scene.vis[lw] = 0;
  scene.vis[re] = scene.vis[rw] = 1;
  FitConfig cfg;
  cfg.mode = DistributionMode::hierarchical;
  cfg.seed = 101;
  const FitResult r = fit_to_observation(m, scene, cfg);
  const auto kbar = [&](int j) { return concentrations(r.dist.joint(j)).k.mean(); };
  EXPECT_LE(kbar(le) + kbar(lw), 0.5 * (kbar(re) + kbar(rw)));
}
