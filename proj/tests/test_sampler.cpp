#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "kinefisher/fitting.hpp"
#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/sampler.hpp"

using namespace kinefisher;

namespace {

Mat3 random_f(RngStream& rng, double top) {
  Vec3 s(top * rng.uniform(), top * rng.uniform(), top * rng.uniform());
  std::sort(s.data(), s.data() + 3, std::greater<>());
  if (rng.uniform() < 0.5) s(2) = -s(2);
  return haar_random_rotation(rng).matrix() * s.asDiagonal() * haar_random_rotation(rng).matrix().transpose();
}

Mat3 random_matrix(RngStream& rng) {
  Mat3 m;
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = rng.normal();
  return m;
}

}  // namespace

TEST(OptimalB, SolvesItsDefiningEquation) {
  RngStream rng(31);
  for (int t = 0; t < 200; ++t) {
    Vec3 ss(250 * rng.uniform(), 0, 0);
    ss(1) = ss(0) * rng.uniform();
    ss(2) = ss(1) * (2 * rng.uniform() - 1);
    const Vec4 a = detail::bingham_parameters(ss);
    const double b = optimal_b(a);
    double sum = 0.0;
    for (int i = 0; i < 4; ++i) sum += 1.0 / (b + 2.0 * a(i));
    EXPECT_NEAR(sum, 1.0, 1e-10);
    EXPECT_GT(b, 0.0);
    EXPECT_LE(b, 4.0 + 1e-12);
  }
  EXPECT_NEAR(optimal_b(Vec4::Zero()), 4.0, 1e-12);
}

TEST(BinghamParameters, MatchMatrixFisherCorrespondence) {
  const Vec4 a = detail::bingham_parameters(Vec3(5, 3, 1));
  EXPECT_EQ(a, Vec4(0, 8, 12, 16));
  EXPECT_EQ(detail::bingham_parameters(Vec3(2, 2, -2))(1), 0.0);
}

TEST(Envelope, RatioNeverExceedsOne) {
  RngStream rng(32);
  for (int c = 0; c < 30; ++c) {
    Vec3 s(250 * rng.uniform(), 0, 0);
    s(1) = s(0) * rng.uniform();
    s(2) = s(1) * (2 * rng.uniform() - 1);
    const auto p = BinghamParams::from_singular_values(s);
    for (int k = 0; k < 20000; ++k) {
      Vec4 x(rng.normal(), rng.normal(), rng.normal(), rng.normal());
      x.normalize();
      ASSERT_LE(p.acceptance_ratio(x), 1.0 + 1e-9);
    }
  }
}

TEST(Sampler, UniformCaseAcceptsEverything) {
  const auto p = BinghamParams::from_singular_values(Vec3::Zero());
  EXPECT_EQ(p.b, 4.0);
  EXPECT_EQ(p.big_m, 1.0);
  RngStream rng(43);
  Vec4 mean = Vec4::Zero();
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const auto [q, rec] = sample_bingham_quaternion(p, rng);
    EXPECT_EQ(rec.rejected, 0);
    mean += q.x / n;
  }
  EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.02);
}

TEST(Sampler, OptimalProposalAcceptsAtLeastOneInFive) {
  RngStream rng(44);
  for (int c = 0; c < 20; ++c) {
    Vec3 s(50 * rng.uniform(), 0, 0);
    s(1) = s(0) * rng.uniform();
    s(2) = s(1) * (2 * rng.uniform() - 1);
    const auto p = BinghamParams::from_singular_values(s);
    int accepted = 0;
    const int attempts = 10000;
    for (int k = 0; k < attempts; ++k) {
      const Vec4 eps(rng.normal(), rng.normal(), rng.normal(), rng.normal());
      if (rng.uniform() < p.acceptance_ratio(detail::acg_direction(eps, p.omega))) ++accepted;
    }
    EXPECT_GE(accepted, attempts / 5) << s.transpose();
  }
}

TEST(Sampler, ReplayIsBitExact) {
  RngStream rng(33);
  const MatrixFisher d(random_f(rng, 20.0));
  for (int k = 0; k < 100; ++k) {
    const auto [r, rec] = sample_matrix_fisher(d, rng);
    EXPECT_EQ(fixed_noise_resample(d, rec).matrix(), r.matrix());
  }
}

TEST(Sampler, SamplesAreRotationsWithCorrectMean) {
  RngStream rng(34);
  const MatrixFisher d(random_f(rng, 5.0));
  const int n = 100000;
  Mat3 mean = Mat3::Zero();
  for (int k = 0; k < n; ++k) {
    const Mat3 r = sample_matrix_fisher(d, rng).first.matrix();
    ASSERT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    mean += r / n;
  }
  EXPECT_LT((mean - expected_rotation(d)).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Sampler, HighConcentrationStaysNearMode) {
  RngStream rng(35);
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(250, 250, 250));
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) worst = std::max(worst, geodesic_distance(sample_matrix_fisher(d, rng).first, Rotation()));
  EXPECT_LT(worst, 0.5);
}

TEST(Sampler, SameStreamSameDraws) {
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(3, 2, 1));
  RngStream a(36), b(36);
  for (int k = 0; k < 50; ++k) EXPECT_EQ(sample_matrix_fisher(d, a).first, sample_matrix_fisher(d, b).first);
}

TEST(Sampler, StallsWithPoorProposal) {
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(250, 250, 250));
  RngStream rng(37);
  SamplerOptions opts;
  opts.b = 1e-12;
  opts.iteration_cap = 50;
  EXPECT_THROW(sample_matrix_fisher(d, rng, opts), SamplerStall);
}

TEST(FixedNoiseResample, LocallyLipschitz) {
  RngStream rng(45);
  for (int t = 0; t < 100; ++t) {
    const Mat3 f = random_f(rng, 20.0);
    const NoiseRecord rec = sample_matrix_fisher(proper_svd(f), rng).second;
    Mat3 g = f;
    g(t % 3, (t / 3) % 3) += 1e-5;
    const double moved = geodesic_distance(fixed_noise_resample(proper_svd(f), rec),
                                           fixed_noise_resample(proper_svd(g), rec));
    EXPECT_LE(moved, 1e-3);
  }
}

TEST(FixedNoiseResample, FiniteDifferencesConsistentAcrossSteps) {
  RngStream rng(46);
  for (int t = 0; t < 20; ++t) {
    const Mat3 f = random_f(rng, 10.0);
    const NoiseRecord rec = sample_matrix_fisher(proper_svd(f), rng).second;
    const Mat3 w = random_matrix(rng);
    const auto loss = [&](const Mat3& m) { return w.cwiseProduct(fixed_noise_resample(proper_svd(m), rec).matrix()).sum(); };
    for (int e = 0; e < 9; ++e) {
      const auto fd = [&](double h) {
        Mat3 p = f, m = f;
        p(e / 3, e % 3) += h;
        m(e / 3, e % 3) -= h;
        return (loss(p) - loss(m)) / (2 * h);
      };
      const double coarse = fd(1e-4), fine = fd(1e-5);
      EXPECT_NEAR(coarse, fine, 0.01 * std::max(1.0, std::abs(fine)));
    }
  }
}

TEST(FixedNoiseVjp, MatchesFiniteDifferences) {
  RngStream rng(38);
  for (int t = 0; t < 30; ++t) {
    const Mat3 f = random_f(rng, 10.0);
    const ProperSvd svd = proper_svd(f);
    const NoiseRecord rec = sample_matrix_fisher(svd, rng).second;
    const Mat3 w = random_matrix(rng);  // L = <W, R>
    const Mat3 g = fixed_noise_vjp(svd, rec, w);
    Mat3 fd;
    for (int e = 0; e < 9; ++e) {
      const double h = 1e-6;
      Mat3 p = f, m = f;
      p(e / 3, e % 3) += h;
      m(e / 3, e % 3) -= h;
      const double lp = w.cwiseProduct(fixed_noise_resample(proper_svd(p), rec).matrix()).sum();
      const double lm = w.cwiseProduct(fixed_noise_resample(proper_svd(m), rec).matrix()).sum();
      fd(e / 3, e % 3) = (lp - lm) / (2 * h);
    }
    EXPECT_LT((g - fd).norm(), 1e-5 * std::max(1.0, fd.norm())) << "case " << t;
  }
}

TEST(FixedNoiseVjp, FixedProposalParameter) {
  RngStream rng(39);
  SamplerOptions opts;
  opts.b = 2.5;
  const Mat3 f = random_f(rng, 5.0);
  const ProperSvd svd = proper_svd(f);
  const NoiseRecord rec = sample_matrix_fisher(svd, rng, opts).second;
  const Mat3 w = random_matrix(rng);
  const Mat3 g = fixed_noise_vjp(svd, rec, w, opts);
  for (int e = 0; e < 9; ++e) {
    const double h = 1e-6;
    Mat3 p = f, m = f;
    p(e / 3, e % 3) += h;
    m(e / 3, e % 3) -= h;
    const double fd = (w.cwiseProduct(fixed_noise_resample(proper_svd(p), rec, opts).matrix()).sum() -
                       w.cwiseProduct(fixed_noise_resample(proper_svd(m), rec, opts).matrix()).sum()) /
                      (2 * h);
    EXPECT_NEAR(g(e / 3, e % 3), fd, 1e-5);
  }
}

TEST(ModeVjp, MatchesFiniteDifferences) {
  RngStream rng(40);
  for (int t = 0; t < 20; ++t) {
    const Mat3 f = random_f(rng, 10.0);
    const Mat3 w = random_matrix(rng);
    const Mat3 g = mode_vjp(proper_svd(f), w);
    const auto mode_of = [](const Mat3& m) {
      const ProperSvd s = proper_svd(m);
      return Mat3(s.u.matrix() * s.v.matrix().transpose());
    };
    for (int e = 0; e < 9; ++e) {
      const double h = 1e-6;
      Mat3 p = f, m = f;
      p(e / 3, e % 3) += h;
      m(e / 3, e % 3) -= h;
      const double fd = (w.cwiseProduct(mode_of(p)).sum() - w.cwiseProduct(mode_of(m)).sum()) / (2 * h);
      EXPECT_NEAR(g(e / 3, e % 3), fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

// The frame adjoints and the dL/dF route must describe the same derivative
// in chart coordinates.
TEST(FrameAdjoint, AgreesWithChartOfFullGradient) {
  RngStream rng(41);
  for (int t = 0; t < 30; ++t) {
    const ProperSvd svd = proper_svd(random_f(rng, 10.0));
    const NoiseRecord rec = sample_matrix_fisher(svd, rng).second;
    const Mat3 w = random_matrix(rng);
    const detail::SvdChart chart(svd);
    const auto via_frames = chart.gradient(fixed_noise_frame_vjp(svd, rec, w));
    const auto via_f = chart.gradient(fixed_noise_vjp(svd, rec, w));
    EXPECT_LT((via_frames - via_f).norm(), 1e-8 * std::max(1.0, via_f.norm()));
    const auto mode_frames = chart.gradient(mode_frame_vjp(svd, w));
    const auto mode_f = chart.gradient(mode_vjp(svd, w));
    EXPECT_LT((mode_frames - mode_f).norm(), 1e-8 * std::max(1.0, mode_f.norm()));
  }
}

TEST(FrameAdjoint, MatchesChartFiniteDifferences) {
  RngStream rng(42);
  for (int t = 0; t < 20; ++t) {
    const ProperSvd svd = proper_svd(random_f(rng, 10.0));
    const NoiseRecord rec = sample_matrix_fisher(svd, rng).second;
    const Mat3 w = random_matrix(rng);
    const detail::SvdChart chart(svd);
    const auto g = chart.gradient(fixed_noise_frame_vjp(svd, rec, w));
    for (int c = 0; c < 9; ++c) {
      const double h = 1e-6;
      Eigen::Matrix<double, 9, 1> step = Eigen::Matrix<double, 9, 1>::Zero();
      step(c) = h;
      // Sample in the chart's own frames so only the coordinate changes.
      const auto loss = [&](const Mat3& f) {
        ProperSvd moved = detail::align_svd(proper_svd(f), svd);
        return w.cwiseProduct(fixed_noise_resample(moved, rec).matrix()).sum();
      };
      const double fd = (loss(chart.retract(step)) - loss(chart.retract(-step))) / (2 * h);
      EXPECT_NEAR(g(c), fd, 1e-5 * std::max(1.0, std::abs(fd))) << "case " << t << " coord " << c;
    }
  }
}

TEST(OptimalB, ClosedFormCase) {
  // 1/b + 3/(b + 4) = 1 gives b^2 = 4.
  EXPECT_NEAR(optimal_b(Vec4(0, 2, 2, 2)), 2.0, 1e-12);
  RngStream rng(47);
  for (int t = 0; t < 100; ++t) {
    const Vec4 a(0, 100 * rng.uniform(), 100 * rng.uniform(), 100 * rng.uniform());
    const double b = optimal_b(a);
    double sum = 0.0;
    for (int i = 0; i < 4; ++i) sum += 1.0 / (b + 2.0 * a(i));
    EXPECT_NEAR(sum, 1.0, 1e-10);
  }
}

TEST(BinghamSampler, ConcentratesOnZeroEigenvalueAxis) {
  const auto p = BinghamParams::from_a(Vec4(0, 200, 200, 200));
  RngStream rng(48);
  int near = 0;
  for (int k = 0; k < 10000; ++k)
    if (std::abs(sample_bingham_quaternion(p, rng).first.x(0)) > 0.95) ++near;
  EXPECT_GE(near, 9900);
}

TEST(Sampler, UniformTraceDistribution) {
  RngStream rng(49);
  const int n = 100000;
  std::vector<double> traces(n);
  for (double& t : traces) t = sample_matrix_fisher(MatrixFisher(), rng).first.matrix().trace();
  std::sort(traces.begin(), traces.end());
  // Haar angle CDF (theta - sin theta) / pi; trace 1 + 2 cos theta.
  double ks = 0.0;
  for (int k = 0; k < n; ++k) {
    const double th = std::acos(std::clamp((traces[k] - 1.0) / 2.0, -1.0, 1.0));
    const double f = 1.0 - (th - std::sin(th)) / std::numbers::pi;
    ks = std::max({ks, std::abs(f - double(k) / n), std::abs(f - double(k + 1) / n)});
  }
  EXPECT_LE(ks, 0.02);
}

TEST(Sampler, HundredTimesIdentityStaysWithinPointThreeRadians) {
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(100, 100, 100));
  RngStream rng(50);
  int near = 0;
  for (int k = 0; k < 10000; ++k)
    if (geodesic_distance(sample_matrix_fisher(d, rng).first, Rotation()) < 0.3) ++near;
  EXPECT_GE(near, 9900);
}

TEST(Sampler, DiagonalMeanMatchesQuadrature) {
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(2, 1, 0.5));
  RngStream rng(51);
  Mat3 mean = Mat3::Zero();
  for (int k = 0; k < 50000; ++k) mean += sample_matrix_fisher(d, rng).first.matrix() / 50000.0;
  EXPECT_LT((mean - expected_rotation(d)).cwiseAbs().maxCoeff(), 0.01);
}
