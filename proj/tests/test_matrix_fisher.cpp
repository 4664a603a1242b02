#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "kinefisher/matrix_fisher.hpp"
#include "kinefisher/quadrature.hpp"
#include "kinefisher/sampler.hpp"

using namespace kinefisher;

namespace {

// One-dimensional Bessel representation of the normalizer for F = diag(s):
//   c = int_{-1}^{1} 1/2 I0((s1 - s2)(1 - u) / 2) I0((s1 + s2)(1 + u) / 2) exp(s3 u) du,
// integrated with composite Simpson in log space.
double bessel_log_c(const Vec3& s, int intervals = 20000) {
  const auto log_i0 = [](double x) {
    x = std::abs(x);
    if (x < 600.0) return std::log(std::cyl_bessel_i(0.0, x));
    return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log1p(1.0 / (8.0 * x));
  };
  const auto log_f = [&](double u) {
    return std::log(0.5) + log_i0(0.5 * (s(0) - s(1)) * (1.0 - u)) + log_i0(0.5 * (s(0) + s(1)) * (1.0 + u)) +
           s(2) * u;
  };
  const double h = 2.0 / intervals;
  std::vector<double> lf(intervals + 1);
  double top = -1e300;
  for (int i = 0; i <= intervals; ++i) {
    lf[i] = log_f(-1.0 + i * h);
    top = std::max(top, lf[i]);
  }
  double sum = 0.0;
  for (int i = 0; i <= intervals; ++i) {
    const double w = (i == 0 || i == intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    sum += w * std::exp(lf[i] - top);
  }
  return top + std::log(sum * h / 3.0);
}

Mat3 random_f(RngStream& rng, double top) {
  Vec3 s(top * rng.uniform(), top * rng.uniform(), top * rng.uniform());
  std::sort(s.data(), s.data() + 3, std::greater<>());
  if (rng.uniform() < 0.5) s(2) = -s(2);
  return haar_random_rotation(rng).matrix() * s.asDiagonal() * haar_random_rotation(rng).matrix().transpose();
}

}  // namespace

TEST(LogNormConst, ZeroIsExactlyZero) {
  EXPECT_EQ(log_norm_const(Vec3::Zero()), 0.0);
  EXPECT_EQ(MatrixFisher().log_c(), 0.0);
}

TEST(LogNormConst, MatchesBesselIntegral) {
  const std::vector<Vec3> cases{{0.1, 0.05, 0.01}, {1, 1, 1},       {3, 2, 1},       {2, 2, -1},
                                {10, 1, 0.5},       {10, 10, -10},   {50, 20, 5},     {100, 50, -20},
                                {250, 250, 250},    {250, 1, 0},     {250, 250, -250}, {0.5, 0, 0}};
  for (const Vec3& s : cases) {
    const double ref = bessel_log_c(s);
    EXPECT_NEAR(log_norm_const(s), ref, 1e-9 * std::max(1.0, std::abs(ref))) << s.transpose();
  }
}

TEST(LogNormConst, LowOrderStillAccurate) {
  for (const Vec3& s : {Vec3(5, 3, 1), Vec3(40, 20, -10), Vec3(200, 100, 50)}) {
    EXPECT_NEAR(log_norm_const(s, 16), bessel_log_c(s), 1e-4 * std::max(1.0, bessel_log_c(s)));
  }
}

TEST(LogNormConst, InvariantUnderPermutationAndPairedSignFlips) {
  const Vec3 s(4, 2, 1);
  const double ref = log_norm_const(s);
  EXPECT_NEAR(log_norm_const(Vec3(2, 4, 1)), ref, 1e-12);
  EXPECT_NEAR(log_norm_const(Vec3(1, 2, 4)), ref, 1e-12);
  EXPECT_NEAR(log_norm_const(Vec3(-4, -2, 1)), ref, 1e-12);
  EXPECT_NEAR(log_norm_const(Vec3(4, -2, -1)), ref, 1e-12);
  // A single sign flip changes the distribution.
  EXPECT_GT(std::abs(log_norm_const(Vec3(4, 2, -1)) - ref), 1e-3);
}

TEST(LogNormConst, RejectsConcentrationBeyondCap) {
  EXPECT_THROW(log_norm_const(Vec3(kConcentrationCap * 1.01, 0, 0)), ConcentrationOverflow);
}

TEST(Moments, MeanIsDerivativeOfBesselLogC) {
  for (const Vec3& s : {Vec3(3, 2, 1), Vec3(10, 1, -0.5), Vec3(60, 30, 10), Vec3(2, 2, 2)}) {
    const FisherMoments m = fisher_moments(s);
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-4 * std::max(1.0, s(k));
      Vec3 p = s, q = s;
      p(k) += h;
      q(k) -= h;
      const double fd = (bessel_log_c(p) - bessel_log_c(q)) / (2 * h);
      EXPECT_NEAR(m.mean(k), fd, 1e-6) << s.transpose() << " k=" << k;
    }
  }
}

TEST(Moments, CovarianceIsDerivativeOfMean) {
  const Vec3 s(6, 3, -1);
  const FisherMoments m = fisher_moments(s);
  for (int k = 0; k < 3; ++k) {
    const double h = 1e-4;
    Vec3 p = s, q = s;
    p(k) += h;
    q(k) -= h;
    const Vec3 fd = (fisher_moments(p).mean - fisher_moments(q).mean) / (2 * h);
    EXPECT_LT((fd - m.cov.col(k)).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_LT((m.cov - m.cov.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_GT(Eigen::SelfAdjointEigenSolver<Mat3>(m.cov).eigenvalues().minCoeff(), 0.0);
}

TEST(MatrixFisher, ExpectedRotationMatchesMonteCarlo) {
  RngStream rng(21);
  const Mat3 f = random_f(rng, 4.0);
  const MatrixFisher d(f);
  // Importance weights against Haar draws; an estimator that never calls the sampler.
  Mat3 num = Mat3::Zero();
  double den = 0.0;
  const int n = 400000;
  for (int k = 0; k < n; ++k) {
    const Rotation r = haar_random_rotation(rng);
    const double w = std::exp((f.transpose() * r.matrix()).trace() - 12.0);
    num += w * r.matrix();
    den += w;
  }
  EXPECT_LT((num / den - expected_rotation(d)).cwiseAbs().maxCoeff(), 0.02);
}

TEST(MatrixFisher, LogPdfIntegratesToOne) {
  RngStream rng(22);
  const MatrixFisher d(random_f(rng, 3.0));
  const int n = 400000;
  double sum = 0.0, sum2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double p = std::exp(log_pdf(haar_random_rotation(rng), d));
    sum += p;
    sum2 += p * p;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_NEAR(mean, 1.0, 4.0 * se);
}

TEST(MatrixFisher, ModeMaximizesDensity) {
  RngStream rng(23);
  for (int t = 0; t < 20; ++t) {
    const MatrixFisher d(random_f(rng, 8.0));
    const Rotation m = mode(d);
    const double peak = log_pdf(m, d);
    for (int k = 0; k < 50; ++k) {
      const Rotation r = m * axis_angle_to_matrix({Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.1});
      EXPECT_LE(log_pdf(r, d), peak + 1e-12);
    }
  }
  EXPECT_THROW(mode(MatrixFisher()), ModeUndefined);
}

TEST(MatrixFisher, ConcentrationsArePairSums) {
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(5, 3, -1));
  const Vec3 k = concentrations(d).k;
  EXPECT_EQ(k, Vec3(2, 4, 8));
}

TEST(KlToUniform, NonnegativeZeroAtUniformAndGradientMatches) {
  EXPECT_EQ(kl_to_uniform(MatrixFisher()), 0.0);
  RngStream rng(24);
  for (int t = 0; t < 10; ++t) {
    const Mat3 f = random_f(rng, 10.0);
    const MatrixFisher d(f);
    EXPECT_GE(kl_to_uniform(d), 0.0);
    const Mat3 g = kl_to_uniform_gradient(d);
    for (int e = 0; e < 9; ++e) {
      const double h = 1e-5;
      Mat3 p = f, m = f;
      p(e / 3, e % 3) += h;
      m(e / 3, e % 3) -= h;
      const double fd = (kl_to_uniform(MatrixFisher(p)) - kl_to_uniform(MatrixFisher(m))) / (2 * h);
      EXPECT_NEAR(g(e / 3, e % 3), fd, 1e-6);
    }
  }
}

TEST(KlToUniform, MatchesMonteCarloOfLogDensity) {
  RngStream rng(25);
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(3, 2, 0.5));
  double kl = 0.0;
  const int n = 100000;
  for (int k = 0; k < n; ++k) kl += log_pdf(sample_matrix_fisher(d, rng).first, d) / n;
  EXPECT_NEAR(kl, kl_to_uniform(d), 0.01);
}

TEST(MleFit, MatchesSampleMeanExactly) {
  RngStream rng(26);
  const MatrixFisher truth(random_f(rng, 6.0));
  std::vector<Rotation> samples;
  for (int k = 0; k < 2000; ++k) samples.push_back(sample_matrix_fisher(truth, rng).first);
  Mat3 mean = Mat3::Zero();
  for (const auto& r : samples) mean += r.matrix() / samples.size();
  const MatrixFisher fit = mle_fit(samples);
  EXPECT_LT((expected_rotation(fit) - mean).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(geodesic_distance(mode(fit), mode(truth)), 0.1);
}

TEST(MleFit, IdenticalSamplesHitTheCap) {
  const Rotation r = axis_angle_to_matrix({Vec3(0.3, -0.2, 0.1)});
  const std::vector<Rotation> samples(10, r);
  const MatrixFisher fit = mle_fit(samples);
  EXPECT_NEAR(fit.singular_values()(0), kConcentrationCap, 1e-6);
  EXPECT_LT(geodesic_distance(mode(fit), r), 1e-9);
}

TEST(MleFit, NeedsTwoSamples) {
  const std::vector<Rotation> one(1);
  EXPECT_THROW(mle_fit(one), InvalidArgument);
}

TEST(ClipConcentration, ProjectsOntoCap) {
  const Mat3 f = Vec3(400, 10, -300).asDiagonal();
  const Vec3 s = proper_svd(clip_concentration(f)).s;
  EXPECT_NEAR(s(0), kConcentrationCap, 1e-9);
  EXPECT_NEAR(s(1), kConcentrationCap, 1e-9);
  const Mat3 g = Vec3(3, 2, 1).asDiagonal();
  EXPECT_EQ(clip_concentration(g), g);
}

TEST(Quadrature, GaussLegendreIntegratesPolynomialsExactly) {
  const auto& gl = quadrature::gauss_legendre(10);
  for (int p = 0; p < 20; ++p) {
    double sum = 0.0;
    for (int i = 0; i < 10; ++i) sum += gl.weights[i] * std::pow(gl.nodes[i], p);
    const double exact = p % 2 == 1 ? 0.0 : 2.0 / (p + 1);
    EXPECT_NEAR(sum, exact, 1e-14) << p;
  }
}

TEST(LogNormConst, MatchesHaarMonteCarlo) {
  RngStream rng(27);
  for (const Vec3& s : {Vec3(3, 2, 1), Vec3(5, 5, 5)}) {
    // c = E_Haar[exp(tr(diag(s) R))], shifted by sum(s) for range.
    const int n = 1000000;
    const double shift = s.sum();
    double sum = 0.0, sum2 = 0.0;
    for (int k = 0; k < n; ++k) {
      const double w = std::exp(s.dot(haar_random_rotation(rng).matrix().diagonal()) - shift);
      sum += w;
      sum2 += w * w;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n) / mean;  // in log space
    EXPECT_NEAR(log_norm_const(s), shift + std::log(mean), 3.0 * se) << s.transpose();
  }
}

TEST(LogPdf, HandWorkedValues) {
  RngStream rng(1);
  EXPECT_EQ(log_pdf(haar_random_rotation(rng), MatrixFisher()), 0.0);
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(3, 2, 1));
  EXPECT_NEAR(log_pdf(Rotation(), d), 6.0 - log_norm_const(Vec3(3, 2, 1)), 1e-12);
}

TEST(LogPdf, ModeDominatesHaarCandidates) {
  RngStream rng(28);
  const MatrixFisher d(random_f(rng, 10.0));
  const double peak = log_pdf(mode(d), d);
  for (int k = 0; k < 100000; ++k) ASSERT_LE(log_pdf(haar_random_rotation(rng), d), peak);
}

TEST(LogPdf, FrameInvariance) {
  RngStream rng(29);
  for (int t = 0; t < 20; ++t) {
    const Mat3 f = random_f(rng, 8.0);
    const Rotation q = haar_random_rotation(rng), r = haar_random_rotation(rng);
    EXPECT_NEAR(log_pdf(r, MatrixFisher(f)), log_pdf(q * r, MatrixFisher(q.matrix() * f)), 1e-9);
  }
}

TEST(Mode, HandWorkedExamples) {
  EXPECT_LT(geodesic_distance(mode(MatrixFisher::from_singular_values(Vec3(3, 2, 1))), Rotation()), 1e-12);
  const Rotation rz = axis_angle_to_matrix({Vec3(0, 0, std::numbers::pi / 2)});
  const MatrixFisher d(rz.matrix() * Vec3(2, 1, 0.5).asDiagonal());
  EXPECT_LT(geodesic_distance(mode(d), rz), 1e-12);
}

TEST(Concentrations, HandWorkedExamples) {
  // diag(1,2,3) is stored with descending singular values, so each
  // concentration is matched to the coordinate axis its principal axis spans.
  const MatrixFisher d(Mat3(Vec3(1, 2, 3).asDiagonal()));
  const Vec3 k = concentrations(d).k;
  const Vec3 expected(5, 4, 3);
  for (int axis = 0; axis < 3; ++axis) {
    int col = 0;
    d.svd().u.matrix().row(axis).cwiseAbs().maxCoeff(&col);
    EXPECT_EQ(k(col), expected(axis)) << axis;
  }
  EXPECT_EQ(concentrations(MatrixFisher()).k, Vec3::Zero());
  EXPECT_EQ(concentrations(MatrixFisher::from_singular_values(Vec3(5, 5, -4))).k, Vec3(1, 1, 10));
}

// Larger concentration about an axis means less spread of rotations about it.
TEST(Concentrations, OrderSpreadAboutPrincipalAxes) {
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(5, 3, 1));  // k = (4, 6, 8)
  RngStream rng(30);
  Vec3 var = Vec3::Zero();
  const int n = 10000;
  for (int k = 0; k < n; ++k) {
    const Vec3 v = matrix_to_axis_angle(sample_matrix_fisher(d, rng).first).v;
    var += v.cwiseProduct(v) / n;
  }
  EXPECT_GT(var(0), var(1));
  EXPECT_GT(var(1), var(2));
}

TEST(ExpectedRotation, HighConcentrationAndSampleMeans) {
  EXPECT_EQ(expected_rotation(MatrixFisher()), Mat3::Zero());
  RngStream rng(31);
  const MatrixFisher tight = MatrixFisher::from_singular_values(Vec3(50, 50, 50));
  const Mat3 et = expected_rotation(tight);
  EXPECT_LT((et - Mat3::Identity()).cwiseAbs().maxCoeff(), 0.05);
  Mat3 mean = Mat3::Zero();
  for (int k = 0; k < 100000; ++k) mean += sample_matrix_fisher(tight, rng).first.matrix() / 100000.0;
  EXPECT_LT((mean - et).cwiseAbs().maxCoeff(), 0.01);

  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(2, 1, 0.5));
  const Mat3 e = expected_rotation(d);
  EXPECT_EQ(Mat3(e.diagonal().asDiagonal()), e);
  mean.setZero();
  for (int k = 0; k < 50000; ++k) mean += sample_matrix_fisher(d, rng).first.matrix() / 50000.0;
  EXPECT_LT((mean - e).cwiseAbs().maxCoeff(), 0.01);
}

TEST(MleFit, HaarSamplesGiveNearUniform) {
  RngStream rng(32);
  std::vector<Rotation> samples;
  for (int k = 0; k < 100000; ++k) samples.push_back(haar_random_rotation(rng));
  // Near zero E[Q_ii] ~ s_i / 3, and the sample mean of n Haar draws has
  // entry std 1/sqrt(3n), so the fitted s sits near 3 * 3.5 / sqrt(3n).
  EXPECT_LT(mle_fit(samples).singular_values().cwiseAbs().maxCoeff(), 0.05);
  samples.resize(10000);
  EXPECT_LT(mle_fit(samples).singular_values().cwiseAbs().maxCoeff(), 2.0 * 3.0 * 3.5 / std::sqrt(3.0e4));
}

TEST(MleFit, RecoversDiagonalParameter) {
  RngStream rng(33);
  const MatrixFisher truth = MatrixFisher::from_singular_values(Vec3(4, 2, 1));
  std::vector<Rotation> samples;
  for (int k = 0; k < 10000; ++k) samples.push_back(sample_matrix_fisher(truth, rng).first);
  const MatrixFisher fit = mle_fit(samples);
  EXPECT_LT(geodesic_distance(mode(fit), Rotation()) * 180.0 / std::numbers::pi, 2.0);
  const Vec3 rel = (fit.singular_values() - Vec3(4, 2, 1)).cwiseQuotient(Vec3(4, 2, 1));
  EXPECT_LT(rel.cwiseAbs().maxCoeff(), 0.1);
}

TEST(KlToUniform, IdentityMatchesMonteCarloAndGrowsAlongRay) {
  const MatrixFisher d = MatrixFisher::from_singular_values(Vec3(1, 1, 1));
  RngStream rng(34);
  const int n = 1000000;
  double sum = 0.0, sum2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double l = log_pdf(sample_matrix_fisher(d, rng).first, d);
    sum += l;
    sum2 += l * l;
  }
  const double mean = sum / n;
  EXPECT_NEAR(kl_to_uniform(d), mean, 3.0 * std::sqrt((sum2 / n - mean * mean) / n));
  double prev = 0.0;
  for (double t : {0.5, 1.0, 2.0, 4.0}) {
    const double v = kl_to_uniform(MatrixFisher::from_singular_values(Vec3(t, t, t)));
    EXPECT_GT(v, prev);
    prev = v;
  }
}
