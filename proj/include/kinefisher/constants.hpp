#pragma once

#include <cstdlib>
#include <string>

namespace kinefisher {

/// Numerical knobs shared by every module. Property tests read the same values.
struct Tolerances {
  /// Orthonormality / determinant check for Rotation.
  double rotation = 1e-9;
  /// Unit-norm check for quaternions handed to the public API.
  double quaternion_norm = 1e-9;
  /// Reconstruction error allowed for proper_svd.
  double svd_reconstruction = 1e-8;
  /// Relative gap below which two singular values are treated as equal.
  double svd_degenerate = 1e-10;
  /// Row-sum check for regressor and skinning weights.
  double stochastic_rows = 1e-9;
  /// Residual for the optimal proposal parameter b.
  double optimal_b_residual = 1e-10;
  /// Moment matching tolerance for mle_fit.
  double mle_moment = 1e-10;
  /// Bisection tolerance on singular values (mle fallback path).
  double mle_bisection = 1e-8;
};

inline constexpr Tolerances kTol{};

/// Upper bound on proper singular values; exp(2 * 250) is still representable.
inline constexpr double kConcentrationCap = 250.0;

/// Default Gauss-Legendre order per hyperspherical angle.
inline constexpr int kDefaultQuadratureOrder = 64;

/// Rejection sampler iteration cap.
inline constexpr int kSamplerIterationCap = 1000;

/// Shape coefficients in the toy model.
inline constexpr int kDefaultNumBetas = 10;

inline constexpr int kSchemaVersion = 1;

inline std::string library_version() {
#ifdef KINEFISHER_VERSION
  return KINEFISHER_VERSION;
#else
  return "0.1.0";
#endif
}

/// Quadrature order, overridable through KINEFISHER_QUADRATURE_ORDER.
inline int default_quadrature_order() {
  static const int order = [] {
    if (const char* env = std::getenv("KINEFISHER_QUADRATURE_ORDER")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end != env && v >= 8 && v <= 512) return static_cast<int>(v);
    }
    return kDefaultQuadratureOrder;
  }();
  return order;
}

}  // namespace kinefisher
