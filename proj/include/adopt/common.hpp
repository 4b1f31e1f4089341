// Shared numerics: error types, deterministic RNG streams, linear-algebra
// helpers and the special functions used across the estimation modules.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace adopt {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed filter tuning (non-finite lambda, L + lambda <= 0).
struct InvalidTuningError : Error {
  using Error::Error;
};

/// Covariance not factorizable even after jitter.
struct DegenerateCovarianceError : Error {
  using Error::Error;
};

/// Innovation covariance not invertible.
struct SingularInnovationError : Error {
  using Error::Error;
};

/// Covariance input violates PSD/symmetry requirements.
struct InvalidCovarianceError : Error {
  using Error::Error;
};

/// Input data too degenerate for the requested computation.
struct DegenerateInputError : Error {
  using Error::Error;
};

/// File/schema/referential-integrity problems during ingest.
struct DataError : Error {
  using Error::Error;
};

/// Bad command-line or configuration usage.
struct UsageError : Error {
  using Error::Error;
};

/// Numerical failure during estimation (propagated to CLI exit code 3).
struct NumericalError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derive an independent stream id from a base seed and up to three indices.
/// Parallel and serial execution over the same (seed, a, b, c) tuples see
/// identical streams.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t a,
                                std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = splitmix64(seed ^ 0x3c6ef372fe94f82bULL);
  h = splitmix64(h ^ splitmix64(a));
  h = splitmix64(h ^ splitmix64(b));
  h = splitmix64(h ^ splitmix64(c));
  return h;
}

/// Deterministic random source. Wraps a 64-bit xorshift-family engine and
/// hand-rolled variate transforms so draws are reproducible bit-for-bit for a
/// given seed independent of the standard library in use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x1234567890abcdefULL)) {
    if (state_ == 0) state_ = 0x9e3779b97f4a7c15ULL;
  }

  std::uint64_t next_u64() {
    // xorshift64*
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545f4914f6cdd1dULL;
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller (pair cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  VectorXd normal_vector(Eigen::Index n) {
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  /// Gamma(shape, scale) via Marsaglia-Tsang, boosted for shape < 1.
  double gamma(double shape, double scale = 1.0) {
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
    }
  }

  double chi_squared(double df) { return gamma(0.5 * df, 2.0); }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  /// Sample an index proportional to the given non-negative weights.
  int categorical(const VectorXd& weights) {
    const double total = weights.sum();
    double u = uniform() * total;
    for (Eigen::Index k = 0; k < weights.size(); ++k) {
      u -= weights[k];
      if (u <= 0.0) return static_cast<int>(k);
    }
    return static_cast<int>(weights.size() - 1);
  }

  /// Sample an index from unnormalized log-weights.
  int categorical_log(const VectorXd& log_weights) {
    const double m = log_weights.maxCoeff();
    VectorXd w = (log_weights.array() - m).exp();
    return categorical(w);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Linear algebra helpers
// ---------------------------------------------------------------------------

inline void symmetrize(MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

inline bool is_symmetric(const MatrixXd& m, double tol = 1e-10) {
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

/// Lower Cholesky factor with a single jitter retry (1e-10 * trace added to
/// the diagonal). Throws DegenerateCovarianceError if the retry also fails.
/// An exactly-zero matrix short-circuits to a zero factor.
inline MatrixXd cholesky_with_jitter(const MatrixXd& m) {
  if (m.isZero(0.0)) return MatrixXd::Zero(m.rows(), m.cols());
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  const double jitter = 1e-10 * m.trace();
  MatrixXd repaired = m;
  repaired.diagonal().array() += std::max(jitter, 1e-300);
  Eigen::LLT<MatrixXd> retry(repaired);
  if (retry.info() == Eigen::Success) return retry.matrixL();
  throw DegenerateCovarianceError("covariance not positive definite after jitter");
}

/// Inverse and log-determinant of a symmetric matrix with eigenvalues floored
/// at `floor_ev` before inversion.
struct SymmetricInverse {
  MatrixXd inverse;
  double log_det = 0.0;
};

inline SymmetricInverse floored_inverse(const MatrixXd& m, double floor_ev = 1e-12) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  if (es.info() != Eigen::Success)
    throw SingularInnovationError("eigendecomposition failed");
  VectorXd ev = es.eigenvalues().cwiseMax(floor_ev);
  SymmetricInverse out;
  out.inverse = es.eigenvectors() * ev.cwiseInverse().asDiagonal() *
                es.eigenvectors().transpose();
  out.log_det = ev.array().log().sum();
  return out;
}

/// Log-density of N(mean, cov) at x, eigenvalue-floored for stability.
inline double mvn_logpdf(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
  const auto inv = floored_inverse(cov);
  const VectorXd d = x - mean;
  const double quad = d.dot(inv.inverse * d);
  constexpr double log2pi = 1.8378770664093454836;
  return -0.5 * (static_cast<double>(x.size()) * log2pi + inv.log_det + quad);
}

/// Log-density using a precomputed lower Cholesky factor of the covariance.
inline double mvn_logpdf_chol(const VectorXd& x, const VectorXd& mean, const MatrixXd& chol_l) {
  const VectorXd z = chol_l.triangularView<Eigen::Lower>().solve(x - mean);
  constexpr double log2pi = 1.8378770664093454836;
  const double log_det = 2.0 * chol_l.diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * log2pi + log_det + z.squaredNorm());
}

inline double logsumexp(const VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

inline double log_multivariate_gamma(int d, double x) {
  double s = 0.25 * d * (d - 1) * std::log(std::numbers::pi);
  for (int i = 1; i <= d; ++i) s += std::lgamma(x + 0.5 * (1.0 - i));
  return s;
}

/// Regularized lower incomplete gamma P(a, x) by series/continued fraction.
inline double gamma_p(double a, double x) {
  if (x <= 0.0) return 0.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 500; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + a * std::log(x) - lg);
  }
  // Lentz continued fraction for Q(a, x)
  double b = x + 1.0 - a, c = 1e308, d = 1.0 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - lg) * h;
}

inline double chi_squared_cdf(double x, double df) { return gamma_p(0.5 * df, 0.5 * x); }

/// Regularized incomplete beta I_x(a, b) via Lentz continued fraction.
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const bool swap = x > (a + 1.0) / (a + b + 2.0);
  if (swap) return 1.0 - incomplete_beta(b, a, 1.0 - x);
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < 1e-300) d = 1e-300;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m < 500; ++m) {
    const int m2 = 2 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = 1.0 + num / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = 1.0 + num / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return std::exp(ln_front) * h / a;
}

inline double student_t_cdf(double t, double df) {
  const double x = df / (df + t * t);
  const double p = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
  return t > 0.0 ? 1.0 - p : p;
}

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

/// Empirical quantile with linear interpolation between order statistics:
/// h = (n - 1) p, result = x[floor(h)] + (h - floor(h)) (x[floor(h)+1] - x[floor(h)]).
/// `sorted` must be ascending and non-empty.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double h = static_cast<double>(n - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= n) return sorted[n - 1];
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

constexpr double kEulerGamma = 0.57721566490153286060;

}  // namespace adopt
