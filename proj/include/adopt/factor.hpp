// Principal-component factor extraction with varimax rotation for the
// category-characteristics panel.
#pragma once

#include <string>
#include <vector>

#include "adopt/common.hpp"

namespace adopt::factor {

/// Category-by-week characteristics, one row per (category, week).
struct FeaturePanel {
  MatrixXd values;            // n x 9
  std::vector<int> category;  // n
  std::vector<int> week;      // n

  static constexpr int kColumns = 9;
  static const std::array<const char*, kColumns>& column_names() {
    static const std::array<const char*, kColumns> names = {
        "avg_file_size", "featured_rate", "avg_price",  "var_price",       "n_paid",
        "n_free",        "free_paid_ratio", "avg_tenure", "n_total"};
    return names;
  }
};

struct Solution {
  MatrixXd loadings;       // p x k (rotated if varimax applied)
  MatrixXd scores;         // n x k, unit variance columns
  VectorXd uniquenesses;   // p, diagonal of the noise covariance
  VectorXd eigenvalues;    // all p eigenvalues, descending
  double variance_explained = 0.0;
};

/// Varimax criterion: sum over columns of the variance of squared loadings.
inline double varimax_criterion(const MatrixXd& loadings) {
  const auto p = static_cast<double>(loadings.rows());
  double total = 0.0;
  for (Eigen::Index m = 0; m < loadings.cols(); ++m) {
    const auto sq = loadings.col(m).array().square();
    total += (sq - sq.mean()).square().sum() / p;
  }
  return total;
}

/// Orthogonal varimax rotation by pairwise Jacobi sweeps. Communalities (row
/// sums of squared loadings) are preserved; columns are sign-flipped so the
/// largest-magnitude loading in each is positive.
inline MatrixXd varimax(const MatrixXd& loadings, double tol = 1e-8, int max_sweeps = 200) {
  MatrixXd rotated = loadings;
  const auto p = static_cast<double>(rotated.rows());
  double previous = varimax_criterion(rotated);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    for (Eigen::Index a = 0; a + 1 < rotated.cols(); ++a) {
      for (Eigen::Index b = a + 1; b < rotated.cols(); ++b) {
        const VectorXd x = rotated.col(a);
        const VectorXd y = rotated.col(b);
        const VectorXd u = x.array().square() - y.array().square();
        const VectorXd v = 2.0 * x.array() * y.array();
        const double su = u.sum();
        const double sv = v.sum();
        const double num = 2.0 * (u.dot(v) - su * sv / p);
        const double den = (u.squaredNorm() - v.squaredNorm()) - (su * su - sv * sv) / p;
        const double angle = 0.25 * std::atan2(num, den);
        if (std::abs(angle) < 1e-14) continue;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        rotated.col(a) = c * x + s * y;
        rotated.col(b) = -s * x + c * y;
      }
    }
    const double current = varimax_criterion(rotated);
    if (current - previous < tol) break;
    previous = current;
  }
  for (Eigen::Index m = 0; m < rotated.cols(); ++m) {
    Eigen::Index peak;
    rotated.col(m).cwiseAbs().maxCoeff(&peak);
    if (rotated(peak, m) < 0.0) rotated.col(m) = -rotated.col(m);
  }
  return rotated;
}

/// Columns z-scored over the pooled panel. Constant columns are rejected.
inline MatrixXd standardize(const MatrixXd& values) {
  const Eigen::Index n = values.rows();
  MatrixXd z(n, values.cols());
  for (Eigen::Index c = 0; c < values.cols(); ++c) {
    const double mean = values.col(c).mean();
    const double var = (values.col(c).array() - mean).square().sum() / static_cast<double>(n - 1);
    if (var <= 0.0)
      throw DegenerateInputError("constant column at index " + std::to_string(c) +
                                 " cannot be standardized");
    z.col(c) = (values.col(c).array() - mean) / std::sqrt(var);
  }
  return z;
}

inline MatrixXd correlation_matrix(const MatrixXd& values) {
  const MatrixXd z = standardize(values);
  MatrixXd corr = z.transpose() * z / static_cast<double>(values.rows() - 1);
  symmetrize(corr);
  return corr;
}

/// Principal-component extraction on the correlation matrix of the
/// standardized columns, followed by varimax rotation. Scores are
/// standardized to unit variance. Constant columns are rejected; the panel
/// must retain at least k independent directions.
inline Solution extract_factors(const MatrixXd& values, int k = 3, bool rotate = true) {
  const Eigen::Index n = values.rows();
  const Eigen::Index p = values.cols();
  if (n < k + 1) throw DegenerateInputError("need at least k+1 observations");

  const MatrixXd z = standardize(values);
  const MatrixXd corr = correlation_matrix(values);

  Eigen::SelfAdjointEigenSolver<MatrixXd> es(corr);
  // Eigen returns ascending order; flip to descending.
  VectorXd ev = es.eigenvalues().reverse();
  MatrixXd vec = es.eigenvectors().rowwise().reverse();
  const double rank_tol = 1e-10;
  Eigen::Index effective_rank = 0;
  for (Eigen::Index i = 0; i < p; ++i)
    if (ev[i] > rank_tol) ++effective_rank;
  if (effective_rank < k) {
    std::string cols;
    for (Eigen::Index i = effective_rank; i < p; ++i) {
      Eigen::Index peak;
      vec.col(i).cwiseAbs().maxCoeff(&peak);
      cols += (cols.empty() ? "" : ", ") + std::to_string(peak);
    }
    throw DegenerateInputError(
        "correlation matrix rank " + std::to_string(effective_rank) +
        " is below the requested " + std::to_string(k) + " factors (columns involved: " + cols + ")");
  }

  Solution out;
  out.eigenvalues = ev;
  out.variance_explained = ev.head(k).sum() / static_cast<double>(p);
  MatrixXd raw = vec.leftCols(k) * ev.head(k).cwiseMax(0.0).cwiseSqrt().asDiagonal();
  out.loadings = rotate ? varimax(raw) : raw;
  // Scores for the rotated solution: regression of z on the loadings through
  // the component space, standardized to unit variance.
  out.scores = z * vec.leftCols(k) * ev.head(k).cwiseMax(rank_tol).cwiseSqrt().cwiseInverse().asDiagonal();
  if (rotate) {
    // Apply the same orthogonal rotation to the scores: T = R_raw^+ R_rot.
    const MatrixXd rotation =
        (raw.transpose() * raw).ldlt().solve(raw.transpose() * out.loadings);
    out.scores = out.scores * rotation;
    for (Eigen::Index m = 0; m < k; ++m) {
      const double sd = std::sqrt(out.scores.col(m).squaredNorm() / static_cast<double>(n - 1));
      if (sd > 0.0) out.scores.col(m) /= sd;
    }
  }
  out.uniquenesses = VectorXd::Ones(p) - out.loadings.array().square().rowwise().sum().matrix();
  return out;
}

inline Solution extract_factors(const FeaturePanel& panel, int k = 3, bool rotate = true) {
  return extract_factors(panel.values, k, rotate);
}

}  // namespace adopt::factor
