#include <catch2/catch_amalgamated.hpp>

#include "adopt/factor.hpp"

using namespace adopt;

namespace {

/// Panel with an exact k-factor structure plus optional noise.
MatrixXd synthetic_panel(int n, int p, int k, double noise_sd, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd loadings(p, k);
  for (int i = 0; i < p; ++i)
    for (int m = 0; m < k; ++m) loadings(i, m) = rng.normal();
  MatrixXd scores(n, k);
  for (int i = 0; i < n; ++i)
    for (int m = 0; m < k; ++m) scores(i, m) = rng.normal();
  MatrixXd x = scores * loadings.transpose();
  if (noise_sd > 0.0)
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < p; ++c) x(i, c) += rng.normal(0.0, noise_sd);
  return x;
}

}  // namespace

TEST_CASE("three-factor data is explained almost entirely by three factors") {
  const MatrixXd x = synthetic_panel(400, 9, 3, 1e-3, 2);
  const auto sol = factor::extract_factors(x, 3);
  CHECK(sol.variance_explained >= 0.99);
  CHECK(sol.loadings.rows() == 9);
  CHECK(sol.loadings.cols() == 3);
  CHECK(sol.scores.rows() == 400);
  // Scores are standardized to unit variance.
  for (int m = 0; m < 3; ++m) {
    const double var = sol.scores.col(m).squaredNorm() / (400 - 1);
    CHECK(var == Catch::Approx(1.0).margin(1e-8));
  }
}

TEST_CASE("a full basis explains everything") {
  const MatrixXd x = synthetic_panel(200, 9, 9, 0.3, 3);
  const auto sol = factor::extract_factors(x, 9);
  CHECK(sol.variance_explained == Catch::Approx(1.0).margin(1e-10));
}

TEST_CASE("constant columns are rejected by name") {
  MatrixXd x = synthetic_panel(50, 4, 4, 0.1, 4);
  x.col(2).setConstant(7.0);
  CHECK_THROWS_WITH(factor::extract_factors(x, 2),
                    Catch::Matchers::ContainsSubstring("index 2"));
}

TEST_CASE("panels without k independent directions are rejected") {
  Rng rng(5);
  MatrixXd x(100, 4);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.normal();
    x(i, 0) = a;
    x(i, 1) = 2.0 * a;
    x(i, 2) = -a;
    x(i, 3) = 0.5 * a;
  }
  CHECK_THROWS_AS(factor::extract_factors(x, 3), DegenerateInputError);
}

TEST_CASE("varimax is a fixed point on an already-simple structure") {
  MatrixXd simple(6, 2);
  simple << 0.9, 0.0, 0.85, 0.05, 0.8, 0.0, 0.0, 0.9, 0.05, 0.85, 0.0, 0.8;
  const MatrixXd rotated = factor::varimax(simple);
  CHECK(factor::varimax_criterion(rotated) >=
        factor::varimax_criterion(simple) - 1e-12);
  CHECK((rotated - simple).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("varimax preserves communalities") {
  Rng rng(6);
  MatrixXd loadings(9, 3);
  for (int i = 0; i < 9; ++i)
    for (int m = 0; m < 3; ++m) loadings(i, m) = rng.normal();
  const MatrixXd rotated = factor::varimax(loadings);
  const VectorXd before = loadings.array().square().rowwise().sum();
  const VectorXd after = rotated.array().square().rowwise().sum();
  CHECK((before - after).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("varimax undoes a 30-degree rotation of a simple structure") {
  MatrixXd simple(6, 2);
  simple << 0.9, 0.0, 0.8, 0.0, 0.7, 0.0, 0.0, 0.9, 0.0, 0.8, 0.0, 0.7;
  const double a = 30.0 * std::numbers::pi / 180.0;
  MatrixXd rot(2, 2);
  rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  const MatrixXd mixed = simple * rot;
  const MatrixXd recovered = factor::varimax(mixed);
  // Match columns up to sign and permutation.
  double best = 1e9;
  for (int perm = 0; perm < 2; ++perm)
    for (double s0 : {1.0, -1.0})
      for (double s1 : {1.0, -1.0}) {
        MatrixXd candidate(6, 2);
        candidate.col(0) = s0 * recovered.col(perm);
        candidate.col(1) = s1 * recovered.col(1 - perm);
        best = std::min(best, (candidate - simple).cwiseAbs().maxCoeff());
      }
  CHECK(best < 1e-6);
}

TEST_CASE("duplicating the whole panel leaves the correlation matrix unchanged") {
  const MatrixXd x = synthetic_panel(120, 9, 3, 0.2, 7);
  MatrixXd doubled(240, 9);
  doubled << x, x;
  const MatrixXd c1 = factor::correlation_matrix(x);
  const MatrixXd c2 = factor::correlation_matrix(doubled);
  CHECK((c1 - c2).cwiseAbs().maxCoeff() < 1e-12);
  const auto s1 = factor::extract_factors(x, 3);
  const auto s2 = factor::extract_factors(doubled, 3);
  CHECK((s1.loadings - s2.loadings).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("rotation changes neither variance explained nor reconstruction") {
  const MatrixXd x = synthetic_panel(300, 9, 3, 0.05, 8);
  const auto raw = factor::extract_factors(x, 3, /*rotate=*/false);
  const auto rot = factor::extract_factors(x, 3, /*rotate=*/true);
  CHECK(raw.variance_explained == Catch::Approx(rot.variance_explained).margin(1e-10));
  // b F' reconstructs the same subspace: compare fitted z matrices.
  const MatrixXd z = factor::standardize(x);
  const MatrixXd fit_raw = raw.scores * raw.loadings.transpose();
  const MatrixXd fit_rot = rot.scores * rot.loadings.transpose();
  CHECK((fit_raw - fit_rot).cwiseAbs().maxCoeff() < 1e-8);
  const double explained =
      1.0 - (z - fit_rot).squaredNorm() / z.squaredNorm();
  CHECK(explained == Catch::Approx(rot.variance_explained).margin(1e-6));
}
