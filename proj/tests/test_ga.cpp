#include <catch2/catch_amalgamated.hpp>

#include "adopt/ga.hpp"

using namespace adopt;

TEST_CASE("genetic search finds the sphere optimum in 5 dimensions") {
  const auto objective = [](const VectorXd& x) { return -x.squaredNorm(); };
  ga::Config cfg;
  cfg.generations = 200;
  cfg.seed = 5;
  const auto out = ga::optimize(objective, VectorXd::Zero(5), cfg);
  CHECK(out.best_value >= -1e-2);
}

TEST_CASE("genetic search gets close on the negated 2-D Rosenbrock") {
  const auto objective = [](const VectorXd& x) {
    const double a = 1.0 - x[0];
    const double b = x[1] - x[0] * x[0];
    return -(a * a + 100.0 * b * b);
  };
  ga::Config cfg;
  cfg.population = 64;
  cfg.generations = 500;
  cfg.mutation_sigma = 0.2;
  cfg.init_spread = 0.5;
  cfg.seed = 17;
  const auto out = ga::optimize(objective, VectorXd::Zero(2), cfg);
  CHECK(out.best_value >= -1e-1);
}

TEST_CASE("elitism makes the best-so-far trace monotone for any seed") {
  const auto objective = [](const VectorXd& x) { return -(x.array() - 3.0).square().sum(); };
  for (std::uint64_t seed : {1ULL, 2ULL, 99ULL}) {
    ga::Config cfg;
    cfg.generations = 60;
    cfg.seed = seed;
    const auto out = ga::optimize(objective, VectorXd::Zero(3), cfg);
    for (std::size_t g = 1; g < out.trace.size(); ++g) CHECK(out.trace[g] >= out.trace[g - 1]);
  }
}

TEST_CASE("an entirely non-finite initial population is an error") {
  const auto objective = [](const VectorXd&) { return std::nan(""); };
  ga::Config cfg;
  cfg.generations = 5;
  CHECK_THROWS_AS(ga::optimize(objective, VectorXd::Zero(2), cfg), NumericalError);
}

TEST_CASE("same seed reproduces the same result") {
  const auto objective = [](const VectorXd& x) { return -x.squaredNorm(); };
  ga::Config cfg;
  cfg.generations = 30;
  cfg.seed = 123;
  const auto a = ga::optimize(objective, VectorXd::Ones(4), cfg);
  const auto b = ga::optimize(objective, VectorXd::Ones(4), cfg);
  CHECK(a.best_value == b.best_value);
  CHECK((a.best - b.best).cwiseAbs().maxCoeff() == 0.0);
}
