// Genetic maximization of black-box objectives over flat real vectors.
// Tournament selection, blend crossover, decaying Gaussian mutation, elitism.
#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <vector>

#include "adopt/common.hpp"

namespace adopt::ga {

struct Config {
  int population = 64;
  int generations = 200;
  int tournament = 3;
  double blend_alpha = 0.5;
  double mutation_sigma = 0.1;   // scaled per coordinate by `scale` if set
  double mutation_decay = 0.99;  // per generation
  int elites = 2;
  double init_spread = 0.1;  // scaled per coordinate by `scale` if set
  VectorXd scale;            // optional per-coordinate scale; empty = all ones
  std::vector<VectorXd> seeds;  // individuals injected into the initial population
  std::uint64_t seed = 0;
};

struct Result {
  VectorXd best;
  double best_value = -std::numeric_limits<double>::infinity();
  std::vector<double> trace;  // per-generation best-so-far, non-decreasing
};

/// Maximize `objective` starting from a population spread around
/// `init_center`. Randomness is split per (seed, generation, individual) so
/// results are independent of evaluation order. Individuals with non-finite
/// objective are treated as -inf; if the whole initial population is
/// non-finite an initialization error is thrown.
inline Result optimize(const std::function<double(const VectorXd&)>& objective,
                       const VectorXd& init_center, const Config& cfg) {
  if (cfg.population < 4) throw UsageError("GA population must be >= 4");
  if (cfg.generations < 1) throw UsageError("GA generations must be >= 1");
  const Eigen::Index dim = init_center.size();
  VectorXd scale = cfg.scale.size() == dim ? cfg.scale : VectorXd::Ones(dim);

  const auto eval = [&](const VectorXd& x) {
    const double v = objective(x);
    return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
  };

  std::vector<VectorXd> pop(cfg.population);
  std::vector<double> fit(cfg.population);
  pop[0] = init_center;
  int filled = 1;
  for (const auto& s : cfg.seeds) {
    if (filled >= cfg.population) break;
    if (s.size() != dim) throw UsageError("GA seed individual has wrong dimension");
    pop[filled++] = s;
  }
  for (int i = filled; i < cfg.population; ++i) {
    Rng rng(split_seed(cfg.seed, 0, static_cast<std::uint64_t>(i)));
    VectorXd x = init_center;
    for (Eigen::Index k = 0; k < dim; ++k)
      x[k] += cfg.init_spread * scale[k] * rng.uniform(-1.0, 1.0);
    pop[i] = std::move(x);
  }
  for (int i = 0; i < cfg.population; ++i) fit[i] = eval(pop[i]);
  if (std::all_of(fit.begin(), fit.end(),
                  [](double v) { return !std::isfinite(v); }))
    throw NumericalError("GA initialization: objective non-finite for entire population");

  Result out;
  out.trace.reserve(cfg.generations);

  std::vector<int> order(cfg.population);
  double sigma = cfg.mutation_sigma;
  for (int gen = 1; gen <= cfg.generations; ++gen) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return fit[a] > fit[b]; });
    out.best = pop[order[0]];
    out.best_value = fit[order[0]];
    out.trace.push_back(out.best_value);

    std::vector<VectorXd> next(cfg.population);
    std::vector<double> next_fit(cfg.population);
    const int elites = std::min(cfg.elites, cfg.population);
    for (int e = 0; e < elites; ++e) {
      next[e] = pop[order[e]];
      next_fit[e] = fit[order[e]];
    }
    for (int i = elites; i < cfg.population; ++i) {
      Rng rng(split_seed(cfg.seed, static_cast<std::uint64_t>(gen),
                         static_cast<std::uint64_t>(i)));
      const auto tournament_pick = [&]() {
        int best = static_cast<int>(rng.uniform_index(cfg.population));
        for (int t = 1; t < cfg.tournament; ++t) {
          const int c = static_cast<int>(rng.uniform_index(cfg.population));
          if (fit[c] > fit[best]) best = c;
        }
        return best;
      };
      const VectorXd& a = pop[tournament_pick()];
      const VectorXd& b = pop[tournament_pick()];
      VectorXd child(dim);
      for (Eigen::Index k = 0; k < dim; ++k) {
        const double lo = std::min(a[k], b[k]);
        const double hi = std::max(a[k], b[k]);
        const double range = hi - lo;
        child[k] = rng.uniform(lo - cfg.blend_alpha * range, hi + cfg.blend_alpha * range);
        child[k] += sigma * scale[k] * rng.normal();
      }
      next[i] = std::move(child);
      next_fit[i] = eval(next[i]);
    }
    pop.swap(next);
    fit.swap(next_fit);
    sigma *= cfg.mutation_decay;
  }

  for (int i = 0; i < cfg.population; ++i) {
    if (fit[i] > out.best_value) {
      out.best_value = fit[i];
      out.best = pop[i];
    }
  }
  if (!out.trace.empty() && out.best_value > out.trace.back()) out.trace.back() = out.best_value;
  return out;
}

}  // namespace adopt::ga
