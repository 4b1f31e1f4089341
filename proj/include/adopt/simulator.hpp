// Ground-truth data generation: synthetic diffusion series, feature panels
// and choice panels from known parameters, written in the same schemas the
// loaders read.
#pragma once

#include <vector>

#include "adopt/choice.hpp"
#include "adopt/common.hpp"
#include "adopt/diffusion.hpp"
#include "adopt/factor.hpp"
#include "adopt/io.hpp"

namespace adopt::sim {

struct ScenarioSpec {
  int j_count = 10;
  int t_days = 200;
  int t_weeks = 20;
  int customers = 1258;
  std::vector<diffusion::Params> diffusion_local;
  std::vector<diffusion::Params> diffusion_global;
  diffusion::SurCovariance cov_local;
  diffusion::SurCovariance cov_global;
  VectorXd mixture_weights;                          // K
  std::vector<choice::Component> mixture_components; // K, dimension d
  MatrixXd delta;                                    // d x 1 tenure shift
  bool social_in_utility = true;                     // generator uses a social column
  bool raw_obs_noise = false;                        // skip rounding/monotonization
  std::uint64_t seed = 0;

  void validate() const {
    for (const auto& p : diffusion_local) p.validate();
    for (const auto& p : diffusion_global) p.validate();
    if (mixture_weights.size() !=
        static_cast<Eigen::Index>(mixture_components.size()))
      throw UsageError("mixture weights and components disagree");
    if (mixture_weights.size() > 0 &&
        std::abs(mixture_weights.sum() - 1.0) > 1e-9)
      throw UsageError("mixture weights must sum to one");
  }
};

struct SimulatedDiffusion {
  diffusion::AdoptionSeries series;
  MatrixXd c_inf;  // J x T latent truth
  MatrixXd c_imm;
};

/// Forward-simulate the joint two-segment recursion with state noise from the
/// SUR covariance; latents are clamped to [0, M] and kept cumulative. The
/// observed series adds observation noise, rounded and floored at the
/// previous value unless raw noise is requested. Zero-noise inputs reproduce
/// the deterministic recursion exactly.
inline SimulatedDiffusion simulate_diffusion(const std::vector<diffusion::Params>& params,
                                             const diffusion::SurCovariance& cov, int days,
                                             std::uint64_t seed, bool raw_noise = false) {
  const auto j_count = static_cast<Eigen::Index>(params.size());
  SimulatedDiffusion out;
  out.series.y = MatrixXd(j_count, days);
  out.c_inf = MatrixXd(j_count, days);
  out.c_imm = MatrixXd(j_count, days);
  const MatrixXd state_chol = cholesky_with_jitter(cov.state_cov);
  VectorXd prev = VectorXd::Zero(2 * j_count);
  for (int t = 0; t < days; ++t) {
    Rng rng(split_seed(seed, 0xD1FFu, static_cast<std::uint64_t>(t)));
    const VectorXd noise = state_chol * rng.normal_vector(2 * j_count);
    for (Eigen::Index j = 0; j < j_count; ++j) {
      const auto [ci, cm] =
          diffusion::state_transition(prev[2 * j], prev[2 * j + 1], params[j]);
      double next_inf = std::clamp(ci + noise[2 * j], 0.0, params[j].m_inf);
      double next_imm = std::clamp(cm + noise[2 * j + 1], 0.0, params[j].m_imm);
      next_inf = std::max(next_inf, prev[2 * j]);
      next_imm = std::max(next_imm, prev[2 * j + 1]);
      prev[2 * j] = next_inf;
      prev[2 * j + 1] = next_imm;
      out.c_inf(j, t) = next_inf;
      out.c_imm(j, t) = next_imm;
      const double clean = diffusion::observe(next_inf, next_imm, params[j].theta);
      const double sd = std::sqrt(cov.obs_vars[j]);
      double y = clean;
      if (sd > 0.0) {
        y += rng.normal(0.0, sd);
        if (!raw_noise) {
          y = std::max(0.0, std::round(y));
          if (t > 0) y = std::max(y, out.series.y(j, t - 1));
        }
      }
      out.series.y(j, t) = y;
    }
  }
  return out;
}

struct SimulatedChoices {
  choice::Panel panel;
  MatrixXd coeffs;          // true per-customer coefficients, I x d
  std::vector<int> labels;  // true component per customer
};

/// Draw per-customer coefficients from the mixture shifted by delta * tenure,
/// then simulate weekly choices through the logit with evolving history
/// states.
inline SimulatedChoices simulate_choices(const ScenarioSpec& spec,
                                         const choice::Covariates& covs) {
  const int d = covs.param_dim(spec.j_count);
  for (const auto& c : spec.mixture_components)
    if (c.mu.size() != d)
      throw UsageError("mixture component dimension does not match the covariates");
  SimulatedChoices out;
  out.panel.j_count = spec.j_count;
  out.panel.tenure = VectorXd(spec.customers);
  out.panel.choices.resize(spec.customers);
  out.coeffs = MatrixXd(spec.customers, d);
  out.labels.resize(spec.customers);
  for (int i = 0; i < spec.customers; ++i) {
    Rng rng(split_seed(spec.seed, 0xC407u, static_cast<std::uint64_t>(i)));
    const double tenure = std::floor(rng.uniform(1.0, 366.0));
    out.panel.tenure[i] = tenure;
    const int k = rng.categorical(spec.mixture_weights);
    out.labels[i] = k;
    const auto& comp = spec.mixture_components[k];
    const MatrixXd chol = cholesky_with_jitter(comp.sigma);
    VectorXd a = comp.mu + chol * rng.normal_vector(d);
    if (spec.delta.size() > 0) a += spec.delta.col(0) * tenure;
    out.coeffs.row(i) = a.transpose();

    auto& row = out.panel.choices[i];
    row.resize(spec.t_weeks);
    int s_it = 0;
    for (int t = 0; t < spec.t_weeks; ++t) {
      const VectorXd v = choice::utility(a, s_it, covs, t, spec.j_count);
      const VectorXd p = choice::choice_prob(v);
      const int pick = rng.categorical(p);
      row[t] = pick;
      if (pick >= 1) ++s_it;
    }
  }
  return out;
}

/// Feature panel with a three-factor latent structure and exact count
/// identities (n_total = n_paid + n_free).
inline factor::FeaturePanel simulate_features(int j_count, int weeks, std::uint64_t seed) {
  factor::FeaturePanel panel;
  panel.values = MatrixXd(j_count * weeks, factor::FeaturePanel::kColumns);
  panel.category.resize(j_count * weeks);
  panel.week.resize(j_count * weeks);
  for (int j = 0; j < j_count; ++j) {
    for (int w = 0; w < weeks; ++w) {
      Rng rng(split_seed(seed, 0xFEA7u, static_cast<std::uint64_t>(j),
                         static_cast<std::uint64_t>(w)));
      const double f1 = rng.normal();  // breadth of the category
      const double f2 = rng.normal();  // price positioning
      const double f3 = rng.normal();  // free share
      const auto noisy = [&](double v) { return v + 0.05 * rng.normal(); };
      const int row = j * weeks + w;
      panel.category[row] = j + 1;
      panel.week[row] = w;
      const double n_paid = std::max(0.0, std::round(noisy(6.0 + 2.5 * f1 - 1.2 * f3)));
      const double n_free = std::max(0.0, std::round(noisy(30.0 + 9.0 * f1 + 3.0 * f3)));
      panel.values(row, 0) = std::max(0.1, noisy(2.0 + 0.9 * f1));            // avg_file_size
      panel.values(row, 1) = std::max(0.0, noisy(0.12 + 0.06 * f1));          // featured_rate
      panel.values(row, 2) = std::max(0.0, noisy(1.0 + 0.6 * f2));            // avg_price
      panel.values(row, 3) = std::max(0.0, noisy(0.5 + 0.45 * f2));           // var_price
      panel.values(row, 4) = n_paid;
      panel.values(row, 5) = n_free;
      panel.values(row, 6) = n_free / std::max(1.0, n_paid);
      panel.values(row, 7) = std::max(1.0, noisy(316.0 + 50.0 * f2 + 25.0 * f3));
      panel.values(row, 8) = n_paid + n_free;
    }
  }
  return panel;
}

/// Literature-magnitude diffusion parameters for a synthetic category, scaled
/// by market size.
inline diffusion::Params category_params(double m_imm, double w, double theta = 0.044) {
  diffusion::Params p;
  p.p_inf = 0.025;
  p.q_inf = 0.0;
  p.p_imm = 0.28;
  p.q_imm = 0.19;
  p.m_imm = m_imm;
  p.m_inf = 0.05 * m_imm;
  p.w = w;
  p.theta = theta;
  return p;
}

/// Default desk-scale scenario: ten categories at local-adoption magnitudes,
/// a three-times-larger global market, and a two-component coefficient
/// mixture.
inline ScenarioSpec default_scenario(std::uint64_t seed, int j_count = 10, int customers = 200,
                                     int t_days = 200, int t_weeks = 20) {
  ScenarioSpec spec;
  spec.seed = seed;
  spec.j_count = j_count;
  spec.customers = customers;
  spec.t_days = t_days;
  spec.t_weeks = t_weeks;

  Rng rng(split_seed(seed, 0x5CE0u));
  const double base_sizes[] = {80, 1952, 56, 120, 99, 200, 113, 225, 48, 113};
  for (int j = 0; j < j_count; ++j) {
    const double m = base_sizes[j % 10] * rng.uniform(0.8, 1.25);
    spec.diffusion_local.push_back(category_params(m, rng.uniform(0.05, 0.9)));
    spec.diffusion_global.push_back(category_params(3.0 * m, rng.uniform(0.005, 0.05)));
  }
  const auto build_cov = [&](const std::vector<diffusion::Params>& params) {
    diffusion::SurCovariance cov;
    cov.state_cov = MatrixXd::Zero(2 * j_count, 2 * j_count);
    cov.obs_vars = VectorXd(j_count);
    for (int j = 0; j < j_count; ++j) {
      const double plateau = diffusion::observe(params[j].m_inf, params[j].m_imm,
                                                params[j].theta);
      cov.state_cov(2 * j, 2 * j) = std::pow(0.002 * params[j].m_inf, 2) + 1e-8;
      cov.state_cov(2 * j + 1, 2 * j + 1) = std::pow(0.002 * params[j].m_imm, 2) + 1e-8;
      cov.obs_vars[j] = std::pow(0.01 * plateau, 2);
    }
    return cov;
  };
  spec.cov_local = build_cov(spec.diffusion_local);
  spec.cov_global = build_cov(spec.diffusion_global);

  const int d = j_count + 1 + 1 + 3;
  choice::Component a, b;
  a.mu = VectorXd::Constant(d, -2.0);
  b.mu = VectorXd::Constant(d, -2.0);
  a.mu[0] = 1.0;   // first-category enthusiasts
  b.mu[1] = 1.0;   // second-category enthusiasts
  const int social_ix = j_count + 1;
  a.mu[j_count] = -0.2;
  b.mu[j_count] = -0.2;
  a.mu[social_ix] = 0.02;
  b.mu[social_ix] = 0.02;
  for (int f = 0; f < 3; ++f) {
    a.mu[social_ix + 1 + f] = 0.3 - 0.2 * f;
    b.mu[social_ix + 1 + f] = -0.1 + 0.15 * f;
  }
  a.sigma = 0.09 * MatrixXd::Identity(d, d);
  b.sigma = 0.09 * MatrixXd::Identity(d, d);
  spec.mixture_components = {a, b};
  spec.mixture_weights = (VectorXd(2) << 0.5, 0.5).finished();
  spec.delta = MatrixXd::Zero(d, 1);
  spec.delta(j_count, 0) = -2e-4;   // longer tenure, stronger history aversion
  spec.delta(social_ix, 0) = 5e-5;  // longer tenure, more social response
  return spec;
}

/// Full synthetic bundle in the loaders' schemas. The choice panel is
/// simulated with the local adopter counts (weekly means) as the social
/// covariate.
struct SimulatedBundle {
  io::DatasetBundle bundle;
  SimulatedDiffusion truth_local;
  SimulatedDiffusion truth_global;
  MatrixXd coeffs;
  std::vector<int> labels;
  choice::Covariates covariates;  // the generator's covariates
};

inline SimulatedBundle simulate_bundle(const ScenarioSpec& spec) {
  spec.validate();
  SimulatedBundle out;
  out.truth_local =
      simulate_diffusion(spec.diffusion_local, spec.cov_local, spec.t_days, spec.seed);
  out.truth_global = simulate_diffusion(spec.diffusion_global, spec.cov_global, spec.t_days,
                                        split_seed(spec.seed, 0x910u));
  out.bundle.adoption_local = out.truth_local.series;
  out.bundle.adoption_global = out.truth_global.series;
  out.bundle.features = simulate_features(spec.j_count, spec.t_weeks, split_seed(spec.seed, 3));

  const auto solution = factor::extract_factors(out.bundle.features, 3);
  choice::Covariates covs;
  if (spec.social_in_utility)
    covs.social = io::weekly_mean(out.bundle.adoption_local.y, spec.t_weeks);
  for (int f = 0; f < 3; ++f) {
    covs.factors[f] = MatrixXd(spec.j_count, spec.t_weeks);
    for (int j = 0; j < spec.j_count; ++j)
      for (int w = 0; w < spec.t_weeks; ++w)
        covs.factors[f](j, w) = solution.scores(j * spec.t_weeks + w, f);
  }
  auto sim = simulate_choices(spec, covs);
  out.bundle.panel = std::move(sim.panel);
  out.coeffs = std::move(sim.coeffs);
  out.labels = std::move(sim.labels);
  out.covariates = covs;

  out.bundle.popularity = VectorXd(spec.j_count);
  for (int j = 0; j < spec.j_count; ++j)
    out.bundle.popularity[j] = spec.diffusion_local[j].m_imm;
  out.bundle.popularity /= out.bundle.popularity.maxCoeff();
  return out;
}

}  // namespace adopt::sim
