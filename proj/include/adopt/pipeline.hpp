// Full-flow orchestration: macro diffusion fits on both adoption series,
// factor extraction, the five micro choice variants, model comparison, and
// the counterfactual policy stage, emitted as reproducible report files with
// a hashed manifest.
#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "adopt/choice.hpp"
#include "adopt/counterfactual.hpp"
#include "adopt/diffusion.hpp"
#include "adopt/factor.hpp"
#include "adopt/io.hpp"
#include "adopt/simulator.hpp"

namespace adopt::pipeline {

using io::json;

// ---------------------------------------------------------------------------
// Configuration plumbing
// ---------------------------------------------------------------------------

inline ukf::Tuning tuning_from_config(const io::Config& cfg) {
  return {cfg.get<double>("ukf.alpha", 0.1), cfg.get<double>("ukf.kappa", 0.0),
          cfg.get<double>("ukf.beta", 2.0)};
}

inline diffusion::McemConfig mcem_from_config(const io::Config& cfg, std::uint64_t seed) {
  diffusion::McemConfig m;
  m.iterations = cfg.get<int>("mcem.iterations", 20);
  m.samples = cfg.get<int>("mcem.samples", 50);
  m.ga.population = cfg.get<int>("ga.population", 48);
  m.ga.generations = cfg.get<int>("ga.generations", 15);
  m.ga.tournament = cfg.get<int>("ga.tournament", 3);
  m.ga.blend_alpha = cfg.get<double>("ga.blend_alpha", 0.5);
  m.ga.mutation_sigma = cfg.get<double>("ga.mutation_sigma", 0.08);
  m.ga.mutation_decay = cfg.get<double>("ga.mutation_decay", 0.99);
  m.ga.elites = cfg.get<int>("ga.elites", 2);
  m.polish_rounds = cfg.get<int>("mcem.polish_rounds", 2);
  m.polish_ga.population = cfg.get<int>("mcem.polish_population", 24);
  m.polish_ga.generations = cfg.get<int>("mcem.polish_generations", 12);
  m.literal_transition = cfg.get<bool>("mcem.literal_transition", false);
  m.tuning = tuning_from_config(cfg);
  m.seed = seed;
  return m;
}

inline choice::FitConfig choice_from_config(const io::Config& cfg, std::uint64_t seed) {
  choice::FitConfig c;
  c.burnin = cfg.get<int>("mcmc.burnin", 2000);
  c.kept_sweeps = cfg.get<int>("mcmc.sweeps", 10000);
  c.thin = cfg.get<int>("mcmc.thin", 10);
  c.adapt_interval = cfg.get<int>("mcmc.adapt_interval", 100);
  c.omega_rebuild = cfg.get<int>("mcmc.omega_rebuild", 100);
  c.max_emit_draws = cfg.get<int>("mcmc.emit_draws", 200);
  c.w_frac = cfg.get<double>("fraclik.w", 0.05);
  c.dp.grid_points = cfg.get<int>("dp.grid_points", 64);
  c.dp.alpha_power = cfg.get<double>("dp.alpha_power", 0.8);
  c.dp.alpha_min = cfg.get<double>("dp.alpha_min", 0.0);
  c.dp.alpha_max = cfg.get<double>("dp.alpha_max", 0.0);
  c.dp.a_min = cfg.get<double>("dp.a_min", 1e-5);
  c.dp.a_max = cfg.get<double>("dp.a_max", 50.0);
  c.dp.vartheta_min = cfg.get<double>("dp.vartheta_min", 1e-5);
  c.dp.vartheta_max = cfg.get<double>("dp.vartheta_max", 600.0);
  c.dp.nu_offset_min = cfg.get<double>("dp.nu_offset_min", 1e-5);
  c.dp.nu_offset_max = cfg.get<double>("dp.nu_offset_max", 80.0);
  c.dp.single_component = cfg.get<bool>("dp.single_component", false);
  c.seed = seed;
  return c;
}

inline policy::PolicyConfig policy_from_config(const io::Config& cfg, std::uint64_t seed) {
  policy::PolicyConfig p;
  p.ga.population = cfg.get<int>("policy.population", 128);
  p.ga.generations = cfg.get<int>("policy.generations", 400);
  p.bound_multiplier = cfg.get<double>("policy.bound_multiplier", 3.0);
  p.resimulate_history = cfg.get<bool>("policy.resimulate_history", false);
  p.seed = seed;
  return p;
}

// ---------------------------------------------------------------------------
// Report shaping
// ---------------------------------------------------------------------------

/// Posterior summary of the cross-customer mean of each coefficient.
inline json population_summary_json(const choice::FitResult& fit) {
  json out = json::object();
  for (int k = 0; k < fit.param_dim; ++k) {
    std::vector<double> means;
    means.reserve(fit.draws.size());
    for (const auto& draw : fit.draws) means.push_back(draw.col(k).mean());
    out[fit.labels[k]] = io::summary_json(io::summarize_draws(std::move(means)));
  }
  return out;
}

/// Counts of customers whose 95% posterior interval lies strictly above or
/// below zero, per coefficient.
inline json sign_count_json(const choice::FitResult& fit) {
  json out = json::object();
  const int i_count = static_cast<int>(fit.draws.front().rows());
  for (int k = 0; k < fit.param_dim; ++k) {
    int positive = 0, negative = 0;
    for (int i = 0; i < i_count; ++i) {
      std::vector<double> draws;
      draws.reserve(fit.draws.size());
      for (const auto& d : fit.draws) draws.push_back(d(i, k));
      const auto s = io::summarize_draws(std::move(draws));
      if (s.p2_5 > 0.0) ++positive;
      if (s.p97_5 < 0.0) ++negative;
    }
    out[fit.labels[k]] = json{{"positive_significant", positive},
                              {"negative_significant", negative}};
  }
  return out;
}

inline json delta_summary_json(const choice::FitResult& fit) {
  json out = json::object();
  for (int k = 0; k < fit.param_dim; ++k) {
    std::vector<double> draws;
    draws.reserve(fit.delta_draws.size());
    for (const auto& d : fit.delta_draws) draws.push_back(d[k]);
    out[fit.labels[k]] = io::summary_json(io::summarize_draws(std::move(draws)));
  }
  return out;
}

inline void write_draws_csv(const std::string& path, const choice::FitResult& fit) {
  std::vector<std::string> lines;
  std::string header = "draw,customer";
  for (const auto& l : fit.labels) header += "," + l;
  lines.push_back(header);
  for (std::size_t s = 0; s < fit.draws.size(); ++s)
    for (Eigen::Index i = 0; i < fit.draws[s].rows(); ++i) {
      std::string line = std::to_string(s) + "," + std::to_string(i + 1);
      for (int k = 0; k < fit.param_dim; ++k)
        line += "," + io::format_double(fit.draws[s](i, k));
      lines.push_back(std::move(line));
    }
  io::write_lines(path, lines);
}

inline json diffusion_report_json(const diffusion::McemResult& fit) {
  json params = json::array();
  for (std::size_t j = 0; j < fit.params.size(); ++j) {
    const auto& p = fit.params[j];
    params.push_back(json{{"category", j + 1},
                          {"p_inf", p.p_inf},
                          {"q_inf", p.q_inf},
                          {"p_imm", p.p_imm},
                          {"q_imm", p.q_imm},
                          {"m_inf", p.m_inf},
                          {"m_imm", p.m_imm},
                          {"w", p.w},
                          {"theta", p.theta}});
  }
  json metrics = json::array();
  for (Eigen::Index j = 0; j < fit.fit.mad.size(); ++j)
    metrics.push_back(json{{"category", j + 1}, {"mad", fit.fit.mad[j]}, {"mse", fit.fit.mse[j]}});
  return json{{"parameters", params},
              {"fit", json{{"log_likelihood", fit.fit.log_likelihood},
                           {"per_category", metrics},
                           {"mad_mean", fit.fit.mad.mean()},
                           {"mse_mean", fit.fit.mse.mean()}}},
              {"objective_trace", fit.objective_trace},
              {"monotone_within_tolerance", fit.monotone_within_tolerance},
              {"prior_var", fit.prior_var}};
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct StageRecord {
  std::string name;
  std::vector<std::string> inputs;   // artifact names consumed
  std::vector<std::string> outputs;  // artifact files produced
  double seconds = 0.0;              // not part of the manifest
};

struct PipelineRun {
  json config_snapshot;
  std::uint64_t seed = 0;
  std::vector<StageRecord> stages;
  diffusion::McemResult mcem_local, mcem_global;
  factor::Solution factors;
  std::vector<std::pair<std::string, choice::FitResult>> choice_fits;
  std::string best_variant;
  policy::PolicyResult policy_result;
  policy::RegressionResult regression;
  json comparison;
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"local_imitators", "global_imitators",
                                              "local_adopters", "global_adopters", "none"};
  return names;
}

inline void write_manifest(const PipelineRun& run,
                           const std::vector<std::pair<std::string, std::string>>& artifacts,
                           const std::string& outdir) {
  json listed = json::object();
  for (const auto& [name, path] : artifacts) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(io::hash_file(path)));
    listed[name] = buf;
  }
  json stages = json::array();
  for (const auto& s : run.stages)
    stages.push_back(json{{"name", s.name}, {"inputs", s.inputs}, {"outputs", s.outputs}});
  const json manifest{{"artifacts", listed},
                      {"config", run.config_snapshot},
                      {"seed", run.seed},
                      {"stages", stages}};
  io::emit_report(manifest, (std::filesystem::path(outdir) / "manifest.json").string());
}

/// Run every stage in dependency order, writing one report file per table
/// shape into `outdir` plus a manifest listing each artifact with its hash.
/// A stage failure aborts the downstream stages but leaves the artifacts
/// already written in place.
inline PipelineRun run_all(const io::DatasetBundle& bundle, const io::Config& cfg,
                           const std::string& outdir) {
  namespace fs = std::filesystem;
  fs::create_directories(outdir);
  const auto artifact = [&](const std::string& name) {
    return (fs::path(outdir) / name).string();
  };

  PipelineRun run;
  run.config_snapshot = cfg.raw();
  run.seed = cfg.get<std::uint64_t>("seed", 0);
  std::vector<std::pair<std::string, std::string>> artifacts;  // name -> path

  const auto stage = [&](const std::string& name, const std::vector<std::string>& inputs,
                         auto&& body) {
    const auto start = std::chrono::steady_clock::now();
    StageRecord record;
    record.name = name;
    record.inputs = inputs;
    const std::size_t artifacts_before = artifacts.size();
    body();
    for (std::size_t a = artifacts_before; a < artifacts.size(); ++a)
      record.outputs.push_back(artifacts[a].first);
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    run.stages.push_back(std::move(record));
  };
  const auto emit = [&](const std::string& name, const json& report) {
    const std::string path = artifact(name);
    io::emit_report(report, path);
    artifacts.emplace_back(name, path);
  };

  const int weeks = bundle.panel.weeks();
  const auto j_count = bundle.adoption_local.categories();
  if (bundle.adoption_local.days() < 7 * weeks)
    throw DataError("macro series too short for the micro panel's weeks");

  try {
    // Macro diffusion fits.
    diffusion::HierPrior prior;
    prior.shrinkage = VectorXd::Zero(diffusion::kParamsPerCategory);
    prior.prior_var = cfg.get<double>("mcem.prior_var_init", 10.0);
    prior.popularity = bundle.popularity;
    stage("fit-diffusion-local", {"adoption_local"}, [&] {
      run.mcem_local =
          diffusion::mcem_fit(bundle.adoption_local, prior, mcem_from_config(cfg, split_seed(run.seed, 1)));
      emit("diffusion_local.json", diffusion_report_json(run.mcem_local));
      io::write_matrix_csv(artifact("latent_local.csv"), run.mcem_local.latent.c_imm,
                           "category", {});
      artifacts.emplace_back("latent_local.csv", artifact("latent_local.csv"));
    });
    stage("fit-diffusion-global", {"adoption_global"}, [&] {
      run.mcem_global =
          diffusion::mcem_fit(bundle.adoption_global, prior, mcem_from_config(cfg, split_seed(run.seed, 2)));
      emit("diffusion_global.json", diffusion_report_json(run.mcem_global));
      io::write_matrix_csv(artifact("latent_global.csv"), run.mcem_global.latent.c_imm,
                           "category", {});
      artifacts.emplace_back("latent_global.csv", artifact("latent_global.csv"));
    });

    // Factor extraction.
    stage("fit-factors", {"features"}, [&] {
      run.factors = factor::extract_factors(bundle.features, cfg.get<int>("factors.count", 3));
      json loadings = json::array();
      for (Eigen::Index r = 0; r < run.factors.loadings.rows(); ++r) {
        json row{{"variable", factor::FeaturePanel::column_names()[r]}};
        for (Eigen::Index c = 0; c < run.factors.loadings.cols(); ++c)
          row["c" + std::to_string(c + 1)] = run.factors.loadings(r, c);
        loadings.push_back(std::move(row));
      }
      emit("factor_loadings.json",
           json{{"loadings", loadings},
                {"variance_explained", run.factors.variance_explained}});
    });

    // Weekly covariates, shared by the choice variants.
    choice::Covariates base_covs;
    for (int f = 0; f < 3; ++f) {
      base_covs.factors[f] = MatrixXd(j_count, weeks);
      for (Eigen::Index j = 0; j < j_count; ++j)
        for (int w = 0; w < weeks; ++w)
          base_covs.factors[f](j, w) = run.factors.scores(j * weeks + w, f);
    }
    std::map<std::string, MatrixXd> socials;
    socials["local_imitators"] = io::weekly_mean(run.mcem_local.latent.c_imm, weeks);
    socials["global_imitators"] = io::weekly_mean(run.mcem_global.latent.c_imm, weeks);
    socials["local_adopters"] = io::weekly_mean(bundle.adoption_local.y, weeks);
    socials["global_adopters"] = io::weekly_mean(bundle.adoption_global.y, weeks);

    // The five micro variants.
    for (const auto& name : variant_names()) {
      stage("fit-choice-" + name, {"choices", "customers", "factor_loadings.json"}, [&] {
        choice::Covariates covs = base_covs;
        if (name != "none") covs.social = socials.at(name);
        const auto fit = choice::fit(bundle.panel, covs,
                                     choice_from_config(cfg, split_seed(run.seed, fnv1a64(name))));
        emit("choice_" + name + ".json",
             json{{"population", population_summary_json(fit)},
                  {"sign_counts", sign_count_json(fit)},
                  {"delta", delta_summary_json(fit)},
                  {"log_likelihood", choice::comparison_loglik(fit)},
                  {"observations", bundle.panel.customers() * weeks}});
        write_draws_csv(artifact("draws_" + name + ".csv"), fit);
        artifacts.emplace_back("draws_" + name + ".csv", artifact("draws_" + name + ".csv"));
        run.choice_fits.emplace_back(name, fit);
      });
    }

    // Model comparison.
    stage("comparison", {"diffusion_local.json", "diffusion_global.json"}, [&] {
      json rows = json::array();
      rows.push_back(json{{"model", "macro_local_adoption"},
                          {"observations", j_count * bundle.adoption_local.days()},
                          {"log_likelihood", run.mcem_local.fit.log_likelihood}});
      rows.push_back(json{{"model", "macro_global_adoption"},
                          {"observations", j_count * bundle.adoption_global.days()},
                          {"log_likelihood", run.mcem_global.fit.log_likelihood}});
      double best_ll = -std::numeric_limits<double>::infinity();
      for (const auto& [name, fit] : run.choice_fits) {
        const double ll = choice::comparison_loglik(fit);
        rows.push_back(json{{"model", "choice_" + name},
                            {"observations", bundle.panel.customers() * weeks},
                            {"log_likelihood", ll}});
        if (ll > best_ll) {
          best_ll = ll;
          run.best_variant = name;
        }
      }
      run.comparison = json{{"models", rows}, {"best_choice_variant", run.best_variant}};
      emit("model_comparison.json", run.comparison);
    });

    // Bias demonstration: population means with and without social influence.
    stage("bias-report", {"model_comparison.json"}, [&] {
      const choice::FitResult* with_social = nullptr;
      const choice::FitResult* without = nullptr;
      std::string social_name;
      double best_ll = -std::numeric_limits<double>::infinity();
      for (const auto& [name, fit] : run.choice_fits) {
        if (name == "none") {
          without = &fit;
        } else if (choice::comparison_loglik(fit) > best_ll) {
          best_ll = choice::comparison_loglik(fit);
          with_social = &fit;
          social_name = name;
        }
      }
      json deltas = json::object();
      for (int k = 0; k < without->param_dim; ++k) {
        const std::string& label = without->labels[k];
        const auto find = [&](const choice::FitResult& f) {
          for (int kk = 0; kk < f.param_dim; ++kk)
            if (f.labels[kk] == label) return kk;
          return -1;
        };
        const int ks = find(*with_social);
        if (ks < 0) continue;
        double mean_with = 0.0, mean_without = 0.0;
        for (const auto& d : with_social->draws) mean_with += d.col(ks).mean();
        for (const auto& d : without->draws) mean_without += d.col(k).mean();
        mean_with /= static_cast<double>(with_social->draws.size());
        mean_without /= static_cast<double>(without->draws.size());
        deltas[label] = json{{"with_social", mean_with},
                             {"without_social", mean_without},
                             {"shift", mean_without - mean_with}};
      }
      emit("bias_report.json", json{{"social_variant", social_name}, {"coefficients", deltas}});
    });

    // Counterfactual on the best social variant.
    stage("counterfactual", {"model_comparison.json"}, [&] {
      std::string chosen = run.best_variant;
      if (chosen == "none") {
        double best_ll = -std::numeric_limits<double>::infinity();
        for (const auto& [name, fit] : run.choice_fits)
          if (name != "none" && choice::comparison_loglik(fit) > best_ll) {
            best_ll = choice::comparison_loglik(fit);
            chosen = name;
          }
        std::cerr << "warning: no-social variant ranked first; counterfactual uses " << chosen
                  << "\n";
      }
      const choice::FitResult* fit = nullptr;
      for (const auto& [name, f] : run.choice_fits)
        if (name == chosen) fit = &f;
      const MatrixXd baseline = socials.at(chosen);
      run.policy_result = policy::optimize_policy(
          baseline, fit->draws, base_covs, bundle.panel,
          policy_from_config(cfg, split_seed(run.seed, 7)));
      const auto& rep = run.policy_result.report;
      json per_category = json::array();
      for (Eigen::Index j = 0; j < j_count; ++j)
        per_category.push_back(json{{"category", j + 1},
                                    {"baseline", rep.baseline[j]},
                                    {"shutdown", rep.shutdown[j]},
                                    {"up_1pct", rep.up1[j]},
                                    {"down_1pct", rep.down1[j]},
                                    {"optimal", rep.optimal[j]},
                                    {"optimal_pct", rep.optimal_pct[j]}});
      emit("policy_report.json",
           json{{"variant", chosen},
                {"per_category", per_category},
                {"totals", json{{"baseline", rep.total_baseline},
                                {"shutdown", rep.total_shutdown},
                                {"up_1pct", rep.total_up1},
                                {"down_1pct", rep.total_down1},
                                {"optimal", rep.total_optimal}}},
                {"percent_change", json{{"shutdown", rep.shutdown_pct},
                                        {"up_1pct", rep.up1_pct},
                                        {"down_1pct", rep.down1_pct},
                                        {"optimal", rep.improvement_pct}}}});
      io::write_matrix_csv(artifact("policy_trajectory.csv"), run.policy_result.policy.c,
                           "category", {});
      artifacts.emplace_back("policy_trajectory.csv", artifact("policy_trajectory.csv"));

      // Popularity-rank regression of the per-category improvements.
      VectorXd ranks(j_count);
      std::vector<Eigen::Index> order(j_count);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        return bundle.popularity[a] < bundle.popularity[b];
      });
      for (Eigen::Index r = 0; r < j_count; ++r) ranks[order[r]] = static_cast<double>(r + 1);
      run.regression = policy::popularity_regression(rep.optimal_pct, ranks);
      emit("policy_regression.json",
           json{{"intercept",
                 json{{"estimate", run.regression.intercept},
                      {"standard_error", run.regression.se_intercept},
                      {"t_stat", run.regression.t_intercept},
                      {"p_value", run.regression.p_intercept}}},
                {"popularity_rank",
                 json{{"estimate", run.regression.slope},
                      {"standard_error", run.regression.se_slope},
                      {"t_stat", run.regression.t_slope},
                      {"p_value", run.regression.p_slope}}}});
    });
  } catch (...) {
    // Downstream stages are skipped; what was written stays on disk.
    write_manifest(run, artifacts, outdir);
    throw;
  }

  write_manifest(run, artifacts, outdir);
  return run;
}

// ---------------------------------------------------------------------------
// Recovery experiment
// ---------------------------------------------------------------------------

/// Simulate a bundle from known parameters, refit the macro model, and report
/// relative errors of the recovered imitator-block parameters.
inline json run_recovery(const io::Config& cfg, const std::string& outdir) {
  namespace fs = std::filesystem;
  fs::create_directories(outdir);
  const auto seed = cfg.get<std::uint64_t>("seed", 0);
  const auto spec = sim::default_scenario(
      seed, cfg.get<int>("recover.categories", 10), cfg.get<int>("recover.customers", 100),
      cfg.get<int>("recover.days", 200), cfg.get<int>("recover.weeks", 20));
  const auto sim_out = sim::simulate_diffusion(spec.diffusion_local, spec.cov_local,
                                               spec.t_days, seed);
  diffusion::HierPrior prior;
  prior.shrinkage = VectorXd::Zero(diffusion::kParamsPerCategory);
  prior.prior_var = 10.0;
  prior.popularity = VectorXd::Ones(spec.j_count);
  for (int j = 0; j < spec.j_count; ++j) prior.popularity[j] = spec.diffusion_local[j].m_imm;
  prior.popularity /= prior.popularity.maxCoeff();

  const auto fit =
      diffusion::mcem_fit(sim_out.series, prior, mcem_from_config(cfg, split_seed(seed, 1)));

  json rows = json::array();
  int recovered = 0;
  for (int j = 0; j < spec.j_count; ++j) {
    const auto& truth = spec.diffusion_local[j];
    const auto& est = fit.params[j];
    const double p_err = std::abs(est.p_imm - truth.p_imm) / truth.p_imm;
    const double q_err = std::abs(est.q_imm - truth.q_imm) / truth.q_imm;
    const double m_err = std::abs(est.m_imm - truth.m_imm) / truth.m_imm;
    const bool ok = p_err <= 0.2 && q_err <= 0.2 && m_err <= 0.15;
    recovered += ok ? 1 : 0;
    rows.push_back(json{{"category", j + 1},
                        {"true_p_imm", truth.p_imm},
                        {"est_p_imm", est.p_imm},
                        {"true_q_imm", truth.q_imm},
                        {"est_q_imm", est.q_imm},
                        {"true_m_imm", truth.m_imm},
                        {"est_m_imm", est.m_imm},
                        {"rel_err_p_imm", p_err},
                        {"rel_err_q_imm", q_err},
                        {"rel_err_m_imm", m_err},
                        {"within_tolerance", ok}});
  }
  const json report{{"categories", rows},
                    {"recovered_within_tolerance", recovered},
                    {"monotone_within_tolerance", fit.monotone_within_tolerance},
                    {"objective_trace", fit.objective_trace}};
  io::emit_report(report, (fs::path(outdir) / "recovery_report.json").string());
  return report;
}

}  // namespace adopt::pipeline
