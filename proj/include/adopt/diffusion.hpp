// Two-segment (influentials/imitators) diffusion state-space model over all
// categories jointly: SUR covariance, popularity-shrinkage prior, MAP
// objective, and MCEM estimation with genetic search in the M-step.
#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "adopt/common.hpp"
#include "adopt/ga.hpp"
#include "adopt/ukf.hpp"

namespace adopt::diffusion {

/// Fixed per-category diffusion parameters.
struct Params {
  double p_inf = 0.0;
  double q_inf = 0.0;
  double p_imm = 0.0;
  double q_imm = 0.0;
  double m_inf = 1.0;
  double m_imm = 1.0;
  double w = 0.5;
  double theta = 0.5;

  void validate() const {
    if (!(m_inf > 0.0) || !(m_imm > 0.0))
      throw InvalidCovarianceError("market sizes must be positive");
    if (w < 0.0 || w > 1.0 || theta < 0.0 || theta > 1.0)
      throw InvalidCovarianceError("w and theta must lie in [0, 1]");
    for (double r : {p_inf, q_inf, p_imm, q_imm})
      if (!std::isfinite(r) || r < 0.0)
        throw InvalidCovarianceError("adoption rates must be finite and >= 0");
  }
};

/// Joint noise structure: full 2J x 2J state covariance across the
/// (influential, imitator) equations of all categories, plus per-category
/// observation variances.
struct SurCovariance {
  MatrixXd state_cov;  // 2J x 2J
  VectorXd obs_vars;   // J

  void validate() const {
    if (!is_symmetric(state_cov))
      throw InvalidCovarianceError("state covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(state_cov);
    if (es.eigenvalues().minCoeff() < -1e-8 * std::max(1.0, state_cov.trace()))
      throw InvalidCovarianceError("state covariance not PSD");
    if ((obs_vars.array() <= 0.0).any())
      throw InvalidCovarianceError("observation variances must be positive");
  }
};

/// Popularity-shrinkage prior: transformed per-category parameter vectors are
/// shrunk toward shrinkage * popularity_j with isotropic variance prior_var.
struct HierPrior {
  VectorXd shrinkage;  // 8
  double prior_var = 1.0;
  VectorXd popularity;  // J
};

/// Observed cumulative adopters, one row per category, contiguous days.
struct AdoptionSeries {
  MatrixXd y;  // J x T

  Eigen::Index categories() const { return y.rows(); }
  Eigen::Index days() const { return y.cols(); }
};

constexpr int kParamsPerCategory = 8;

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// One day of the discrete two-segment recursion. The default form carries
/// the previous cumulative level forward (c_t = c_{t-1} + hazard * remaining);
/// `literal` drops the carry-over term. Outputs are clamped to [0, M].
inline std::pair<double, double> state_transition(double c_inf_prev, double c_imm_prev,
                                                  const Params& p, bool literal = false) {
  const double share_inf = c_inf_prev / p.m_inf;
  const double share_imm = c_imm_prev / p.m_imm;
  const double gain_inf = (p.p_inf + p.q_inf * share_inf) * (p.m_inf - c_inf_prev);
  const double gain_imm = (p.p_imm + p.q_imm * (p.w * share_inf + (1.0 - p.w) * share_imm)) *
                          (p.m_imm - c_imm_prev);
  double c_inf = literal ? gain_inf : c_inf_prev + gain_inf;
  double c_imm = literal ? gain_imm : c_imm_prev + gain_imm;
  c_inf = std::clamp(c_inf, 0.0, p.m_inf);
  c_imm = std::clamp(c_imm, 0.0, p.m_imm);
  return {c_inf, c_imm};
}

/// Expected observed cumulative adopters: theta-weighted combination of
/// the two latent segments.
inline double observe(double c_inf, double c_imm, double theta) {
  return theta * c_inf + (1.0 - theta) * c_imm;
}

/// Stack all categories into one 2J-dimensional state-space model. Category j
/// occupies state rows (2j, 2j+1) = (influential, imitator).
inline ukf::SsModel build_joint_model(const std::vector<Params>& params,
                                      const SurCovariance& cov, bool literal = false) {
  const Eigen::Index j_count = static_cast<Eigen::Index>(params.size());
  if (cov.state_cov.rows() != 2 * j_count || cov.obs_vars.size() != j_count)
    throw InvalidCovarianceError("covariance dimensions inconsistent with parameter count");
  cov.validate();
  ukf::SsModel model;
  model.state_dim = 2 * j_count;
  model.obs_dim = j_count;
  model.process_cov = cov.state_cov;
  model.obs_cov = MatrixXd(cov.obs_vars.asDiagonal());
  model.transition = [params, literal](const VectorXd& x) {
    VectorXd out(x.size());
    for (std::size_t j = 0; j < params.size(); ++j) {
      const auto [ci, cm] = state_transition(x[2 * j], x[2 * j + 1], params[j], literal);
      out[2 * j] = ci;
      out[2 * j + 1] = cm;
    }
    return out;
  };
  model.observation = [params](const VectorXd& x) {
    VectorXd out(static_cast<Eigen::Index>(params.size()));
    for (std::size_t j = 0; j < params.size(); ++j)
      out[static_cast<Eigen::Index>(j)] = observe(x[2 * j], x[2 * j + 1], params[j].theta);
    return out;
  };
  return model;
}

// ---------------------------------------------------------------------------
// Flat unconstrained parameterization
// ---------------------------------------------------------------------------

namespace detail {

inline double safe_log(double x) { return std::log(std::max(x, 1e-12)); }

inline double logit(double p) {
  const double c = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return std::log(c / (1.0 - c));
}

inline double inv_logit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// Transformed per-category block: log rates, log market sizes, logit shares.
inline VectorXd transform_params(const Params& p) {
  VectorXd v(kParamsPerCategory);
  v << detail::safe_log(p.p_inf), detail::safe_log(p.q_inf), detail::safe_log(p.p_imm),
      detail::safe_log(p.q_imm), detail::safe_log(p.m_inf), detail::safe_log(p.m_imm),
      detail::logit(p.w), detail::logit(p.theta);
  return v;
}

inline Params untransform_params(const VectorXd& v) {
  Params p;
  p.p_inf = std::exp(v[0]);
  p.q_inf = std::exp(v[1]);
  p.p_imm = std::exp(v[2]);
  p.q_imm = std::exp(v[3]);
  p.m_inf = std::exp(v[4]);
  p.m_imm = std::exp(v[5]);
  p.w = detail::inv_logit(v[6]);
  p.theta = detail::inv_logit(v[7]);
  return p;
}

/// Offsets of the sections of the flat vector for J categories.
struct FlatLayout {
  Eigen::Index j_count;
  Eigen::Index params_begin = 0;
  Eigen::Index chol_begin;  // lower-triangular W factor, log diagonal
  Eigen::Index obs_begin;   // log V_j
  Eigen::Index shrink_begin;
  Eigen::Index prior_var_index;
  Eigen::Index total;

  explicit FlatLayout(Eigen::Index j) : j_count(j) {
    const Eigen::Index dim = 2 * j;
    chol_begin = kParamsPerCategory * j;
    obs_begin = chol_begin + dim * (dim + 1) / 2;
    shrink_begin = obs_begin + j;
    prior_var_index = shrink_begin + kParamsPerCategory;
    total = prior_var_index + 1;
  }
};

struct Unpacked {
  std::vector<Params> params;
  SurCovariance cov;
  VectorXd shrinkage;  // 8
  double prior_var = 1.0;
};

inline VectorXd pack(const std::vector<Params>& params, const SurCovariance& cov,
                     const VectorXd& shrinkage, double prior_var) {
  const FlatLayout lay(static_cast<Eigen::Index>(params.size()));
  VectorXd flat(lay.total);
  for (Eigen::Index j = 0; j < lay.j_count; ++j)
    flat.segment(kParamsPerCategory * j, kParamsPerCategory) = transform_params(params[j]);
  const MatrixXd l = cholesky_with_jitter(cov.state_cov);
  Eigen::Index idx = lay.chol_begin;
  for (Eigen::Index r = 0; r < l.rows(); ++r)
    for (Eigen::Index c = 0; c <= r; ++c)
      flat[idx++] = (r == c) ? detail::safe_log(l(r, c)) : l(r, c);
  for (Eigen::Index j = 0; j < lay.j_count; ++j)
    flat[lay.obs_begin + j] = detail::safe_log(cov.obs_vars[j]);
  flat.segment(lay.shrink_begin, kParamsPerCategory) = shrinkage;
  flat[lay.prior_var_index] = detail::safe_log(prior_var);
  return flat;
}

inline Unpacked unpack(const VectorXd& flat, Eigen::Index j_count) {
  const FlatLayout lay(j_count);
  if (flat.size() != lay.total)
    throw UsageError("flat parameter vector has wrong length");
  Unpacked out;
  out.params.reserve(j_count);
  for (Eigen::Index j = 0; j < j_count; ++j)
    out.params.push_back(untransform_params(flat.segment(kParamsPerCategory * j, kParamsPerCategory)));
  const Eigen::Index dim = 2 * j_count;
  MatrixXd l = MatrixXd::Zero(dim, dim);
  Eigen::Index idx = lay.chol_begin;
  for (Eigen::Index r = 0; r < dim; ++r)
    for (Eigen::Index c = 0; c <= r; ++c) {
      l(r, c) = (r == c) ? std::exp(flat[idx]) : flat[idx];
      ++idx;
    }
  out.cov.state_cov = l * l.transpose();
  symmetrize(out.cov.state_cov);
  out.cov.obs_vars = flat.segment(lay.obs_begin, j_count).array().exp();
  out.shrinkage = flat.segment(lay.shrink_begin, kParamsPerCategory);
  out.prior_var = std::exp(flat[lay.prior_var_index]);
  return out;
}

// ---------------------------------------------------------------------------
// MAP objective
// ---------------------------------------------------------------------------

constexpr double kFilterFailureSentinel = -1e100;

inline ukf::GaussianBelief launch_belief(Eigen::Index j_count) {
  return {VectorXd::Zero(2 * j_count), 1e-4 * MatrixXd::Identity(2 * j_count, 2 * j_count)};
}

struct MapParts {
  double log_likelihood = 0.0;
  double log_prior = 0.0;
};

/// Shrinkage prior over the transformed per-category blocks. The shrinkage
/// map and its variance are read from the flat vector; the HierPrior supplies
/// the popularity covariate.
inline double log_shrinkage_prior(const VectorXd& flat, const FlatLayout& lay,
                                  const VectorXd& popularity) {
  const VectorXd shrink = flat.segment(lay.shrink_begin, kParamsPerCategory);
  const double var = std::exp(flat[lay.prior_var_index]);
  constexpr double log2pi = 1.8378770664093454836;
  double total = 0.0;
  for (Eigen::Index j = 0; j < lay.j_count; ++j) {
    const VectorXd resid =
        flat.segment(kParamsPerCategory * j, kParamsPerCategory) - shrink * popularity[j];
    total += -0.5 * (kParamsPerCategory * (log2pi + std::log(var)) + resid.squaredNorm() / var);
  }
  return total;
}

inline MapParts log_map_parts(const VectorXd& flat, const AdoptionSeries& data,
                              const HierPrior& prior, const ukf::Tuning& tuning = {},
                              bool literal = false) {
  const Eigen::Index j_count = data.categories();
  const FlatLayout lay(j_count);
  MapParts parts;
  parts.log_prior = log_shrinkage_prior(flat, lay, prior.popularity);
  try {
    const Unpacked u = unpack(flat, j_count);
    const ukf::SsModel model = build_joint_model(u.params, u.cov, literal);
    std::vector<VectorXd> series(data.days());
    for (Eigen::Index t = 0; t < data.days(); ++t) series[t] = data.y.col(t);
    const auto filt = ukf::filter(series, model, tuning, launch_belief(j_count));
    parts.log_likelihood = filt.log_likelihood;
  } catch (const Error&) {
    parts.log_likelihood = kFilterFailureSentinel;
  }
  if (!std::isfinite(parts.log_likelihood)) parts.log_likelihood = kFilterFailureSentinel;
  return parts;
}

/// Posterior-mode objective: joint filter log-likelihood plus the shrinkage
/// prior in transformed space. Filter failure yields a large negative value.
inline double log_map(const VectorXd& flat, const AdoptionSeries& data,
                      const HierPrior& prior, const ukf::Tuning& tuning = {},
                      bool literal = false) {
  const MapParts parts = log_map_parts(flat, data, prior, tuning, literal);
  if (parts.log_likelihood <= kFilterFailureSentinel) return kFilterFailureSentinel;
  return parts.log_likelihood + parts.log_prior;
}

// ---------------------------------------------------------------------------
// Fit metrics
// ---------------------------------------------------------------------------

struct FitMetrics {
  VectorXd mad;  // per category
  VectorXd mse;
  double log_likelihood = 0.0;
};

/// Per-category mean absolute deviation and mean squared error of
/// observations against one-step-ahead predictions.
inline std::pair<VectorXd, VectorXd> error_metrics(const MatrixXd& observed,
                                                   const MatrixXd& predicted) {
  const MatrixXd err = observed - predicted;
  return {err.cwiseAbs().rowwise().mean(), err.array().square().rowwise().mean()};
}

inline FitMetrics forecast_metrics(const AdoptionSeries& data, const std::vector<Params>& params,
                                   const SurCovariance& cov, const ukf::Tuning& tuning = {},
                                   bool literal = false) {
  const ukf::SsModel model = build_joint_model(params, cov, literal);
  std::vector<VectorXd> series(data.days());
  for (Eigen::Index t = 0; t < data.days(); ++t) series[t] = data.y.col(t);
  const auto filt = ukf::filter(series, model, tuning, launch_belief(data.categories()));
  MatrixXd pred(data.categories(), data.days());
  for (Eigen::Index t = 0; t < data.days(); ++t) pred.col(t) = filt.one_step_pred_means[t];
  FitMetrics fit;
  std::tie(fit.mad, fit.mse) = error_metrics(data.y, pred);
  fit.log_likelihood = filt.log_likelihood;
  return fit;
}

// ---------------------------------------------------------------------------
// MCEM
// ---------------------------------------------------------------------------

struct McemConfig {
  int iterations = 20;
  int samples = 50;  // latent trajectories per E-step
  ga::Config ga{.population = 48, .generations = 15, .mutation_sigma = 0.08,
                .init_spread = 0.15};
  ukf::Tuning tuning;
  std::uint64_t seed = 0;
  bool literal_transition = false;
  std::optional<double> fixed_theta;
  std::optional<double> fixed_w;
  int min_days = 30;
  double obs_var_floor_rel = 1e-6;  // relative to squared data scale
  double prior_var_floor = 1e-4;
  // Final per-category genetic refinement of the posterior-mode objective
  // itself (0 rounds disables it).
  int polish_rounds = 2;
  ga::Config polish_ga{.population = 24, .generations = 12, .mutation_sigma = 0.05,
                       .init_spread = 0.08};
};

struct LatentState {
  MatrixXd c_inf;  // J x T filtered means
  MatrixXd c_imm;
  std::vector<std::vector<Eigen::Matrix2d>> cov;  // [j][t]
};

struct McemResult {
  std::vector<Params> params;
  SurCovariance cov;
  VectorXd shrinkage;
  double prior_var = 1.0;
  LatentState latent;
  FitMetrics fit;
  std::vector<double> objective_trace;  // maximized MC expected log-posterior
  std::vector<double> objective_se;     // Monte-Carlo standard errors
  bool monotone_within_tolerance = true;
  VectorXd flat;
};

namespace detail {

/// Center of the initial search region: literature-magnitude rates with
/// market sizes anchored to the observed final levels.
inline std::vector<Params> initial_center(const AdoptionSeries& data, const McemConfig& cfg) {
  std::vector<Params> out;
  out.reserve(data.categories());
  for (Eigen::Index j = 0; j < data.categories(); ++j) {
    const double y_final = std::max(1.0, data.y(j, data.days() - 1));
    Params p;
    p.p_inf = 0.025;
    p.q_inf = 1e-3;
    p.p_imm = 0.29;
    p.q_imm = 0.2;
    p.m_imm = 1.5 * y_final;
    p.m_inf = 0.075 * y_final;
    p.w = cfg.fixed_w.value_or(0.5);
    p.theta = cfg.fixed_theta.value_or(0.044);
    out.push_back(p);
  }
  return out;
}

struct EStepSamples {
  // samples[s] is a 2J x (T+1) matrix of latent states, column 0 = launch state.
  std::vector<MatrixXd> states;
};

inline EStepSamples draw_latent_samples(const ukf::FilterOutput& filt,
                                        const ukf::GaussianBelief& init, int count,
                                        std::uint64_t seed, std::uint64_t iter) {
  const Eigen::Index dim = init.mean.size();
  const auto t_count = static_cast<Eigen::Index>(filt.beliefs.size());
  std::vector<MatrixXd> chols;
  chols.reserve(t_count + 1);
  chols.push_back(cholesky_with_jitter(init.cov));
  for (const auto& b : filt.beliefs) {
    MatrixXd c = b.cov;
    symmetrize(c);
    // Small negative eigenvalues from the update are repaired before sampling.
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
    const VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    chols.push_back(es.eigenvectors() * ev.cwiseSqrt().asDiagonal());
  }
  EStepSamples out;
  out.states.reserve(count);
  for (int s = 0; s < count; ++s) {
    Rng rng(split_seed(seed, iter, static_cast<std::uint64_t>(s)));
    MatrixXd traj(dim, t_count + 1);
    traj.col(0) = init.mean + chols[0] * rng.normal_vector(dim);
    for (Eigen::Index t = 0; t < t_count; ++t)
      traj.col(t + 1) = filt.beliefs[t].mean + chols[t + 1] * rng.normal_vector(dim);
    out.states.push_back(std::move(traj));
  }
  return out;
}

/// Transition residuals r_t = c_t - F(c_{t-1}) for one sampled trajectory.
inline MatrixXd transition_residuals(const MatrixXd& traj, const std::vector<Params>& params,
                                     bool literal) {
  const Eigen::Index t_count = traj.cols() - 1;
  MatrixXd resid(traj.rows(), t_count);
  for (Eigen::Index t = 0; t < t_count; ++t) {
    for (std::size_t j = 0; j < params.size(); ++j) {
      const auto [ci, cm] =
          state_transition(traj(2 * j, t), traj(2 * j + 1, t), params[j], literal);
      resid(2 * j, t) = traj(2 * j, t + 1) - ci;
      resid(2 * j + 1, t) = traj(2 * j + 1, t + 1) - cm;
    }
  }
  return resid;
}

}  // namespace detail

/// Fit the joint diffusion model by Monte-Carlo EM. The E-step samples latent
/// trajectories from the filtered beliefs; the M-step maximizes the resulting
/// expected complete-data log-posterior by a genetic search over each
/// category's parameter block with the covariance blocks, observation
/// variances and shrinkage hyperparameters updated by their closed-form
/// conditional maximizers.
inline McemResult mcem_fit(const AdoptionSeries& data, const HierPrior& prior,
                           const McemConfig& cfg) {
  const Eigen::Index j_count = data.categories();
  const Eigen::Index t_count = data.days();
  if (t_count < cfg.min_days)
    throw DegenerateInputError("need at least " + std::to_string(cfg.min_days) +
                               " days per category to identify market sizes; got " +
                               std::to_string(t_count));
  constexpr double log2pi = 1.8378770664093454836;

  const double data_scale = std::max(1.0, data.y.maxCoeff());
  const double v_floor = cfg.obs_var_floor_rel * data_scale * data_scale;

  const auto pin = [&cfg](Params& p) {
    if (cfg.fixed_theta) p.theta = *cfg.fixed_theta;
    if (cfg.fixed_w) p.w = *cfg.fixed_w;
  };

  // Initial state.
  std::vector<Params> params = detail::initial_center(data, cfg);
  SurCovariance cov;
  cov.state_cov = MatrixXd::Zero(2 * j_count, 2 * j_count);
  cov.obs_vars = VectorXd(j_count);
  for (Eigen::Index j = 0; j < j_count; ++j) {
    cov.state_cov(2 * j, 2 * j) = std::pow(0.01 * params[j].m_inf, 2) + 1e-6;
    cov.state_cov(2 * j + 1, 2 * j + 1) = std::pow(0.01 * params[j].m_imm, 2) + 1e-6;
    cov.obs_vars[j] = std::max(v_floor, std::pow(0.02 * params[j].m_imm, 2));
  }
  VectorXd shrinkage = prior.shrinkage.size() == kParamsPerCategory
                           ? prior.shrinkage
                           : VectorXd::Zero(kParamsPerCategory);
  double prior_var = prior.prior_var > 0.0 ? prior.prior_var : 1.0;

  std::vector<VectorXd> series(t_count);
  for (Eigen::Index t = 0; t < t_count; ++t) series[t] = data.y.col(t);
  const ukf::GaussianBelief init_belief = launch_belief(j_count);

  McemResult result;
  int consecutive_drops = 0;

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    // E-step: filter under current parameters, sample latent trajectories.
    const ukf::SsModel model = build_joint_model(params, cov, cfg.literal_transition);
    const auto filt = ukf::filter(series, model, cfg.tuning, init_belief);
    const auto samples = detail::draw_latent_samples(filt, init_belief, cfg.samples, cfg.seed,
                                                     static_cast<std::uint64_t>(iter));
    const int s_count = cfg.samples;
    const double n_terms = static_cast<double>(s_count) * static_cast<double>(t_count);

    // Current residuals and W inverse for the block objectives.
    std::vector<MatrixXd> resid(s_count);
    for (int s = 0; s < s_count; ++s)
      resid[s] = detail::transition_residuals(samples.states[s], params, cfg.literal_transition);
    MatrixXd w_inv = floored_inverse(cov.state_cov, 1e-10 * std::max(1.0, cov.state_cov.trace()))
                         .inverse;

    // M-step part 1: per-category genetic search over the 8 transformed
    // parameters, holding W and the other categories fixed.
    for (Eigen::Index j = 0; j < j_count; ++j) {
      // Coupling term from the other categories' residuals through W^{-1}.
      const MatrixXd g_jj = w_inv.block<2, 2>(2 * j, 2 * j);
      std::vector<MatrixXd> coupling(s_count, MatrixXd::Zero(2, t_count));
      for (int s = 0; s < s_count; ++s) {
        for (Eigen::Index k = 0; k < j_count; ++k) {
          if (k == j) continue;
          coupling[s].noalias() +=
              w_inv.block<2, 2>(2 * j, 2 * k) * resid[s].middleRows(2 * k, 2);
        }
      }
      const VectorXd prior_center = shrinkage * prior.popularity[j];

      const auto block_objective = [&](const VectorXd& phi) {
        Params cand = untransform_params(phi);
        pin(cand);
        double quad = 0.0;
        double obs_ss = 0.0;
        for (int s = 0; s < s_count; ++s) {
          const MatrixXd& traj = samples.states[s];
          for (Eigen::Index t = 0; t < t_count; ++t) {
            const auto [ci, cm] = state_transition(traj(2 * j, t), traj(2 * j + 1, t), cand,
                                                   cfg.literal_transition);
            const Eigen::Vector2d r(traj(2 * j, t + 1) - ci, traj(2 * j + 1, t + 1) - cm);
            quad += r.dot(g_jj * r) + 2.0 * r.dot(coupling[s].col(t));
            const double mu = observe(traj(2 * j, t + 1), traj(2 * j + 1, t + 1), cand.theta);
            obs_ss += std::pow(data.y(j, t) - mu, 2);
          }
        }
        const double v_hat = std::max(v_floor, obs_ss / n_terms);
        const double obs_term = -0.5 * n_terms * (log2pi + std::log(v_hat) + obs_ss / (n_terms * v_hat));
        const VectorXd presid = phi - prior_center;
        const double prior_term = -0.5 * presid.squaredNorm() / prior_var;
        return -0.5 * quad + obs_term + prior_term;
      };

      ga::Config gcfg = cfg.ga;
      gcfg.seed = split_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(iter),
                             static_cast<std::uint64_t>(j));
      const auto best = ga::optimize(block_objective, transform_params(params[j]), gcfg);
      Params updated = untransform_params(best.best);
      pin(updated);
      params[static_cast<std::size_t>(j)] = updated;
      for (int s = 0; s < s_count; ++s)
        resid[s] = detail::transition_residuals(samples.states[s], params, cfg.literal_transition);
    }

    // M-step part 2: closed-form conditional maximizers.
    MatrixXd w_new = MatrixXd::Zero(2 * j_count, 2 * j_count);
    for (int s = 0; s < s_count; ++s) w_new.noalias() += resid[s] * resid[s].transpose();
    w_new /= n_terms;
    w_new.diagonal().array() += 1e-10 * std::max(1.0, w_new.trace()) + 1e-12;
    symmetrize(w_new);
    cov.state_cov = w_new;

    for (Eigen::Index j = 0; j < j_count; ++j) {
      double ss = 0.0;
      for (int s = 0; s < s_count; ++s)
        for (Eigen::Index t = 0; t < t_count; ++t) {
          const double mu = observe(samples.states[s](2 * j, t + 1),
                                    samples.states[s](2 * j + 1, t + 1), params[j].theta);
          ss += std::pow(data.y(j, t) - mu, 2);
        }
      cov.obs_vars[j] = std::max(v_floor, ss / n_terms);
    }

    // Shrinkage map by per-component least squares through the origin, then
    // the residual-variance maximizer.
    MatrixXd phi(kParamsPerCategory, j_count);
    for (Eigen::Index j = 0; j < j_count; ++j) phi.col(j) = transform_params(params[j]);
    const double pop_ss = prior.popularity.squaredNorm();
    if (pop_ss > 0.0) shrinkage = phi * prior.popularity / pop_ss;
    double prior_ss = 0.0;
    for (Eigen::Index j = 0; j < j_count; ++j)
      prior_ss += (phi.col(j) - shrinkage * prior.popularity[j]).squaredNorm();
    prior_var = std::max(cfg.prior_var_floor,
                         prior_ss / static_cast<double>(kParamsPerCategory * j_count));

    // Record the maximized objective with its Monte-Carlo standard error.
    const MatrixXd w_inv_new =
        floored_inverse(cov.state_cov, 1e-10 * std::max(1.0, cov.state_cov.trace())).inverse;
    const double w_logdet = floored_inverse(cov.state_cov).log_det;
    VectorXd per_sample(s_count);
    for (int s = 0; s < s_count; ++s) {
      double q = 0.0;
      for (Eigen::Index t = 0; t < t_count; ++t) {
        const VectorXd r = resid[s].col(t);
        q += -0.5 * (2 * j_count * log2pi + w_logdet + r.dot(w_inv_new * r));
        for (Eigen::Index j = 0; j < j_count; ++j) {
          const double mu = observe(samples.states[s](2 * j, t + 1),
                                    samples.states[s](2 * j + 1, t + 1), params[j].theta);
          q += -0.5 * (log2pi + std::log(cov.obs_vars[j]) +
                       std::pow(data.y(j, t) - mu, 2) / cov.obs_vars[j]);
        }
      }
      per_sample[s] = q;
    }
    double q_mean = per_sample.mean();
    for (Eigen::Index j = 0; j < j_count; ++j) {
      const VectorXd presid = phi.col(j) - shrinkage * prior.popularity[j];
      q_mean += -0.5 * (kParamsPerCategory * (log2pi + std::log(prior_var)) +
                        presid.squaredNorm() / prior_var);
    }
    const double q_se =
        s_count > 1 ? std::sqrt((per_sample.array() - per_sample.mean()).square().sum() /
                                (s_count - 1) / s_count)
                    : 0.0;

    if (!result.objective_trace.empty()) {
      const double tol = 2.0 * std::max(q_se, result.objective_se.back());
      if (q_mean < result.objective_trace.back() - tol)
        ++consecutive_drops;
      else
        consecutive_drops = 0;
      if (consecutive_drops >= 3) result.monotone_within_tolerance = false;
    }
    result.objective_trace.push_back(q_mean);
    result.objective_se.push_back(q_se);
  }

  // Posterior-mode polish: genetic refinement of log_map block by block,
  // seeded at the MCEM estimate so the objective can only improve.
  if (cfg.polish_rounds > 0) {
    VectorXd flat = pack(params, cov, shrinkage, prior_var);
    const FlatLayout lay(j_count);
    for (int round = 0; round < cfg.polish_rounds; ++round) {
      for (Eigen::Index j = 0; j < j_count; ++j) {
        const auto block_objective = [&](const VectorXd& phi) {
          VectorXd cand = flat;
          Params p = untransform_params(phi);
          pin(p);
          cand.segment(kParamsPerCategory * j, kParamsPerCategory) = transform_params(p);
          return log_map(cand, data, prior, cfg.tuning, cfg.literal_transition);
        };
        ga::Config gcfg = cfg.polish_ga;
        gcfg.seed = split_seed(cfg.seed, 5000 + static_cast<std::uint64_t>(round),
                               static_cast<std::uint64_t>(j));
        const auto best =
            ga::optimize(block_objective, flat.segment(kParamsPerCategory * j, kParamsPerCategory), gcfg);
        Params p = untransform_params(best.best);
        pin(p);
        flat.segment(kParamsPerCategory * j, kParamsPerCategory) = transform_params(p);
        params[static_cast<std::size_t>(j)] = p;
      }
    }
    // Re-profile the shrinkage hyperparameters at the polished estimate.
    MatrixXd phi(kParamsPerCategory, j_count);
    for (Eigen::Index j = 0; j < j_count; ++j) phi.col(j) = transform_params(params[j]);
    const double pop_ss = prior.popularity.squaredNorm();
    if (pop_ss > 0.0) shrinkage = phi * prior.popularity / pop_ss;
    double prior_ss = 0.0;
    for (Eigen::Index j = 0; j < j_count; ++j)
      prior_ss += (phi.col(j) - shrinkage * prior.popularity[j]).squaredNorm();
    prior_var = std::max(cfg.prior_var_floor,
                         prior_ss / static_cast<double>(kParamsPerCategory * j_count));
  }

  // Final filter pass for the latent trajectories and fit metrics.
  const ukf::SsModel model = build_joint_model(params, cov, cfg.literal_transition);
  const auto filt = ukf::filter(series, model, cfg.tuning, init_belief);
  result.latent.c_inf = MatrixXd(j_count, t_count);
  result.latent.c_imm = MatrixXd(j_count, t_count);
  result.latent.cov.assign(j_count, std::vector<Eigen::Matrix2d>(t_count));
  MatrixXd pred(j_count, t_count);
  for (Eigen::Index t = 0; t < t_count; ++t) {
    pred.col(t) = filt.one_step_pred_means[t];
    for (Eigen::Index j = 0; j < j_count; ++j) {
      result.latent.c_inf(j, t) = filt.beliefs[t].mean[2 * j];
      result.latent.c_imm(j, t) = filt.beliefs[t].mean[2 * j + 1];
      result.latent.cov[j][t] = filt.beliefs[t].cov.block<2, 2>(2 * j, 2 * j);
    }
  }
  std::tie(result.fit.mad, result.fit.mse) = error_metrics(data.y, pred);
  result.fit.log_likelihood = filt.log_likelihood;
  result.params = params;
  result.cov = cov;
  result.shrinkage = shrinkage;
  result.prior_var = prior_var;
  result.flat = pack(params, cov, shrinkage, prior_var);
  return result;
}

}  // namespace adopt::diffusion
