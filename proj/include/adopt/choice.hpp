// Hierarchical multinomial-logit adoption-choice model with a Dirichlet-
// process mixture-of-normals prior on the per-customer coefficients.
// Estimation alternates Metropolis random-walk steps on each customer with a
// Polya-Urn Gibbs sweep over the mixture.
#pragma once

#include <array>
#include <cassert>
#include <optional>
#include <string>
#include <vector>

#include "adopt/common.hpp"

namespace adopt::choice {

// ---------------------------------------------------------------------------
// Panel and covariates
// ---------------------------------------------------------------------------

/// Weekly choice panel: choices[i][t] in {0..J} with 0 the outside good.
struct Panel {
  VectorXd tenure;                       // per customer, days since registration
  std::vector<std::vector<int>> choices; // I x T
  int j_count = 0;

  int customers() const { return static_cast<int>(choices.size()); }
  int weeks() const { return choices.empty() ? 0 : static_cast<int>(choices.front().size()); }

  void validate() const {
    if (choices.empty()) throw DataError("choice panel has no customers");
    const std::size_t t = choices.front().size();
    for (const auto& row : choices) {
      if (row.size() != t) throw DataError("ragged choice panel");
      for (int c : row)
        if (c < 0 || c > j_count) throw DataError("choice id out of range");
    }
    if (tenure.size() != customers()) throw DataError("tenure length mismatch");
  }
};

/// Download-history states: s(i, t) counts inside-good choices before week t,
/// so s(i, 0) = 0 and s(i, t) = s(i, t-1) + 1{choices[i][t-1] >= 1}.
inline Eigen::MatrixXi history_states(const Panel& panel) {
  Eigen::MatrixXi s(panel.customers(), panel.weeks());
  for (int i = 0; i < panel.customers(); ++i) {
    int acc = 0;
    for (int t = 0; t < panel.weeks(); ++t) {
      s(i, t) = acc;
      if (panel.choices[i][t] >= 1) ++acc;
    }
  }
  return s;
}

/// Weekly covariates. An empty `social` matrix means the no-social-influence
/// variant (the corresponding coefficient column is absent).
struct Covariates {
  MatrixXd social;                  // J x T or 0 x 0
  std::array<MatrixXd, 3> factors;  // each J x T

  bool has_social() const { return social.size() > 0; }
  int param_dim(int j_count) const { return j_count + 1 + (has_social() ? 1 : 0) + 3; }
};

/// Coefficient layout: [alpha_1..alpha_J | history | (social) | f1 f2 f3].
inline std::vector<std::string> param_labels(int j_count, bool has_social) {
  std::vector<std::string> labels;
  for (int j = 1; j <= j_count; ++j) labels.push_back("alpha_" + std::to_string(j));
  labels.push_back("history");
  if (has_social) labels.push_back("social");
  labels.push_back("factor_1");
  labels.push_back("factor_2");
  labels.push_back("factor_3");
  return labels;
}

// ---------------------------------------------------------------------------
// Utility, probabilities, likelihoods
// ---------------------------------------------------------------------------

/// Deterministic utilities of the J inside goods for one customer-week.
inline VectorXd utility(const VectorXd& coeffs, double s_it, const Covariates& covs, int week,
                        int j_count) {
  VectorXd v(j_count);
  const bool social = covs.has_social();
  const int hist_ix = j_count;
  const int social_ix = j_count + 1;
  const int factor_ix = j_count + 1 + (social ? 1 : 0);
  for (int j = 0; j < j_count; ++j) {
    double u = coeffs[j] + coeffs[hist_ix] * s_it;
    if (social) u += coeffs[social_ix] * covs.social(j, week);
    for (int f = 0; f < 3; ++f) u += coeffs[factor_ix + f] * covs.factors[f](j, week);
    v[j] = u;
  }
  return v;
}

/// Multinomial-logit probabilities over {outside, 1..J}; the outside good has
/// utility zero. Max-subtraction keeps extreme utilities finite.
inline VectorXd choice_prob(const VectorXd& v) {
  const double m = std::max(0.0, v.size() > 0 ? v.maxCoeff() : 0.0);
  VectorXd p(v.size() + 1);
  p[0] = std::exp(-m);
  double total = p[0];
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    p[j + 1] = std::exp(v[j] - m);
    total += p[j + 1];
  }
  p /= total;
#ifndef NDEBUG
  assert(std::abs(p.sum() - 1.0) < 1e-12);
#endif
  return p;
}

/// Sum over weeks of the log choice probability for one customer.
inline double panel_loglik(const VectorXd& coeffs, const Panel& panel,
                           const Eigen::MatrixXi& hist, const Covariates& covs, int i) {
  double total = 0.0;
  for (int t = 0; t < panel.weeks(); ++t) {
    const VectorXd v = utility(coeffs, hist(i, t), covs, t, panel.j_count);
    const VectorXd p = choice_prob(v);
    total += std::log(std::max(p[panel.choices[i][t]], 1e-300));
  }
  return total;
}

/// Analytic gradient of panel_loglik in the coefficient vector.
inline VectorXd panel_loglik_grad(const VectorXd& coeffs, const Panel& panel,
                                  const Eigen::MatrixXi& hist, const Covariates& covs, int i) {
  const int j_count = panel.j_count;
  const bool social = covs.has_social();
  const int hist_ix = j_count;
  const int social_ix = j_count + 1;
  const int factor_ix = j_count + 1 + (social ? 1 : 0);
  VectorXd grad = VectorXd::Zero(coeffs.size());
  const auto add_design = [&](VectorXd& out, int j, int t, int s_it, double weight) {
    out[j] += weight;
    out[hist_ix] += weight * static_cast<double>(s_it);
    if (social) out[social_ix] += weight * covs.social(j, t);
    for (int f = 0; f < 3; ++f) out[factor_ix + f] += weight * covs.factors[f](j, t);
  };
  for (int t = 0; t < panel.weeks(); ++t) {
    const int s_it = hist(i, t);
    const VectorXd v = utility(coeffs, s_it, covs, t, j_count);
    const VectorXd p = choice_prob(v);
    const int chosen = panel.choices[i][t];
    if (chosen >= 1) add_design(grad, chosen - 1, t, s_it, 1.0);
    for (int j = 0; j < j_count; ++j) add_design(grad, j, t, s_it, -p[j + 1]);
  }
  return grad;
}

inline double pooled_loglik(const VectorXd& coeffs, const Panel& panel,
                            const Eigen::MatrixXi& hist, const Covariates& covs) {
  double total = 0.0;
  for (int i = 0; i < panel.customers(); ++i)
    total += panel_loglik(coeffs, panel, hist, covs, i);
  return total;
}

inline VectorXd pooled_loglik_grad(const VectorXd& coeffs, const Panel& panel,
                                   const Eigen::MatrixXi& hist, const Covariates& covs) {
  VectorXd grad = VectorXd::Zero(coeffs.size());
  for (int i = 0; i < panel.customers(); ++i)
    grad += panel_loglik_grad(coeffs, panel, hist, covs, i);
  return grad;
}

/// Fractional blend of the unit and pooled log-likelihoods:
/// (1 - w) l_i + w beta_i l_pooled with beta_i = n_i / N. w = 0 reduces to
/// the unit likelihood bit-exactly.
inline double fractional_loglik(const VectorXd& coeffs, const Panel& panel,
                                const Eigen::MatrixXi& hist, const Covariates& covs, int i,
                                double w) {
  const double unit = panel_loglik(coeffs, panel, hist, covs, i);
  if (w == 0.0) return unit;
  const double n_i = static_cast<double>(panel.weeks());
  const double n_total = n_i * static_cast<double>(panel.customers());
  const double beta = n_i / n_total;
  return (1.0 - w) * unit + w * beta * pooled_loglik(coeffs, panel, hist, covs);
}

inline VectorXd fractional_loglik_grad(const VectorXd& coeffs, const Panel& panel,
                                       const Eigen::MatrixXi& hist, const Covariates& covs,
                                       int i, double w) {
  VectorXd grad = panel_loglik_grad(coeffs, panel, hist, covs, i);
  if (w == 0.0) return grad;
  const double beta = 1.0 / static_cast<double>(panel.customers());
  return (1.0 - w) * grad + w * beta * pooled_loglik_grad(coeffs, panel, hist, covs);
}

// ---------------------------------------------------------------------------
// Metropolis random walk
// ---------------------------------------------------------------------------

struct MhOutcome {
  VectorXd value;
  bool accepted = false;
  double log_target = 0.0;
};

/// One random-walk Metropolis step with proposal x + s L z, z ~ N(0, I).
template <typename LogTarget>
MhOutcome mh_rw(const LogTarget& log_target, const VectorXd& current,
                double current_lt, const MatrixXd& chol_l, double s, Rng& rng) {
  const VectorXd proposal = current + s * (chol_l * rng.normal_vector(current.size()));
  const double proposal_lt = log_target(proposal);
  MhOutcome out;
  if (std::log(rng.uniform() + 1e-300) < proposal_lt - current_lt) {
    out.value = proposal;
    out.accepted = true;
    out.log_target = proposal_lt;
  } else {
    out.value = current;
    out.log_target = current_lt;
  }
  return out;
}

struct Component {
  VectorXd mu;
  MatrixXd sigma;
};

/// One Metropolis step on customer i's coefficients: random-walk proposal
/// from the given shell, accept/reject against the unit likelihood times the
/// component prior N(delta z_i + mu, Sigma).
inline MhOutcome mh_rw_unit_step(const VectorXd& a_i, const Component& comp,
                                 const MatrixXd& delta, double z_i, const Panel& panel,
                                 const Eigen::MatrixXi& hist, const Covariates& covs, int i,
                                 const MatrixXd& omega_chol, double s, Rng& rng) {
  const VectorXd prior_mean = comp.mu + delta.col(0) * z_i;
  const MatrixXd prior_chol = cholesky_with_jitter(comp.sigma);
  const auto target = [&](const VectorXd& x) {
    return panel_loglik(x, panel, hist, covs, i) + mvn_logpdf_chol(x, prior_mean, prior_chol);
  };
  return mh_rw(target, a_i, target(a_i), omega_chol, s, rng);
}

/// Quasi-Newton (BFGS) ascent of a differentiable log-likelihood, used to
/// locate the fractional-likelihood maximum per customer.
template <typename F, typename G>
VectorXd bfgs_maximize(const F& f, const G& grad, VectorXd x, int max_iter = 80) {
  MatrixXd h_inv = MatrixXd::Identity(x.size(), x.size());
  double fx = f(x);
  VectorXd g = grad(x);
  for (int it = 0; it < max_iter; ++it) {
    if (g.norm() < 1e-7) break;
    VectorXd dir = h_inv * g;
    if (dir.dot(g) <= 0.0) {
      h_inv = MatrixXd::Identity(x.size(), x.size());
      dir = g;
    }
    double step = 1.0;
    double f_new = -std::numeric_limits<double>::infinity();
    VectorXd x_new;
    for (int ls = 0; ls < 30; ++ls) {
      x_new = x + step * dir;
      f_new = f(x_new);
      if (f_new > fx + 1e-4 * step * g.dot(dir)) break;
      step *= 0.5;
    }
    if (!(f_new > fx)) break;
    const VectorXd g_new = grad(x_new);
    const VectorXd sd = x_new - x;
    const VectorXd yd = g - g_new;  // note: ascent, curvature sign flipped
    const double sy = sd.dot(yd);
    if (sy > 1e-12) {
      const MatrixXd eye = MatrixXd::Identity(x.size(), x.size());
      const MatrixXd v = eye - sd * yd.transpose() / sy;
      h_inv = v * h_inv * v.transpose() + sd * sd.transpose() / sy;
    }
    x = x_new;
    fx = f_new;
    g = g_new;
  }
  return x;
}

/// Negative Hessian of `f` by central finite differences of its gradient.
template <typename G>
MatrixXd negative_hessian_fd(const G& grad, const VectorXd& x, double h_rel = 1e-5) {
  const Eigen::Index d = x.size();
  MatrixXd h(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double h_k = h_rel * (1.0 + std::abs(x[k]));
    VectorXd hi = x, lo = x;
    hi[k] += h_k;
    lo[k] -= h_k;
    h.col(k) = -(grad(hi) - grad(lo)) / (2.0 * h_k);
  }
  symmetrize(h);
  return h;
}

// ---------------------------------------------------------------------------
// Dirichlet-process mixture
// ---------------------------------------------------------------------------

struct DpConfig {
  double a_min = 1e-5, a_max = 50.0;
  double vartheta_min = 1e-5, vartheta_max = 600.0;
  double nu_offset_min = 1e-5, nu_offset_max = 80.0;
  int grid_points = 64;
  double alpha_power = 0.8;
  double alpha_min = 0.0, alpha_max = 0.0;  // both zero: calibrated from the modal span
  bool single_component = false;
  double delta_prior_precision = 0.01;
};

struct MixtureState {
  std::vector<Component> components;
  VectorXi indicators;  // per customer
  MatrixXd delta;       // d x z_dim
  double alpha_conc = 1.0;
  double a = 1.0;
  double nu = 0.0;        // degrees of freedom, > d - 1
  double vartheta = 1.0;  // IW scale multiplier

  VectorXi counts() const {
    VectorXi n = VectorXi::Zero(static_cast<Eigen::Index>(components.size()));
    for (Eigen::Index i = 0; i < indicators.size(); ++i) ++n[indicators[i]];
    return n;
  }

  /// Empirical mixing weights n_k / I; sums to one.
  VectorXd pi() const {
    const VectorXi n = counts();
    VectorXd p = n.cast<double>();
    return p / p.sum();
  }

  void validate(int d) const {
    if (nu <= d - 1) throw InvalidCovarianceError("IW degrees of freedom must exceed d - 1");
    for (const auto& c : components) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(c.sigma);
      if (es.eigenvalues().minCoeff() < -1e-8)
        throw InvalidCovarianceError("mixture component covariance not PSD");
    }
    if (std::abs(pi().sum() - 1.0) > 1e-12)
      throw InvalidCovarianceError("mixing weights do not sum to one");
  }
};

/// Normal-inverse-Wishart posterior parameters for a block of deviations
/// (rows are A_i - Delta z_i for the cluster members; zero rows give the
/// prior itself). The prior mean of mu is zero.
struct NiwParams {
  double kappa = 0.0;  // n + a
  double nu = 0.0;     // nu + n
  VectorXd mean;       // mu-tilde
  MatrixXd scale;      // IW scale matrix
};

inline NiwParams niw_posterior(const MatrixXd& devs, int d, double a, double nu,
                               double vartheta) {
  const auto n = static_cast<double>(devs.rows());
  NiwParams out;
  out.kappa = n + a;
  out.nu = nu + n;
  const VectorXd xbar = n > 0 ? VectorXd(devs.colwise().mean()) : VectorXd::Zero(d);
  out.mean = (n * xbar) / (n + a);
  out.scale = nu * vartheta * MatrixXd::Identity(d, d);
  for (Eigen::Index r = 0; r < devs.rows(); ++r) {
    const VectorXd c = devs.row(r).transpose() - out.mean;
    out.scale.noalias() += c * c.transpose();
  }
  out.scale.noalias() += a * out.mean * out.mean.transpose();
  symmetrize(out.scale);
  return out;
}

/// Draw Sigma ~ IW(nu, scale) by Bartlett decomposition, then mu | Sigma.
inline Component draw_niw(const NiwParams& p, Rng& rng) {
  const Eigen::Index d = p.mean.size();
  const MatrixXd scale_inv = floored_inverse(p.scale, 1e-12 * std::max(1.0, p.scale.trace())).inverse;
  const MatrixXd l = cholesky_with_jitter(scale_inv);
  MatrixXd bart = MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    bart(i, i) = std::sqrt(rng.chi_squared(p.nu - static_cast<double>(i)));
    for (Eigen::Index j = 0; j < i; ++j) bart(i, j) = rng.normal();
  }
  const MatrixXd wishart_chol = l * bart;  // chol factor of X ~ W(nu, scale^{-1})
  // Sigma = X^{-1}
  const MatrixXd eye = MatrixXd::Identity(d, d);
  const MatrixXd inv_chol = wishart_chol.triangularView<Eigen::Lower>().solve(eye);
  Component c;
  c.sigma = inv_chol.transpose() * inv_chol;
  symmetrize(c.sigma);
  const MatrixXd sig_chol = cholesky_with_jitter(c.sigma / p.kappa);
  c.mu = p.mean + sig_chol * rng.normal_vector(d);
  return c;
}

/// Marginal log-density of one deviation under the base measure: a
/// multivariate Student-t with nu - d + 1 degrees of freedom.
inline double g0_marginal_logpdf(const VectorXd& x, double a, double nu, double vartheta) {
  const auto d = static_cast<double>(x.size());
  const double df = nu - d + 1.0;
  const double scale = nu * vartheta * (a + 1.0) / (a * df);
  const double quad = x.squaredNorm() / scale;
  return std::lgamma(0.5 * (df + d)) - std::lgamma(0.5 * df) -
         0.5 * d * std::log(df * std::numbers::pi) - 0.5 * d * std::log(scale) -
         0.5 * (df + d) * std::log1p(quad / df);
}

/// Stick-breaking weights; the final atom absorbs the unbroken remainder so
/// that left-to-right accumulation of the result is exactly one.
inline VectorXd stick_breaking(const VectorXd& betas) {
  const Eigen::Index k = betas.size();
  VectorXd pi(k);
  double remaining = 1.0;
  double partial = 0.0;
  for (Eigen::Index i = 0; i + 1 < k; ++i) {
    pi[i] = betas[i] * remaining;
    partial += pi[i];
    remaining *= (1.0 - betas[i]);
  }
  pi[k - 1] = 1.0 - partial;
  return pi;
}

/// Normalized log-pmf of the number of unique clusters after `i` draws at
/// concentration alpha, using the first-kind-Stirling approximation
/// S_i^(k) = Gamma(i)/Gamma(k) (gamma + ln i)^(k-1).
inline VectorXd unique_cluster_log_pmf(double alpha, int i) {
  if (i < 1 || !(alpha > 0.0)) throw UsageError("need i >= 1 and alpha > 0");
  VectorXd lp(i);
  const double lc = std::log(kEulerGamma + std::log(static_cast<double>(i)));
  for (int k = 1; k <= i; ++k)
    lp[k - 1] = std::lgamma(static_cast<double>(i)) - std::lgamma(static_cast<double>(k)) +
                (k - 1) * lc + k * std::log(alpha) -
                std::lgamma(static_cast<double>(i) + alpha);
  const double norm = logsumexp(lp);
  return lp.array() - norm;
}

inline VectorXd unique_cluster_pmf(double alpha, int i) {
  return unique_cluster_log_pmf(alpha, i).array().exp();
}

/// Modal cluster count of the approximate law, used to calibrate the
/// concentration-parameter bounds.
inline int unique_cluster_mode(double alpha, int i) {
  const VectorXd lp = unique_cluster_log_pmf(alpha, i);
  Eigen::Index arg;
  lp.maxCoeff(&arg);
  return static_cast<int>(arg) + 1;
}

/// Bounds [alpha_lo, alpha_hi] such that the modal cluster count spans
/// [1, min(30, i-1)] at sample size i.
inline std::pair<double, double> calibrate_alpha_bounds(int i) {
  const int hi_target = std::min(30, std::max(2, i - 1));
  double lo = 1e-3, hi = 1e3;
  double last_mode1 = lo;
  bool hi_found = false;
  for (int g = 0; g <= 240; ++g) {
    const double alpha = std::pow(10.0, -3.0 + 6.0 * g / 240.0);
    const int mode = unique_cluster_mode(alpha, i);
    if (mode <= 1) last_mode1 = alpha;
    if (!hi_found && mode >= hi_target) {
      hi = alpha;
      hi_found = true;
    }
  }
  if (!hi_found) hi = 1e3;
  lo = last_mode1;
  if (lo >= hi) lo = hi / 100.0;
  return {lo, hi};
}

/// One full Gibbs sweep over the mixture: (1) Polya-Urn reassignment of each
/// customer, (2) component draws from their normal-inverse-Wishart
/// conditionals, (3) griddy draws of the base-measure hyperparameters over
/// their bounded ranges, (4) griddy draw of the concentration parameter from
/// its bounded-power prior times the unique-cluster law, (5) conjugate
/// regression draw of the tenure shift. Emptied components are removed.
inline MixtureState gibbs_sweep(MixtureState state, const MatrixXd& coeffs,
                                const VectorXd& z_info, const DpConfig& cfg, Rng& rng) {
  const int i_count = static_cast<int>(coeffs.rows());
  const int d = static_cast<int>(coeffs.cols());
  if (i_count == 0) throw DataError("gibbs sweep on an empty panel");

  MatrixXd devs(i_count, d);
  for (int i = 0; i < i_count; ++i)
    devs.row(i) = coeffs.row(i) - (state.delta * z_info.segment(i, 1)).transpose();

  // (1) Polya-Urn reassignment.
  if (!cfg.single_component) {
    std::vector<int> counts(state.components.size(), 0);
    for (int i = 0; i < i_count; ++i) ++counts[state.indicators[i]];
    std::vector<MatrixXd> chols(state.components.size());
    for (std::size_t k = 0; k < state.components.size(); ++k)
      chols[k] = cholesky_with_jitter(state.components[k].sigma);

    for (int i = 0; i < i_count; ++i) {
      const int old_k = state.indicators[i];
      if (--counts[old_k] == 0) {
        counts.erase(counts.begin() + old_k);
        chols.erase(chols.begin() + old_k);
        state.components.erase(state.components.begin() + old_k);
        for (int ii = 0; ii < i_count; ++ii)
          if (state.indicators[ii] > old_k) --state.indicators[ii];
        state.indicators[i] = -1;
      }
      const VectorXd x = devs.row(i).transpose();
      const auto k_existing = static_cast<Eigen::Index>(state.components.size());
      VectorXd logw(k_existing + 1);
      for (Eigen::Index k = 0; k < k_existing; ++k)
        logw[k] = std::log(static_cast<double>(counts[k])) +
                  mvn_logpdf_chol(x, state.components[k].mu, chols[k]);
      logw[k_existing] = std::log(state.alpha_conc) +
                         g0_marginal_logpdf(x, state.a, state.nu, state.vartheta);
      const int pick = rng.categorical_log(logw);
      if (pick == static_cast<int>(k_existing)) {
        MatrixXd single(1, d);
        single.row(0) = x.transpose();
        const auto post = niw_posterior(single, d, state.a, state.nu, state.vartheta);
        state.components.push_back(draw_niw(post, rng));
        chols.push_back(cholesky_with_jitter(state.components.back().sigma));
        counts.push_back(0);
      }
      state.indicators[i] = pick;
      ++counts[pick];
    }
  }

  // (2) Component parameter draws.
  for (std::size_t k = 0; k < state.components.size(); ++k) {
    std::vector<int> members;
    for (int i = 0; i < i_count; ++i)
      if (state.indicators[i] == static_cast<int>(k)) members.push_back(i);
    MatrixXd block(static_cast<Eigen::Index>(members.size()), d);
    for (std::size_t r = 0; r < members.size(); ++r) block.row(r) = devs.row(members[r]);
    const auto post = niw_posterior(block, d, state.a, state.nu, state.vartheta);
    state.components[k] = draw_niw(post, rng);
  }

  // Precomputed per-component statistics for the hyperparameter draws.
  const auto k_count = static_cast<int>(state.components.size());
  VectorXd quad(k_count), log_det(k_count), trace_inv(k_count);
  for (int k = 0; k < k_count; ++k) {
    const auto inv = floored_inverse(state.components[k].sigma,
                                     1e-12 * std::max(1.0, state.components[k].sigma.trace()));
    quad[k] = state.components[k].mu.dot(inv.inverse * state.components[k].mu);
    log_det[k] = inv.log_det;
    trace_inv[k] = inv.inverse.trace();
  }

  const auto log_grid = [&](double lo, double hi) {
    VectorXd g(cfg.grid_points);
    for (int p = 0; p < cfg.grid_points; ++p)
      g[p] = lo * std::pow(hi / lo, (p + 0.5) / cfg.grid_points);
    return g;
  };
  const auto cell_widths = [&](const VectorXd& g, double lo, double hi) {
    VectorXd w(g.size());
    for (Eigen::Index p = 0; p < g.size(); ++p) {
      const double left = p == 0 ? lo : 0.5 * (g[p - 1] + g[p]);
      const double right = p + 1 == g.size() ? hi : 0.5 * (g[p] + g[p + 1]);
      w[p] = right - left;
    }
    return w;
  };

  // (3) Base-measure hyperparameters: a, then nu, then vartheta.
  {
    const VectorXd grid = log_grid(cfg.a_min, cfg.a_max);
    const VectorXd width = cell_widths(grid, cfg.a_min, cfg.a_max);
    VectorXd logw(cfg.grid_points);
    for (int p = 0; p < cfg.grid_points; ++p) {
      double lp = std::log(width[p]);
      for (int k = 0; k < k_count; ++k)
        lp += 0.5 * d * std::log(grid[p]) - 0.5 * grid[p] * quad[k];
      logw[p] = lp;
    }
    state.a = grid[rng.categorical_log(logw)];
  }
  {
    const VectorXd grid = log_grid(cfg.nu_offset_min, cfg.nu_offset_max);
    VectorXd logw(cfg.grid_points);
    for (int p = 0; p < cfg.grid_points; ++p) {
      const double nu = static_cast<double>(d) - 1.0 + grid[p];
      double lp = 0.0;  // uniform in log-offset; the grid is log-spaced
      const double half_nu = 0.5 * nu;
      for (int k = 0; k < k_count; ++k)
        lp += half_nu * d * std::log(nu * state.vartheta) - half_nu * d * std::log(2.0) -
              log_multivariate_gamma(d, half_nu) - 0.5 * (nu + d + 1.0) * log_det[k] -
              0.5 * nu * state.vartheta * trace_inv[k];
      logw[p] = lp;
    }
    state.nu = static_cast<double>(d) - 1.0 + grid[rng.categorical_log(logw)];
  }
  {
    const VectorXd grid = log_grid(cfg.vartheta_min, cfg.vartheta_max);
    const VectorXd width = cell_widths(grid, cfg.vartheta_min, cfg.vartheta_max);
    VectorXd logw(cfg.grid_points);
    for (int p = 0; p < cfg.grid_points; ++p) {
      double lp = std::log(width[p]);
      for (int k = 0; k < k_count; ++k)
        lp += 0.5 * state.nu * d * std::log(grid[p]) -
              0.5 * state.nu * grid[p] * trace_inv[k];
      logw[p] = lp;
    }
    state.vartheta = grid[rng.categorical_log(logw)];
  }

  // (4) Concentration parameter over its bounded range.
  if (!cfg.single_component) {
    double lo = cfg.alpha_min, hi = cfg.alpha_max;
    if (!(hi > lo) || !(lo > 0.0)) std::tie(lo, hi) = calibrate_alpha_bounds(i_count);
    VectorXd logw(cfg.grid_points);
    for (int p = 0; p < cfg.grid_points; ++p) {
      const double alpha = lo + (hi - lo) * (p + 0.5) / cfg.grid_points;
      const double frac = (alpha - lo) / (hi - lo);
      logw[p] = cfg.alpha_power * std::log1p(-frac) +
                unique_cluster_log_pmf(alpha, i_count)[k_count - 1];
    }
    const int pick = rng.categorical_log(logw);
    state.alpha_conc = lo + (hi - lo) * (pick + 0.5) / cfg.grid_points;
  }

  // (5) Tenure-shift regression draw with a diffuse normal prior.
  {
    MatrixXd precision = cfg.delta_prior_precision * MatrixXd::Identity(d, d);
    VectorXd rhs = VectorXd::Zero(d);
    std::vector<MatrixXd> sig_inv(state.components.size());
    for (std::size_t k = 0; k < state.components.size(); ++k)
      sig_inv[k] = floored_inverse(state.components[k].sigma,
                                   1e-12 * std::max(1.0, state.components[k].sigma.trace()))
                       .inverse;
    for (int i = 0; i < i_count; ++i) {
      const int k = state.indicators[i];
      const double z = z_info[i];
      precision.noalias() += z * z * sig_inv[k];
      rhs.noalias() +=
          z * (sig_inv[k] * (coeffs.row(i).transpose() - state.components[k].mu));
    }
    const MatrixXd prec_inv = floored_inverse(precision, 1e-12).inverse;
    const VectorXd mean = prec_inv * rhs;
    const MatrixXd l = cholesky_with_jitter(prec_inv);
    state.delta = mean + l * rng.normal_vector(d);
  }

  return state;
}

// ---------------------------------------------------------------------------
// Full sampler
// ---------------------------------------------------------------------------

struct FitConfig {
  int burnin = 2000;
  int kept_sweeps = 10000;
  int thin = 10;
  double w_frac = 0.05;
  double s2_init = 0.0;  // 0: 2.38^2 / d
  double adapt_target = 0.23;
  int adapt_interval = 100;
  int omega_rebuild = 100;
  DpConfig dp;
  std::uint64_t seed = 0;
  int max_emit_draws = 200;  // cap on stored draws (0 = keep all)
};

struct FitResult {
  std::vector<MatrixXd> draws;            // stored A draws, each I x d
  std::vector<VectorXi> indicator_draws;  // component labels per stored draw
  std::vector<VectorXd> delta_draws;
  std::vector<double> alpha_draws;
  std::vector<double> a_draws, nu_draws, vartheta_draws;
  std::vector<int> component_counts;
  std::vector<double> loglik_trace;  // total in-sample log-likelihood per stored draw
  VectorXd acceptance;               // per customer
  int param_dim = 0;
  std::vector<std::string> labels;
};

/// Per-customer proposal shells: Omega = (H_i + V_A^{-1})^{-1} with V_A the
/// covariance of the customer's current component. Falls back to V_A when the
/// combination is not factorizable.
inline MatrixXd proposal_chol(const MatrixXd& neg_hessian, const MatrixXd& v_a) {
  const MatrixXd v_inv = floored_inverse(v_a, 1e-12 * std::max(1.0, v_a.trace())).inverse;
  MatrixXd omega_inv = neg_hessian + v_inv;
  symmetrize(omega_inv);
  try {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(omega_inv);
    if (es.eigenvalues().minCoeff() <= 0.0) throw DegenerateCovarianceError("not PD");
    const MatrixXd omega = es.eigenvectors() *
                           es.eigenvalues().cwiseInverse().asDiagonal() *
                           es.eigenvectors().transpose();
    return cholesky_with_jitter(omega);
  } catch (const Error&) {
    return cholesky_with_jitter(v_a);
  }
}

inline FitResult fit(const Panel& panel, const Covariates& covs, const FitConfig& cfg) {
  panel.validate();
  const int i_count = panel.customers();
  const int d = covs.param_dim(panel.j_count);
  const Eigen::MatrixXi hist = history_states(panel);
  const VectorXd z_centered = panel.tenure.array() - panel.tenure.mean();

  // Resolve the concentration bounds once; the calibration scan is costly.
  DpConfig dp = cfg.dp;
  if (!dp.single_component && (!(dp.alpha_max > dp.alpha_min) || !(dp.alpha_min > 0.0)))
    std::tie(dp.alpha_min, dp.alpha_max) = calibrate_alpha_bounds(i_count);

  // Fractional-likelihood maxima and curvature, computed once per customer.
  // The chain starts at the per-customer maxima.
  std::vector<MatrixXd> neg_hessians(i_count);
  MatrixXd coeffs = MatrixXd::Zero(i_count, d);
  for (int i = 0; i < i_count; ++i) {
    const auto f = [&](const VectorXd& x) {
      return fractional_loglik(x, panel, hist, covs, i, cfg.w_frac);
    };
    const auto g = [&](const VectorXd& x) {
      return fractional_loglik_grad(x, panel, hist, covs, i, cfg.w_frac);
    };
    const VectorXd a_hat = bfgs_maximize(f, g, VectorXd::Zero(d));
    coeffs.row(i) = a_hat.transpose();
    MatrixXd h = negative_hessian_fd(g, a_hat);
    // Guard the curvature: eigenvalues floored at a small positive level.
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(h);
    neg_hessians[i] = es.eigenvectors() * es.eigenvalues().cwiseMax(1e-8).asDiagonal() *
                      es.eigenvectors().transpose();
  }

  // Pooled curvature shell for the group-translation move below.
  MatrixXd pooled_h = MatrixXd::Zero(d, d);
  for (const auto& h : neg_hessians) pooled_h += h;
  const MatrixXd pooled_chol =
      proposal_chol(pooled_h, 1e6 * MatrixXd::Identity(d, d));
  MixtureState state;
  state.indicators = VectorXi::Zero(i_count);
  state.delta = MatrixXd::Zero(d, 1);
  state.a = 1.0;
  state.nu = d + 2.0;
  state.vartheta = 1.0;
  state.alpha_conc = 1.0;
  state.components.push_back({VectorXd::Zero(d), MatrixXd::Identity(d, d)});

  std::vector<MatrixXd> prop_chols(i_count);
  VectorXd log_s = VectorXd::Constant(
      i_count, 0.5 * std::log(cfg.s2_init > 0.0 ? cfg.s2_init : 2.38 * 2.38 / d));
  VectorXd accept_count = VectorXd::Zero(i_count);
  VectorXd window_accept = VectorXd::Zero(i_count);
  double log_s_pop = 0.5 * std::log(2.38 * 2.38 / d);
  double pop_accept = 0.0;

  const int total_sweeps = cfg.burnin + cfg.kept_sweeps;
  const int keep_every = std::max(1, cfg.thin);
  const int kept_total = cfg.kept_sweeps / keep_every;
  const int emit_stride =
      cfg.max_emit_draws > 0 ? std::max(1, kept_total / cfg.max_emit_draws) : 1;

  FitResult out;
  out.param_dim = d;
  out.labels = param_labels(panel.j_count, covs.has_social());
  out.acceptance = VectorXd::Zero(i_count);

  int kept_index = 0;
  for (int sweep = 0; sweep < total_sweeps; ++sweep) {
    if (sweep % cfg.omega_rebuild == 0) {
      for (int i = 0; i < i_count; ++i)
        prop_chols[i] =
            proposal_chol(neg_hessians[i], state.components[state.indicators[i]].sigma);
    }

    std::vector<MatrixXd> comp_chols(state.components.size());
    for (std::size_t k = 0; k < state.components.size(); ++k)
      comp_chols[k] = cholesky_with_jitter(state.components[k].sigma);

    for (int i = 0; i < i_count; ++i) {
      Rng rng(split_seed(cfg.seed, static_cast<std::uint64_t>(sweep),
                         static_cast<std::uint64_t>(i)));
      const int k = state.indicators[i];
      const VectorXd prior_mean =
          state.components[k].mu + state.delta * z_centered.segment(i, 1);
      const auto target = [&](const VectorXd& x) {
        return panel_loglik(x, panel, hist, covs, i) +
               mvn_logpdf_chol(x, prior_mean, comp_chols[k]);
      };
      const VectorXd current = coeffs.row(i).transpose();
      const auto step = mh_rw(target, current, target(current), prop_chols[i],
                              std::exp(log_s[i]), rng);
      coeffs.row(i) = step.value.transpose();
      if (step.accepted) {
        accept_count[i] += 1.0;
        window_accept[i] += 1.0;
      }
    }

    // Group translation: shift every customer and every component mean by a
    // common offset. Individual random-walk steps cannot move the ensemble
    // once the mixture concentrates, so this move restores mixing of the
    // common location; the component priors N(mu_k | 0, Sigma_k / a) supply
    // the only non-likelihood term in the ratio.
    {
      Rng rng(split_seed(cfg.seed, static_cast<std::uint64_t>(sweep), 0x9E3779B97F4A7C15ULL));
      const VectorXd shift = std::exp(log_s_pop) * (pooled_chol * rng.normal_vector(d));
      double delta_lt = 0.0;
      for (int i = 0; i < i_count; ++i) {
        const VectorXd current = coeffs.row(i).transpose();
        delta_lt += panel_loglik(current + shift, panel, hist, covs, i) -
                    panel_loglik(current, panel, hist, covs, i);
      }
      for (const auto& comp : state.components) {
        const auto inv =
            floored_inverse(comp.sigma, 1e-12 * std::max(1.0, comp.sigma.trace()));
        const VectorXd shifted = comp.mu + shift;
        delta_lt += -0.5 * state.a *
                    (shifted.dot(inv.inverse * shifted) - comp.mu.dot(inv.inverse * comp.mu));
      }
      if (std::log(rng.uniform() + 1e-300) < delta_lt) {
        coeffs.rowwise() += shift.transpose();
        for (auto& comp : state.components) comp.mu += shift;
        pop_accept += 1.0;
      }
    }

    {
      Rng rng(split_seed(cfg.seed, static_cast<std::uint64_t>(sweep), 0xD1B54A32D192ED03ULL));
      state = gibbs_sweep(std::move(state), coeffs, z_centered, dp, rng);
    }

    if (sweep < cfg.burnin && (sweep + 1) % cfg.adapt_interval == 0) {
      for (int i = 0; i < i_count; ++i) {
        const double rate = window_accept[i] / cfg.adapt_interval;
        log_s[i] += std::clamp(rate - cfg.adapt_target, -0.25, 0.25);
        window_accept[i] = 0.0;
      }
      log_s_pop += std::clamp(pop_accept / cfg.adapt_interval - cfg.adapt_target, -0.25, 0.25);
      pop_accept = 0.0;
    }

    if (sweep >= cfg.burnin && (sweep - cfg.burnin) % keep_every == 0) {
      if (kept_index % emit_stride == 0) {
        out.draws.push_back(coeffs);
        out.indicator_draws.push_back(state.indicators);
        out.delta_draws.push_back(state.delta.col(0));
        out.alpha_draws.push_back(state.alpha_conc);
        out.a_draws.push_back(state.a);
        out.nu_draws.push_back(state.nu);
        out.vartheta_draws.push_back(state.vartheta);
        out.component_counts.push_back(static_cast<int>(state.components.size()));
        double ll = 0.0;
        for (int i = 0; i < i_count; ++i)
          ll += panel_loglik(coeffs.row(i).transpose(), panel, hist, covs, i);
        if (!std::isfinite(ll))
          throw NumericalError("non-finite log-likelihood at sweep " + std::to_string(sweep));
        out.loglik_trace.push_back(ll);
      }
      ++kept_index;
    }
  }
  out.acceptance = accept_count / static_cast<double>(total_sweeps);
  return out;
}

/// Mean over stored draws of the total in-sample log-likelihood; the model
/// comparison statistic, recomputable from the emitted draws.
inline double comparison_loglik(const FitResult& result) {
  double total = 0.0;
  for (double v : result.loglik_trace) total += v;
  return total / static_cast<double>(result.loglik_trace.size());
}

}  // namespace adopt::choice
