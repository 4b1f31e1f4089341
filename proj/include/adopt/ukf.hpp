// Unscented Kalman filter for nonlinear additive-noise state-space models,
// with prediction-error log-likelihood accumulation.
#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "adopt/common.hpp"

namespace adopt::ukf {

/// Nonlinear additive-noise state-space model:
///   x_k = F(x_{k-1}) + v_k,  v_k ~ N(0, process_cov)
///   y_k = H(x_k)     + n_k,  n_k ~ N(0, obs_cov)
struct SsModel {
  Eigen::Index state_dim = 0;
  Eigen::Index obs_dim = 0;
  std::function<VectorXd(const VectorXd&)> transition;
  std::function<VectorXd(const VectorXd&)> observation;
  MatrixXd process_cov;
  MatrixXd obs_cov;

  void validate() const {
    if (!is_symmetric(process_cov) || !is_symmetric(obs_cov))
      throw InvalidCovarianceError("noise covariance not symmetric within 1e-10");
    cholesky_with_jitter(process_cov);  // must factor (possibly after jitter)
  }
};

/// Sigma-point spread parameters. lambda = alpha^2 (L + kappa) - L.
struct Tuning {
  double alpha = 1e-1;
  double kappa = 0.0;
  double beta = 2.0;

  double lambda(Eigen::Index state_dim) const {
    return alpha * alpha * (static_cast<double>(state_dim) + kappa) -
           static_cast<double>(state_dim);
  }
};

struct GaussianBelief {
  VectorXd mean;
  MatrixXd cov;
};

struct Weights {
  VectorXd mean;  // 2L+1
  VectorXd cov;   // 2L+1
};

/// Sigma-point weights. W0m = lambda/(L+lambda), W0c = W0m + (1 - alpha^2 + beta),
/// Wi = 1/(2(L+lambda)) otherwise; the mean weights sum to one.
inline Weights weights(const Tuning& tuning, Eigen::Index state_dim) {
  if (state_dim < 1) throw InvalidTuningError("state dimension must be >= 1");
  if (!(tuning.alpha > 0.0)) throw InvalidTuningError("alpha must be positive");
  const double lambda = tuning.lambda(state_dim);
  const double denom = static_cast<double>(state_dim) + lambda;
  if (!std::isfinite(lambda) || !(denom > 0.0))
    throw InvalidTuningError("L + lambda must be positive and finite");
  Weights w;
  w.mean = VectorXd::Constant(2 * state_dim + 1, 1.0 / (2.0 * denom));
  w.cov = w.mean;
  w.mean[0] = lambda / denom;
  w.cov[0] = lambda / denom + (1.0 - tuning.alpha * tuning.alpha + tuning.beta);
  return w;
}

/// Deterministic sigma points: column 0 is the mean, columns 1..L add the
/// scaled Cholesky columns of (L+lambda) P and columns L+1..2L subtract them.
inline MatrixXd sigma_points(const GaussianBelief& belief, const Tuning& tuning) {
  const Eigen::Index L = belief.mean.size();
  const double lambda = tuning.lambda(L);
  const double denom = static_cast<double>(L) + lambda;
  if (!(denom > 0.0)) throw InvalidTuningError("L + lambda must be positive");
  const MatrixXd root = std::sqrt(denom) * cholesky_with_jitter(belief.cov);
  MatrixXd points(L, 2 * L + 1);
  points.col(0) = belief.mean;
  for (Eigen::Index i = 0; i < L; ++i) {
    points.col(1 + i) = belief.mean + root.col(i);
    points.col(1 + L + i) = belief.mean - root.col(i);
  }
  return points;
}

namespace detail {

struct Recombined {
  VectorXd mean;
  MatrixXd cov;  // without additive noise
};

inline Recombined recombine(const MatrixXd& points, const Weights& w) {
  Recombined out;
  out.mean = points * w.mean;
  out.cov = MatrixXd::Zero(points.rows(), points.rows());
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const VectorXd d = points.col(i) - out.mean;
    out.cov.noalias() += w.cov[i] * d * d.transpose();
  }
  return out;
}

}  // namespace detail

struct StepResult {
  GaussianBelief posterior;
  VectorXd pred_obs;
  double log_lik = 0.0;
};

/// One predict + update cycle. Sigma points are redrawn from the predicted
/// belief before the measurement update so that linear models reproduce the
/// exact Kalman filter. The step log-likelihood is the Gaussian log-density
/// of y under N(y_pred, P_y).
inline StepResult step(const GaussianBelief& prior, const VectorXd& y,
                       const SsModel& model, const Tuning& tuning) {
  const Eigen::Index L = model.state_dim;
  const Weights w = weights(tuning, L);

  // Time update.
  MatrixXd points = sigma_points(prior, tuning);
  for (Eigen::Index i = 0; i < points.cols(); ++i)
    points.col(i) = model.transition(points.col(i));
  auto pred = detail::recombine(points, w);
  MatrixXd pred_cov = pred.cov + model.process_cov;
  symmetrize(pred_cov);
  const GaussianBelief predicted{pred.mean, pred_cov};

  // Measurement update on freshly drawn points.
  const MatrixXd xpoints = sigma_points(predicted, tuning);
  MatrixXd ypoints(model.obs_dim, xpoints.cols());
  for (Eigen::Index i = 0; i < xpoints.cols(); ++i)
    ypoints.col(i) = model.observation(xpoints.col(i));
  const VectorXd y_pred = ypoints * w.mean;
  MatrixXd innov_cov = model.obs_cov;
  MatrixXd cross_cov = MatrixXd::Zero(L, model.obs_dim);
  for (Eigen::Index i = 0; i < xpoints.cols(); ++i) {
    const VectorXd dy = ypoints.col(i) - y_pred;
    const VectorXd dx = xpoints.col(i) - predicted.mean;
    innov_cov.noalias() += w.cov[i] * dy * dy.transpose();
    cross_cov.noalias() += w.cov[i] * dx * dy.transpose();
  }
  symmetrize(innov_cov);

  const auto innov_inv = floored_inverse(innov_cov);
  const MatrixXd gain = cross_cov * innov_inv.inverse;
  const VectorXd innovation = y - y_pred;

  StepResult out;
  out.posterior.mean = predicted.mean + gain * innovation;
  out.posterior.cov = predicted.cov - gain * innov_cov * gain.transpose();
  symmetrize(out.posterior.cov);
  out.pred_obs = y_pred;
  constexpr double log2pi = 1.8378770664093454836;
  out.log_lik = -0.5 * (static_cast<double>(model.obs_dim) * log2pi +
                        innov_inv.log_det +
                        innovation.dot(innov_inv.inverse * innovation));
  return out;
}

struct FilterOutput {
  std::vector<GaussianBelief> beliefs;
  std::vector<VectorXd> one_step_pred_means;
  double log_likelihood = 0.0;
};

/// Run the filter over an observation sequence. Beliefs are causal (belief at
/// t depends only on observations up to t) and the total log-likelihood is
/// the sum of the per-step prediction-error terms.
inline FilterOutput filter(const std::vector<VectorXd>& series, const SsModel& model,
                           const Tuning& tuning, const GaussianBelief& init) {
  if (series.empty()) throw DegenerateInputError("observation series is empty");
  FilterOutput out;
  out.beliefs.reserve(series.size());
  out.one_step_pred_means.reserve(series.size());
  GaussianBelief belief = init;
  for (std::size_t t = 0; t < series.size(); ++t) {
    StepResult r;
    try {
      r = step(belief, series[t], model, tuning);
    } catch (const Error& e) {
      throw NumericalError("filter step failed at t=" + std::to_string(t) + ": " + e.what());
    }
    belief = r.posterior;
    out.beliefs.push_back(belief);
    out.one_step_pred_means.push_back(std::move(r.pred_obs));
    out.log_likelihood += r.log_lik;
  }
  return out;
}

}  // namespace adopt::ukf
