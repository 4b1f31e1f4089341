#include <catch2/catch_amalgamated.hpp>

#include "adopt/diffusion.hpp"
#include "oracles.hpp"

using namespace adopt;
using diffusion::Params;

namespace {

diffusion::AdoptionSeries simulate_series(const std::vector<Params>& params, int days,
                                          double obs_sd, std::uint64_t seed) {
  const auto j_count = static_cast<Eigen::Index>(params.size());
  Rng rng(seed);
  diffusion::AdoptionSeries data;
  data.y = MatrixXd(j_count, days);
  std::vector<double> ci(params.size(), 0.0), cm(params.size(), 0.0);
  for (int t = 0; t < days; ++t) {
    for (std::size_t j = 0; j < params.size(); ++j) {
      std::tie(ci[j], cm[j]) = diffusion::state_transition(ci[j], cm[j], params[j]);
      double y = diffusion::observe(ci[j], cm[j], params[j].theta);
      if (obs_sd > 0.0) y += rng.normal(0.0, obs_sd);
      data.y(static_cast<Eigen::Index>(j), t) =
          std::max(y, t > 0 ? data.y(static_cast<Eigen::Index>(j), t - 1) : 0.0);
    }
  }
  return data;
}

Params ebooks_like() {
  Params p;
  p.p_inf = 0.024;
  p.q_inf = 0.0;
  p.p_imm = 0.278;
  p.q_imm = 0.191;
  p.m_inf = 103.0;
  p.m_imm = 1952.0;
  p.w = 0.032;
  p.theta = 0.044;
  return p;
}

diffusion::HierPrior flat_prior(Eigen::Index j_count) {
  diffusion::HierPrior prior;
  prior.shrinkage = VectorXd::Zero(diffusion::kParamsPerCategory);
  prior.prior_var = 100.0;
  prior.popularity = VectorXd::LinSpaced(j_count, 0.2, 1.0);
  return prior;
}

}  // namespace

TEST_CASE("state transition saturates, idles, and matches hand arithmetic") {
  Params p;
  p.p_inf = 0.1;
  p.q_inf = 0.2;
  p.p_imm = 0.3;
  p.q_imm = 0.2;
  p.m_inf = 10.0;
  p.m_imm = 100.0;
  p.w = 0.5;
  p.theta = 0.5;

  SECTION("full market stays put") {
    const auto [ci, cm] = diffusion::state_transition(10.0, 100.0, p);
    CHECK(ci == 10.0);
    CHECK(cm == 100.0);
  }
  SECTION("no forces, no movement") {
    Params zero = p;
    zero.p_inf = zero.q_inf = zero.p_imm = zero.q_imm = 0.0;
    const auto [ci, cm] = diffusion::state_transition(0.0, 0.0, zero);
    CHECK(ci == 0.0);
    CHECK(cm == 0.0);
  }
  SECTION("hand-computed imitator update") {
    const auto [ci, cm] = diffusion::state_transition(5.0, 10.0, p);
    (void)ci;
    // hazard = 0.3 + 0.2*(0.5*0.5 + 0.5*0.1) = 0.36; c = 10 + 0.36*90
    CHECK(cm == Catch::Approx(42.4).margin(1e-12));
  }
}

TEST_CASE("noiseless latent trajectories are monotone non-decreasing") {
  Params p = ebooks_like();
  double ci = 0.0, cm = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto [ni, nm] = diffusion::state_transition(ci, cm, p);
    CHECK(ni >= ci);
    CHECK(nm >= cm);
    ci = ni;
    cm = nm;
  }
}

TEST_CASE("observation blends the segments by theta") {
  CHECK(diffusion::observe(10.0, 20.0, 1.0) == 10.0);
  CHECK(diffusion::observe(10.0, 20.0, 0.0) == 20.0);
  CHECK(diffusion::observe(10.0, 20.0, 0.5) == 15.0);
}

TEST_CASE("flat parameter vector round-trips within 1e-10") {
  Rng rng(31);
  const Eigen::Index j_count = 3;
  std::vector<Params> params;
  for (Eigen::Index j = 0; j < j_count; ++j) {
    Params p;
    p.p_inf = rng.uniform(0.01, 0.1);
    p.q_inf = rng.uniform(0.001, 0.2);
    p.p_imm = rng.uniform(0.1, 0.4);
    p.q_imm = rng.uniform(0.05, 0.3);
    p.m_inf = rng.uniform(10.0, 200.0);
    p.m_imm = rng.uniform(200.0, 2000.0);
    p.w = rng.uniform(0.05, 0.95);
    p.theta = rng.uniform(0.05, 0.95);
    params.push_back(p);
  }
  diffusion::SurCovariance cov;
  MatrixXd a(2 * j_count, 2 * j_count);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal();
  cov.state_cov = a * a.transpose() + MatrixXd::Identity(2 * j_count, 2 * j_count);
  cov.obs_vars = VectorXd::Constant(j_count, 2.5);
  VectorXd shrink = rng.normal_vector(diffusion::kParamsPerCategory);

  const VectorXd flat = diffusion::pack(params, cov, shrink, 0.7);
  const diffusion::FlatLayout lay(j_count);
  CHECK(flat.size() == lay.total);
  const auto u = diffusion::unpack(flat, j_count);
  const VectorXd flat2 = diffusion::pack(u.params, u.cov, u.shrinkage, u.prior_var);
  CHECK((flat - flat2).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((u.cov.state_cov - cov.state_cov).cwiseAbs().maxCoeff() <
        1e-10 * cov.state_cov.cwiseAbs().maxCoeff());
}

TEST_CASE("flat layout size matches the documented parameter count") {
  const diffusion::FlatLayout lay(10);
  // 80 diffusion parameters + 210 state-covariance + 10 obs variances
  // + 8 shrinkage + 1 prior variance.
  CHECK(lay.total == 80 + 210 + 10 + 8 + 1);
}

TEST_CASE("joint model with one category matches the single-category pieces") {
  const Params p = ebooks_like();
  diffusion::SurCovariance cov;
  cov.state_cov = (MatrixXd(2, 2) << 4.0, 0.5, 0.5, 9.0).finished();
  cov.obs_vars = VectorXd::Constant(1, 2.0);
  const auto model = diffusion::build_joint_model({p}, cov);
  VectorXd x(2);
  x << 30.0, 400.0;
  const auto [ci, cm] = diffusion::state_transition(30.0, 400.0, p);
  const VectorXd fx = model.transition(x);
  CHECK(fx[0] == ci);
  CHECK(fx[1] == cm);
  CHECK(model.observation(x)[0] == diffusion::observe(30.0, 400.0, p.theta));
}

namespace {

// Slow, non-saturating dynamics: the factorization identity is a smooth
// leading-order property, so the scenario must stay away from the [0, M]
// clamp where the sigma spreads of joint and marginal filters differ.
Params slow_category(double m_imm) {
  Params p;
  p.p_inf = 0.02;
  p.q_inf = 0.01;
  p.p_imm = 0.03;
  p.q_imm = 0.05;
  p.m_inf = 0.1 * m_imm;
  p.m_imm = m_imm;
  p.w = 0.3;
  p.theta = 0.1;
  return p;
}

}  // namespace

TEST_CASE("block-diagonal SUR factorizes into per-category filters") {
  std::vector<Params> params{slow_category(500.0), slow_category(800.0)};
  const auto data = simulate_series(params, 50, 2.0, 99);

  diffusion::SurCovariance joint;
  joint.state_cov = MatrixXd::Zero(4, 4);
  joint.state_cov.diagonal() << 0.5, 1.0, 0.8, 1.2;
  joint.state_cov(0, 1) = joint.state_cov(1, 0) = 0.2;
  joint.state_cov(2, 3) = joint.state_cov(3, 2) = -0.3;
  joint.obs_vars = (VectorXd(2) << 9.0, 16.0).finished();

  const auto joint_model = diffusion::build_joint_model(params, joint);
  std::vector<VectorXd> series(data.days());
  for (Eigen::Index t = 0; t < data.days(); ++t) series[t] = data.y.col(t);
  const auto joint_out =
      ukf::filter(series, joint_model, {}, diffusion::launch_belief(2));

  double sum_marginals = 0.0;
  for (int j = 0; j < 2; ++j) {
    diffusion::SurCovariance single;
    single.state_cov = joint.state_cov.block<2, 2>(2 * j, 2 * j);
    single.obs_vars = VectorXd::Constant(1, joint.obs_vars[j]);
    const auto model = diffusion::build_joint_model({params[j]}, single);
    std::vector<VectorXd> sj(data.days());
    for (Eigen::Index t = 0; t < data.days(); ++t)
      sj[t] = data.y.row(j).col(t);
    sum_marginals +=
        ukf::filter(sj, model, {}, diffusion::launch_belief(1)).log_likelihood;
  }
  CHECK(joint_out.log_likelihood == Catch::Approx(sum_marginals).margin(1e-6));

  SECTION("strong cross-covariance breaks the factorization") {
    diffusion::SurCovariance coupled = joint;
    coupled.state_cov(1, 3) = coupled.state_cov(3, 1) = 1.0;
    const auto coupled_model = diffusion::build_joint_model(params, coupled);
    const auto coupled_out =
        ukf::filter(series, coupled_model, {}, diffusion::launch_belief(2));
    CHECK(std::abs(coupled_out.log_likelihood - sum_marginals) > 1e-3);
  }
}

TEST_CASE("log_map behaves like the likelihood when the prior washes out") {
  std::vector<Params> params{ebooks_like()};
  const auto data = simulate_series(params, 60, 5.0, 5);
  const auto prior = flat_prior(1);

  diffusion::SurCovariance cov;
  cov.state_cov = (MatrixXd(2, 2) << 1.0, 0.0, 0.0, 4.0).finished();
  cov.obs_vars = VectorXd::Constant(1, 25.0);
  const VectorXd shrink = VectorXd::Zero(diffusion::kParamsPerCategory);
  const double huge_var = 1e12;

  std::vector<Params> perturbed{ebooks_like()};
  perturbed[0].p_imm *= 1.15;
  perturbed[0].m_imm *= 0.9;

  const VectorXd f1 = diffusion::pack(params, cov, shrink, huge_var);
  const VectorXd f2 = diffusion::pack(perturbed, cov, shrink, huge_var);
  const double d_map = diffusion::log_map(f1, data, prior) - diffusion::log_map(f2, data, prior);
  const double d_lik = diffusion::log_map_parts(f1, data, prior).log_likelihood -
                       diffusion::log_map_parts(f2, data, prior).log_likelihood;
  CHECK(d_map == Catch::Approx(d_lik).margin(1e-6));
}

TEST_CASE("log_map prefers the generator over a 10% perturbation") {
  std::vector<Params> params{ebooks_like()};
  const auto data = simulate_series(params, 90, 1.0, 12);
  const auto prior = flat_prior(1);
  diffusion::SurCovariance cov;
  cov.state_cov = 0.5 * MatrixXd::Identity(2, 2);
  cov.obs_vars = VectorXd::Constant(1, 1.0);
  const VectorXd shrink = VectorXd::Zero(diffusion::kParamsPerCategory);

  std::vector<Params> perturbed{ebooks_like()};
  perturbed[0].p_imm *= 1.1;
  perturbed[0].q_imm *= 1.1;
  perturbed[0].m_imm *= 1.1;

  const double at_truth =
      diffusion::log_map(diffusion::pack(params, cov, shrink, 100.0), data, prior);
  const double at_perturbed =
      diffusion::log_map(diffusion::pack(perturbed, cov, shrink, 100.0), data, prior);
  CHECK(at_truth > at_perturbed);
}

TEST_CASE("duplicating the dataset doubles the likelihood term") {
  std::vector<Params> params{slow_category(600.0)};
  const auto data = simulate_series(params, 50, 2.0, 77);
  diffusion::SurCovariance cov;
  cov.state_cov = (MatrixXd(2, 2) << 0.5, 0.1, 0.1, 1.0).finished();
  cov.obs_vars = VectorXd::Constant(1, 16.0);
  const VectorXd shrink = VectorXd::Zero(diffusion::kParamsPerCategory);

  diffusion::AdoptionSeries doubled;
  doubled.y = MatrixXd(2, data.days());
  doubled.y.row(0) = data.y.row(0);
  doubled.y.row(1) = data.y.row(0);
  std::vector<Params> params2{params[0], params[0]};
  diffusion::SurCovariance cov2;
  cov2.state_cov = MatrixXd::Zero(4, 4);
  cov2.state_cov.block<2, 2>(0, 0) = cov.state_cov;
  cov2.state_cov.block<2, 2>(2, 2) = cov.state_cov;
  cov2.obs_vars = VectorXd::Constant(2, 16.0);

  diffusion::HierPrior prior1 = flat_prior(1);
  diffusion::HierPrior prior2 = flat_prior(2);
  prior2.popularity = VectorXd::Constant(2, prior1.popularity[0]);

  const double single =
      diffusion::log_map_parts(diffusion::pack(params, cov, shrink, 1.0), data, prior1)
          .log_likelihood;
  const double twice =
      diffusion::log_map_parts(diffusion::pack(params2, cov2, shrink, 1.0), doubled, prior2)
          .log_likelihood;
  CHECK(twice == Catch::Approx(2.0 * single).margin(1e-6));
}

TEST_CASE("log_map is invariant to category relabeling") {
  std::vector<Params> params{ebooks_like(), ebooks_like()};
  params[1].p_imm = 0.31;
  params[1].m_imm = 600.0;
  params[1].m_inf = 30.0;
  const auto data = simulate_series(params, 50, 2.0, 8);
  diffusion::SurCovariance cov;
  cov.state_cov = MatrixXd::Zero(4, 4);
  cov.state_cov.diagonal() << 1.0, 5.0, 2.0, 4.0;
  cov.state_cov(1, 3) = cov.state_cov(3, 1) = 0.8;
  cov.obs_vars = (VectorXd(2) << 9.0, 4.0).finished();
  diffusion::HierPrior prior = flat_prior(2);
  VectorXd shrink = VectorXd::Ones(diffusion::kParamsPerCategory) * 0.3;

  const double original =
      diffusion::log_map(diffusion::pack(params, cov, shrink, 2.0), data, prior);

  // Swap the two categories everywhere.
  diffusion::AdoptionSeries swapped;
  swapped.y = MatrixXd(2, data.days());
  swapped.y.row(0) = data.y.row(1);
  swapped.y.row(1) = data.y.row(0);
  std::vector<Params> params_sw{params[1], params[0]};
  diffusion::SurCovariance cov_sw;
  cov_sw.state_cov = MatrixXd::Zero(4, 4);
  Eigen::PermutationMatrix<4> perm;
  perm.indices() << 2, 3, 0, 1;
  cov_sw.state_cov = perm.transpose() * cov.state_cov * perm;
  cov_sw.obs_vars = (VectorXd(2) << cov.obs_vars[1], cov.obs_vars[0]).finished();
  diffusion::HierPrior prior_sw = prior;
  prior_sw.popularity = (VectorXd(2) << prior.popularity[1], prior.popularity[0]).finished();

  const double relabeled =
      diffusion::log_map(diffusion::pack(params_sw, cov_sw, shrink, 2.0), swapped, prior_sw);
  CHECK(original == Catch::Approx(relabeled).margin(1e-9));
}

TEST_CASE("error metrics: zero error and constant error fixtures") {
  MatrixXd obs(1, 5), pred(1, 5);
  obs << 1, 2, 3, 4, 5;
  pred = obs;
  auto [mad0, mse0] = diffusion::error_metrics(obs, pred);
  CHECK(mad0[0] == 0.0);
  CHECK(mse0[0] == 0.0);
  pred.array() += 2.0;
  auto [mad2, mse4] = diffusion::error_metrics(obs, pred);
  CHECK(mad2[0] == Catch::Approx(2.0));
  CHECK(mse4[0] == Catch::Approx(4.0));
}

TEST_CASE("mcem rejects series shorter than the identifiability floor") {
  std::vector<Params> params{ebooks_like()};
  const auto data = simulate_series(params, 20, 1.0, 3);
  CHECK_THROWS_AS(diffusion::mcem_fit(data, flat_prior(1), {}), DegenerateInputError);
}

TEST_CASE("mcem smoke: recovers the imitator block on a small clean scenario") {
  std::vector<Params> params{ebooks_like(), ebooks_like()};
  params[1].m_imm = 700.0;
  params[1].m_inf = 35.0;
  params[1].p_imm = 0.24;
  params[1].q_imm = 0.22;
  const auto data =
      simulate_series(params, 80, 0.01 * params[0].m_imm, 1234);

  diffusion::McemConfig cfg;
  cfg.iterations = 6;
  cfg.samples = 20;
  cfg.ga.population = 32;
  cfg.ga.generations = 10;
  cfg.polish_rounds = 2;
  cfg.seed = 42;
  const auto fit = diffusion::mcem_fit(data, flat_prior(2), cfg);

  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(fit.params[j].p_imm - params[j].p_imm) / params[j].p_imm < 0.4);
    CHECK(std::abs(fit.params[j].m_imm - params[j].m_imm) / params[j].m_imm < 0.3);
    fit.params[j].validate();
  }
  CHECK(fit.objective_trace.size() == 6);
  CHECK(fit.latent.c_imm.rows() == 2);
  CHECK(fit.latent.c_imm.cols() == 80);

  SECTION("zero-noise self-consistency of the returned mode") {
    const auto clean = simulate_series(params, 80, 0.0, 0);
    diffusion::McemConfig c2 = cfg;
    c2.seed = 7;
    const auto fit2 = diffusion::mcem_fit(clean, flat_prior(2), c2);
    const VectorXd at_truth =
        diffusion::pack(params, fit2.cov, fit2.shrinkage, fit2.prior_var);
    const double own = diffusion::log_map(fit2.flat, clean, flat_prior(2));
    const double truth = diffusion::log_map(at_truth, clean, flat_prior(2));
    CHECK(own >= truth - 1e-3);
  }
}
