#include <catch2/catch_amalgamated.hpp>

#include "adopt/choice.hpp"
#include "test_util.hpp"

using namespace adopt;
using choice::Covariates;
using choice::Panel;

namespace {

Covariates zero_covs(int j_count, int weeks, bool with_social) {
  Covariates covs;
  if (with_social) covs.social = MatrixXd::Zero(j_count, weeks);
  for (auto& f : covs.factors) f = MatrixXd::Zero(j_count, weeks);
  return covs;
}

Panel uniform_panel(int customers, int weeks, int j_count, std::uint64_t seed) {
  Panel panel;
  panel.j_count = j_count;
  panel.tenure = VectorXd::LinSpaced(customers, 10.0, 400.0);
  panel.choices.resize(customers);
  Rng rng(seed);
  for (auto& row : panel.choices) {
    row.resize(weeks);
    for (auto& c : row) c = static_cast<int>(rng.uniform_index(j_count + 1));
  }
  return panel;
}

}  // namespace

TEST_CASE("utility fixtures") {
  const int j_count = 5;
  auto covs = zero_covs(j_count, 1, true);
  const int d = covs.param_dim(j_count);

  SECTION("all zero coefficients give zero utilities") {
    const VectorXd v = choice::utility(VectorXd::Zero(d), 3, covs, 0, j_count);
    CHECK(v.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("a single intercept moves only its category") {
    VectorXd a = VectorXd::Zero(d);
    a[0] = 2.0;
    const VectorXd v = choice::utility(a, 0, covs, 0, j_count);
    CHECK(v[0] == 2.0);
    CHECK(v.tail(j_count - 1).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("social coefficient scales the covariate for every category") {
    covs.social.setConstant(100.0);
    VectorXd a = VectorXd::Zero(d);
    a[j_count + 1] = 0.02;
    const VectorXd v = choice::utility(a, 0, covs, 0, j_count);
    for (int j = 0; j < j_count; ++j) CHECK(v[j] == Catch::Approx(2.0).margin(1e-14));
  }
}

TEST_CASE("choice probability fixtures") {
  SECTION("zero utilities split evenly with the outside good") {
    const VectorXd p = choice::choice_prob(VectorXd::Zero(2));
    for (int k = 0; k < 3; ++k) CHECK(p[k] == Catch::Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("log-2 utility doubles the first category") {
    VectorXd v(2);
    v << std::log(2.0), 0.0;
    const VectorXd p = choice::choice_prob(v);
    CHECK(p[0] == Catch::Approx(0.25).margin(1e-14));
    CHECK(p[1] == Catch::Approx(0.5).margin(1e-14));
    CHECK(p[2] == Catch::Approx(0.25).margin(1e-14));
  }
  SECTION("extreme utilities saturate without overflow") {
    VectorXd v(3);
    v << 700.0, 0.0, 0.0;
    const VectorXd p = choice::choice_prob(v);
    CHECK(p[1] == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    v << -700.0, -700.0, -700.0;
    CHECK(std::abs(choice::choice_prob(v).sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("panel log-likelihood fixtures and gradient") {
  SECTION("zero coefficients on J=9 for 20 weeks") {
    Panel panel = uniform_panel(1, 20, 9, 1);
    const auto covs = zero_covs(9, 20, true);
    const auto hist = choice::history_states(panel);
    const double ll =
        choice::panel_loglik(VectorXd::Zero(covs.param_dim(9)), panel, hist, covs, 0);
    CHECK(ll == Catch::Approx(-20.0 * std::log(10.0)).margin(1e-10));
  }
  SECTION("one week choosing the outside good") {
    Panel panel;
    panel.j_count = 9;
    panel.tenure = VectorXd::Zero(1);
    panel.choices = {{0}};
    const auto covs = zero_covs(9, 1, true);
    const auto hist = choice::history_states(panel);
    const double ll =
        choice::panel_loglik(VectorXd::Zero(covs.param_dim(9)), panel, hist, covs, 0);
    CHECK(ll == Catch::Approx(-std::log(10.0)).margin(1e-12));
  }
  SECTION("analytic gradient matches central finite differences") {
    Rng rng(3);
    for (int rep = 0; rep < 10; ++rep) {
      const int j_count = 4;
      const int weeks = 12;
      auto covs = testutil::random_factors(j_count, weeks, 100 + rep);
      covs.social = MatrixXd(j_count, weeks);
      for (int j = 0; j < j_count; ++j)
        for (int t = 0; t < weeks; ++t) covs.social(j, t) = std::abs(rng.normal());
      Panel panel = uniform_panel(3, weeks, j_count, 200 + rep);
      const auto hist = choice::history_states(panel);
      const int d = covs.param_dim(j_count);
      const VectorXd a = 0.5 * rng.normal_vector(d);
      const VectorXd grad = choice::panel_loglik_grad(a, panel, hist, covs, 1);
      for (int k = 0; k < d; ++k) {
        const double h = 1e-6 * (1.0 + std::abs(a[k]));
        VectorXd up = a, dn = a;
        up[k] += h;
        dn[k] -= h;
        const double fd = (choice::panel_loglik(up, panel, hist, covs, 1) -
                           choice::panel_loglik(dn, panel, hist, covs, 1)) /
                          (2.0 * h);
        CHECK(grad[k] == Catch::Approx(fd).epsilon(1e-5).margin(1e-8));
      }
    }
  }
}

TEST_CASE("history states satisfy the integer recursion") {
  Panel panel = uniform_panel(20, 30, 5, 9);
  const auto hist = choice::history_states(panel);
  for (int i = 0; i < panel.customers(); ++i) {
    CHECK(hist(i, 0) == 0);
    int downloads = 0;
    for (int t = 0; t < panel.weeks(); ++t) {
      CHECK(hist(i, t) == downloads);
      if (panel.choices[i][t] >= 1) ++downloads;
    }
  }
}

TEST_CASE("fractional likelihood identities") {
  Panel panel = uniform_panel(4, 10, 3, 5);
  const auto covs = testutil::random_factors(3, 10, 6);
  const auto hist = choice::history_states(panel);
  const int d = covs.param_dim(3);
  Rng rng(7);
  const VectorXd a = rng.normal_vector(d);

  SECTION("w = 0 reduces to the unit likelihood bit-exactly") {
    const double unit = choice::panel_loglik(a, panel, hist, covs, 2);
    const double frac = choice::fractional_loglik(a, panel, hist, covs, 2, 0.0);
    CHECK(frac == unit);
  }
  SECTION("a single-customer pool is the identity for any w") {
    Panel solo = uniform_panel(1, 10, 3, 8);
    const auto shist = choice::history_states(solo);
    const double unit = choice::panel_loglik(a, solo, shist, covs, 0);
    for (double w : {0.05, 0.3, 0.9}) {
      const double frac = choice::fractional_loglik(a, solo, shist, covs, 0, w);
      CHECK(frac == Catch::Approx(unit).margin(1e-12));
    }
  }
  SECTION("two customers combine by hand") {
    Panel duo = uniform_panel(2, 10, 3, 9);
    const auto dhist = choice::history_states(duo);
    const double l0 = choice::panel_loglik(a, duo, dhist, covs, 0);
    const double l1 = choice::panel_loglik(a, duo, dhist, covs, 1);
    const double w = 0.1;
    const double expected = (1.0 - w) * l0 + w * 0.5 * (l0 + l1);
    CHECK(choice::fractional_loglik(a, duo, dhist, covs, 0, w) ==
          Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("random-walk Metropolis samples a 1-D normal (detailed balance)") {
  Rng rng(11);
  const double mean = 1.0, sd = 2.0;
  const auto target = [&](const VectorXd& x) {
    return -0.5 * std::pow((x[0] - mean) / sd, 2);
  };
  const MatrixXd chol = MatrixXd::Identity(1, 1) * sd;
  VectorXd x = VectorXd::Zero(1);
  double lt = target(x);
  std::vector<double> sample;
  sample.reserve(100000);
  for (int it = 0; it < 101000; ++it) {
    const auto step = choice::mh_rw(target, x, lt, chol, 2.4, rng);
    x = step.value;
    lt = step.log_target;
    if (it >= 1000) sample.push_back(x[0]);
  }
  const double ks = testutil::ks_statistic(sample, [&](double v) {
    return 0.5 * (1.0 + std::erf((v - mean) / (sd * std::numbers::sqrt2)));
  });
  CHECK(ks < 0.02);
}

TEST_CASE("unit step with no observations samples the component prior") {
  Panel empty;
  empty.j_count = 2;
  empty.tenure = VectorXd::Constant(1, 30.0);
  empty.choices = {{}};
  const auto covs = zero_covs(2, 0, true);
  const auto hist = choice::history_states(empty);
  const int d = covs.param_dim(2);

  choice::Component comp{VectorXd::Constant(d, 0.5), 0.25 * MatrixXd::Identity(d, d)};
  MatrixXd delta = MatrixXd::Zero(d, 1);
  delta(0, 0) = 0.01;
  const double z = 30.0;
  const VectorXd expected_mean = comp.mu + delta.col(0) * z;

  const MatrixXd omega_chol = 0.5 * MatrixXd::Identity(d, d);
  Rng rng(13);
  VectorXd a = VectorXd::Zero(d);
  VectorXd sum = VectorXd::Zero(d);
  const int draws = 50000;
  for (int it = 0; it < draws + 500; ++it) {
    const auto step = choice::mh_rw_unit_step(a, comp, delta, z, empty, hist, covs, 0,
                                              omega_chol, 1.2, rng);
    a = step.value;
    if (it >= 500) sum += a;
  }
  const VectorXd mc_mean = sum / draws;
  CHECK((mc_mean - expected_mean).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("vanishing proposal scale accepts everything") {
  Panel panel = uniform_panel(1, 5, 2, 21);
  const auto covs = zero_covs(2, 5, false);
  const auto hist = choice::history_states(panel);
  const int d = covs.param_dim(2);
  choice::Component comp{VectorXd::Zero(d), MatrixXd::Identity(d, d)};
  Rng rng(3);
  VectorXd a = VectorXd::Zero(d);
  int accepted = 0;
  for (int it = 0; it < 200; ++it) {
    const auto step = choice::mh_rw_unit_step(a, comp, MatrixXd::Zero(d, 1), 0.0, panel, hist,
                                              covs, 0, MatrixXd::Identity(d, d), 1e-8, rng);
    a = step.value;
    accepted += step.accepted ? 1 : 0;
  }
  CHECK(accepted == 200);
}

TEST_CASE("stick breaking fixtures") {
  SECTION("half-half-half") {
    const VectorXd pi = choice::stick_breaking((VectorXd(3) << 0.5, 0.5, 0.5).finished());
    CHECK(pi[0] == 0.5);
    CHECK(pi[1] == 0.25);
    CHECK(pi[2] == Catch::Approx(0.25).margin(1e-15));
    CHECK(pi.sum() == 1.0);
  }
  SECTION("a first break of nearly one takes everything") {
    const VectorXd pi =
        choice::stick_breaking((VectorXd(3) << 1.0 - 1e-15, 0.5, 0.5).finished());
    CHECK(pi[0] == Catch::Approx(1.0).margin(1e-14));
    CHECK(pi.sum() == 1.0);
  }
  SECTION("any sequence sums to one exactly under sequential accumulation") {
    Rng rng(5);
    for (int rep = 0; rep < 50; ++rep) {
      const int k = 1 + static_cast<int>(rng.uniform_index(12));
      VectorXd betas(k);
      for (int i = 0; i < k; ++i) betas[i] = rng.uniform(1e-6, 1.0 - 1e-6);
      const VectorXd pi = choice::stick_breaking(betas);
      double total = 0.0;
      for (int i = 0; i < k; ++i) total += pi[i];
      CHECK(total == 1.0);
      CHECK((pi.array() >= 0.0).all());
    }
  }
}

TEST_CASE("unique-cluster law fixtures") {
  SECTION("one draw means one cluster") {
    const VectorXd p = choice::unique_cluster_pmf(3.7, 1);
    CHECK(p.size() == 1);
    CHECK(p[0] == Catch::Approx(1.0).margin(1e-15));
  }
  SECTION("larger concentration moves the mode up") {
    const int low = choice::unique_cluster_mode(1.0, 50);
    const int high = choice::unique_cluster_mode(20.0, 50);
    CHECK(high > low);
  }
  SECTION("normalization") {
    for (double alpha : {0.5, 2.0, 10.0})
      CHECK(choice::unique_cluster_pmf(alpha, 50).sum() == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("normal-inverse-Wishart posterior matches hand arithmetic") {
  MatrixXd devs(2, 2);
  devs << 1.0, 0.0, 3.0, 2.0;
  const auto post = choice::niw_posterior(devs, 2, 2.0, 5.0, 0.3);
  CHECK(post.kappa == 4.0);
  CHECK(post.nu == 7.0);
  CHECK(post.mean[0] == Catch::Approx(1.0).margin(1e-14));
  CHECK(post.mean[1] == Catch::Approx(0.5).margin(1e-14));
  MatrixXd expected(2, 2);
  expected << 7.5, 4.0, 4.0, 4.5;
  CHECK((post.scale - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("an empty block reduces to the base measure") {
  const auto prior = choice::niw_posterior(MatrixXd(0, 3), 3, 1.5, 8.0, 0.4);
  CHECK(prior.kappa == 1.5);
  CHECK(prior.nu == 8.0);
  CHECK(prior.mean.cwiseAbs().maxCoeff() == 0.0);
  CHECK((prior.scale - 8.0 * 0.4 * MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gibbs sweeps separate two well-separated clusters") {
  const int d = 4;
  const int per_group = 30;
  Rng rng(17);
  MatrixXd coeffs(2 * per_group, d);
  std::vector<int> truth;
  for (int i = 0; i < 2 * per_group; ++i) {
    const int g = i < per_group ? 0 : 1;
    truth.push_back(g);
    for (int c = 0; c < d; ++c)
      coeffs(i, c) = (g == 0 ? -3.0 : 3.0) + 0.5 * rng.normal();
  }
  choice::MixtureState state;
  state.indicators = VectorXi::Zero(2 * per_group);
  state.delta = MatrixXd::Zero(d, 1);
  state.a = 1.0;
  state.nu = d + 2.0;
  state.vartheta = 1.0;
  state.alpha_conc = 1.0;
  state.components.push_back({VectorXd::Zero(d), MatrixXd::Identity(d, d)});
  choice::DpConfig cfg;
  std::tie(cfg.alpha_min, cfg.alpha_max) = choice::calibrate_alpha_bounds(2 * per_group);
  const VectorXd z = VectorXd::Zero(2 * per_group);

  std::vector<VectorXi> kept;
  for (int sweep = 0; sweep < 200; ++sweep) {
    Rng sweep_rng(split_seed(99, sweep));
    state = choice::gibbs_sweep(std::move(state), coeffs, z, cfg, sweep_rng);
    if (sweep >= 100) kept.push_back(state.indicators);
  }
  state.validate(d);
  CHECK(testutil::co_clustering_accuracy(kept, truth) >= 0.95);
}

TEST_CASE("single-component fit recovers a shared coefficient vector") {
  const int j_count = 3;
  const int weeks = 25;
  const int customers = 40;
  auto covs = testutil::random_factors(j_count, weeks, 31);
  const int d = covs.param_dim(j_count);
  VectorXd truth(d);
  truth << 1.0, 0.3, -0.5, -0.1, 0.4, -0.3, 0.2;
  MatrixXd coeffs = truth.transpose().replicate(customers, 1);
  const VectorXd tenure = VectorXd::LinSpaced(customers, 5.0, 300.0);
  const auto panel = testutil::simulate_panel(coeffs, covs, j_count, weeks, 77, tenure);

  choice::FitConfig cfg;
  cfg.burnin = 400;
  cfg.kept_sweeps = 800;
  cfg.thin = 4;
  cfg.dp.single_component = true;
  cfg.seed = 5;
  const auto result = choice::fit(panel, covs, cfg);
  REQUIRE(result.param_dim == d);
  REQUIRE(!result.draws.empty());

  // Per-customer posterior means should cover the shared truth within three
  // posterior standard deviations for nearly every (customer, coordinate).
  const double n_draws = static_cast<double>(result.draws.size());
  int outside = 0;
  for (int i = 0; i < customers; ++i) {
    for (int k = 0; k < d; ++k) {
      double mean = 0.0, sq = 0.0;
      for (const auto& draw : result.draws) {
        mean += draw(i, k);
        sq += draw(i, k) * draw(i, k);
      }
      mean /= n_draws;
      const double sd = std::sqrt(std::max(sq / n_draws - mean * mean, 1e-12));
      if (std::abs(mean - truth[k]) > 3.0 * sd) ++outside;
    }
  }
  CHECK(outside <= static_cast<int>(0.05 * customers * d));
  CHECK(result.loglik_trace.size() == result.draws.size());
  for (double v : result.acceptance) {
    CHECK(v > 0.02);
    CHECK(v < 0.95);
  }
}

TEST_CASE("covariate 'none' drops the social column") {
  const auto covs = zero_covs(4, 6, false);
  CHECK(covs.param_dim(4) == 4 + 1 + 3);
  const auto labels = choice::param_labels(4, false);
  CHECK(std::find(labels.begin(), labels.end(), "social") == labels.end());
  const auto with = choice::param_labels(4, true);
  CHECK(std::find(with.begin(), with.end(), "social") != with.end());
}
