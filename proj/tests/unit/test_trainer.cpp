#include <gtest/gtest.h>

#include <cmath>
#include <iostream>
#include <memory>

#include "epivar/oracle.hpp"
#include "epivar/trainer.hpp"

using namespace epivar;

namespace {

std::shared_ptr<const TemporalContactGraph> path(int n, int horizon, double lambda) {
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
  return std::make_shared<TemporalContactGraph>(make_static_graph(n, e, horizon, lambda));
}

std::vector<Observation> all_times(const Cascade& c) {
  std::vector<Observation> obs;
  for (int t = 0; t <= c.horizon; ++t)
    for (auto& o : snapshot_observations(c, t)) obs.push_back(o);
  return obs;
}

}  // namespace

TEST(TrainConfig, ValidatesAndRoundTrips) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.samples = 1;
  EXPECT_THROW(c.validate(), Error);
  c.baseline = false;
  EXPECT_NO_THROW(c.validate());
  c.steps = 0;
  EXPECT_THROW(c.validate(), Error);
  TrainConfig d;
  d.steps = 17;
  d.learn_mu = true;
  nlohmann::json j = d;
  TrainConfig e = j.get<TrainConfig>();
  EXPECT_EQ(e.steps, 17);
  EXPECT_TRUE(e.learn_mu);
}

TEST(AnnealTrain, ForcedInstanceIsNoOp) {
  auto g = path(3, 3, 0.5);
  Cascade c{3, {{0, 2}, {1, 4}, {4, 4}}};
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.4, 0.3), all_times(c));
  auto model = build_model(post, ModelConfig{}, true, 1);
  EXPECT_EQ(model.parameter_count(), 0u);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.samples = 4;
  Rng rng(1);
  auto rep = anneal_train(model, post, cfg, rng);
  ASSERT_FALSE(rep.diverged);
  EXPECT_EQ(rep.steps.size(), 5u);
  EXPECT_NEAR(rep.elbo.mean, post.regularized_log_posterior(c), 1e-12);
  EXPECT_EQ(rep.elbo.stderr_, 0.0);
  EXPECT_EQ(rep.steps.back().beta, 1.0);
}

TEST(AnnealTrain, BetaScheduleAndHoldSteps) {
  auto g = path(2, 2, 0.5);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.0, 0.3), {{1, 2, State::I}});
  auto model = build_model(post, ModelConfig{}, false, 2);
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.hold_steps = 2;
  cfg.samples = 8;
  Rng rng(3);
  auto rep = anneal_train(model, post, cfg, rng);
  ASSERT_EQ(rep.steps.size(), 6u);
  EXPECT_EQ(rep.steps[0].beta, 0.25);
  EXPECT_EQ(rep.steps[3].beta, 1.0);
  EXPECT_EQ(rep.steps[5].beta, 1.0);
}

TEST(Elbo, BelowLogZForAnyModel) {
  auto g = path(3, 3, 0.6);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.2, 0.3), {{2, 3, State::I}, {0, 3, State::R}});
  auto ex = enumerate_posterior(post);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto model = build_model(post, ModelConfig{}, true, seed);
    Rng rng(seed);
    auto e = elbo(model, post, 4000, rng);
    EXPECT_LE(e.mean, ex.log_z_reg + 3 * e.stderr_);
  }
}

TEST(EstimateKlGradient, BaselineKeepsGradientAtUniformBetaZero) {
  // At beta = 0 a uniform q is optimal; the batch-mean weights of a uniform
  // q are all zero, so the estimate vanishes exactly.
  auto g = path(3, 2, 0.5);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.3, 0.3), {});
  auto model = build_model(post, ModelConfig{}, true, 1);
  model.set_zero();
  Rng rng(4);
  SampleBatch b = model.sample(100, rng);
  auto est = estimate_kl_gradient(model, post, 0.0, b);
  for (double v : model.flatten(est.grad)) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(EstimateKlGradient, UnbiasedAgainstEnumeration) {
  auto g = path(2, 2, 0.5);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.3, 0.4), {{1, 2, State::I}});
  auto ex = enumerate_posterior(post);
  auto model = build_model(post, ModelConfig{}, true, 5);
  // The exact gradient of KL against the normalized reference equals the
  // gradient against the unnormalized target: log Z drops out.
  auto exact = exact_kl_gradient(model, ex);
  const int reps = 20;
  std::vector<std::vector<double>> draws;
  Rng rng(6);
  for (int r = 0; r < reps; ++r) {
    SampleBatch b = model.sample(20000, rng);
    draws.push_back(model.flatten(estimate_kl_gradient(model, post, 1.0, b).grad));
  }
  int outside = 0;
  for (std::size_t k = 0; k < exact.size(); ++k) {
    std::vector<double> v;
    for (auto& d : draws) v.push_back(d[k]);
    auto ms = mean_stderr(v);
    if (std::abs(ms.mean - exact[k]) > 3 * ms.stderr_ + 1e-12) ++outside;
  }
  // 3-sigma band: allow the expected ~0.3% plus slack for many components.
  EXPECT_LE(outside, std::max<std::size_t>(1, exact.size() / 100));
}

TEST(EmParamStep, NoEventsLeavesLambdaUnchanged) {
  auto g = std::make_shared<TemporalContactGraph>(3, 2, std::vector<Contact>{});
  PosteriorModel post(g, EpidemicParams::uniform(0.3, 0.0, 0.5), {});
  auto model = build_model(post, ModelConfig{}, false, 1);
  Rng rng(1);
  SampleBatch b = model.sample(50, rng);
  ParamOptimizer opt;
  auto up = em_param_step(post, b, true, false, 0.1, opt);
  EXPECT_FALSE(up.updated[0]);
  EXPECT_EQ(post.params().class_values[0], 0.3);
}

TEST(EmParamStep, SingleTransmissionMovesLambdaUp) {
  // 0 infected at 0, contact 0 -> 1 at t = 0, 1 infected at 1: the bound is
  // log lambda, maximized at lambda = 1.
  auto g = std::make_shared<TemporalContactGraph>(2, 1, std::vector<Contact>{{0, 1, 0, 1.0}});
  Cascade c{1, {{0, 2}, {1, 2}}};
  PosteriorModel post(g, EpidemicParams::uniform(0.4, 0.0, 0.5), all_times(c));
  auto model = build_model(post, ModelConfig{}, false, 1);
  Rng rng(1);
  SampleBatch b = model.sample(1, rng);
  ParamOptimizer opt;
  auto up = em_param_step(post, b, true, false, 0.1, opt);
  EXPECT_TRUE(up.updated[0]);
  EXPECT_NEAR(up.gradient[0], (1.0 / 0.4) * 0.4 * 0.6, 1e-12);
  double prev = 0.4;
  for (int k = 0; k < 200; ++k) {
    em_param_step(post, b, true, false, 0.1, opt);
    double v = post.params().class_values[0];
    EXPECT_GE(v, prev);
    EXPECT_LT(v, 1.0);
    prev = v;
  }
  EXPECT_GT(prev, 0.95);
}

TEST(EmParamStep, RateModeStaysPositive) {
  // An exposure without transmission pushes gamma down; it never crosses 0.
  auto g = std::make_shared<TemporalContactGraph>(2, 1, std::vector<Contact>{{0, 1, 0, 0.0, 1.0}});
  Cascade c{1, {{0, 2}, {2, 2}}};
  EpidemicParams p;
  p.mode = InfectionMode::Rate;
  p.class_values = {0.5};
  p.p0 = 0.5;
  PosteriorModel post(g, p, all_times(c));
  auto model = build_model(post, ModelConfig{}, false, 1);
  Rng rng(1);
  SampleBatch b = model.sample(1, rng);
  ParamOptimizer opt;
  for (int k = 0; k < 500; ++k) em_param_step(post, b, true, false, 0.5, opt);
  EXPECT_GT(post.params().class_values[0], 0.0);
  EXPECT_LT(post.params().class_values[0], 0.01);
}

// With parameter learning the fitted lambda should land on the maximizer of
// the exact log evidence, found here by grid search over the oracle.
TEST(AnnealTrain, LearnedLambdaMatchesExactMaximumLikelihood) {
  auto g = std::make_shared<TemporalContactGraph>(gen_tree(3, 2, 5, 0.5));
  const double p0 = 1.0 / g->size();
  Cascade c = simulate(*g, EpidemicParams::uniform(0.35, 0.0, p0), std::vector<int>{0}, 6);
  auto obs = snapshot_observations(c, 5);
  ASSERT_EQ(count_ever_infected(c, 5), 6);
  double best = -INFINITY, mle = 0.0;
  for (int k = 5; k <= 95; ++k) {
    PosteriorModel p(g, EpidemicParams::uniform(0.01 * k, 0.0, p0), obs);
    double lz = enumerate_posterior(p, false).log_z;
    if (lz > best) best = lz, mle = 0.01 * k;
  }
  PosteriorModel post(g, EpidemicParams::uniform(0.5, 0.0, p0), obs);
  TrainConfig cfg;
  cfg.steps = 1500;
  cfg.hold_steps = 500;
  cfg.samples = 500;
  cfg.lr = 5e-3;
  cfg.learn_lambda = true;
  cfg.param_lr = 0.05;
  AutoregressiveModel m = build_model(post, ModelConfig{}, false, 6);
  Rng rng(106);
  TrainReport rep = anneal_train(m, post, cfg, rng);
  ASSERT_FALSE(rep.diverged);
  EXPECT_NEAR(post.params().class_values[0], mle, 0.02);
}

TEST(RiskPrior, EndpointsAndMonotonicity) {
  std::vector<Support> sup{feasible_support(0, {}, 3), feasible_support(1, std::vector<Observation>{{1, 1, State::S}}, 3)};
  for (auto& s : sup) {
    // no recovery
    Support k;
    for (auto& t : s)
      if (t.t_rec == 4) k.push_back(t);
    s = k;
  }
  auto at0 = risk_prior_schedule(sup, 3, 0.0);
  EXPECT_NEAR(at0[0][0], 0.5, 1e-12);
  EXPECT_NEAR(at0[0][1], 0.5, 1e-12);
  EXPECT_EQ(at0[0][2], 0.0);
  RiskPrior rp(sup, 3);
  Cascade c{3, {{1, 4}, {4, 4}}};
  EXPECT_EQ(rp.log_factor(c, 1.0), 0.0);
  auto uni = risk_prior_schedule(sup, 3, 1.0);
  EXPECT_NEAR(uni[0][1], 4.0 / 5.0, 1e-12);
  EXPECT_NEAR(at0[1][1], 0.5, 1e-12);
  EXPECT_NEAR(uni[1][1], 2.0 / 3.0, 1e-12);
  double prev = at0[0][1];
  for (double beta = 0.1; beta <= 1.0001; beta += 0.1) {
    auto s = risk_prior_schedule(sup, 3, std::min(beta, 1.0));
    EXPECT_GE(s[0][1], prev - 1e-15);
    prev = s[0][1];
  }
}

TEST(TwoClassFit, IdenticalClassesFitSimilarValues) {
  auto g = std::make_shared<TemporalContactGraph>(gen_random_regular(60, 4, 6, 0.0, 4));
  EpidemicParams truth = EpidemicParams::uniform(0.3, 0.0, 1.0 / g->size());
  Cascade c;
  for (std::uint64_t seed = 1;; ++seed) {
    c = simulate(*g, truth, std::vector<int>{0}, seed);
    if (count_ever_infected(c, 6) >= 20) break;
  }
  EpidemicParams init = truth;
  init.class_values = {0.5, 0.5};
  init.class_of.assign(g->size(), 0);
  for (int i = 0; i < g->size(); i += 2) init.class_of[i] = 1;
  PosteriorModel post(g, init, snapshot_observations(c, 6));
  TrainConfig cfg;
  cfg.steps = 600;
  cfg.samples = 200;
  cfg.lr = 1e-2;
  cfg.param_lr = 0.05;
  auto fit = two_class_fit(post, ModelConfig{}, cfg, 3);
  ASSERT_EQ(fit.rates.size(), 2u);
  EXPECT_LT(std::abs(fit.rates[0] - fit.rates[1]), 0.5 * (fit.rates[0] + fit.rates[1]) / 2);
}

TEST(Report, CsvHasOneRowPerStep) {
  TrainReport r;
  r.steps.resize(3);
  for (auto& s : r.steps) s.class_values = {0.1};
  std::ostringstream os;
  write_report_csv(os, r);
  std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_EQ(text.substr(0, text.find('\n')), "step,beta,mean_target,mean_log_q,elbo,mu_hat,lambda_hat");
}
