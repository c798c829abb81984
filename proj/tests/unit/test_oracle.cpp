#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "epivar/oracle.hpp"

using namespace epivar;

namespace {

std::shared_ptr<const TemporalContactGraph> path(int n, int horizon, double lambda) {
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
  return std::make_shared<TemporalContactGraph>(make_static_graph(n, e, horizon, lambda));
}

AutoregressiveModel model_for(const PosteriorModel& post, const ExactPosterior& ex, std::uint64_t seed,
                              DependencyPolicy pol = DependencyPolicy::FullGraph) {
  Rng rng(seed);
  return AutoregressiveModel(post.graph(), ex.supports, Ordering::identity(post.size()), pol, rng);
}

}  // namespace

TEST(Oracle, SingleNodeHandEnumeration) {
  auto g = std::make_shared<TemporalContactGraph>(1, 1, std::vector<Contact>{});
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.5, 0.5), {});
  auto ex = enumerate_posterior(post);
  ASSERT_EQ(ex.count(), 4u);
  double never = 0, rec = 0, stay = 0, late = 0;
  for (std::size_t k = 0; k < ex.count(); ++k) {
    auto tr = ex.cascade(k).traj[0];
    if (tr.t_inf == 2) never += ex.probability(k);
    else if (tr.t_inf == 0 && tr.t_rec == 1) rec += ex.probability(k);
    else if (tr.t_inf == 0 && tr.t_rec == 2) stay += ex.probability(k);
    else late += ex.probability(k);
  }
  EXPECT_NEAR(never, 0.5, 1e-15);
  EXPECT_NEAR(rec, 0.25, 1e-15);
  EXPECT_NEAR(stay, 0.25, 1e-15);
  EXPECT_EQ(late, 0.0);
  EXPECT_NEAR(ex.log_z, 0.0, 1e-14);
}

TEST(Oracle, DisconnectedDynamicsDecouple) {
  auto g = path(2, 3, 0.0);
  PosteriorModel a(g, EpidemicParams::graph_lambdas(0.0, 0.3), {{1, 3, State::I}});
  PosteriorModel b(g, EpidemicParams::graph_lambdas(0.0, 0.3), {});
  auto ea = enumerate_posterior(a, false), eb = enumerate_posterior(b, false);
  EXPECT_NEAR(ea.marginals.prob(0, 0, State::I), 0.3, 1e-12);
  EXPECT_NEAR(eb.marginals.prob(0, 0, State::I), 0.3, 1e-12);
  EXPECT_NEAR(ea.marginals.prob(1, 0, State::I), 1.0, 1e-12);
}

TEST(Oracle, FullyObservedInstanceHasUniqueCascade) {
  auto g = path(3, 3, 0.5);
  EpidemicParams p = EpidemicParams::graph_lambdas(0.0, 0.3);
  Cascade c{3, {{0, 4}, {2, 4}, {4, 4}}};
  std::vector<Observation> obs;
  for (int t = 0; t <= 3; ++t)
    for (auto& o : snapshot_observations(c, t)) obs.push_back(o);
  PosteriorModel post(g, p, obs);
  auto ex = enumerate_posterior(post, false);
  EXPECT_EQ(ex.count(), 1u);
  EXPECT_NEAR(ex.log_z, post.regularized_log_posterior(c), 1e-12);
}

TEST(Oracle, MarginalsAgreeWithWeights) {
  auto g = path(3, 3, 0.6);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.3, 0.3), {{2, 3, State::I}});
  auto ex = enumerate_posterior(post);
  double p_i = 0;
  for (std::size_t k = 0; k < ex.count(); ++k)
    if (ex.cascade(k).state(1, 2) == State::I) p_i += ex.probability(k);
  EXPECT_NEAR(ex.marginals.prob(1, 2, State::I), p_i, 1e-12);
  double total = 0;
  for (std::size_t k = 0; k < ex.count(); ++k) total += ex.probability(k);
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Oracle, LogZInvariantUnderRelabeling) {
  // chain 0-1-2 vs the same chain relabeled 2-0-1
  auto g1 = path(3, 3, 0.6);
  auto g2 = std::make_shared<TemporalContactGraph>(make_static_graph(3, {{2, 0}, {0, 1}}, 3, 0.6));
  EpidemicParams p = EpidemicParams::graph_lambdas(0.2, 0.3);
  PosteriorModel a(g1, p, {{2, 3, State::I}, {0, 1, State::S}});
  PosteriorModel b(g2, p, {{1, 3, State::I}, {2, 1, State::S}});
  EXPECT_NEAR(enumerate_posterior(a).log_z, enumerate_posterior(b).log_z, 1e-12);
}

TEST(Oracle, GuardAndInfeasibility) {
  auto g = std::make_shared<TemporalContactGraph>(make_static_graph(12, {}, 6, 0.5));
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.2, 0.2), {});
  EXPECT_THROW(enumerate_posterior(post), InstanceTooLarge);
  auto h = path(2, 2, 0.0);
  PosteriorModel none(h, EpidemicParams::graph_lambdas(0.0, 0.0), {{0, 2, State::I}});
  EXPECT_THROW(enumerate_posterior(none, false), InfeasibleEvidence);
}

TEST(Oracle, SingleSourcePosteriorOnChain) {
  // Chain 0-1, lambda = 1, mu = 0, T = 1, both infected at T: exactly one of
  // the two must be the single source, symmetric by construction.
  auto g = path(2, 1, 1.0);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.0, 0.1), {{0, 1, State::I}, {1, 1, State::I}});
  auto ex = enumerate_posterior(post, false);
  EXPECT_NEAR(ex.single_source[0], 0.5, 1e-12);
  EXPECT_NEAR(ex.single_source[1], 0.5, 1e-12);
}

namespace {

// One individual with T = 0: infected at 0 (weight p0) or never.
struct TwoCascade {
  std::shared_ptr<const TemporalContactGraph> g = std::make_shared<TemporalContactGraph>(1, 0, std::vector<Contact>{});
  PosteriorModel post;
  ExactPosterior ex;
  explicit TwoCascade(double p0) : post(g, EpidemicParams::graph_lambdas(0.0, p0), {}), ex(enumerate_posterior(post, false)) {}
};

void set_first_node_logits(AutoregressiveModel& m, std::span<const double> logits) {
  m.set_zero();
  auto& last = m.inf_net(0)->layers().back();
  for (std::size_t k = 0; k < logits.size(); ++k) last.b(static_cast<int>(k)) = logits[k];
}

}  // namespace

TEST(Kl, UniformAgainstTwoCascadePosterior) {
  TwoCascade tc(0.75);
  ASSERT_EQ(tc.ex.count(), 2u);
  auto m = model_for(tc.post, tc.ex, 1);
  m.set_zero();
  auto kl = exact_kl(m, tc.ex, KlReference::Exact);
  EXPECT_NEAR(kl.value, 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25), 1e-12);
  EXPECT_FALSE(kl.infinite);
}

TEST(Kl, SkewedAgainstUniformPosterior) {
  // q = (0.75, 0.25) against a uniform two-cascade posterior.
  TwoCascade tc(0.5);
  auto m = model_for(tc.post, tc.ex, 1);
  // Support order is infected-at-0 first, never-infected second.
  ASSERT_EQ(tc.ex.cascade(0).traj[0].t_inf, 0);
  std::vector<double> logits{std::log(0.75), std::log(0.25)};
  set_first_node_logits(m, logits);
  auto kl = exact_kl(m, tc.ex, KlReference::Exact);
  EXPECT_NEAR(kl.value, 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-12);
  EXPECT_NEAR(kl.value, 0.1308, 1e-4);
}

TEST(Kl, NonNegativeAndInfiniteAgainstForbiddenCascades) {
  auto g = path(3, 2, 0.5);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.3, 0.3), {{2, 2, State::I}});
  auto ex = enumerate_posterior(post);
  for (std::uint64_t seed = 1; seed < 4; ++seed) {
    auto m = model_for(post, ex, seed);
    auto kl = exact_kl(m, ex);
    EXPECT_GE(kl.value, 0.0);
    EXPECT_NEAR(kl.q_mass, 1.0, 1e-9);
    EXPECT_TRUE(exact_kl(m, ex, KlReference::Exact).infinite);
  }
}

TEST(Kl, ZeroAtPosteriorAndGradientVanishes) {
  // Single free individual without dependencies: output biases equal to the
  // log regularized posterior make q exact.
  auto g = std::make_shared<TemporalContactGraph>(1, 3, std::vector<Contact>{});
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.0, 0.4), {});
  auto ex = enumerate_posterior(post, false);
  auto m = model_for(post, ex, 1);
  std::vector<double> logits;
  for (std::size_t k = 0; k < ex.count(); ++k) logits.push_back(ex.log_probability_reg(k));
  set_first_node_logits(m, logits);
  EXPECT_LT(exact_kl(m, ex).value, 1e-10);
  for (double v : exact_kl_gradient(m, ex)) EXPECT_LT(std::abs(v), 1e-8);
}

TEST(Kl, GradientMatchesFiniteDifference) {
  auto g = path(2, 2, 0.5);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.3, 0.3), {{1, 2, State::I}});
  auto ex = enumerate_posterior(post);
  auto m = model_for(post, ex, 3);
  auto grad = exact_kl_gradient(m, ex);
  auto theta = m.parameter_vector();
  const double h = 1e-5;
  int checked = 0;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    auto up = theta, dn = theta;
    up[k] += h;
    dn[k] -= h;
    m.set_parameter_vector(up);
    double fu = exact_kl(m, ex).value;
    m.set_parameter_vector(dn);
    double fd = exact_kl(m, ex).value;
    double num = (fu - fd) / (2 * h);
    if (std::abs(num) < 1e-6 && std::abs(grad[k]) < 1e-6) continue;
    EXPECT_LT(std::abs(num - grad[k]) / std::max(std::abs(num), std::abs(grad[k])), 1e-4) << k << " " << num << " " << grad[k];
    ++checked;
  }
  m.set_parameter_vector(theta);
  EXPECT_GT(checked, 10);
}

TEST(Kl, SoftmaxShiftIsGaugeDirection) {
  auto g = path(2, 2, 0.5);
  PosteriorModel post(g, EpidemicParams::graph_lambdas(0.3, 0.3), {{1, 2, State::I}});
  auto ex = enumerate_posterior(post);
  auto m = model_for(post, ex, 4);
  auto grad = exact_kl_gradient(m, ex);
  auto theta = m.parameter_vector();
  double before = exact_kl(m, ex).value;
  m.inf_net(1)->layers().back().b.array() += 1.0;
  auto shifted = m.parameter_vector();
  EXPECT_NEAR(exact_kl(m, ex).value, before, 1e-12);
  double dot = 0;
  for (std::size_t k = 0; k < theta.size(); ++k) dot += grad[k] * (shifted[k] - theta[k]);
  EXPECT_LT(std::abs(dot), 1e-12);
}

TEST(Oracle, MarginalsMatchRejectionSampling) {
  auto g = path(4, 3, 0.5);
  EpidemicParams p = EpidemicParams::graph_lambdas(0.0, 0.25);
  std::vector<Observation> obs{{1, 3, State::I}, {3, 3, State::S}};
  PosteriorModel post(g, p, obs);
  auto ex = enumerate_posterior(post, false);
  Simulator sim(*g, p);
  Rng rng(5);
  std::vector<double> hits(4, 0.0);
  int accepted = 0;
  for (int k = 0; k < 200000; ++k) {
    const Cascade& c = sim.run_prior(rng);
    bool ok = true;
    for (const auto& o : obs) ok = ok && c.state(o.individual, o.time) == o.state;
    if (!ok) continue;
    ++accepted;
    for (int i = 0; i < 4; ++i) hits[i] += c.state(i, 0) == State::I;
  }
  ASSERT_GT(accepted, 1000);
  for (int i = 0; i < 4; ++i) {
    double pe = ex.marginals.prob(i, 0, State::I);
    double se = std::sqrt(std::max(pe * (1 - pe), 1e-12) / accepted);
    EXPECT_NEAR(hits[i] / accepted, pe, 4 * se + 1e-12) << i;
  }
}
