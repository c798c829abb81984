#ifndef EPIVAR_TRAINER_HPP
#define EPIVAR_TRAINER_HPP

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "epivar/autoreg_model.hpp"
#include "epivar/common.hpp"
#include "epivar/epidemic_model.hpp"
#include "epivar/neural_kernel.hpp"
#include "epivar/observation_model.hpp"

namespace epivar {

struct TrainConfig {
  int steps = 10000;
  int samples = 1000;
  double lr = 1e-3;
  double epsilon = 1e-10;
  bool baseline = true;
  /// Extra steps at beta = 1 after the annealing ramp.
  int hold_steps = 0;
  bool risk_prior = false;
  bool learn_lambda = false;
  bool learn_mu = false;
  /// Adam step size for the epidemic parameters in logit (probabilities)
  /// or log (rates) coordinates; multiplied by beta.
  double param_lr = 0.02;
  /// Samples drawn after training for marginals and the ELBO.
  int final_samples = 0;

  bool learn_params() const { return learn_lambda || learn_mu; }

  void validate() const {
    if (steps < 1) throw Error("steps must be at least 1");
    if (samples < 1 || (baseline && samples < 2)) throw Error("need at least 2 samples per step with a baseline");
    if (!(lr > 0.0) || !(param_lr >= 0.0)) throw Error("learning rates must be positive");
    if (hold_steps < 0) throw Error("hold_steps must be non-negative");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw Error("epsilon must lie in (0,1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},         {"samples", c.samples},       {"lr", c.lr},
       {"epsilon", c.epsilon},     {"baseline", c.baseline},     {"hold_steps", c.hold_steps},
       {"risk_prior", c.risk_prior}, {"learn_lambda", c.learn_lambda}, {"learn_mu", c.learn_mu},
       {"param_lr", c.param_lr},   {"final_samples", c.final_samples}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.samples = j.value("samples", c.samples);
  c.lr = j.value("lr", c.lr);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.baseline = j.value("baseline", c.baseline);
  c.hold_steps = j.value("hold_steps", c.hold_steps);
  c.risk_prior = j.value("risk_prior", c.risk_prior);
  c.learn_lambda = j.value("learn_lambda", c.learn_lambda);
  c.learn_mu = j.value("learn_mu", c.learn_mu);
  c.param_lr = j.value("param_lr", c.param_lr);
  c.final_samples = j.value("final_samples", c.final_samples);
}

/// Final-time tempering used for risk estimation. Individual i's state X at
/// T gets the log factor (1 - beta) * (-log n_i(X)), n_i(X) being the number
/// of support points of i ending in X. At beta = 0 the optimal q therefore
/// draws every reachable final state with equal probability; at beta = 1
/// the factor is 1.
class RiskPrior {
 public:
  RiskPrior() = default;
  explicit RiskPrior(const std::vector<Support>& supports, int horizon) : horizon_(horizon) {
    log_counts_.resize(supports.size());
    for (std::size_t i = 0; i < supports.size(); ++i) {
      std::array<int, 3> c{0, 0, 0};
      for (const auto& tr : supports[i]) c[static_cast<int>(tr.state_at(horizon))]++;
      for (int s = 0; s < 3; ++s) log_counts_[i][s] = c[s] > 0 ? std::log(static_cast<double>(c[s])) : 0.0;
    }
  }

  /// Log factor of individual i ending in `s`.
  double log_factor(int i, State s, double beta) const {
    return (1.0 - beta) * -log_counts_[i][static_cast<int>(s)];
  }

  double log_factor(const Cascade& x, double beta) const {
    if (beta >= 1.0 || log_counts_.empty()) return 0.0;
    double total = 0.0;
    for (int i = 0; i < x.size(); ++i) total += log_factor(i, x.state(i, horizon_), beta);
    return total;
  }

 private:
  int horizon_ = 0;
  std::vector<std::array<double, 3>> log_counts_;
};

/// Final-state draw probabilities per individual induced by the risk factor
/// alone (uniform q over support times the factor).
inline std::vector<std::array<double, 3>> risk_prior_schedule(const std::vector<Support>& supports, int horizon,
                                                              double beta) {
  RiskPrior rp(supports, horizon);
  std::vector<std::array<double, 3>> out(supports.size());
  for (std::size_t i = 0; i < supports.size(); ++i) {
    std::array<double, 3> m{0, 0, 0};
    for (const auto& tr : supports[i]) {
      State s = tr.state_at(horizon);
      m[static_cast<int>(s)] += std::exp(rp.log_factor(static_cast<int>(i), s, beta));
    }
    double z = m[0] + m[1] + m[2];
    for (double& v : m) v /= z;
    out[i] = m;
  }
  return out;
}

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, nlohmann::json checkpoint)
      : Error(what), checkpoint_(std::move(checkpoint)) {}
  const nlohmann::json& checkpoint() const { return checkpoint_; }

 private:
  nlohmann::json checkpoint_;
};

struct StepStats {
  int step = 0;
  double beta = 0.0;
  /// Mean over the batch of the tempered target log-weight.
  double mean_target = 0.0;
  double mean_log_q = 0.0;
  /// Mean of regularized log posterior minus log q (beta = 1 bound).
  double elbo = 0.0;
  std::vector<double> class_values;
  double mu = 0.0;
};

struct StepOptions {
  bool baseline = true;
  const RiskPrior* risk = nullptr;
};

struct GradientEstimate {
  ModelGradient grad;
  StepStats stats;
};

/// Score-function estimate of grad KL(q || p_beta) from `batch`. Weights are
/// w_s = log q(s) - beta * reg(s) [- risk factor] minus their batch mean
/// (when enabled); the estimate is mean_s w_s grad log q(s). Throws
/// TrainingDiverged on a non-finite weight.
inline GradientEstimate estimate_kl_gradient(const AutoregressiveModel& model, const PosteriorModel& post, double beta,
                                             SampleBatch& batch, const StepOptions& so = {}) {
  const int m = batch.size;
  std::vector<double> w(m);
  GradientEstimate out;
  StepStats& st = out.stats;
  st.beta = beta;
  for (int s = 0; s < m; ++s) {
    Cascade x = batch.cascade(s);
    auto ev = post.evaluate(x);
    double target = (beta == 0.0 ? 0.0 : beta * ev.regularized) + (so.risk ? so.risk->log_factor(x, beta) : 0.0);
    w[s] = batch.log_q[s] - target;
    if (!std::isfinite(w[s]))
      throw TrainingDiverged("non-finite weight for sample " + std::to_string(s) + " (" +
                                 std::to_string(ev.clamped) + " clamped factors, log q " +
                                 std::to_string(batch.log_q[s]) + ")",
                             model.to_json());
    st.mean_target += target;
    st.mean_log_q += batch.log_q[s];
    st.elbo += ev.regularized - batch.log_q[s];
  }
  st.mean_target /= m;
  st.mean_log_q /= m;
  st.elbo /= m;
  double base = 0.0;
  if (so.baseline) {
    for (double v : w) base += v;
    base /= m;
  }
  for (double& v : w) v = (v - base) / m;
  out.grad = model.zero_gradient();
  model.accumulate_gradient(batch, w, out.grad);
  return out;
}

/// One Adam step along estimate_kl_gradient. Throws TrainingDiverged on a
/// non-finite weight or gradient.
inline StepStats kl_gradient_step(AutoregressiveModel& model, const PosteriorModel& post, double beta,
                                  SampleBatch& batch, ModelOptimizer& opt, const StepOptions& so = {}) {
  GradientEstimate est = estimate_kl_gradient(model, post, beta, batch, so);
  try {
    model.apply(est.grad, opt);
  } catch (const NonFiniteGradient& e) {
    throw TrainingDiverged(e.what(), model.to_json());
  }
  return est.stats;
}

/// Adam ascent on the epidemic parameters in unconstrained coordinates.
struct ParamOptimizer {
  AdamConfig config;
  std::vector<double> m, v;
  std::vector<long> steps;
};

struct ParamUpdate {
  /// Per class value then mu: whether any event informed the parameter.
  std::vector<bool> updated;
  std::vector<double> gradient;
};

/// Moves the learned parameters along grad_Lambda of mean_s sum of
/// non-clamped log factors over the batch, in logit coordinates for
/// probabilities and log coordinates for rates, by one Adam step of size
/// `lr`. A parameter without informative events in the batch is left
/// unchanged. Values stay strictly inside their valid range.
inline ParamUpdate em_param_step(PosteriorModel& post, const SampleBatch& batch, bool learn_lambda, bool learn_mu,
                                 double lr, ParamOptimizer& opt) {
  EpidemicParams p = post.params();
  const int nc = p.n_classes();
  const int np = nc + 1;
  if (opt.m.empty()) {
    opt.m.assign(np, 0.0);
    opt.v.assign(np, 0.0);
    opt.steps.assign(np, 0);
  }
  std::vector<double> grad(np, 0.0);
  std::vector<long> events(np, 0);
  for (int s = 0; s < batch.size; ++s) {
    ParamGradient g = post.param_gradient(batch.cascade(s));
    for (int c = 0; c < nc; ++c) {
      grad[c] += g.d_class[c];
      events[c] += g.class_events[c];
    }
    grad[nc] += g.d_mu;
    events[nc] += g.mu_events;
  }
  ParamUpdate up;
  up.updated.assign(np, false);
  up.gradient.assign(np, 0.0);
  for (int k = 0; k < np; ++k) grad[k] /= std::max(batch.size, 1);
  const bool rate = p.mode == InfectionMode::Rate;
  auto ascend = [&](int k, double value, bool positive_only) {
    // chain rule into u = logit(value) or u = log(value)
    double du = positive_only ? grad[k] * value : grad[k] * value * (1.0 - value);
    up.gradient[k] = du;
    const AdamConfig& c = opt.config;
    long step = ++opt.steps[k];
    opt.m[k] = c.beta1 * opt.m[k] + (1 - c.beta1) * du;
    opt.v[k] = c.beta2 * opt.v[k] + (1 - c.beta2) * du * du;
    double mh = opt.m[k] / (1 - std::pow(c.beta1, static_cast<double>(step)));
    double vh = opt.v[k] / (1 - std::pow(c.beta2, static_cast<double>(step)));
    double delta = lr * mh / (std::sqrt(vh) + c.eps);
    constexpr double lo = 1e-6;
    if (positive_only) return std::max(value * std::exp(delta), lo);
    double u = std::log(value / (1.0 - value)) + delta;
    return std::clamp(1.0 / (1.0 + std::exp(-u)), lo, 1.0 - lo);
  };
  if (learn_lambda && p.mode != InfectionMode::Graph) {
    for (int c = 0; c < nc; ++c) {
      if (events[c] == 0 || !std::isfinite(grad[c])) continue;
      double v = std::clamp(p.class_values[c], 1e-6, rate ? 1e6 : 1.0 - 1e-6);
      p.class_values[c] = ascend(c, v, rate);
      up.updated[c] = true;
    }
  }
  if (learn_mu && events[nc] > 0 && std::isfinite(grad[nc])) {
    p.mu = ascend(nc, std::clamp(p.mu, 1e-6, 1.0 - 1e-6), false);
    up.updated[nc] = true;
  }
  post.set_params(std::move(p));
  return up;
}

struct TrainReport {
  std::vector<StepStats> steps;
  std::optional<Marginals> marginals;
  MeanStderr elbo;
  /// Mean tempered target over the last 10% of steps shows no downward
  /// trend.
  bool stationary = true;
  double tail_slope = 0.0;
  bool diverged = false;
  std::string message;
  nlohmann::json checkpoint;
};

/// Batch mean of regularized log posterior minus log q, with its standard
/// error; a stochastic lower bound on log Z.
inline MeanStderr elbo(const PosteriorModel& post, const SampleBatch& batch) {
  std::vector<double> v(batch.size);
  for (int s = 0; s < batch.size; ++s) v[s] = post.regularized_log_posterior(batch.cascade(s)) - batch.log_q[s];
  return mean_stderr(v);
}

inline MeanStderr elbo(const AutoregressiveModel& model, const PosteriorModel& post, int samples, Rng& rng) {
  SampleBatch b = model.sample(samples, rng);
  return elbo(post, b);
}

namespace detail {

/// Least-squares slope of ys against their index and its standard error.
inline std::pair<double, double> slope_with_stderr(std::span<const double> ys) {
  const std::size_t n = ys.size();
  if (n < 3) return {0.0, 0.0};
  double mx = (n - 1) / 2.0, my = 0.0;
  for (double y : ys) my += y;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    sxx += (k - mx) * (k - mx);
    sxy += (k - mx) * (ys[k] - my);
  }
  double b = sxy / sxx;
  double rss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double r = ys[k] - my - b * (k - mx);
    rss += r * r;
  }
  return {b, std::sqrt(rss / (n - 2) / sxx)};
}

}  // namespace detail

using StepCallback = std::function<void(const StepStats&, const AutoregressiveModel&)>;

/// Linear annealing beta = k / K for k = 1..K, then `hold_steps` at beta = 1.
/// With parameter learning each step is followed by em_param_step. On
/// divergence the report carries the last checkpoint and `diverged`.
inline TrainReport anneal_train(AutoregressiveModel& model, PosteriorModel& post, const TrainConfig& cfg, Rng& rng,
                                const StepCallback& on_step = {}) {
  cfg.validate();
  post.set_epsilon(cfg.epsilon);
  TrainReport rep;
  AdamConfig ac;
  ac.lr = cfg.lr;
  ModelOptimizer opt = model.make_optimizer(ac);
  ParamOptimizer popt;
  std::optional<RiskPrior> risk;
  if (cfg.risk_prior) risk.emplace(post.supports(cfg.learn_mu || post.params().mu > 0.0), post.horizon());
  StepOptions so{cfg.baseline, risk ? &*risk : nullptr};
  const int total = cfg.steps + cfg.hold_steps;
  rep.steps.reserve(total);
  try {
    for (int k = 1; k <= total; ++k) {
      double beta = std::min(1.0, static_cast<double>(k) / cfg.steps);
      post.set_beta(beta);
      SampleBatch batch = model.sample(cfg.samples, rng);
      StepStats st = kl_gradient_step(model, post, beta, batch, opt, so);
      st.step = k;
      if (cfg.learn_params()) em_param_step(post, batch, cfg.learn_lambda, cfg.learn_mu, cfg.param_lr * beta, popt);
      st.class_values = post.params().class_values;
      st.mu = post.params().mu;
      rep.steps.push_back(st);
      if (on_step) on_step(st, model);
    }
  } catch (const TrainingDiverged& e) {
    rep.diverged = true;
    rep.message = e.what();
    rep.checkpoint = e.checkpoint();
    return rep;
  }
  std::size_t tail = std::max<std::size_t>(3, rep.steps.size() / 10);
  if (tail <= rep.steps.size()) {
    std::vector<double> ys;
    for (std::size_t k = rep.steps.size() - tail; k < rep.steps.size(); ++k) ys.push_back(rep.steps[k].mean_target);
    auto [b, se] = detail::slope_with_stderr(ys);
    rep.tail_slope = b;
    rep.stationary = b >= -2.0 * se;
  }
  post.set_beta(1.0);
  int fs = cfg.final_samples > 0 ? cfg.final_samples : cfg.samples;
  SampleBatch fin = model.sample(fs, rng);
  rep.marginals = marginals(fin);
  rep.elbo = elbo(post, fin);
  return rep;
}

inline void write_report_csv(std::ostream& out, const TrainReport& r) {
  std::size_t nc = r.steps.empty() ? 0 : r.steps.front().class_values.size();
  out << "step,beta,mean_target,mean_log_q,elbo,mu_hat";
  for (std::size_t c = 0; c < nc; ++c) out << ",lambda_hat" << (c ? "_" + std::to_string(c) : "");
  out << '\n';
  for (const auto& s : r.steps) {
    out << s.step << ',' << s.beta << ',' << s.mean_target << ',' << s.mean_log_q << ',' << s.elbo << ',' << s.mu;
    for (double v : s.class_values) out << ',' << v;
    out << '\n';
  }
}

struct ModelConfig {
  OrderingMethod ordering = OrderingMethod::SpanningTree;
  int root = -1;
  DependencyPolicy policy = DependencyPolicy::NextNearestNeighbors;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"ordering", c.ordering == OrderingMethod::Random ? "random" : "spanning-tree"},
       {"root", c.root},
       {"policy", to_string(c.policy)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("ordering")) {
    auto s = j.at("ordering").get<std::string>();
    if (s == "random") c.ordering = OrderingMethod::Random;
    else if (s == "spanning-tree") c.ordering = OrderingMethod::SpanningTree;
    else throw Error("unknown ordering '" + s + "'");
  }
  c.root = j.value("root", c.root);
  if (j.contains("policy")) c.policy = parse_policy(j.at("policy").get<std::string>());
}

/// Builds q over the posterior's feasible supports. Recovering trajectories
/// are included only when mu is positive or learned.
inline AutoregressiveModel build_model(const PosteriorModel& post, const ModelConfig& mc, bool allow_recovery,
                                       std::uint64_t seed) {
  Ordering ord = build_ordering(post.graph(), mc.ordering, derive_seed(seed, 1), mc.root);
  Rng init(derive_seed(seed, 2));
  return AutoregressiveModel(post.graph(), post.supports(allow_recovery), std::move(ord), mc.policy, init);
}

struct FitResult {
  AutoregressiveModel model;
  TrainReport report;
  EpidemicParams params;
};

/// Builds and trains a model for `post`.
inline FitResult fit_variational(PosteriorModel& post, const ModelConfig& mc, const TrainConfig& cfg,
                                 std::uint64_t seed) {
  bool allow_recovery = post.params().mu > 0.0 || cfg.learn_mu;
  AutoregressiveModel model = build_model(post, mc, allow_recovery, seed);
  Rng rng(derive_seed(seed, 3));
  TrainReport rep = anneal_train(model, post, cfg, rng);
  return FitResult{std::move(model), std::move(rep), post.params()};
}

struct TwoClassFit {
  std::vector<double> rates;
  MeanStderr elbo;
  TrainReport report;
};

/// Jointly trains q and one infection parameter per class of the
/// posterior's class map; returns the fitted values and final ELBO.
inline TwoClassFit two_class_fit(PosteriorModel& post, const ModelConfig& mc, TrainConfig cfg, std::uint64_t seed) {
  if (post.params().n_classes() < 2) throw Error("two-class fit needs a two-class parameter set");
  cfg.learn_lambda = true;
  FitResult fr = fit_variational(post, mc, cfg, seed);
  if (fr.report.diverged) throw Error("training diverged: " + fr.report.message);
  return TwoClassFit{fr.params.class_values, fr.report.elbo, std::move(fr.report)};
}

}  // namespace epivar

#endif  // EPIVAR_TRAINER_HPP
