#ifndef EPIVAR_BASELINES_HPP
#define EPIVAR_BASELINES_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include "epivar/common.hpp"
#include "epivar/contact_graph.hpp"
#include "epivar/epidemic_model.hpp"
#include "epivar/observation_model.hpp"

namespace epivar {

/// |A ∩ B| / |A ∪ B| over id sets; 1 when nothing is observed (A empty).
inline double jaccard_similarity(std::span<const int> observed, std::span<const int> simulated) {
  if (observed.empty()) return 1.0;
  std::vector<int> a(observed.begin(), observed.end()), b(simulated.begin(), simulated.end());
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  std::vector<int> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  double uni = static_cast<double>(a.size() + b.size() - both.size());
  return both.size() / uni;
}

struct SoftMarginConfig {
  long simulations = 1000;
  std::vector<double> a_grid{0.05, 0.1, 0.2, 0.4, 0.8};
  std::uint64_t seed = 0;
  /// Empty: individuals observed I or R.
  std::vector<int> candidates;
};

inline std::vector<int> default_candidates(std::span<const Observation> obs) {
  std::vector<int> c;
  for (const auto& o : obs)
    if (o.state != State::S) c.push_back(o.individual);
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

struct SoftMarginResult {
  std::vector<int> candidates;
  std::vector<double> a_grid;
  /// scores[a][c]: normalized over candidates (uniform source prior).
  std::vector<std::vector<double>> scores;
  /// log of the mean kernel weight per (a, candidate).
  std::vector<std::vector<double>> log_raw;
  /// Every kernel weight underflowed for this a.
  std::vector<bool> all_zero;
  /// Largest exponent -[(1-phi_I)^2 + (1-phi_R)^2] / a^2 seen per a.
  std::vector<double> max_exponent;
  long simulations = 0;

  /// Scores of all n individuals (zero off the candidate list) for grid
  /// entry `a_index`.
  std::vector<double> dense(int n, std::size_t a_index) const {
    std::vector<double> out(n, 0.0);
    for (std::size_t c = 0; c < candidates.size(); ++c) out[candidates[c]] = scores[a_index][c];
    return out;
  }
};

/// Soft-rejection Monte Carlo source estimator. Simulations accumulate so
/// the sample count can grow incrementally.
class SoftMarginEstimator {
 public:
  SoftMarginEstimator(const TemporalContactGraph& g, const EpidemicParams& p, std::vector<Observation> obs,
                      SoftMarginConfig cfg)
      : g_(g), sim_(g, p), obs_(std::move(obs)), cfg_(std::move(cfg)) {
    if (cfg_.a_grid.empty()) throw Error("soft margin needs at least one a value");
    for (double a : cfg_.a_grid)
      if (!(a > 0.0)) throw Error("a must be positive");
    candidates_ = cfg_.candidates.empty() ? default_candidates(obs_) : cfg_.candidates;
    for (const auto& o : obs_) {
      if (o.state == State::I) n_obs_i_++;
      if (o.state == State::R) n_obs_r_++;
    }
    acc_.assign(cfg_.a_grid.size(), std::vector<LogSumExp>(candidates_.size()));
    max_exp_.assign(cfg_.a_grid.size(), -std::numeric_limits<double>::infinity());
    rngs_.reserve(candidates_.size());
    for (int c : candidates_) rngs_.emplace_back(derive_seed(cfg_.seed, static_cast<std::uint64_t>(c)));
  }

  const std::vector<int>& candidates() const { return candidates_; }
  long simulations() const { return done_; }

  void run(long count) {
    std::vector<int> src(1);
    for (std::size_t c = 0; c < candidates_.size(); ++c) {
      src[0] = candidates_[c];
      for (long m = 0; m < count; ++m) {
        const Cascade& x = sim_.run(src, rngs_[c]);
        auto [phi_i, phi_r] = similarity(x);
        double d = (1.0 - phi_i) * (1.0 - phi_i) + (1.0 - phi_r) * (1.0 - phi_r);
        for (std::size_t k = 0; k < cfg_.a_grid.size(); ++k) {
          double e = -d / (cfg_.a_grid[k] * cfg_.a_grid[k]);
          acc_[k][c].add(e);
          max_exp_[k] = std::max(max_exp_[k], e);
        }
      }
    }
    done_ += count;
  }

  SoftMarginResult result() const {
    SoftMarginResult r;
    r.candidates = candidates_;
    r.a_grid = cfg_.a_grid;
    r.simulations = done_;
    r.max_exponent = max_exp_;
    const double log_m = std::log(static_cast<double>(std::max(done_, 1L)));
    for (std::size_t k = 0; k < cfg_.a_grid.size(); ++k) {
      std::vector<double> lr(candidates_.size());
      for (std::size_t c = 0; c < candidates_.size(); ++c) lr[c] = acc_[k][c].value() - log_m;
      // The kernel is evaluated in log space, so weights never underflow to
      // exactly zero; normalization happens relative to the best candidate.
      double z = candidates_.empty() ? kImpossible : log_sum_exp(lr);
      std::vector<double> sc(candidates_.size(), 0.0);
      bool zero = !std::isfinite(z);
      if (!zero)
        for (std::size_t c = 0; c < candidates_.size(); ++c) sc[c] = std::exp(lr[c] - z);
      bool underflow = true;
      for (double v : lr) underflow = underflow && !(std::exp(v) > 0.0);
      r.all_zero.push_back(zero || underflow);
      r.scores.push_back(std::move(sc));
      r.log_raw.push_back(std::move(lr));
    }
    return r;
  }

 private:
  std::pair<double, double> similarity(const Cascade& x) const {
    int inter_i = 0, sim_i = 0, inter_r = 0, sim_r = 0;
    for (const auto& o : obs_) {
      State s = x.state(o.individual, o.time);
      if (s == State::I) {
        ++sim_i;
        if (o.state == State::I) ++inter_i;
      } else if (s == State::R) {
        ++sim_r;
        if (o.state == State::R) ++inter_r;
      }
    }
    auto jac = [](int inter, int observed, int simulated) {
      if (observed == 0) return 1.0;
      return static_cast<double>(inter) / (observed + simulated - inter);
    };
    return {jac(inter_i, n_obs_i_, sim_i), jac(inter_r, n_obs_r_, sim_r)};
  }

  const TemporalContactGraph& g_;
  Simulator sim_;
  std::vector<Observation> obs_;
  SoftMarginConfig cfg_;
  std::vector<int> candidates_;
  int n_obs_i_ = 0, n_obs_r_ = 0;
  std::vector<std::vector<LogSumExp>> acc_;
  std::vector<double> max_exp_;
  std::vector<Rng> rngs_;
  long done_ = 0;
};

/// Soft-margin source scores. Jaccard similarities compare the observed
/// individuals' reported states with their simulated states at the
/// observation times; individuals never observed do not enter.
inline SoftMarginResult soft_margin_scores(const TemporalContactGraph& g, const EpidemicParams& p,
                                           std::span<const Observation> obs, const SoftMarginConfig& cfg) {
  if (cfg.simulations < 1) throw Error("soft margin needs at least one simulation");
  SoftMarginEstimator est(g, p, std::vector<Observation>(obs.begin(), obs.end()), cfg);
  est.run(cfg.simulations);
  return est.result();
}

inline void write_soft_margin_csv(std::ostream& out, const SoftMarginResult& r) {
  out << "candidate,score,a\n";
  for (std::size_t k = 0; k < r.a_grid.size(); ++k)
    for (std::size_t c = 0; c < r.candidates.size(); ++c)
      out << r.candidates[c] << ',' << r.scores[k][c] << ',' << r.a_grid[k] << '\n';
}

struct ContactTracingConfig {
  int tau = 5;
  /// Count contacts instead of summing their transmission probabilities.
  bool raw_counts = false;
};

/// Risk of every individual: contacts received from individuals observed
/// infected that drive transitions into (T - tau, T], i.e. contact times
/// T - tau .. T - 1, weighted by lambda unless raw counts are requested.
inline std::vector<double> contact_tracing_scores(const TemporalContactGraph& g, std::span<const Observation> obs,
                                                  int horizon, const ContactTracingConfig& cfg = {}) {
  if (cfg.tau < 0) throw Error("tau must be non-negative");
  std::vector<char> infected(g.size(), 0);
  for (const auto& o : obs)
    if (o.state == State::I) infected[o.individual] = 1;
  std::vector<double> score(g.size(), 0.0);
  int t0 = std::max(0, horizon - cfg.tau);
  int t1 = std::min(horizon, g.horizon());
  for (int t = t0; t < t1; ++t)
    for (int i = 0; i < g.size(); ++i)
      for (const Neighbor& nb : g.incoming(t, i))
        if (infected[nb.j]) score[i] += cfg.raw_counts ? 1.0 : nb.lambda;
  return score;
}

inline void write_scores_csv(std::ostream& out, std::span<const int> ids, std::span<const double> scores) {
  out << "i,score\n";
  for (std::size_t k = 0; k < ids.size(); ++k) out << ids[k] << ',' << scores[k] << '\n';
}

}  // namespace epivar

#endif  // EPIVAR_BASELINES_HPP
