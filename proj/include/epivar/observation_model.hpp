#ifndef EPIVAR_OBSERVATION_MODEL_HPP
#define EPIVAR_OBSERVATION_MODEL_HPP

#include <cmath>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "epivar/common.hpp"
#include "epivar/contact_graph.hpp"
#include "epivar/epidemic_model.hpp"

namespace epivar {

/// A test result: `individual` reported in `state` at `time`. Zero error
/// rates make it a hard constraint.
struct Observation {
  int individual = 0;
  int time = 0;
  State state = State::S;
  double fnr = 0.0;
  double fpr = 0.0;

  bool hard() const { return fnr == 0.0 && fpr == 0.0; }
};

/// log P(report | true state). Confusion model: a true I is reported I
/// with 1 - fnr and S with fnr; a true S is reported I with fpr and S with
/// 1 - fpr; R reports are noise-free. Zero-probability reports return
/// kImpossible.
inline double obs_log_likelihood(const Observation& o, State actual) {
  double p = 0.0;
  switch (o.state) {
    case State::I:
      p = actual == State::I ? 1.0 - o.fnr : actual == State::S ? o.fpr : 0.0;
      break;
    case State::S:
      p = actual == State::S ? 1.0 - o.fpr : actual == State::I ? o.fnr : 0.0;
      break;
    case State::R:
      p = actual == State::R ? 1.0 : 0.0;
      break;
  }
  return std::log(p);
}

/// Feasible (t_inf, t_rec) pairs of one individual, sorted by (t_inf, t_rec).
using Support = std::vector<Trajectory>;

/// Pairs consistent with every hard observation of `individual`. Noisy
/// observations never restrict support. With `allow_recovery` false only
/// never-recovering pairs (t_rec = T+1) are kept.
inline Support feasible_support(int individual, std::span<const Observation> observations, int horizon,
                                bool allow_recovery = true) {
  Support out;
  const int never = horizon + 1;
  for (int ti = 0; ti <= never; ++ti) {
    for (int tr = (ti == never ? never : ti + 1); tr <= never; ++tr) {
      if (!allow_recovery && tr != never) continue;
      Trajectory cand{ti, tr};
      bool ok = true;
      for (const Observation& o : observations) {
        if (o.individual != individual || !o.hard()) continue;
        if (cand.state_at(o.time) != o.state) {
          ok = false;
          break;
        }
      }
      if (ok) out.push_back(cand);
    }
  }
  if (out.empty())
    throw InfeasibleEvidence("observations of individual " + std::to_string(individual) + " are contradictory");
  return out;
}

/// Gradient of the summed non-clamped log factors with respect to the
/// epidemic parameters, plus the event counts that carry information about
/// each of them.
struct ParamGradient {
  std::vector<double> d_class;
  double d_mu = 0.0;
  std::vector<long> class_events;
  long mu_events = 0;
};

/// Posterior over cascades given a contact graph, epidemic parameters and
/// observations, evaluated through per-(individual, time) factors psi_i^t.
/// Impossible factors are replaced by log(epsilon) in the regularized
/// evaluation; `beta` tempers the target during annealing.
class PosteriorModel {
 public:
  PosteriorModel(std::shared_ptr<const TemporalContactGraph> graph, EpidemicParams params,
                 std::vector<Observation> observations, double epsilon = 1e-10, double beta = 1.0)
      : graph_(std::move(graph)), params_(std::move(params)), observations_(std::move(observations)) {
    if (!graph_) throw Error("posterior needs a graph");
    params_.validate(graph_->size());
    set_epsilon(epsilon);
    set_beta(beta);
    by_node_.assign(graph_->size(), {});
    for (const Observation& o : observations_) {
      if (o.individual < 0 || o.individual >= graph_->size()) throw Error("observation of unknown individual");
      if (o.time < 0 || o.time > graph_->horizon()) throw Error("observation time outside [0,T]");
      if (!(o.fnr >= 0.0 && o.fnr < 1.0 && o.fpr >= 0.0 && o.fpr < 1.0))
        throw Error("observation error rates must lie in [0,1)");
      by_node_[o.individual].push_back(o);
    }
  }

  const TemporalContactGraph& graph() const { return *graph_; }
  std::shared_ptr<const TemporalContactGraph> graph_ptr() const { return graph_; }
  const EpidemicParams& params() const { return params_; }
  void set_params(EpidemicParams p) {
    p.validate(graph_->size());
    params_ = std::move(p);
  }
  const std::vector<Observation>& observations() const { return observations_; }
  std::span<const Observation> observations_of(int i) const { return by_node_[i]; }
  int size() const { return graph_->size(); }
  int horizon() const { return graph_->horizon(); }

  double epsilon() const { return epsilon_; }
  double log_epsilon() const { return log_eps_; }
  void set_epsilon(double eps) {
    if (!(eps > 0.0 && eps < 1.0)) throw Error("epsilon must lie in (0,1)");
    epsilon_ = eps;
    log_eps_ = std::log(eps);
  }
  double beta() const { return beta_; }
  void set_beta(double b) {
    if (!(b >= 0.0 && b <= 1.0)) throw Error("beta must lie in [0,1]");
    beta_ = b;
  }

  /// Recovery is structurally impossible when mu = 0 (and mu is not being
  /// learned); supports then drop every recovering pair.
  std::vector<Support> supports(bool allow_recovery) const {
    std::vector<Support> out;
    out.reserve(size());
    for (int i = 0; i < size(); ++i) out.push_back(feasible_support(i, by_node_[i], horizon(), allow_recovery));
    return out;
  }

  struct Evaluation {
    double regularized = 0.0;
    /// Unregularized log posterior weight; kImpossible if any factor is 0.
    double exact = 0.0;
    int clamped = 0;
  };

  Evaluation evaluate(const Cascade& x) const {
    Evaluation ev;
    for (int i = 0; i < x.size(); ++i) {
      Evaluation e = evaluate_node(x, i);
      ev.regularized += e.regularized;
      ev.exact += e.exact;
      ev.clamped += e.clamped;
    }
    return ev;
  }

  /// Contribution of individual i's factors alone. It depends only on the
  /// trajectories of i and its contact neighbors.
  Evaluation evaluate_node(const Cascade& x, int i) const {
    Evaluation ev;
    bool impossible = false;
    for_each_node_factor(x, i, [&](int, double logpsi, double, double) {
      if (is_impossible(logpsi)) impossible = true;
      ev.exact += logpsi;
      if (logpsi < log_eps_) {
        ev.regularized += log_eps_;
        ++ev.clamped;
      } else {
        ev.regularized += logpsi;
      }
    });
    if (impossible) ev.exact = kImpossible;
    return ev;
  }

  /// Sum over (i, t) of max(log psi_i^t, log epsilon); finite for every
  /// cascade.
  double regularized_log_posterior(const Cascade& x) const { return evaluate(x).regularized; }

  /// Unnormalized log posterior weight (prior times likelihood).
  double log_posterior(const Cascade& x) const { return evaluate(x).exact; }

  double tempered_target(const Cascade& x) const {
    return beta_ == 0.0 ? 0.0 : beta_ * regularized_log_posterior(x);
  }

  /// Gradient of the regularized log posterior in the epidemic parameters.
  /// Clamped factors are constant and contribute nothing.
  ParamGradient param_gradient(const Cascade& x) const {
    ParamGradient g;
    g.d_class.assign(std::max(params_.n_classes(), 1), 0.0);
    g.class_events.assign(g.d_class.size(), 0);
    for_each_factor(x, [&](int i, int t, double logpsi, double dclass, double dmu) {
      if (logpsi < log_eps_ || t == 0) return;
      int c = params_.class_index(i);
      if (dclass != 0.0) {
        g.d_class[c] += dclass;
        g.class_events[c]++;
      }
      if (dmu != 0.0) {
        g.d_mu += dmu;
        g.mu_events++;
      }
    });
    return g;
  }

  /// Calls f(i, t, log psi_i^t, d/d class value, d/d mu) for every factor
  /// that is not identically 1.
  template <class F>
  void for_each_factor(const Cascade& x, F&& f) const {
    for (int i = 0; i < x.size(); ++i)
      for_each_node_factor(x, i, [&](int t, double lp, double dc, double dm) { f(i, t, lp, dc, dm); });
  }

  /// Calls f(t, log psi_i^t, d/d class value, d/d mu) for individual i.
  template <class F>
  void for_each_node_factor(const Cascade& x, int i, F&& f) const {
    constexpr int kStack = 64;
    const int len = x.horizon + 1;
    double buf[4 * kStack];
    std::vector<double> heap;
    double* base = buf;
    if (len > kStack) {
      heap.resize(4 * static_cast<std::size_t>(len));
      base = heap.data();
    }
    double* logp = base;
    double* dcl = base + len;
    double* dmu = base + 2 * len;
    double* touched = base + 3 * len;
    std::fill(base, base + 4 * len, 0.0);
    visit_transitions(*graph_, params_, x, i, [&](int t, double lp, double dc, double dm) {
      logp[t] = lp;
      dcl[t] = dc;
      dmu[t] = dm;
      touched[t] = 1.0;
    });
    for (const Observation& o : by_node_[i]) {
      logp[o.time] += obs_log_likelihood(o, x.state(i, o.time));
      touched[o.time] = 1.0;
    }
    for (int t = 0; t < len; ++t)
      if (touched[t] != 0.0) f(t, logp[t], dcl[t], dmu[t]);
  }

 private:
  std::shared_ptr<const TemporalContactGraph> graph_;
  EpidemicParams params_;
  std::vector<Observation> observations_;
  std::vector<std::vector<Observation>> by_node_;
  double epsilon_ = 1e-10;
  double log_eps_ = std::log(1e-10);
  double beta_ = 1.0;
};

/// Reads `i,state,t[,fnr,fpr]` rows.
inline std::vector<Observation> read_observations_csv(std::istream& in) {
  std::vector<Observation> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv(line);
    if (lineno == 1 && detail::looks_like_header(cells)) continue;
    if (cells.size() != 3 && cells.size() != 5) throw ParseError("expected i,state,t[,fnr,fpr]", lineno);
    Observation o;
    if (!detail::parse_number(cells[0], o.individual) || !detail::parse_number(cells[2], o.time))
      throw ParseError("malformed observation row", lineno);
    try {
      o.state = parse_state(cells[1]);
    } catch (const Error&) {
      throw ParseError("unknown state '" + cells[1] + "'", lineno);
    }
    if (cells.size() == 5 &&
        (!detail::parse_number(cells[3], o.fnr) || !detail::parse_number(cells[4], o.fpr)))
      throw ParseError("malformed error rates", lineno);
    out.push_back(o);
  }
  return out;
}

inline void write_observations_csv(std::ostream& out, std::span<const Observation> obs) {
  out << "i,state,t,fnr,fpr\n";
  for (const auto& o : obs)
    out << o.individual << ',' << to_char(o.state) << ',' << o.time << ',' << o.fnr << ',' << o.fpr << '\n';
}

/// Every individual's state at time t, as hard observations.
inline std::vector<Observation> snapshot_observations(const Cascade& c, int t) {
  std::vector<Observation> out;
  for (int i = 0; i < c.size(); ++i) out.push_back(Observation{i, t, c.state(i, t)});
  return out;
}

}  // namespace epivar

#endif  // EPIVAR_OBSERVATION_MODEL_HPP
