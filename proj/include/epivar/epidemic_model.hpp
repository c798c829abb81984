#ifndef EPIVAR_EPIDEMIC_MODEL_HPP
#define EPIVAR_EPIDEMIC_MODEL_HPP

#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "epivar/common.hpp"
#include "epivar/contact_graph.hpp"

namespace epivar {

/// How a contact's transmission probability is obtained.
///  - Graph: the lambda stored on the contact.
///  - Probability: lambda_c of the susceptible individual's class.
///  - Rate: 1 - exp(-gamma_c * duration), gamma_c of the susceptible's class.
enum class InfectionMode { Graph, Probability, Rate };

struct EpidemicParams {
  InfectionMode mode = InfectionMode::Graph;
  /// lambda_c (Probability) or gamma_c (Rate); unused in Graph mode.
  std::vector<double> class_values;
  /// Class of each individual; empty means everyone is in class 0.
  std::vector<int> class_of;
  double mu = 0.0;
  /// Prior probability of being infected at t = 0.
  double p0 = 0.0;

  static EpidemicParams graph_lambdas(double mu, double p0) {
    return EpidemicParams{InfectionMode::Graph, {}, {}, mu, p0};
  }
  static EpidemicParams uniform(double lambda, double mu, double p0) {
    return EpidemicParams{InfectionMode::Probability, {lambda}, {}, mu, p0};
  }

  int class_index(int i) const { return class_of.empty() ? 0 : class_of[i]; }
  int n_classes() const { return static_cast<int>(class_values.size()); }

  /// Transmission probability of contact j -> i.
  double transmission(const Neighbor& nb, int i) const {
    switch (mode) {
      case InfectionMode::Graph: return nb.lambda;
      case InfectionMode::Probability: return class_values[class_index(i)];
      case InfectionMode::Rate: return -std::expm1(-class_values[class_index(i)] * nb.duration);
    }
    return 0.0;
  }

  /// log(1 - transmission) and its derivative with respect to the class
  /// value of i (zero in Graph mode).
  std::pair<double, double> log_survival(const Neighbor& nb, int i) const {
    switch (mode) {
      case InfectionMode::Graph: return {std::log1p(-nb.lambda), 0.0};
      case InfectionMode::Probability: {
        double l = class_values[class_index(i)];
        return {std::log1p(-l), -1.0 / (1.0 - l)};
      }
      case InfectionMode::Rate: {
        double g = class_values[class_index(i)];
        return {-g * nb.duration, -nb.duration};
      }
    }
    return {0.0, 0.0};
  }

  void validate(int n) const {
    auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (!in01(mu) || !in01(p0)) throw Error("mu and p0 must lie in [0,1]");
    if (mode != InfectionMode::Graph && class_values.empty()) throw Error("missing infection parameters");
    for (double v : class_values) {
      if (mode == InfectionMode::Probability && !in01(v)) throw Error("lambda must lie in [0,1]");
      if (mode == InfectionMode::Rate && !(v >= 0.0)) throw Error("gamma must be non-negative");
    }
    if (!class_of.empty()) {
      if (static_cast<int>(class_of.size()) != n) throw Error("class map must cover all individuals");
      for (int c : class_of)
        if (c < 0 || c >= n_classes()) throw Error("class index out of range");
    }
  }
};

/// Epidemic history of one individual as (infection time, recovery time),
/// both in [0, T+1]; T+1 means "not within the window".
struct Trajectory {
  int t_inf = 0;
  int t_rec = 0;

  State state_at(int t) const {
    if (t < t_inf) return State::S;
    if (t < t_rec) return State::I;
    return State::R;
  }
  bool valid(int horizon) const {
    int never = horizon + 1;
    if (t_inf < 0 || t_inf > never || t_rec < 0 || t_rec > never) return false;
    if (t_inf == never) return t_rec == never;
    return t_rec > t_inf;
  }
  static Trajectory susceptible(int horizon) { return {horizon + 1, horizon + 1}; }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Cascade {
  int horizon = 0;
  std::vector<Trajectory> traj;
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(traj.size()); }
  State state(int i, int t) const { return traj[i].state_at(t); }
  friend bool operator==(const Cascade& a, const Cascade& b) {
    return a.horizon == b.horizon && a.traj == b.traj;
  }
};

/// Decodes a monotone S -> I -> R state matrix (rows: individuals, columns:
/// t = 0..T). Non-monotone rows are rejected.
inline Cascade cascade_from_states(const std::vector<std::vector<State>>& states) {
  Cascade c;
  c.horizon = states.empty() ? 0 : static_cast<int>(states[0].size()) - 1;
  for (const auto& row : states) {
    if (static_cast<int>(row.size()) != c.horizon + 1) throw Error("ragged state matrix");
    Trajectory tr = Trajectory::susceptible(c.horizon);
    for (int t = 0; t <= c.horizon; ++t) {
      if (t > 0 && static_cast<int>(row[t]) < static_cast<int>(row[t - 1]))
        throw Error("non-monotone trajectory (state went backwards)");
      if (row[t] != State::S && tr.t_inf == c.horizon + 1) tr.t_inf = t;
      if (row[t] == State::R && tr.t_rec == c.horizon + 1) tr.t_rec = t;
    }
    if (tr.t_rec == tr.t_inf && tr.t_inf <= c.horizon)
      throw Error("trajectory recovers without being infected");
    c.traj.push_back(tr);
  }
  return c;
}

inline std::vector<std::vector<State>> cascade_to_states(const Cascade& c) {
  std::vector<std::vector<State>> out(c.size(), std::vector<State>(c.horizon + 1));
  for (int i = 0; i < c.size(); ++i)
    for (int t = 0; t <= c.horizon; ++t) out[i][t] = c.state(i, t);
  return out;
}

/// One-step SIR kernel for a single individual: probabilities of
/// {S, I, R} at t+1 given its state and the lambdas of infected contacts.
inline std::array<double, 3> step_distribution(State state, std::span<const double> infected_lambdas,
                                               double mu) {
  switch (state) {
    case State::S: {
      double survive = 1.0;
      for (double l : infected_lambdas) survive *= 1.0 - l;
      return {survive, 1.0 - survive, 0.0};
    }
    case State::I: return {0.0, 1.0 - mu, mu};
    case State::R: return {0.0, 0.0, 1.0};
  }
  return {0.0, 0.0, 0.0};
}

/// Per-timestep log factor of individual i's own dynamics: log p(x_i^0) at
/// t = 0 and log p(x_i^t | x_{di}^{t-1}, x_i^{t-1}) for t >= 1.
/// Calls f(t, logp, dlogp/d class value of i, dlogp/d mu).
template <class F>
void visit_transitions(const TemporalContactGraph& g, const EpidemicParams& p, const Cascade& x, int i,
                       F&& f) {
  const Trajectory& tr = x.traj[i];
  const int horizon = x.horizon;
  f(0, tr.t_inf == 0 ? std::log(p.p0) : std::log1p(-p.p0), 0.0, 0.0);
  const double log_stay = std::log1p(-p.mu);
  const double log_recover = std::log(p.mu);
  const int s_end = std::min(tr.t_inf, horizon + 1);
  for (int t = 1; t < s_end + (tr.t_inf <= horizon ? 1 : 0); ++t) {
    // S at t-1; either stays S or becomes I at t.
    double ls = 0.0;
    double dls = 0.0;
    for (const Neighbor& nb : g.incoming(t - 1, i)) {
      const Trajectory& tj = x.traj[nb.j];
      if (tj.t_inf <= t - 1 && t - 1 < tj.t_rec) {
        auto [v, dv] = p.log_survival(nb, i);
        ls += v;
        dls += dv;
      }
    }
    if (t < tr.t_inf) {
      f(t, ls, dls, 0.0);
    } else {
      // log(1 - e^ls); derivative -e^ls / (1 - e^ls) * dls.
      double em1 = std::expm1(-ls);
      f(t, std::log(-std::expm1(ls)), (ls == 0.0 || !std::isfinite(ls)) ? 0.0 : -dls / em1, 0.0);
    }
  }
  const int i_end = std::min(tr.t_rec, horizon + 1);
  for (int t = tr.t_inf + 1; t < i_end; ++t) f(t, log_stay, 0.0, -1.0 / (1.0 - p.mu));
  if (tr.t_rec <= horizon) f(tr.t_rec, log_recover, 0.0, 1.0 / p.mu);
  // R -> R factors are exactly 1 and are not reported.
}

/// Log-probability of a cascade under the SIR prior; kImpossible when some
/// transition has probability zero.
inline double log_prior(const Cascade& x, const TemporalContactGraph& g, const EpidemicParams& p) {
  double total = 0.0;
  bool impossible = false;
  for (int i = 0; i < x.size(); ++i)
    visit_transitions(g, p, x, i, [&](int, double logp, double, double) {
      if (is_impossible(logp)) impossible = true;
      total += logp;
    });
  return impossible ? kImpossible : total;
}

/// Reusable forward simulator; synchronous updates at each timestep.
class Simulator {
 public:
  Simulator(const TemporalContactGraph& g, const EpidemicParams& p) : g_(g), p_(p) {}

  /// Cascade seeded by the given sources at t = 0.
  const Cascade& run(std::span<const int> sources, Rng& rng) {
    reset();
    for (int s : sources) {
      if (s < 0 || s >= g_.size()) throw Error("source id out of range");
      infect(s, 0);
    }
    return propagate(rng);
  }

  /// Cascade with each individual independently infected at t = 0 with
  /// probability p0.
  const Cascade& run_prior(Rng& rng) {
    reset();
    for (int i = 0; i < g_.size(); ++i)
      if (uniform01(rng) < p_.p0) infect(i, 0);
    return propagate(rng);
  }

 private:
  void reset() {
    int n = g_.size();
    horizon_ = g_.horizon();
    cascade_.horizon = horizon_;
    cascade_.traj.assign(n, Trajectory::susceptible(horizon_));
    state_.assign(n, State::S);
    next_.assign(n, State::S);
  }
  void infect(int i, int t) {
    state_[i] = State::I;
    cascade_.traj[i].t_inf = t;
  }
  const Cascade& propagate(Rng& rng) {
    int n = g_.size();
    for (int t = 0; t < horizon_; ++t) {
      for (int i = 0; i < n; ++i) {
        next_[i] = state_[i];
        if (state_[i] == State::S) {
          double ls = 0.0;
          for (const Neighbor& nb : g_.incoming(t, i))
            if (state_[nb.j] == State::I) ls += std::log1p(-p_.transmission(nb, i));
          if (ls < 0.0 && uniform01(rng) < -std::expm1(ls)) {
            next_[i] = State::I;
            cascade_.traj[i].t_inf = t + 1;
          }
        } else if (state_[i] == State::I && p_.mu > 0.0) {
          if (uniform01(rng) < p_.mu) {
            next_[i] = State::R;
            cascade_.traj[i].t_rec = t + 1;
          }
        }
      }
      std::swap(state_, next_);
    }
    return cascade_;
  }

  const TemporalContactGraph& g_;
  EpidemicParams p_;
  int horizon_ = 0;
  Cascade cascade_;
  std::vector<State> state_, next_;
};

inline Cascade simulate(const TemporalContactGraph& g, const EpidemicParams& p, std::span<const int> sources,
                        std::uint64_t seed) {
  Rng rng(seed);
  Simulator sim(g, p);
  Cascade c = sim.run(sources, rng);
  c.seed = seed;
  return c;
}

inline Cascade simulate_from_prior(const TemporalContactGraph& g, const EpidemicParams& p, std::uint64_t seed) {
  Rng rng(seed);
  Simulator sim(g, p);
  Cascade c = sim.run_prior(rng);
  c.seed = seed;
  return c;
}

enum class HammingMode {
  /// Compare the ever-infected indicator (state I or R).
  Infected,
  /// Compare the full three-valued state.
  FullState
};

inline int hamming_distance(const Cascade& a, const Cascade& b, int t, HammingMode mode = HammingMode::Infected) {
  if (a.size() != b.size()) throw Error("cascades differ in population size");
  int d = 0;
  for (int i = 0; i < a.size(); ++i) {
    State sa = a.state(i, t);
    State sb = b.state(i, t);
    if (mode == HammingMode::Infected) {
      d += (sa != State::S) != (sb != State::S);
    } else {
      d += sa != sb;
    }
  }
  return d;
}

inline int count_ever_infected(const Cascade& c, int t) {
  int k = 0;
  for (const auto& tr : c.traj) k += tr.t_inf <= t;
  return k;
}

/// Per-individual, per-time probabilities of {S, I, R}.
struct Marginals {
  int n = 0;
  int horizon = 0;
  std::vector<std::array<double, 3>> p;

  Marginals() = default;
  Marginals(int n_, int horizon_) : n(n_), horizon(horizon_), p(static_cast<std::size_t>(n_) * (horizon_ + 1)) {
    for (auto& a : p) a = {0.0, 0.0, 0.0};
  }
  std::array<double, 3>& at(int i, int t) { return p[static_cast<std::size_t>(i) * (horizon + 1) + t]; }
  const std::array<double, 3>& at(int i, int t) const { return p[static_cast<std::size_t>(i) * (horizon + 1) + t]; }
  double prob(int i, int t, State s) const { return at(i, t)[static_cast<int>(s)]; }

  /// Adds `weight` to the states visited by trajectory `tr` of individual i.
  void add(int i, const Trajectory& tr, double weight) {
    for (int t = 0; t <= horizon; ++t) at(i, t)[static_cast<int>(tr.state_at(t))] += weight;
  }
  void scale(double f) {
    for (auto& a : p)
      for (double& x : a) x *= f;
  }
};

inline void write_marginals_csv(std::ostream& out, const Marginals& m) {
  out << "i,t,p_S,p_I,p_R\n";
  for (int i = 0; i < m.n; ++i)
    for (int t = 0; t <= m.horizon; ++t) {
      const auto& a = m.at(i, t);
      out << i << ',' << t << ',' << a[0] << ',' << a[1] << ',' << a[2] << '\n';
    }
}

/// Sum over individuals of |P_a(x_i^0 = I) - P_b(x_i^0 = I)|.
inline double source_marginal_l1(const Marginals& a, const Marginals& b) {
  double d = 0.0;
  for (int i = 0; i < a.n; ++i) d += std::abs(a.prob(i, 0, State::I) - b.prob(i, 0, State::I));
  return d;
}

inline void write_cascade_csv(std::ostream& out, const Cascade& c) {
  out << "i,t_inf,t_rec\n";
  for (int i = 0; i < c.size(); ++i) out << i << ',' << c.traj[i].t_inf << ',' << c.traj[i].t_rec << '\n';
}

inline Cascade read_cascade_csv(std::istream& in, int horizon) {
  Cascade c;
  c.horizon = horizon;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv(line);
    if (lineno == 1 && detail::looks_like_header(cells)) continue;
    int i = 0;
    Trajectory tr;
    if (cells.size() != 3 || !detail::parse_number(cells[0], i) || !detail::parse_number(cells[1], tr.t_inf) ||
        !detail::parse_number(cells[2], tr.t_rec))
      throw ParseError("malformed cascade row", lineno);
    if (i != c.size()) throw ParseError("cascade rows must list individuals 0..n-1 in order", lineno);
    if (!tr.valid(horizon)) throw ParseError("invalid trajectory", lineno);
    c.traj.push_back(tr);
  }
  return c;
}

inline void write_state_matrix_csv(std::ostream& out, const Cascade& c) {
  out << "i,t,state\n";
  for (int i = 0; i < c.size(); ++i)
    for (int t = 0; t <= c.horizon; ++t) out << i << ',' << t << ',' << to_char(c.state(i, t)) << '\n';
}

}  // namespace epivar

#endif  // EPIVAR_EPIDEMIC_MODEL_HPP
