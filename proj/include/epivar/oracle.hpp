#ifndef EPIVAR_ORACLE_HPP
#define EPIVAR_ORACLE_HPP

#include <cmath>
#include <limits>
#include <vector>

#include "epivar/autoreg_model.hpp"
#include "epivar/common.hpp"
#include "epivar/epidemic_model.hpp"
#include "epivar/observation_model.hpp"

namespace epivar {

/// Brute-force posterior over the product of per-individual supports.
/// Cascade k is addressed in mixed radix over the individuals whose support
/// has more than one point, the lowest digit being the first such
/// individual.
struct ExactPosterior {
  int horizon = 0;
  std::vector<Support> supports;
  std::vector<int> free_nodes;
  std::vector<std::size_t> strides;
  /// Unnormalized log weights: exact (kImpossible for zero-probability
  /// cascades) and epsilon-clamped.
  std::vector<double> log_w;
  std::vector<double> log_w_reg;
  double log_z = kImpossible;
  double log_z_reg = kImpossible;
  Marginals marginals;
  /// P(source = k | exactly one individual infected at t = 0, O); all zero
  /// when no single-source cascade is possible.
  std::vector<double> single_source;

  std::size_t count() const { return log_w.size(); }
  int size() const { return static_cast<int>(supports.size()); }

  double probability(std::size_t k) const { return is_impossible(log_w[k]) ? 0.0 : std::exp(log_w[k] - log_z); }
  double log_probability(std::size_t k) const { return log_w[k] - log_z; }
  double log_probability_reg(std::size_t k) const { return log_w_reg[k] - log_z_reg; }

  /// Support index of individual i in cascade k.
  int support_index(std::size_t k, int i) const {
    for (std::size_t d = 0; d < free_nodes.size(); ++d)
      if (free_nodes[d] == i) return static_cast<int>((k / strides[d]) % supports[i].size());
    return 0;
  }

  Cascade cascade(std::size_t k) const {
    Cascade c;
    c.horizon = horizon;
    c.traj.resize(supports.size());
    for (std::size_t i = 0; i < supports.size(); ++i) c.traj[i] = supports[i][0];
    for (std::size_t d = 0; d < free_nodes.size(); ++d) {
      int i = free_nodes[d];
      c.traj[i] = supports[i][(k / strides[d]) % supports[i].size()];
    }
    return c;
  }
};

inline constexpr double kEnumerationGuard = 1e7;

/// Enumerates every cascade in the product of feasible supports and
/// evaluates its exact and regularized posterior weight. Throws
/// InstanceTooLarge above `guard` cascades and InfeasibleEvidence when all
/// exact weights vanish.
inline ExactPosterior enumerate_posterior(const PosteriorModel& post, bool allow_recovery = true,
                                          double guard = kEnumerationGuard) {
  ExactPosterior ex;
  const int n = post.size();
  ex.horizon = post.horizon();
  ex.supports = post.supports(allow_recovery);
  double total = 1.0;
  for (int i = 0; i < n; ++i) {
    total *= static_cast<double>(ex.supports[i].size());
    if (ex.supports[i].size() > 1) ex.free_nodes.push_back(i);
  }
  if (total > guard)
    throw InstanceTooLarge("enumeration of " + std::to_string(total) + " cascades exceeds the guard");
  std::size_t count = static_cast<std::size_t>(total);
  std::size_t stride = 1;
  for (int i : ex.free_nodes) {
    ex.strides.push_back(stride);
    stride *= ex.supports[i].size();
  }

  Cascade x;
  x.horizon = ex.horizon;
  x.traj.resize(n);
  for (int i = 0; i < n; ++i) x.traj[i] = ex.supports[i][0];
  const TemporalContactGraph& g = post.graph();
  std::vector<double> node_exact(n), node_reg(n);
  std::vector<char> node_bad(n, 0);
  auto refresh = [&](int i) {
    auto e = post.evaluate_node(x, i);
    node_reg[i] = e.regularized;
    node_bad[i] = is_impossible(e.exact);
    node_exact[i] = node_bad[i] ? 0.0 : e.exact;
  };
  for (int i = 0; i < n; ++i) refresh(i);

  ex.log_w.resize(count);
  ex.log_w_reg.resize(count);
  std::vector<int> idx(n, 0);
  std::vector<char> dirty(n, 0);
  std::vector<int> dirty_list;
  auto touch = [&](int i) {
    auto mark = [&](int v) {
      if (!dirty[v]) {
        dirty[v] = 1;
        dirty_list.push_back(v);
      }
    };
    mark(i);
    for (int v : g.neighbors(i)) mark(v);
  };
  for (std::size_t k = 0; k < count; ++k) {
    double se = 0.0, sr = 0.0;
    bool bad = false;
    for (int i = 0; i < n; ++i) {
      se += node_exact[i];
      sr += node_reg[i];
      bad = bad || node_bad[i];
    }
    ex.log_w[k] = bad ? kImpossible : se;
    ex.log_w_reg[k] = sr;
    if (k + 1 == count) break;
    for (std::size_t d = 0; d < ex.free_nodes.size(); ++d) {
      int i = ex.free_nodes[d];
      bool carry = ++idx[i] == static_cast<int>(ex.supports[i].size());
      if (carry) idx[i] = 0;
      x.traj[i] = ex.supports[i][idx[i]];
      touch(i);
      if (!carry) break;
    }
    for (int v : dirty_list) {
      refresh(v);
      dirty[v] = 0;
    }
    dirty_list.clear();
  }
  ex.log_z = log_sum_exp(ex.log_w);
  ex.log_z_reg = log_sum_exp(ex.log_w_reg);
  if (is_impossible(ex.log_z)) throw InfeasibleEvidence("no cascade has positive posterior probability");

  // Marginals via per-(individual, support index) masses.
  std::vector<std::vector<double>> mass(n);
  for (int i = 0; i < n; ++i) mass[i].assign(ex.supports[i].size(), 0.0);
  std::vector<double> source(n, 0.0);
  double source_total = 0.0;
  for (int i = 0; i < n; ++i)
    if (ex.supports[i].size() == 1) mass[i][0] = 1.0;
  int fixed_sources = 0, fixed_who = -1;
  for (int i = 0; i < n; ++i)
    if (ex.supports[i].size() == 1 && ex.supports[i][0].t_inf == 0) {
      ++fixed_sources;
      fixed_who = i;
    }
  for (std::size_t k = 0; k < count; ++k) {
    double p = ex.probability(k);
    if (p == 0.0) continue;
    int zeros = fixed_sources, who = fixed_who;
    for (std::size_t d = 0; d < ex.free_nodes.size(); ++d) {
      int i = ex.free_nodes[d];
      std::size_t s = (k / ex.strides[d]) % ex.supports[i].size();
      mass[i][s] += p;
      if (ex.supports[i][s].t_inf == 0) {
        ++zeros;
        who = i;
      }
    }
    if (zeros == 1) {
      source[who] += p;
      source_total += p;
    }
  }
  ex.marginals = Marginals(n, ex.horizon);
  for (int i = 0; i < n; ++i)
    for (std::size_t s = 0; s < mass[i].size(); ++s) ex.marginals.add(i, ex.supports[i][s], mass[i][s]);
  if (source_total > 0.0)
    for (double& v : source) v /= source_total;
  ex.single_source = std::move(source);
  return ex;
}

enum class KlReference { Regularized, Exact };

struct KlResult {
  double value = 0.0;
  /// q puts mass on a cascade whose reference probability is zero.
  bool infinite = false;
  /// Total q mass over the enumeration; 1 up to rounding.
  double q_mass = 0.0;
};

namespace detail {

/// Calls f(first_index, batch, log_q) over the enumeration in chunks.
template <class F>
void for_each_enumerated_chunk(const AutoregressiveModel& model, const ExactPosterior& ex, F&& f,
                               std::size_t chunk = 4096) {
  std::vector<Cascade> cs;
  for (std::size_t k0 = 0; k0 < ex.count(); k0 += chunk) {
    std::size_t k1 = std::min(ex.count(), k0 + chunk);
    cs.clear();
    for (std::size_t k = k0; k < k1; ++k) cs.push_back(ex.cascade(k));
    std::vector<char> outside;
    SampleBatch b = model.encode(cs, &outside);
    for (char o : outside)
      if (o) throw Error("model support differs from the enumerated support");
    model.log_density(b);
    f(k0, b);
  }
}

}  // namespace detail

/// KL(q || p) over the enumeration. With the Regularized reference p is the
/// normalized epsilon-clamped posterior, which is positive everywhere.
inline KlResult exact_kl(const AutoregressiveModel& model, const ExactPosterior& ex,
                         KlReference ref = KlReference::Regularized) {
  KlResult r;
  double acc = 0.0;
  detail::for_each_enumerated_chunk(model, ex, [&](std::size_t k0, const SampleBatch& b) {
    for (int s = 0; s < b.size; ++s) {
      double lq = b.log_q[s];
      double q = std::exp(lq);
      if (q == 0.0) continue;
      r.q_mass += q;
      double lp = ref == KlReference::Regularized ? ex.log_probability_reg(k0 + s) : ex.log_probability(k0 + s);
      if (is_impossible(lp)) {
        r.infinite = true;
        continue;
      }
      acc += q * (lq - lp);
    }
  });
  r.value = r.infinite ? std::numeric_limits<double>::infinity() : std::max(acc, 0.0);
  return r;
}

/// Sum over the enumeration of q(x) [log q(x) - log p(x)] grad log q(x),
/// flattened in AutoregressiveModel::parameter_vector() order. The
/// reference is the regularized posterior unless `ref` says otherwise, in
/// which case mass on zero-probability cascades throws.
inline std::vector<double> exact_kl_gradient(const AutoregressiveModel& model, const ExactPosterior& ex,
                                             KlReference ref = KlReference::Regularized) {
  ModelGradient grad = model.zero_gradient();
  std::vector<Cascade> cs;
  std::vector<double> w;
  const std::size_t chunk = 4096;
  for (std::size_t k0 = 0; k0 < ex.count(); k0 += chunk) {
    std::size_t k1 = std::min(ex.count(), k0 + chunk);
    cs.clear();
    for (std::size_t k = k0; k < k1; ++k) cs.push_back(ex.cascade(k));
    SampleBatch b = model.encode(cs);
    model.log_density(b);
    w.assign(b.size, 0.0);
    for (int s = 0; s < b.size; ++s) {
      double lq = b.log_q[s];
      double q = std::exp(lq);
      if (q == 0.0) continue;
      double lp = ref == KlReference::Regularized ? ex.log_probability_reg(k0 + s) : ex.log_probability(k0 + s);
      if (is_impossible(lp)) throw Error("KL divergence is infinite; gradient undefined");
      w[s] = q * (lq - lp);
    }
    model.accumulate_gradient(b, w, grad);
  }
  return model.flatten(grad);
}

}  // namespace epivar

#endif  // EPIVAR_ORACLE_HPP
