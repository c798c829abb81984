#ifndef EPIVAR_AUTOREG_MODEL_HPP
#define EPIVAR_AUTOREG_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "epivar/common.hpp"
#include "epivar/contact_graph.hpp"
#include "epivar/epidemic_model.hpp"
#include "epivar/neural_kernel.hpp"
#include "epivar/observation_model.hpp"

namespace epivar {

enum class OrderingMethod { Random, SpanningTree };

/// Permutation of individuals: order[k] is the k-th sampled individual,
/// position[i] its rank.
struct Ordering {
  std::vector<int> order;
  std::vector<int> position;

  static Ordering from_order(std::vector<int> order) {
    Ordering o;
    o.position.assign(order.size(), -1);
    for (std::size_t k = 0; k < order.size(); ++k) {
      int i = order[k];
      if (i < 0 || i >= static_cast<int>(order.size()) || o.position[i] >= 0) throw Error("ordering is not a permutation");
      o.position[i] = static_cast<int>(k);
    }
    o.order = std::move(order);
    return o;
  }
  static Ordering identity(int n) {
    std::vector<int> v(n);
    std::iota(v.begin(), v.end(), 0);
    return from_order(std::move(v));
  }
};

/// Random: uniform permutation. SpanningTree: BFS from `root` (random when
/// negative) over the union graph, neighbors in ascending id; further
/// components are appended starting from their smallest id.
inline Ordering build_ordering(const TemporalContactGraph& g, OrderingMethod method, std::uint64_t seed,
                               int root = -1) {
  Rng rng(seed);
  int n = g.size();
  if (method == OrderingMethod::Random) {
    std::vector<int> v(n);
    std::iota(v.begin(), v.end(), 0);
    shuffle(v, rng);
    return Ordering::from_order(std::move(v));
  }
  if (n == 0) return Ordering::identity(0);
  if (root < 0) root = static_cast<int>(uniform_index(rng, n));
  if (root >= n) throw Error("spanning-tree root out of range");
  std::vector<int> order;
  std::vector<char> seen(n, 0);
  auto bfs = [&](int r) {
    std::queue<int> q;
    q.push(r);
    seen[r] = 1;
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      order.push_back(u);
      for (int v : g.neighbors(u))
        if (!seen[v]) {
          seen[v] = 1;
          q.push(v);
        }
    }
  };
  bfs(root);
  for (int i = 0; i < n; ++i)
    if (!seen[i]) bfs(i);
  return Ordering::from_order(std::move(order));
}

enum class DependencyPolicy { MeanField, NearestNeighbors, NextNearestNeighbors, FullGraph };

inline std::string to_string(DependencyPolicy p) {
  switch (p) {
    case DependencyPolicy::MeanField: return "mean-field";
    case DependencyPolicy::NearestNeighbors: return "nearest";
    case DependencyPolicy::NextNearestNeighbors: return "next-nearest";
    case DependencyPolicy::FullGraph: return "full";
  }
  return "?";
}

inline DependencyPolicy parse_policy(const std::string& s) {
  if (s == "mean-field" || s == "mf") return DependencyPolicy::MeanField;
  if (s == "nearest" || s == "nn") return DependencyPolicy::NearestNeighbors;
  if (s == "next-nearest" || s == "nnn") return DependencyPolicy::NextNearestNeighbors;
  if (s == "full" || s == "full-graph") return DependencyPolicy::FullGraph;
  throw Error("unknown dependency policy '" + s + "'");
}

/// Predecessors of i under the ordering allowed by the policy, ascending
/// by position.
inline std::vector<int> policy_dependencies(const TemporalContactGraph& g, const Ordering& ord,
                                            DependencyPolicy policy, int i) {
  std::vector<int> cand;
  switch (policy) {
    case DependencyPolicy::MeanField: break;
    case DependencyPolicy::NearestNeighbors: cand = g.neighbors(i); break;
    case DependencyPolicy::NextNearestNeighbors: cand = second_neighbors(g, i); break;
    case DependencyPolicy::FullGraph:
      cand.resize(g.size());
      std::iota(cand.begin(), cand.end(), 0);
      break;
  }
  std::vector<int> out;
  for (int j : cand)
    if (ord.position[j] < ord.position[i]) out.push_back(j);
  std::sort(out.begin(), out.end(), [&](int a, int b) { return ord.position[a] < ord.position[b]; });
  return out;
}

/// Index structure over one individual's feasible (t_inf, t_rec) pairs.
struct NodeSpace {
  Support pairs;
  std::vector<int> inf_values;
  std::vector<int> rec_values;
  /// Allowed recovery indices for each infection index.
  std::vector<std::vector<int>> rec_options;
  /// log |rec_options[k]|, added to the infection logits so that zero
  /// weights give the uniform distribution over all pairs.
  Eigen::VectorXd inf_offset;

  explicit NodeSpace(Support s = {}) : pairs(std::move(s)) {
    for (const auto& tr : pairs) {
      inf_values.push_back(tr.t_inf);
      rec_values.push_back(tr.t_rec);
    }
    auto uniq = [](std::vector<int>& v) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    uniq(inf_values);
    uniq(rec_values);
    rec_options.assign(inf_values.size(), {});
    for (const auto& tr : pairs) rec_options[inf_index(tr.t_inf)].push_back(rec_index(tr.t_rec));
    inf_offset.resize(static_cast<Eigen::Index>(inf_values.size()));
    for (std::size_t k = 0; k < rec_options.size(); ++k)
      inf_offset(static_cast<Eigen::Index>(k)) = std::log(static_cast<double>(rec_options[k].size()));
  }

  int inf_index(int t_inf) const {
    auto it = std::lower_bound(inf_values.begin(), inf_values.end(), t_inf);
    return (it != inf_values.end() && *it == t_inf) ? static_cast<int>(it - inf_values.begin()) : -1;
  }
  int rec_index(int t_rec) const {
    auto it = std::lower_bound(rec_values.begin(), rec_values.end(), t_rec);
    return (it != rec_values.end() && *it == t_rec) ? static_cast<int>(it - rec_values.begin()) : -1;
  }
  bool fixed() const { return pairs.size() == 1; }
  bool has_inf_net() const { return inf_values.size() > 1; }
  bool has_rec_net() const {
    for (const auto& o : rec_options)
      if (o.size() > 1) return true;
    return false;
  }
  int inf_code_width() const { return inf_values.size() > 1 ? static_cast<int>(inf_values.size()) : 0; }
  int rec_code_width() const { return rec_values.size() > 1 ? static_cast<int>(rec_values.size()) : 0; }
  /// Width of this individual's one-hot code as seen by successors.
  int code_width() const { return inf_code_width() + rec_code_width(); }
};

/// A batch of cascades in the model's index space, node-major: [i][s].
struct SampleBatch {
  int horizon = 0;
  int size = 0;
  std::vector<std::vector<int>> inf_idx, rec_idx;
  std::vector<std::vector<int>> t_inf, t_rec;
  std::vector<double> log_q;

  int n() const { return static_cast<int>(t_inf.size()); }
  Trajectory trajectory(int i, int s) const { return {t_inf[i][s], t_rec[i][s]}; }
  Cascade cascade(int s) const {
    Cascade c;
    c.horizon = horizon;
    c.traj.resize(n());
    for (int i = 0; i < n(); ++i) c.traj[i] = trajectory(i, s);
    return c;
  }
};

/// Empirical per-(i, t) state frequencies of a batch.
inline Marginals marginals(const SampleBatch& b) {
  if (b.size == 0) throw Error("marginals of an empty batch");
  Marginals m(b.n(), b.horizon);
  std::vector<std::pair<Trajectory, int>> hist;
  for (int i = 0; i < b.n(); ++i) {
    hist.clear();
    for (int s = 0; s < b.size; ++s) {
      Trajectory tr = b.trajectory(i, s);
      auto it = std::find_if(hist.begin(), hist.end(), [&](const auto& h) { return h.first == tr; });
      if (it == hist.end()) {
        hist.emplace_back(tr, 1);
      } else {
        it->second++;
      }
    }
    for (const auto& [tr, count] : hist) m.add(i, tr, count);
  }
  m.scale(1.0 / b.size);
  return m;
}

/// Parameter gradient buffers of an AutoregressiveModel, one pair per
/// individual (empty when the corresponding net does not exist).
struct ModelGradient {
  std::vector<NetGradient> inf;
  std::vector<NetGradient> rec;
};

struct ModelOptimizer {
  std::vector<AdamState> inf;
  std::vector<AdamState> rec;
};

/// Variational distribution q over cascades: individuals are drawn in
/// ordering position, each first its infection time from one net and then
/// its recovery time from a second net, conditioned on one-hot codes of
/// earlier individuals selected by the dependency policy.
class AutoregressiveModel {
 public:
  AutoregressiveModel(const TemporalContactGraph& g, std::vector<Support> supports, Ordering ordering,
                      DependencyPolicy policy, Rng& init_rng)
      : ordering_(std::move(ordering)), policy_(policy) {
    if (static_cast<int>(supports.size()) != g.size()) throw Error("one support per individual required");
    if (static_cast<int>(ordering_.order.size()) != g.size()) throw Error("ordering size mismatch");
    horizon_ = g.horizon();
    for (auto& s : supports) spaces_.emplace_back(std::move(s));
    deps_.resize(g.size());
    for (int i = 0; i < g.size(); ++i) deps_[i] = policy_dependencies(g, ordering_, policy_, i);
    build_nets(&init_rng);
  }

  int size() const { return static_cast<int>(spaces_.size()); }
  int horizon() const { return horizon_; }
  const Ordering& ordering() const { return ordering_; }
  DependencyPolicy policy() const { return policy_; }
  const NodeSpace& space(int i) const { return spaces_[i]; }

  /// Policy-selected predecessors of i (ascending position).
  const std::vector<int>& dependency_set(int i) const { return deps_[i]; }
  /// Predecessors that actually feed i's nets: single-point individuals are
  /// dropped.
  const std::vector<int>& input_dependencies(int i) const { return input_deps_[i]; }

  const std::optional<DenseNet>& inf_net(int i) const { return inf_nets_[i]; }
  const std::optional<DenseNet>& rec_net(int i) const { return rec_nets_[i]; }
  std::optional<DenseNet>& inf_net(int i) { return inf_nets_[i]; }
  std::optional<DenseNet>& rec_net(int i) { return rec_nets_[i]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) n += inf_nets_[i]->parameter_count();
      if (rec_nets_[i]) n += rec_nets_[i]->parameter_count();
    }
    return n;
  }

  void set_zero() {
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) inf_nets_[i]->set_zero();
      if (rec_nets_[i]) rec_nets_[i]->set_zero();
    }
  }

  /// Ancestral sampling; log_q holds the exact log-density of each draw.
  SampleBatch sample(int batch, Rng& rng) const {
    SampleBatch b = empty_batch(batch);
    for (int i : ordering_.order) {
      const NodeSpace& sp = spaces_[i];
      // infection time
      if (inf_nets_[i]) {
        Eigen::MatrixXd logits = eval_logits(i, false, b);
        for (int s = 0; s < batch; ++s) {
          auto [k, lp] = draw(logits.col(s), nullptr, rng);
          b.inf_idx[i][s] = k;
          b.log_q[s] += lp;
        }
      }
      // recovery time
      if (rec_nets_[i]) {
        Eigen::MatrixXd logits = eval_logits(i, true, b);
        for (int s = 0; s < batch; ++s) {
          auto [k, lp] = draw(logits.col(s), &sp.rec_options[b.inf_idx[i][s]], rng);
          b.rec_idx[i][s] = k;
          b.log_q[s] += lp;
        }
      } else {
        for (int s = 0; s < batch; ++s) b.rec_idx[i][s] = sp.rec_options[b.inf_idx[i][s]][0];
      }
      for (int s = 0; s < batch; ++s) {
        b.t_inf[i][s] = sp.inf_values[b.inf_idx[i][s]];
        b.t_rec[i][s] = sp.rec_values[b.rec_idx[i][s]];
      }
    }
    return b;
  }

  /// Encodes cascades into index space. Cascades outside some individual's
  /// support are flagged in `outside` and encoded with index 0 there.
  SampleBatch encode(std::span<const Cascade> cascades, std::vector<char>* outside = nullptr) const {
    SampleBatch b = empty_batch(static_cast<int>(cascades.size()));
    if (outside) outside->assign(cascades.size(), 0);
    for (int s = 0; s < b.size; ++s) {
      const Cascade& c = cascades[s];
      if (c.size() != size()) throw Error("cascade size does not match model");
      for (int i = 0; i < size(); ++i) {
        const NodeSpace& sp = spaces_[i];
        int ki = sp.inf_index(c.traj[i].t_inf);
        int kr = sp.rec_index(c.traj[i].t_rec);
        bool ok = ki >= 0 && kr >= 0 &&
                  std::find(sp.rec_options[ki].begin(), sp.rec_options[ki].end(), kr) != sp.rec_options[ki].end();
        if (!ok) {
          if (outside) (*outside)[s] = 1;
          ki = 0;
          kr = sp.rec_options[0][0];
        }
        b.inf_idx[i][s] = ki;
        b.rec_idx[i][s] = kr;
        b.t_inf[i][s] = sp.inf_values[ki];
        b.t_rec[i][s] = sp.rec_values[kr];
      }
    }
    return b;
  }

  /// log q of every batch entry; also stored into b.log_q.
  std::vector<double> log_density(SampleBatch& b) const {
    std::fill(b.log_q.begin(), b.log_q.end(), 0.0);
    for (int i : ordering_.order) {
      if (inf_nets_[i]) accumulate_node(i, false, b, {}, nullptr);
      if (rec_nets_[i]) accumulate_node(i, true, b, {}, nullptr);
    }
    return b.log_q;
  }

  /// log q(x); kImpossible when x is outside the support.
  double log_density(const Cascade& x) const {
    std::vector<char> outside;
    SampleBatch b = encode(std::span<const Cascade>(&x, 1), &outside);
    if (outside[0]) return kImpossible;
    return log_density(b)[0];
  }

  ModelGradient zero_gradient() const {
    ModelGradient g;
    g.inf.resize(size());
    g.rec.resize(size());
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) g.inf[i] = epivar::zero_gradient(*inf_nets_[i]);
      if (rec_nets_[i]) g.rec[i] = epivar::zero_gradient(*rec_nets_[i]);
    }
    return g;
  }

  /// Adds sum_s weights[s] * grad log q(x_s) into `grad`; refreshes b.log_q.
  void accumulate_gradient(SampleBatch& b, std::span<const double> weights, ModelGradient& grad) const {
    if (static_cast<int>(weights.size()) != b.size) throw Error("one weight per sample required");
    std::fill(b.log_q.begin(), b.log_q.end(), 0.0);
    for (int i : ordering_.order) {
      if (inf_nets_[i]) accumulate_node(i, false, b, weights, &grad.inf[i]);
      if (rec_nets_[i]) accumulate_node(i, true, b, weights, &grad.rec[i]);
    }
  }

  ModelOptimizer make_optimizer(AdamConfig cfg) const {
    ModelOptimizer opt;
    opt.inf.resize(size());
    opt.rec.resize(size());
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) opt.inf[i] = make_adam(*inf_nets_[i], cfg);
      if (rec_nets_[i]) opt.rec[i] = make_adam(*rec_nets_[i], cfg);
    }
    return opt;
  }

  /// One Adam descent step on every net. All gradients are checked before
  /// any parameter moves.
  void apply(const ModelGradient& grad, ModelOptimizer& opt) {
    for (int i = 0; i < size(); ++i) {
      if ((inf_nets_[i] && !all_finite(grad.inf[i])) || (rec_nets_[i] && !all_finite(grad.rec[i])))
        throw NonFiniteGradient("non-finite gradient for individual " + std::to_string(i));
    }
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) adam_step(*inf_nets_[i], grad.inf[i], opt.inf[i]);
      if (rec_nets_[i]) adam_step(*rec_nets_[i], grad.rec[i], opt.rec[i]);
    }
  }

  /// Flattened parameters, individual by individual (infection net first),
  /// layer by layer (W column-major, then b).
  std::vector<double> parameter_vector() const {
    std::vector<double> v;
    for_each_block([&](const double* p, std::size_t n) { v.insert(v.end(), p, p + n); });
    return v;
  }

  void set_parameter_vector(std::span<const double> v) {
    std::size_t off = 0;
    for_each_block_mut([&](double* p, std::size_t n) {
      if (off + n > v.size()) throw Error("parameter vector too short");
      std::copy(v.begin() + off, v.begin() + off + n, p);
      off += n;
    });
    if (off != v.size()) throw Error("parameter vector length mismatch");
  }

  /// Flattens a gradient in parameter_vector() order.
  std::vector<double> flatten(const ModelGradient& g) const {
    std::vector<double> v;
    auto put = [&](const NetGradient& ng) {
      for (const Layer& l : ng) {
        v.insert(v.end(), l.W.data(), l.W.data() + l.W.size());
        v.insert(v.end(), l.b.data(), l.b.data() + l.b.size());
      }
    };
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) put(g.inf[i]);
      if (rec_nets_[i]) put(g.rec[i]);
    }
    return v;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "epivar-autoreg";
    j["version"] = 1;
    j["horizon"] = horizon_;
    j["ordering"] = ordering_.order;
    j["policy"] = to_string(policy_);
    nlohmann::json sup = nlohmann::json::array();
    for (const auto& sp : spaces_) {
      nlohmann::json pairs = nlohmann::json::array();
      for (const auto& tr : sp.pairs) pairs.push_back({tr.t_inf, tr.t_rec});
      sup.push_back(std::move(pairs));
    }
    j["supports"] = std::move(sup);
    j["dependencies"] = deps_;
    nlohmann::json nets = nlohmann::json::array();
    for (int i = 0; i < size(); ++i) {
      nlohmann::json e;
      e["inf"] = inf_nets_[i] ? net_to_json(*inf_nets_[i]) : nlohmann::json();
      e["rec"] = rec_nets_[i] ? net_to_json(*rec_nets_[i]) : nlohmann::json();
      nets.push_back(std::move(e));
    }
    j["nets"] = std::move(nets);
    return j;
  }

  static AutoregressiveModel from_json(const nlohmann::json& j) {
    if (j.at("format") != "epivar-autoreg" || j.at("version") != 1) throw Error("unsupported model checkpoint");
    AutoregressiveModel m;
    m.horizon_ = j.at("horizon").get<int>();
    m.ordering_ = Ordering::from_order(j.at("ordering").get<std::vector<int>>());
    m.policy_ = parse_policy(j.at("policy").get<std::string>());
    for (const auto& pairs : j.at("supports")) {
      Support s;
      for (const auto& p : pairs) s.push_back(Trajectory{p[0].get<int>(), p[1].get<int>()});
      m.spaces_.emplace_back(std::move(s));
    }
    m.deps_ = j.at("dependencies").get<std::vector<std::vector<int>>>();
    m.build_nets(nullptr);
    const auto& nets = j.at("nets");
    for (int i = 0; i < m.size(); ++i) {
      if (m.inf_nets_[i]) m.inf_nets_[i] = net_from_json(nets[i].at("inf"));
      if (m.rec_nets_[i]) m.rec_nets_[i] = net_from_json(nets[i].at("rec"));
    }
    return m;
  }

 private:
  AutoregressiveModel() = default;

  void build_nets(Rng* init_rng) {
    int n = size();
    input_deps_.assign(n, {});
    inf_nets_.assign(n, std::nullopt);
    rec_nets_.assign(n, std::nullopt);
    for (int i : ordering_.order) {
      int width = 0;
      for (int j : deps_[i])
        if (spaces_[j].code_width() > 0) {
          input_deps_[i].push_back(j);
          width += spaces_[j].code_width();
        }
      const NodeSpace& sp = spaces_[i];
      auto make = [&](int in, int out) {
        DenseNet net(tapered_widths(in, out));
        if (init_rng) net.init_he_uniform(*init_rng);
        return net;
      };
      if (sp.has_inf_net()) inf_nets_[i] = make(width, static_cast<int>(sp.inf_values.size()));
      if (sp.has_rec_net()) rec_nets_[i] = make(width + sp.inf_code_width(), static_cast<int>(sp.rec_values.size()));
    }
  }

  SampleBatch empty_batch(int batch) const {
    SampleBatch b;
    b.horizon = horizon_;
    b.size = batch;
    b.inf_idx.assign(size(), std::vector<int>(batch, 0));
    b.rec_idx.assign(size(), std::vector<int>(batch, 0));
    b.t_inf.assign(size(), std::vector<int>(batch, 0));
    b.t_rec.assign(size(), std::vector<int>(batch, 0));
    b.log_q.assign(batch, 0.0);
    return b;
  }

  Eigen::MatrixXd build_input(int i, bool recovery, const SampleBatch& b) const {
    const DenseNet& net = recovery ? *rec_nets_[i] : *inf_nets_[i];
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(net.input_width(), b.size);
    int off = 0;
    for (int j : input_deps_[i]) {
      const NodeSpace& sj = spaces_[j];
      int wi = sj.inf_code_width();
      int wr = sj.rec_code_width();
      for (int s = 0; s < b.size; ++s) {
        if (wi) x(off + b.inf_idx[j][s], s) = 1.0;
        if (wr) x(off + wi + b.rec_idx[j][s], s) = 1.0;
      }
      off += wi + wr;
    }
    if (recovery && spaces_[i].inf_code_width() > 0) {
      for (int s = 0; s < b.size; ++s) x(off + b.inf_idx[i][s], s) = 1.0;
    }
    return x;
  }

  Eigen::MatrixXd eval_logits(int i, bool recovery, const SampleBatch& b) const {
    DenseNet::Cache cache;
    const DenseNet& net = recovery ? *rec_nets_[i] : *inf_nets_[i];
    Eigen::MatrixXd logits = net.forward_logits(build_input(i, recovery, b), cache);
    if (!recovery) logits.colwise() += spaces_[i].inf_offset;
    return logits;
  }

  /// Categorical draw from softmax(logits) restricted to `allowed` (all
  /// entries when null). Returns (index, log probability).
  static std::pair<int, double> draw(const Eigen::VectorXd& logits, const std::vector<int>* allowed, Rng& rng) {
    double u = uniform01(rng);
    if (!allowed) {
      double m = logits.maxCoeff();
      double z = (logits.array() - m).exp().sum();
      double target = u * z;
      double acc = 0.0;
      int k = 0;
      for (; k < logits.size() - 1; ++k) {
        acc += std::exp(logits(k) - m);
        if (target < acc) break;
      }
      return {k, logits(k) - m - std::log(z)};
    }
    double m = kImpossible;
    for (int k : *allowed) m = std::max(m, logits(k));
    double z = 0.0;
    for (int k : *allowed) z += std::exp(logits(k) - m);
    double target = u * z;
    double acc = 0.0;
    std::size_t pick = 0;
    for (; pick + 1 < allowed->size(); ++pick) {
      acc += std::exp(logits((*allowed)[pick]) - m);
      if (target < acc) break;
    }
    int k = (*allowed)[pick];
    return {k, logits(k) - m - std::log(z)};
  }

  /// Adds log q of node i's infection (or recovery) choice to b.log_q and,
  /// when `grad` is given, weights[s] * grad log q into it.
  void accumulate_node(int i, bool recovery, SampleBatch& b, std::span<const double> weights,
                       NetGradient* grad) const {
    const DenseNet& net = recovery ? *rec_nets_[i] : *inf_nets_[i];
    const NodeSpace& sp = spaces_[i];
    DenseNet::Cache cache;
    Eigen::MatrixXd logits = net.forward_logits(build_input(i, recovery, b), cache);
    if (!recovery) logits.colwise() += sp.inf_offset;
    Eigen::MatrixXd dlogits;
    if (grad) dlogits = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
    std::vector<int> all;
    if (!recovery) {
      all.resize(sp.inf_values.size());
      std::iota(all.begin(), all.end(), 0);
    }
    for (int s = 0; s < b.size; ++s) {
      const std::vector<int>& allowed = recovery ? sp.rec_options[b.inf_idx[i][s]] : all;
      int chosen = recovery ? b.rec_idx[i][s] : b.inf_idx[i][s];
      double m = kImpossible;
      for (int k : allowed) m = std::max(m, logits(k, s));
      double z = 0.0;
      for (int k : allowed) z += std::exp(logits(k, s) - m);
      double logz = m + std::log(z);
      b.log_q[s] += logits(chosen, s) - logz;
      if (grad) {
        double w = weights[s];
        for (int k : allowed) dlogits(k, s) = -w * std::exp(logits(k, s) - logz);
        dlogits(chosen, s) += w;
      }
    }
    if (grad) net.backward(cache, dlogits, *grad);
  }

  template <class F>
  void for_each_block(F&& f) const {
    auto visit = [&](const DenseNet& net) {
      for (const Layer& l : net.layers()) {
        f(l.W.data(), static_cast<std::size_t>(l.W.size()));
        f(l.b.data(), static_cast<std::size_t>(l.b.size()));
      }
    };
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) visit(*inf_nets_[i]);
      if (rec_nets_[i]) visit(*rec_nets_[i]);
    }
  }

  template <class F>
  void for_each_block_mut(F&& f) {
    auto visit = [&](DenseNet& net) {
      for (Layer& l : net.layers()) {
        f(l.W.data(), static_cast<std::size_t>(l.W.size()));
        f(l.b.data(), static_cast<std::size_t>(l.b.size()));
      }
    };
    for (int i = 0; i < size(); ++i) {
      if (inf_nets_[i]) visit(*inf_nets_[i]);
      if (rec_nets_[i]) visit(*rec_nets_[i]);
    }
  }

  int horizon_ = 0;
  Ordering ordering_;
  DependencyPolicy policy_ = DependencyPolicy::NextNearestNeighbors;
  std::vector<NodeSpace> spaces_;
  std::vector<std::vector<int>> deps_;
  std::vector<std::vector<int>> input_deps_;
  std::vector<std::optional<DenseNet>> inf_nets_;
  std::vector<std::optional<DenseNet>> rec_nets_;
};

}  // namespace epivar

#endif  // EPIVAR_AUTOREG_MODEL_HPP
