#ifndef EPIVAR_CONTACT_GRAPH_HPP
#define EPIVAR_CONTACT_GRAPH_HPP

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "epivar/common.hpp"

namespace epivar {

/// One directed exposure: at timestep t, individual j is in contact with i
/// and, if infected, transmits to i with probability lambda. `duration` is
/// NaN unless the contact came from duration data.
struct Contact {
  int t = 0;
  int i = 0;
  int j = 0;
  double lambda = 0.0;
  double duration = std::numeric_limits<double>::quiet_NaN();
};

/// Incoming contact of some individual at a fixed timestep.
struct Neighbor {
  int j = 0;
  double lambda = 0.0;
  double duration = std::numeric_limits<double>::quiet_NaN();
};

/// Per-timestep weighted contact lists over n individuals and the static
/// union graph. Contacts exist for t in [0, horizon); the contact at t drives
/// the transition t -> t+1. Immutable after construction.
class TemporalContactGraph {
 public:
  TemporalContactGraph() = default;

  /// Validates every entry and merges duplicate (t, i, j) contacts as
  /// independent exposures: lambda = 1 - prod(1 - lambda_k), durations add.
  TemporalContactGraph(int n, int horizon, std::vector<Contact> contacts)
      : n_(n), horizon_(horizon) {
    if (n < 0) throw Error("graph size must be non-negative");
    if (horizon < 0) throw Error("horizon must be non-negative");
    std::map<std::tuple<int, int, int>, Contact> merged;
    for (const Contact& c : contacts) {
      if (c.t < 0 || c.t >= horizon)
        throw Error("contact time " + std::to_string(c.t) + " outside [0," +
                    std::to_string(horizon) + ")");
      if (c.i < 0 || c.i >= n || c.j < 0 || c.j >= n)
        throw Error("contact endpoint outside [0," + std::to_string(n) + ")");
      if (c.i == c.j) throw Error("self-contact rejected for individual " + std::to_string(c.i));
      if (!(c.lambda >= 0.0 && c.lambda <= 1.0))
        throw Error("contact probability outside [0,1]");
      auto key = std::make_tuple(c.t, c.i, c.j);
      auto it = merged.find(key);
      if (it == merged.end()) {
        merged.emplace(key, c);
      } else {
        Contact& m = it->second;
        m.lambda = 1.0 - (1.0 - m.lambda) * (1.0 - c.lambda);
        if (std::isnan(m.duration) || std::isnan(c.duration)) {
          m.duration = std::numeric_limits<double>::quiet_NaN();
        } else {
          m.duration += c.duration;
        }
      }
    }
    contacts_.reserve(merged.size());
    has_durations_ = !merged.empty();
    for (auto& [key, c] : merged) {
      contacts_.push_back(c);
      if (std::isnan(c.duration)) has_durations_ = false;
    }
    build_indices();
  }

  int size() const { return n_; }
  int horizon() const { return horizon_; }
  const std::vector<Contact>& contacts() const { return contacts_; }

  /// Contacts j -> i active at timestep t.
  std::span<const Neighbor> incoming(int t, int i) const {
    std::size_t k = static_cast<std::size_t>(t) * n_ + i;
    return {incoming_.data() + offsets_[k], incoming_.data() + offsets_[k + 1]};
  }

  /// Sorted union-graph neighbors, symmetrized over contact direction.
  const std::vector<int>& neighbors(int i) const { return adjacency_[i]; }

  bool has_durations() const { return has_durations_; }

  std::size_t union_edge_count() const {
    std::size_t deg = 0;
    for (const auto& a : adjacency_) deg += a.size();
    return deg / 2;
  }

 private:
  void build_indices() {
    std::size_t slots = static_cast<std::size_t>(horizon_) * n_;
    offsets_.assign(slots + 1, 0);
    for (const Contact& c : contacts_) offsets_[static_cast<std::size_t>(c.t) * n_ + c.i + 1]++;
    for (std::size_t k = 0; k < slots; ++k) offsets_[k + 1] += offsets_[k];
    incoming_.resize(contacts_.size());
    std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
    for (const Contact& c : contacts_) {
      incoming_[fill[static_cast<std::size_t>(c.t) * n_ + c.i]++] = Neighbor{c.j, c.lambda, c.duration};
    }
    std::vector<std::set<int>> adj(n_);
    for (const Contact& c : contacts_) {
      adj[c.i].insert(c.j);
      adj[c.j].insert(c.i);
    }
    adjacency_.assign(n_, {});
    for (int i = 0; i < n_; ++i) adjacency_[i].assign(adj[i].begin(), adj[i].end());
  }

  int n_ = 0;
  int horizon_ = 0;
  bool has_durations_ = false;
  std::vector<Contact> contacts_;
  std::vector<std::size_t> offsets_{0};
  std::vector<Neighbor> incoming_;
  std::vector<std::vector<int>> adjacency_;
};

/// Probability of at least one transmission during a contact of length
/// `delta` at rate `gamma`: 1 - exp(-gamma * delta).
inline double infection_prob_from_duration(double gamma, double delta) {
  if (gamma < 0.0 || delta < 0.0) throw Error("rate and duration must be non-negative");
  return -std::expm1(-gamma * delta);
}

enum class ContactFormat { Probability, Duration };

struct LoadOptions {
  ContactFormat format = ContactFormat::Probability;
  std::optional<double> gamma;
  /// Final timestep T. When absent, T = 1 + the largest t in the file.
  std::optional<int> horizon;
  /// Size of the population. When absent, 1 + the largest id.
  std::optional<int> n;
  bool directed = false;
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    auto b = cell.find_first_not_of(" \t\r");
    auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline bool looks_like_header(const std::vector<std::string>& cells) {
  double x;
  return !cells.empty() && !parse_number(cells[0], x);
}

}  // namespace detail

/// Reads a `t,i,j,value` contact list. Rows are undirected unless
/// `opts.directed`; value is lambda or a duration mapped through
/// infection_prob_from_duration.
inline TemporalContactGraph load_contacts(std::istream& in, const LoadOptions& opts) {
  if (opts.format == ContactFormat::Duration && !opts.gamma)
    throw Error("duration format requires a rate (gamma)");
  std::vector<Contact> contacts;
  std::string line;
  long lineno = 0;
  int max_t = -1;
  int max_id = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv(line);
    if (lineno == 1 && detail::looks_like_header(cells)) continue;
    if (cells.size() != 4) throw ParseError("expected 4 fields t,i,j,value", lineno);
    Contact c;
    double value = 0.0;
    if (!detail::parse_number(cells[0], c.t) || !detail::parse_number(cells[1], c.i) ||
        !detail::parse_number(cells[2], c.j) || !detail::parse_number(cells[3], value))
      throw ParseError("malformed row '" + line + "'", lineno);
    if (c.t < 0) throw ParseError("negative timestep", lineno);
    if (opts.horizon && c.t >= *opts.horizon)
      throw ParseError("timestep " + std::to_string(c.t) + " outside [0," +
                           std::to_string(*opts.horizon) + ")",
                       lineno);
    if (c.i < 0 || c.j < 0) throw ParseError("negative individual id", lineno);
    if (opts.n && (c.i >= *opts.n || c.j >= *opts.n)) throw ParseError("individual id out of range", lineno);
    if (c.i == c.j) throw ParseError("self-contact rejected", lineno);
    if (opts.format == ContactFormat::Duration) {
      if (value < 0.0) throw ParseError("negative duration", lineno);
      c.duration = value;
      c.lambda = infection_prob_from_duration(*opts.gamma, value);
    } else {
      if (!(value >= 0.0 && value <= 1.0)) throw ParseError("probability outside [0,1]", lineno);
      c.lambda = value;
    }
    max_t = std::max(max_t, c.t);
    max_id = std::max({max_id, c.i, c.j});
    contacts.push_back(c);
    if (!opts.directed) contacts.push_back(Contact{c.t, c.j, c.i, c.lambda, c.duration});
  }
  int horizon = opts.horizon.value_or(max_t + 1);
  int n = opts.n.value_or(max_id + 1);
  return TemporalContactGraph(n, horizon, std::move(contacts));
}

inline TemporalContactGraph load_contacts(const std::string& path, const LoadOptions& opts) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open contact file " + path);
  return load_contacts(in, opts);
}

/// {n, horizon, contacts: [[t,i,j,lambda(,duration)]...]}; contacts are
/// stored directed, exactly as held in memory.
inline nlohmann::json graph_to_json(const TemporalContactGraph& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (const Contact& c : g.contacts()) {
    nlohmann::json row = {c.t, c.i, c.j, c.lambda};
    if (!std::isnan(c.duration)) row.push_back(c.duration);
    rows.push_back(std::move(row));
  }
  return {{"n", g.size()}, {"horizon", g.horizon()}, {"contacts", std::move(rows)}};
}

inline TemporalContactGraph graph_from_json(const nlohmann::json& j) {
  std::vector<Contact> contacts;
  for (const auto& row : j.at("contacts")) {
    if (row.size() != 4 && row.size() != 5) throw Error("graph contact rows need 4 or 5 entries");
    Contact c{row[0].get<int>(), row[1].get<int>(), row[2].get<int>(), row[3].get<double>()};
    if (row.size() == 5) c.duration = row[4].get<double>();
    contacts.push_back(c);
  }
  return TemporalContactGraph(j.at("n").get<int>(), j.at("horizon").get<int>(), std::move(contacts));
}

inline void save_graph(const TemporalContactGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << graph_to_json(g).dump() << '\n';
}

inline TemporalContactGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open graph file " + path);
  return graph_from_json(nlohmann::json::parse(in));
}

/// Replicates an undirected static edge list at every timestep.
inline TemporalContactGraph make_static_graph(int n, const std::vector<std::pair<int, int>>& edges,
                                              int horizon, double lambda) {
  std::vector<Contact> contacts;
  contacts.reserve(edges.size() * 2 * static_cast<std::size_t>(std::max(horizon, 0)));
  for (int t = 0; t < horizon; ++t) {
    for (auto [a, b] : edges) {
      contacts.push_back(Contact{t, a, b, lambda});
      contacts.push_back(Contact{t, b, a, lambda});
    }
  }
  return TemporalContactGraph(n, horizon, std::move(contacts));
}

namespace detail {

// Pairing with incremental repair; restarts when the leftover stubs admit
// no valid edge.
inline std::optional<std::set<std::pair<int, int>>> try_regular_pairing(int n, int degree, Rng& rng) {
  std::set<std::pair<int, int>> edges;
  std::vector<int> stubs;
  stubs.reserve(static_cast<std::size_t>(n) * degree);
  for (int k = 0; k < degree; ++k)
    for (int v = 0; v < n; ++v) stubs.push_back(v);
  while (!stubs.empty()) {
    std::map<int, int> potential;
    shuffle(stubs, rng);
    for (std::size_t k = 0; k + 1 < stubs.size(); k += 2) {
      int a = std::min(stubs[k], stubs[k + 1]);
      int b = std::max(stubs[k], stubs[k + 1]);
      if (a != b && !edges.count({a, b})) {
        edges.insert({a, b});
      } else {
        potential[a]++;
        potential[b]++;
      }
    }
    if (potential.empty()) break;
    bool suitable = false;
    for (auto it = potential.begin(); it != potential.end() && !suitable; ++it)
      for (auto jt = std::next(it); jt != potential.end(); ++jt)
        if (!edges.count({it->first, jt->first})) {
          suitable = true;
          break;
        }
    if (!suitable) return std::nullopt;
    stubs.clear();
    for (auto [v, count] : potential)
      for (int k = 0; k < count; ++k) stubs.push_back(v);
  }
  return edges;
}

}  // namespace detail

/// Static random regular graph, every edge active at every timestep.
inline TemporalContactGraph gen_random_regular(int n, int degree, int horizon, double lambda,
                                               std::uint64_t seed) {
  if (n <= 0 || degree < 0 || degree >= n || (static_cast<long>(n) * degree) % 2 != 0)
    throw Error("infeasible random regular graph (n=" + std::to_string(n) +
                ", degree=" + std::to_string(degree) + ")");
  Rng rng(seed);
  std::optional<std::set<std::pair<int, int>>> edges;
  for (int attempt = 0; attempt < 10000 && !edges; ++attempt) edges = detail::try_regular_pairing(n, degree, rng);
  if (!edges) throw Error("random regular graph generation failed");
  return make_static_graph(n, {edges->begin(), edges->end()}, horizon, lambda);
}

/// Points uniform on a square of side sqrt(n); each pair is a static edge
/// with probability exp(-d_ij / l).
inline TemporalContactGraph gen_proximity(int n, double length_scale, int horizon, double lambda,
                                          std::uint64_t seed,
                                          std::vector<std::array<double, 2>>* points_out = nullptr) {
  if (n < 2) throw Error("proximity graph needs n >= 2");
  if (!(length_scale > 0.0)) throw Error("length scale must be positive");
  Rng rng(seed);
  double side = std::sqrt(static_cast<double>(n));
  std::vector<std::array<double, 2>> pts(n);
  for (auto& p : pts) {
    p[0] = uniform01(rng) * side;
    p[1] = uniform01(rng) * side;
  }
  std::vector<std::pair<int, int>> edges;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      double d = std::hypot(pts[a][0] - pts[b][0], pts[a][1] - pts[b][1]);
      if (uniform01(rng) < std::exp(-d / length_scale)) edges.emplace_back(a, b);
    }
  if (points_out) *points_out = std::move(pts);
  return make_static_graph(n, edges, horizon, lambda);
}

/// Rooted tree, ids in BFS order from root 0. The root has `degree`
/// children and every other internal node `degree - 1`, so internal nodes
/// all have graph degree `degree`.
inline TemporalContactGraph gen_tree(int degree, int depth, int horizon, double lambda) {
  if (degree < 1 || depth < 1) throw Error("tree needs degree >= 1 and depth >= 1");
  std::vector<std::pair<int, int>> edges;
  std::vector<int> level{0};
  int next = 1;
  for (int d = 0; d < depth; ++d) {
    std::vector<int> children;
    for (int parent : level) {
      int k = (d == 0) ? degree : degree - 1;
      for (int c = 0; c < k; ++c) {
        edges.emplace_back(parent, next);
        children.push_back(next++);
      }
    }
    level = std::move(children);
  }
  return make_static_graph(next, edges, horizon, lambda);
}

/// Union of first and second neighbors of i, excluding i.
inline std::vector<int> second_neighbors(const TemporalContactGraph& g, int i) {
  std::set<int> out;
  for (int j : g.neighbors(i)) {
    out.insert(j);
    for (int k : g.neighbors(j)) out.insert(k);
  }
  out.erase(i);
  return {out.begin(), out.end()};
}

/// Hop distances on the union graph; -1 for unreachable nodes.
inline std::vector<int> bfs_distances(const TemporalContactGraph& g, int source) {
  std::vector<int> dist(g.size(), -1);
  std::queue<int> q;
  dist[source] = 0;
  q.push(source);
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v : g.neighbors(u))
      if (dist[v] < 0) {
        dist[v] = dist[u] + 1;
        q.push(v);
      }
  }
  return dist;
}

inline bool is_acyclic(const TemporalContactGraph& g) {
  std::vector<int> comp(g.size(), -1);
  std::size_t edges = g.union_edge_count();
  std::size_t components = 0;
  for (int s = 0; s < g.size(); ++s) {
    if (comp[s] >= 0) continue;
    ++components;
    for (int v = 0; auto d : bfs_distances(g, s)) {
      if (d >= 0) comp[v] = s;
      ++v;
    }
  }
  return edges + components == static_cast<std::size_t>(g.size());
}

}  // namespace epivar

#endif  // EPIVAR_CONTACT_GRAPH_HPP
