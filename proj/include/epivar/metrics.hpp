#ifndef EPIVAR_METRICS_HPP
#define EPIVAR_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "epivar/common.hpp"

namespace epivar {

/// One ranking problem: scored candidates and the true answer.
struct RankedInstance {
  std::vector<int> candidates;
  std::vector<double> scores;
  int truth = -1;
};

/// Position range [lo, hi] (1-based) the truth may occupy when ties are
/// broken uniformly at random; nullopt when the truth is not a candidate.
inline std::optional<std::pair<int, int>> truth_rank_range(const RankedInstance& r) {
  if (r.candidates.size() != r.scores.size()) throw Error("one score per candidate required");
  auto it = std::find(r.candidates.begin(), r.candidates.end(), r.truth);
  if (it == r.candidates.end()) return std::nullopt;
  double s = r.scores[it - r.candidates.begin()];
  int above = 0, tied = 0;
  for (double v : r.scores) {
    if (v > s) ++above;
    else if (v == s) ++tied;
  }
  return std::make_pair(above + 1, above + tied);
}

struct RankingCurve {
  /// Fractions 0, 0.01, ..., 1 of each candidate list.
  std::vector<double> fraction;
  /// Share of instances whose truth lies within the top fraction (expected
  /// value over tie orderings).
  std::vector<double> found;
  double auc = 0.0;
  int n_instances = 0;
  /// Instances whose truth is not among the candidates; excluded.
  int n_missing = 0;
  std::vector<int> missing;
};

inline RankingCurve fraction_found_curve(std::span<const RankedInstance> instances, int grid_points = 101) {
  if (grid_points < 2) throw Error("fraction grid needs at least two points");
  RankingCurve c;
  c.fraction.resize(grid_points);
  c.found.assign(grid_points, 0.0);
  for (int g = 0; g < grid_points; ++g) c.fraction[g] = static_cast<double>(g) / (grid_points - 1);
  for (std::size_t k = 0; k < instances.size(); ++k) {
    auto range = truth_rank_range(instances[k]);
    if (!range) {
      c.n_missing++;
      c.missing.push_back(static_cast<int>(k));
      continue;
    }
    c.n_instances++;
    const double len = static_cast<double>(instances[k].candidates.size());
    auto [lo, hi] = *range;
    for (int g = 0; g < grid_points; ++g) {
      // Top floor(f * K) positions; the small slack absorbs grid rounding.
      double cut = std::floor(c.fraction[g] * len + 1e-9);
      double hit = std::clamp((cut - lo + 1.0) / (hi - lo + 1.0), 0.0, 1.0);
      c.found[g] += hit;
    }
  }
  if (c.n_instances > 0)
    for (double& v : c.found) v /= c.n_instances;
  for (int g = 1; g < grid_points; ++g)
    c.auc += 0.5 * (c.found[g] + c.found[g - 1]) * (c.fraction[g] - c.fraction[g - 1]);
  return c;
}

/// Expected share of instances with the truth ranked first, ties at the
/// top sharing credit equally.
inline double top1_rate(std::span<const RankedInstance> instances) {
  double hits = 0.0;
  int counted = 0;
  for (const auto& r : instances) {
    auto range = truth_rank_range(r);
    if (!range) continue;
    ++counted;
    if (range->first == 1) hits += 1.0 / (range->second - range->first + 1);
  }
  return counted ? hits / counted : 0.0;
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (normalized Mann-Whitney U).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("one label per score required");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t k = 0; k < idx.size();) {
    std::size_t e = k;
    while (e < idx.size() && scores[idx[e]] == scores[idx[k]]) ++e;
    double avg = (k + 1 + e) / 2.0;
    for (std::size_t q = k; q < e; ++q)
      if (labels[idx[q]]) rank_sum += avg;
    k = e;
  }
  for (int l : labels) (l ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw Error("ROC AUC needs at least one positive and one negative label");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

struct MetricsReport {
  std::string task;
  std::string method;
  int n_instances = 0;
  double auc = 0.0;
  double top1 = 0.0;
  nlohmann::json per_instance = nlohmann::json::array();
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json j{{"task", m.task},   {"method", m.method},           {"n_instances", m.n_instances},
                   {"auc", m.auc},     {"top1", m.top1},               {"per_instance", m.per_instance}};
  for (auto it = m.extra.begin(); it != m.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

}  // namespace epivar

#endif  // EPIVAR_METRICS_HPP
