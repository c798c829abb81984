#ifndef EPIVAR_TASKS_HPP
#define EPIVAR_TASKS_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "epivar/autoreg_model.hpp"
#include "epivar/baselines.hpp"
#include "epivar/common.hpp"
#include "epivar/contact_graph.hpp"
#include "epivar/epidemic_model.hpp"
#include "epivar/metrics.hpp"
#include "epivar/observation_model.hpp"
#include "epivar/oracle.hpp"
#include "epivar/trainer.hpp"

namespace epivar {

inline constexpr const char* kVersion = "1.0.0";

using json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Experiment description, parsed from the JSON config. Unknown keys are
/// rejected so typos surface as configuration errors.
struct ExperimentSpec {
  std::string task;
  std::uint64_t seed = 0;
  int instances = 10;
  json graph;
  json epidemic;
  json observation = json::object();
  std::vector<std::string> methods{"ann"};
  TrainConfig train;
  ModelConfig model;
  SoftMarginConfig soft_margin;
  ContactTracingConfig contact_tracing;
  double min_fraction = 0.2;
  double max_fraction = 0.8;
  int retry_cap = 100;
  json params = json::object();
  json scaling = json::object();
  json diagnose = json::object();
  json raw;
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline ExperimentSpec parse_spec(const json& j) {
  ExperimentSpec s;
  try {
    detail::check_keys(j,
                       {"task", "seed", "instances", "graph", "epidemic", "observation", "methods", "train", "model",
                        "soft_margin", "contact_tracing", "retry", "params", "scaling", "diagnose"},
                       "config");
    s.raw = j;
    s.task = j.at("task").get<std::string>();
    static const std::vector<std::string> tasks{"patient-zero", "risk", "params", "scaling", "diagnose"};
    if (std::find(tasks.begin(), tasks.end(), s.task) == tasks.end()) throw ConfigError("unknown task '" + s.task + "'");
    s.seed = j.value("seed", std::uint64_t{0});
    s.instances = j.value("instances", s.instances);
    if (s.instances < 1) throw ConfigError("instances must be at least 1");
    s.graph = j.at("graph");
    s.epidemic = j.value("epidemic", json::object());
    s.observation = j.value("observation", json::object());
    if (j.contains("methods")) s.methods = j.at("methods").get<std::vector<std::string>>();
    if (s.methods.empty()) throw ConfigError("method list must not be empty");
    static const std::vector<std::string> methods{"ann", "soft-margin", "contact-tracing", "oracle", "random"};
    for (const auto& m : s.methods)
      if (std::find(methods.begin(), methods.end(), m) == methods.end()) throw ConfigError("unknown method '" + m + "'");
    if (j.contains("train")) s.train = j.at("train").get<TrainConfig>();
    if (j.contains("model")) s.model = j.at("model").get<ModelConfig>();
    if (j.contains("soft_margin")) {
      const json& sm = j.at("soft_margin");
      detail::check_keys(sm, {"simulations", "a_grid"}, "soft_margin");
      s.soft_margin.simulations = sm.value("simulations", s.soft_margin.simulations);
      if (sm.contains("a_grid")) s.soft_margin.a_grid = sm.at("a_grid").get<std::vector<double>>();
    }
    if (j.contains("contact_tracing")) {
      const json& ct = j.at("contact_tracing");
      detail::check_keys(ct, {"tau", "raw_counts"}, "contact_tracing");
      s.contact_tracing.tau = ct.value("tau", s.contact_tracing.tau);
      s.contact_tracing.raw_counts = ct.value("raw_counts", s.contact_tracing.raw_counts);
    }
    if (j.contains("retry")) {
      const json& r = j.at("retry");
      detail::check_keys(r, {"min_fraction", "max_fraction", "cap"}, "retry");
      s.min_fraction = r.value("min_fraction", s.min_fraction);
      s.max_fraction = r.value("max_fraction", s.max_fraction);
      s.retry_cap = r.value("cap", s.retry_cap);
    }
    s.params = j.value("params", json::object());
    s.scaling = j.value("scaling", json::object());
    s.diagnose = j.value("diagnose", json::object());
    s.train.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return s;
}

/// Builds the contact graph described by `g`; `seed` drives random
/// generators.
inline TemporalContactGraph make_graph(const json& g, std::uint64_t seed) {
  std::string type = g.at("type").get<std::string>();
  int horizon = g.value("horizon", 10);
  double lambda = g.value("lambda", 0.5);
  if (type == "chain") {
    int n = g.at("n").get<int>();
    std::vector<std::pair<int, int>> e;
    for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
    return make_static_graph(n, e, horizon, lambda);
  }
  if (type == "tree") return gen_tree(g.at("degree").get<int>(), g.at("depth").get<int>(), horizon, lambda);
  if (type == "rrg")
    return gen_random_regular(g.at("n").get<int>(), g.at("degree").get<int>(), horizon, lambda,
                              g.value("seed", seed));
  if (type == "proximity")
    return gen_proximity(g.at("n").get<int>(), g.value("length_scale", 1.0), horizon, lambda, g.value("seed", seed));
  if (type == "contacts") {
    LoadOptions o;
    std::string fmt = g.value("format", "probability");
    o.format = fmt == "duration" ? ContactFormat::Duration : ContactFormat::Probability;
    if (g.contains("gamma")) o.gamma = g.at("gamma").get<double>();
    if (g.contains("horizon")) o.horizon = horizon;
    if (g.contains("n")) o.n = g.at("n").get<int>();
    o.directed = g.value("directed", false);
    return load_contacts(g.at("path").get<std::string>(), o);
  }
  if (type == "json") return load_graph(g.at("path").get<std::string>());
  throw ConfigError("unknown graph type '" + type + "'");
}

/// Epidemic parameters from the "epidemic" block: "lambda" (probability
/// mode), "gamma" (rate mode) or neither (per-contact lambdas); optional
/// "class_values" for several classes.
inline EpidemicParams make_params(const json& e, int n) {
  EpidemicParams p;
  p.mu = e.value("mu", 0.0);
  p.p0 = e.value("p0", n > 0 ? 1.0 / n : 0.0);
  std::string mode = e.value("mode", e.contains("gamma") ? "rate" : (e.contains("lambda") || e.contains("class_values")) ? "probability" : "graph");
  if (mode == "graph") {
    p.mode = InfectionMode::Graph;
  } else if (mode == "probability") {
    p.mode = InfectionMode::Probability;
    p.class_values = e.contains("class_values") ? e.at("class_values").get<std::vector<double>>()
                                                : std::vector<double>{e.at("lambda").get<double>()};
  } else if (mode == "rate") {
    p.mode = InfectionMode::Rate;
    p.class_values = e.contains("class_values") ? e.at("class_values").get<std::vector<double>>()
                                                : std::vector<double>{e.at("gamma").get<double>()};
  } else {
    throw ConfigError("unknown infection mode '" + mode + "'");
  }
  return p;
}

/// One generated experiment instance.
struct Instance {
  int index = 0;
  std::shared_ptr<const TemporalContactGraph> graph;
  EpidemicParams truth;
  Cascade cascade;
  std::vector<int> sources;
  std::vector<Observation> obs;
  int attempts = 0;
};

/// Random balanced split of [0, n) into classes 0 and 1.
inline std::vector<int> random_split(int n, Rng& rng) {
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  shuffle(ids, rng);
  std::vector<int> cls(n, 0);
  for (int k = n / 2; k < n; ++k) cls[ids[k]] = 1;
  return cls;
}

/// Simulates a single-source cascade (retrying outbreaks whose final
/// ever-infected fraction falls outside the configured range, up to the
/// retry cap) and applies the observation recipe.
inline Instance make_instance(const ExperimentSpec& spec, int k) {
  Instance inst;
  inst.index = k;
  const std::uint64_t base = derive_seed(spec.seed, static_cast<std::uint64_t>(k));
  auto g = std::make_shared<TemporalContactGraph>(make_graph(spec.graph, derive_seed(base, 10)));
  inst.graph = g;
  const int n = g->size();
  const int horizon = g->horizon();
  inst.truth = make_params(spec.epidemic, n);
  Rng rng(derive_seed(base, 11));
  if (spec.epidemic.value("two_class", false)) inst.truth.class_of = random_split(n, rng);
  inst.truth.validate(n);

  const json& ob = spec.observation;
  const int target_size = ob.value("target_size", -1);
  const int n_sources = spec.epidemic.value("sources", 1);
  Simulator sim(*g, inst.truth);
  for (int attempt = 1; attempt <= std::max(1, spec.retry_cap); ++attempt) {
    inst.attempts = attempt;
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) ids[i] = i;
    shuffle(ids, rng);
    if (spec.epidemic.contains("source")) ids[0] = spec.epidemic.at("source").get<int>();
    inst.sources.assign(ids.begin(), ids.begin() + std::min(n_sources, n));
    inst.cascade = sim.run(inst.sources, rng);
    int size = count_ever_infected(inst.cascade, horizon);
    if (target_size > 0) {
      if (size == target_size) break;
      continue;
    }
    double frac = static_cast<double>(size) / n;
    if (n == 1 || (frac >= spec.min_fraction && frac <= spec.max_fraction)) break;
  }
  if (target_size > 0 && count_ever_infected(inst.cascade, horizon) != target_size)
    throw Error("no cascade of size " + std::to_string(target_size) + " within the retry cap");

  std::string recipe = ob.value("recipe", "final-snapshot");
  int t_obs = ob.value("time", horizon);
  if (recipe == "final-snapshot") {
    inst.obs = snapshot_observations(inst.cascade, t_obs);
  } else if (recipe == "risk-half") {
    // Half of the individuals infected at T (rounded up), observed I; an
    // optional share of the susceptible ones observed S.
    std::vector<int> inf, sus;
    for (int i = 0; i < n; ++i) {
      State s = inst.cascade.state(i, t_obs);
      if (s == State::I) inf.push_back(i);
      else if (s == State::S) sus.push_back(i);
    }
    shuffle(inf, rng);
    shuffle(sus, rng);
    double frac = ob.value("infected_fraction", 0.5);
    std::size_t ni = static_cast<std::size_t>(std::ceil(frac * inf.size()));
    for (std::size_t q = 0; q < ni; ++q) inst.obs.push_back(Observation{inf[q], t_obs, State::I});
    double sfrac = ob.value("susceptible_fraction", 0.0);
    std::size_t ns = static_cast<std::size_t>(std::floor(sfrac * sus.size()));
    for (std::size_t q = 0; q < ns; ++q) inst.obs.push_back(Observation{sus[q], t_obs, State::S});
    std::sort(inst.obs.begin(), inst.obs.end(),
              [](const Observation& a, const Observation& b) { return a.individual < b.individual; });
  } else if (recipe == "file") {
    std::ifstream in(ob.at("path").get<std::string>());
    if (!in) throw ConfigError("cannot open observation file");
    inst.obs = read_observations_csv(in);
  } else {
    throw ConfigError("unknown observation recipe '" + recipe + "'");
  }
  return inst;
}

/// Per-method P(x_i^0 = I) or P(x_i^T = I) estimates.
struct MethodOutput {
  std::vector<double> scores;
  json info = json::object();
};

inline Marginals ann_marginals(PosteriorModel& post, const ExperimentSpec& spec, std::uint64_t seed,
                               json* info = nullptr, bool risk = false) {
  TrainConfig cfg = spec.train;
  cfg.risk_prior = cfg.risk_prior || risk;
  FitResult fr = fit_variational(post, spec.model, cfg, seed);
  if (fr.report.diverged) throw Error("training diverged: " + fr.report.message);
  if (info) {
    (*info)["elbo"] = fr.report.elbo.mean;
    (*info)["elbo_stderr"] = fr.report.elbo.stderr_;
    (*info)["stationary"] = fr.report.stationary;
    (*info)["parameters"] = fr.model.parameter_count();
  }
  return *fr.report.marginals;
}

inline std::filesystem::path instance_dir(const std::filesystem::path& out, int k) {
  std::ostringstream os;
  os << "instance_" << std::setw(3) << std::setfill('0') << k;
  return out / os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

struct TaskResult {
  json metrics;
  int failures = 0;
};

inline json instance_summary(const Instance& inst) {
  return {{"instance", inst.index},
          {"sources", inst.sources},
          {"ever_infected", count_ever_infected(inst.cascade, inst.cascade.horizon)},
          {"attempts", inst.attempts}};
}

/// Source ranking: candidates are the individuals observed I or R; each
/// method scores them by its estimate of P(x_i^0 = I | O).
inline TaskResult run_patient_zero(const ExperimentSpec& spec, const std::filesystem::path& out) {
  TaskResult res;
  std::map<std::string, std::vector<RankedInstance>> ranked;
  std::map<std::string, json> per_instance;
  json instances = json::array();
  for (int k = 0; k < spec.instances; ++k) {
    Instance inst;
    try {
      inst = make_instance(spec, k);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      res.failures++;
      instances.push_back({{"instance", k}, {"error", e.what()}});
      continue;
    }
    instances.push_back(instance_summary(inst));
    const std::uint64_t base = derive_seed(spec.seed, static_cast<std::uint64_t>(k));
    std::vector<int> cand = default_candidates(inst.obs);
    if (inst.sources.size() != 1) throw ConfigError("patient-zero needs single-source instances");
    const int truth = inst.sources[0];
    auto add = [&](const std::string& name, const std::vector<double>& dense, json info) {
      RankedInstance r{cand, {}, truth};
      for (int c : cand) r.scores.push_back(dense[c]);
      auto range = truth_rank_range(r);
      info["instance"] = k;
      info["truth"] = truth;
      info["rank_lo"] = range ? range->first : -1;
      info["rank_hi"] = range ? range->second : -1;
      info["candidates"] = cand.size();
      ranked[name].push_back(std::move(r));
      per_instance[name].push_back(std::move(info));
      std::ostringstream csv;
      csv << "i,score\n";
      for (int c : cand) csv << c << ',' << dense[c] << '\n';
      write_text(instance_dir(out, k) / ("scores_" + name + ".csv"), csv.str());
    };
    PosteriorModel post(inst.graph, inst.truth, inst.obs, spec.train.epsilon);
    for (const auto& m : spec.methods) {
      try {
        if (m == "ann") {
          json info;
          Marginals mg = ann_marginals(post, spec, derive_seed(base, 20), &info);
          std::vector<double> d(post.size());
          for (int i = 0; i < post.size(); ++i) d[i] = mg.prob(i, 0, State::I);
          std::ostringstream csv;
          write_marginals_csv(csv, mg);
          write_text(instance_dir(out, k) / "marginals_ann.csv", csv.str());
          add("ann", d, info);
        } else if (m == "oracle") {
          ExactPosterior ex = enumerate_posterior(post, inst.truth.mu > 0.0);
          std::vector<double> d(post.size());
          for (int i = 0; i < post.size(); ++i) d[i] = ex.marginals.prob(i, 0, State::I);
          std::ostringstream csv;
          write_marginals_csv(csv, ex.marginals);
          write_text(instance_dir(out, k) / "marginals_oracle.csv", csv.str());
          add("oracle", d, {{"log_z", ex.log_z}});
        } else if (m == "soft-margin") {
          SoftMarginConfig sc = spec.soft_margin;
          sc.seed = derive_seed(base, 30);
          SoftMarginResult r = soft_margin_scores(*inst.graph, inst.truth, inst.obs, sc);
          std::ostringstream csv;
          write_soft_margin_csv(csv, r);
          write_text(instance_dir(out, k) / "soft_margin.csv", csv.str());
          for (std::size_t a = 0; a < r.a_grid.size(); ++a) {
            std::ostringstream name;
            name << "soft-margin(a=" << r.a_grid[a] << ")";
            add(name.str(), r.dense(post.size(), a),
                {{"all_zero", static_cast<bool>(r.all_zero[a])}, {"max_exponent", r.max_exponent[a]}});
          }
        } else if (m == "random") {
          add("random", std::vector<double>(post.size(), 1.0), json::object());
        } else if (m == "contact-tracing") {
          // Contact tracing ranks exposure, not origin; it has no source
          // estimate to offer.
          continue;
        }
      } catch (const std::exception& e) {
        res.failures++;
        per_instance[m].push_back({{"instance", k}, {"error", e.what()}});
      }
    }
  }
  json methods = json::array();
  for (auto& [name, list] : ranked) {
    RankingCurve c = fraction_found_curve(list);
    MetricsReport mr;
    mr.task = "patient-zero";
    mr.method = name;
    mr.n_instances = c.n_instances;
    mr.auc = c.auc;
    mr.top1 = top1_rate(list);
    mr.per_instance = per_instance[name];
    mr.extra["excluded"] = c.n_missing;
    methods.push_back(to_json(mr));
    std::ostringstream csv;
    csv << "fraction,found\n";
    for (std::size_t g = 0; g < c.fraction.size(); ++g) csv << c.fraction[g] << ',' << c.found[g] << '\n';
    write_text(out / ("curve_" + name + ".csv"), csv.str());
  }
  res.metrics = {{"task", "patient-zero"}, {"n_instances", spec.instances}, {"instances", instances},
                 {"methods", methods}};
  return res;
}

/// Risk ranking of unobserved individuals by P(x_i^T = I | O), scored by
/// ROC AUC against the true state at T.
inline TaskResult run_risk(const ExperimentSpec& spec, const std::filesystem::path& out) {
  TaskResult res;
  std::map<std::string, std::vector<double>> aucs;
  std::map<std::string, json> per_instance;
  json instances = json::array();
  for (int k = 0; k < spec.instances; ++k) {
    Instance inst;
    try {
      inst = make_instance(spec, k);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      res.failures++;
      instances.push_back({{"instance", k}, {"error", e.what()}});
      continue;
    }
    if (inst.truth.mu != 0.0) throw ConfigError("risk task requires mu = 0");
    instances.push_back(instance_summary(inst));
    const std::uint64_t base = derive_seed(spec.seed, static_cast<std::uint64_t>(k));
    const int n = inst.graph->size();
    const int horizon = inst.graph->horizon();
    std::vector<char> observed(n, 0);
    for (const auto& o : inst.obs) observed[o.individual] = 1;
    std::vector<int> ids, labels;
    for (int i = 0; i < n; ++i)
      if (!observed[i]) {
        ids.push_back(i);
        labels.push_back(inst.cascade.state(i, horizon) == State::I ? 1 : 0);
      }
    PosteriorModel post(inst.graph, inst.truth, inst.obs, spec.train.epsilon);
    auto add = [&](const std::string& name, const std::vector<double>& dense) {
      std::vector<double> sc;
      for (int i : ids) sc.push_back(dense[i]);
      std::ostringstream csv;
      write_scores_csv(csv, ids, sc);
      write_text(instance_dir(out, k) / ("risk_" + name + ".csv"), csv.str());
      double auc = roc_auc(sc, labels);
      aucs[name].push_back(auc);
      per_instance[name].push_back({{"instance", k}, {"auc", auc}, {"unobserved", ids.size()}});
    };
    for (const auto& m : spec.methods) {
      try {
        if (m == "ann") {
          Marginals mg = ann_marginals(post, spec, derive_seed(base, 20), nullptr, true);
          std::vector<double> d(n);
          for (int i = 0; i < n; ++i) d[i] = mg.prob(i, horizon, State::I);
          add("ann", d);
        } else if (m == "oracle") {
          ExactPosterior ex = enumerate_posterior(post, false);
          std::vector<double> d(n);
          for (int i = 0; i < n; ++i) d[i] = ex.marginals.prob(i, horizon, State::I);
          add("oracle", d);
        } else if (m == "contact-tracing") {
          add("contact-tracing", contact_tracing_scores(*inst.graph, inst.obs, horizon, spec.contact_tracing));
        } else if (m == "random") {
          add("random", std::vector<double>(n, 1.0));
        }
      } catch (const std::exception& e) {
        res.failures++;
        per_instance[m].push_back({{"instance", k}, {"error", e.what()}});
      }
    }
  }
  json methods = json::array();
  for (auto& [name, v] : aucs) {
    MeanStderr ms = mean_stderr(v);
    MetricsReport mr;
    mr.task = "risk";
    mr.method = name;
    mr.n_instances = static_cast<int>(v.size());
    mr.auc = ms.mean;
    mr.per_instance = per_instance[name];
    mr.extra["auc_stderr"] = ms.stderr_;
    json j = to_json(mr);
    j.erase("top1");
    methods.push_back(j);
  }
  for (auto& [name, pi] : per_instance)
    if (!aucs.count(name)) methods.push_back({{"task", "risk"}, {"method", name}, {"n_instances", 0}, {"per_instance", pi}});
  res.metrics = {{"task", "risk"}, {"n_instances", spec.instances}, {"instances", instances}, {"methods", methods}};
  return res;
}

/// Parameter inference from full final-time observations. Single mode fits
/// the infection parameter (and mu when requested) from "init" values;
/// two-class mode fits true-split and null-split class maps and compares
/// their ELBOs.
inline TaskResult run_params(const ExperimentSpec& spec, const std::filesystem::path& out) {
  TaskResult res;
  const json& pc = spec.params;
  const bool two_class = spec.epidemic.value("two_class", false);
  json rows = json::array();
  std::vector<double> rel_errors, mu_errors, elbo_diffs;
  int true_wins = 0, compared = 0;
  for (int k = 0; k < spec.instances; ++k) {
    const std::uint64_t base = derive_seed(spec.seed, static_cast<std::uint64_t>(k));
    try {
      Instance inst = make_instance(spec, k);
      json row = instance_summary(inst);
      EpidemicParams init = inst.truth;
      const int nc = init.n_classes();
      if (nc == 0) throw ConfigError("parameter inference needs lambda or gamma parameters");
      double init_value = pc.value("init", inst.truth.class_values[0] * 1.5);
      for (double& v : init.class_values) v = init_value;
      TrainConfig cfg = spec.train;
      cfg.learn_lambda = true;
      if (pc.contains("init_mu")) {
        init.mu = pc.at("init_mu").get<double>();
        cfg.learn_mu = true;
      }
      cfg.learn_mu = cfg.learn_mu || spec.train.learn_mu;
      if (!two_class) {
        PosteriorModel post(inst.graph, init, inst.obs, cfg.epsilon);
        FitResult fr = fit_variational(post, spec.model, cfg, derive_seed(base, 20));
        if (fr.report.diverged) throw Error("training diverged: " + fr.report.message);
        std::ostringstream csv;
        write_report_csv(csv, fr.report);
        write_text(instance_dir(out, k) / "train_report.csv", csv.str());
        double truth = inst.truth.class_values[0];
        double est = fr.params.class_values[0];
        double rel = std::abs(est - truth) / truth;
        rel_errors.push_back(rel);
        row["true"] = truth;
        row["estimate"] = est;
        row["relative_error"] = rel;
        row["elbo"] = fr.report.elbo.mean;
        if (cfg.learn_mu) {
          row["mu_true"] = inst.truth.mu;
          row["mu_estimate"] = fr.params.mu;
          if (inst.truth.mu > 0) mu_errors.push_back(std::abs(fr.params.mu - inst.truth.mu) / inst.truth.mu);
        }
      } else {
        Rng rng(derive_seed(base, 40));
        EpidemicParams null_params = init;
        null_params.class_of = random_split(inst.graph->size(), rng);
        PosteriorModel post_true(inst.graph, init, inst.obs, cfg.epsilon);
        PosteriorModel post_null(inst.graph, null_params, inst.obs, cfg.epsilon);
        TwoClassFit ft = two_class_fit(post_true, spec.model, cfg, derive_seed(base, 21));
        TwoClassFit fn = two_class_fit(post_null, spec.model, cfg, derive_seed(base, 21));
        double diff = ft.elbo.mean - fn.elbo.mean;
        elbo_diffs.push_back(diff);
        ++compared;
        if (diff > 0) ++true_wins;
        row["true_values"] = inst.truth.class_values;
        row["true_split_estimates"] = ft.rates;
        row["null_split_estimates"] = fn.rates;
        row["elbo_true"] = ft.elbo.mean;
        row["elbo_null"] = fn.elbo.mean;
        row["elbo_difference"] = diff;
      }
      rows.push_back(row);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      res.failures++;
      rows.push_back({{"instance", k}, {"error", e.what()}});
    }
  }
  json m{{"task", "params"}, {"n_instances", spec.instances}, {"per_instance", rows}};
  if (!two_class) {
    MeanStderr ms = mean_stderr(rel_errors);
    m["mean_relative_error"] = ms.mean;
    m["relative_error_stderr"] = ms.stderr_;
    if (!mu_errors.empty()) m["mu_mean_relative_error"] = mean_stderr(mu_errors).mean;
  } else {
    m["true_split_wins"] = true_wins;
    m["compared"] = compared;
    m["mean_elbo_difference"] = mean_stderr(elbo_diffs).mean;
  }
  res.metrics = m;
  return res;
}

/// Least-squares slope of y against x.
inline double fitted_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= x.size();
  my /= y.size();
  double sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
  }
  return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

/// Samples each method needs before sum_i |P(x_i^0 = I) - P_exact| drops
/// below the threshold. The variational model is retrained with 2^e
/// annealing steps for growing e; soft margin doubles its simulation count
/// per candidate and is compared with the exact single-source posterior.
inline TaskResult run_scaling(const ExperimentSpec& spec, const std::filesystem::path& out) {
  TaskResult res;
  const json& sc = spec.scaling;
  const double threshold = sc.value("threshold", 0.1);
  const int e_min = sc.value("min_exponent", 4);
  const int e_max = sc.value("max_exponent", 12);
  const long sm_start = sc.value("sm_start", 64L);
  const long sm_cap = sc.value("sm_cap", 1L << 20);
  std::vector<int> sizes = sc.value("sizes", std::vector<int>{});
  const bool run_sm = std::find(spec.methods.begin(), spec.methods.end(), "soft-margin") != spec.methods.end();
  const bool run_ann = std::find(spec.methods.begin(), spec.methods.end(), "ann") != spec.methods.end();
  json rows = json::array();
  std::vector<double> ann_x, ann_y, sm_x, sm_y;
  std::ostringstream table;
  table << "instance,n_infected,ann_samples,ann_censored,sm_samples,sm_censored\n";
  int total = sizes.empty() ? spec.instances : static_cast<int>(sizes.size()) * spec.instances;
  for (int k = 0; k < total; ++k) {
    const std::uint64_t base = derive_seed(spec.seed, static_cast<std::uint64_t>(k));
    try {
      ExperimentSpec s = spec;
      if (!sizes.empty()) s.observation["target_size"] = sizes[k % sizes.size()];
      Instance inst = make_instance(s, k);
      if (inst.truth.mu != 0.0) throw ConfigError("scaling task requires mu = 0");
      const int n_inf = count_ever_infected(inst.cascade, inst.graph->horizon());
      PosteriorModel post(inst.graph, inst.truth, inst.obs, spec.train.epsilon);
      ExactPosterior ex = enumerate_posterior(post, false);
      json row = instance_summary(inst);
      row["n_infected"] = n_inf;
      long ann_samples = -1, sm_samples = -1;
      bool ann_cens = true, sm_cens = true;
      if (run_ann) {
        for (int e = e_min; e <= e_max; ++e) {
          TrainConfig cfg = spec.train;
          cfg.steps = 1 << e;
          PosteriorModel p2 = post;
          FitResult fr = fit_variational(p2, spec.model, cfg, derive_seed(base, 100 + e));
          double l1 = fr.report.diverged ? 1e9 : source_marginal_l1(*fr.report.marginals, ex.marginals);
          ann_samples = static_cast<long>(cfg.steps) * cfg.samples;
          if (l1 < threshold) {
            ann_cens = false;
            row["ann_l1"] = l1;
            break;
          }
        }
      }
      if (run_sm) {
        SoftMarginConfig smc = spec.soft_margin;
        smc.seed = derive_seed(base, 30);
        SoftMarginEstimator est(*inst.graph, inst.truth, inst.obs, smc);
        long m = sm_start;
        est.run(m);
        while (true) {
          SoftMarginResult r = est.result();
          double best = 1e9;
          for (std::size_t a = 0; a < r.a_grid.size(); ++a) {
            auto d = r.dense(post.size(), a);
            double l1 = 0;
            for (int i = 0; i < post.size(); ++i) l1 += std::abs(d[i] - ex.single_source[i]);
            best = std::min(best, l1);
          }
          sm_samples = est.simulations() * static_cast<long>(est.candidates().size());
          if (best < threshold) {
            sm_cens = false;
            row["sm_l1"] = best;
            break;
          }
          if (est.simulations() >= sm_cap) break;
          est.run(est.simulations());
        }
      }
      row["ann_samples"] = ann_samples;
      row["ann_censored"] = ann_cens;
      row["sm_samples"] = sm_samples;
      row["sm_censored"] = sm_cens;
      table << k << ',' << n_inf << ',' << ann_samples << ',' << ann_cens << ',' << sm_samples << ',' << sm_cens
            << '\n';
      if (run_ann) {
        ann_x.push_back(n_inf);
        ann_y.push_back(std::log(static_cast<double>(ann_samples)));
      }
      if (run_sm) {
        sm_x.push_back(n_inf);
        sm_y.push_back(std::log(static_cast<double>(sm_samples)));
      }
      rows.push_back(row);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      res.failures++;
      rows.push_back({{"instance", k}, {"error", e.what()}});
    }
  }
  write_text(out / "scaling.csv", table.str());
  json m{{"task", "scaling"}, {"n_instances", total}, {"per_instance", rows}};
  // Censored points enter at the cap, which understates the true slope.
  if (run_ann) m["ann_slope"] = fitted_slope(ann_x, ann_y);
  if (run_sm) m["sm_slope"] = fitted_slope(sm_x, sm_y);
  res.metrics = m;
  return res;
}

/// Divergence of independent cascades from a common source, and of
/// posterior samples from an observed snapshot.
inline TaskResult run_diagnose(const ExperimentSpec& spec, const std::filesystem::path& out) {
  TaskResult res;
  const json& dc = spec.diagnose;
  const int count = dc.value("cascades", 20);
  const int ref = dc.value("reference", 0);
  const int source = dc.value("source", 0);
  const bool posterior = dc.value("posterior", true);
  const int post_samples = dc.value("posterior_samples", 1000);
  if (count < 1 || ref < 0 || ref >= count) throw ConfigError("reference cascade index out of range");
  auto g = std::make_shared<TemporalContactGraph>(make_graph(spec.graph, derive_seed(spec.seed, 10)));
  EpidemicParams p = make_params(spec.epidemic, g->size());
  p.validate(g->size());
  if (source < 0 || source >= g->size()) throw ConfigError("source out of range");
  const int horizon = g->horizon();
  std::vector<Cascade> cs;
  std::vector<int> src{source};
  for (int k = 0; k < count; ++k) cs.push_back(simulate(*g, p, src, derive_seed(spec.seed, 1000 + k)));
  std::ostringstream cum, ham;
  cum << "cascade,t,ever_infected\n";
  ham << "cascade,t,distance\n";
  std::vector<double> mean_dist(horizon + 1, 0.0);
  for (int k = 0; k < count; ++k)
    for (int t = 0; t <= horizon; ++t) {
      cum << k << ',' << t << ',' << count_ever_infected(cs[k], t) << '\n';
      int d = hamming_distance(cs[ref], cs[k], t);
      ham << k << ',' << t << ',' << d << '\n';
      if (k != ref) mean_dist[t] += d / std::max(1.0, count - 1.0);
    }
  write_text(out / "cumulative_infected.csv", cum.str());
  write_text(out / "hamming_prior.csv", ham.str());
  bool monotone_start = true;
  for (int t = 1; t <= std::min(3, horizon); ++t) monotone_start = monotone_start && mean_dist[t] >= mean_dist[t - 1];
  json m{{"task", "diagnose"}, {"n_instances", count}, {"reference", ref}, {"mean_prior_distance", mean_dist},
         {"monotone_start", monotone_start}};
  std::ostringstream lp;
  lp << "kind,cascade,log_prior\n";
  double ref_lp = log_prior(cs[ref], *g, p);
  lp << "reference," << ref << ',' << ref_lp << '\n';
  for (int k = 0; k < count; ++k) lp << "prior," << k << ',' << log_prior(cs[k], *g, p) << '\n';
  m["reference_log_prior"] = ref_lp;
  if (posterior) {
    try {
      int t_obs = spec.observation.value("time", horizon);
      auto obs = snapshot_observations(cs[ref], t_obs);
      PosteriorModel post(g, p, obs, spec.train.epsilon);
      FitResult fr = fit_variational(post, spec.model, spec.train, derive_seed(spec.seed, 20));
      if (fr.report.diverged) throw Error("training diverged: " + fr.report.message);
      Rng rng(derive_seed(spec.seed, 21));
      SampleBatch b = fr.model.sample(post_samples, rng);
      std::ostringstream ph;
      ph << "sample,t,distance\n";
      int zero = 0;
      for (int s = 0; s < b.size; ++s) {
        Cascade x = b.cascade(s);
        for (int t = 0; t <= horizon; ++t) ph << s << ',' << t << ',' << hamming_distance(cs[ref], x, t) << '\n';
        if (hamming_distance(cs[ref], x, t_obs, HammingMode::FullState) == 0) ++zero;
        lp << "posterior," << s << ',' << log_prior(x, *g, p) << '\n';
      }
      write_text(out / "hamming_posterior.csv", ph.str());
      m["posterior_samples"] = b.size;
      m["fraction_zero_at_observation"] = static_cast<double>(zero) / b.size;
    } catch (const std::exception& e) {
      res.failures++;
      m["posterior_error"] = e.what();
    }
  }
  write_text(out / "log_prior.csv", lp.str());
  res.metrics = m;
  return res;
}

inline json make_manifest(const ExperimentSpec& spec) {
  return {{"tool", "epivar"},
          {"version", kVersion},
          {"task", spec.task},
          {"seed", spec.seed},
          {"spec", spec.raw},
          {"compiler", __VERSION__},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) +
                       "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

/// Runs the task named in the ExperimentSpec, writing manifest.json, metrics.json
/// and per-task CSVs under `out`.
inline TaskResult run_task(const ExperimentSpec& spec, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  write_json(out / "manifest.json", make_manifest(spec));
  TaskResult r;
  if (spec.task == "patient-zero") r = run_patient_zero(spec, out);
  else if (spec.task == "risk") r = run_risk(spec, out);
  else if (spec.task == "params") r = run_params(spec, out);
  else if (spec.task == "scaling") r = run_scaling(spec, out);
  else if (spec.task == "diagnose") r = run_diagnose(spec, out);
  else throw ConfigError("unknown task '" + spec.task + "'");
  r.metrics["failures"] = r.failures;
  write_json(out / "metrics.json", r.metrics);
  return r;
}

}  // namespace epivar

#endif  // EPIVAR_TASKS_HPP
