#pragma once

// Experiment orchestration: N-schedules, replication grids with derived
// seeds, per-cell metrics as long-format result rows, coverage/KLD tables and
// the incompatibility study.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "sbi/inference.hpp"
#include "sbi/io.hpp"
#include "sbi/metrics.hpp"
#include "sbi/oracle.hpp"

namespace sbi {

inline constexpr int kResultSchemaVersion = 1;

// ---------------------------------------------------------------------------
// N-schedules

inline const std::vector<std::string>& known_rules() {
  static const std::vector<std::string> rules{"n", "nlogn", "n1.5", "n2"};
  return rules;
}

inline std::size_t rule_index(const std::string& rule) {
  const auto& r = known_rules();
  const auto it = std::find(r.begin(), r.end(), rule);
  if (it == r.end()) throw std::invalid_argument("unknown N-rule '" + rule + "' (expected n, nlogn, n1.5 or n2)");
  return static_cast<std::size_t>(it - r.begin());
}

/// Training-set size for a sample size and rule; non-integers are rounded up.
inline std::size_t n_schedule(std::size_t n, const std::string& rule) {
  if (n < 2) throw std::invalid_argument("n_schedule: n must be at least 2");
  const double x = static_cast<double>(n);
  switch (rule_index(rule)) {
    case 0: return n;
    case 1: return static_cast<std::size_t>(std::ceil(x * std::log(x)));
    case 2: return static_cast<std::size_t>(std::ceil(x * std::sqrt(x)));
    default: return n * n;
  }
}

// ---------------------------------------------------------------------------
// Configuration

struct OracleOptions {
  bool plug_in_covariance = false;  // freeze Sigma at the true parameter
  TemperedSMCConfig smc;
};

struct ExperimentConfig {
  std::string model = "gk";
  std::string summary;               // empty: model default
  std::vector<double> truth;         // empty: model default
  std::string method = "npe";        // npe | nle | abc-smc | oracle
  std::vector<std::size_t> n_values{100, 500, 1000};
  std::vector<std::string> rules{"n", "nlogn", "n1.5", "n2"};
  std::size_t replications = 20;
  std::size_t draws = 10000;
  std::vector<std::string> metrics{"coverage", "bias", "kld"};
  std::vector<double> levels{0.80, 0.90, 0.95};
  FitConfig fit;
  MCMCConfig mcmc;
  ABCSMCConfig abc;
  OracleOptions oracle;
  std::size_t max_oversample = 100;
  std::uint64_t master_seed = 1;
  std::string output = "results";
  std::size_t workers = 1;  // concurrent cells
  std::optional<double> delta0_override;

  /// Full grid: 100 replications and n = 5000 added.
  void apply_full_scale() {
    replications = 100;
    if (std::find(n_values.begin(), n_values.end(), std::size_t{5000}) == n_values.end()) n_values.push_back(5000);
  }

  [[nodiscard]] ModelSpec spec_for(std::size_t n) const {
    ModelSpec s = make_spec(model, n, summary);
    if (!truth.empty()) {
      s.truth = truth;
      s.validate();
    }
    return s;
  }

  void validate() const {
    static const std::vector<std::string> methods{"npe", "nle", "abc-smc", "oracle"};
    if (std::find(methods.begin(), methods.end(), method) == methods.end()) throw std::invalid_argument("unknown method '" + method + "'");
    static const std::vector<std::string> known_metrics{"coverage", "bias", "kld", "gaussianity"};
    for (const auto& m : metrics)
      if (std::find(known_metrics.begin(), known_metrics.end(), m) == known_metrics.end()) throw std::invalid_argument("unknown metric '" + m + "'");
    if (n_values.empty() || rules.empty()) throw std::invalid_argument("experiment needs at least one n and one rule");
    for (auto n : n_values) {
      if (n < 2) throw std::invalid_argument("experiment: n must be at least 2");
      (void)spec_for(n);
    }
    for (const auto& r : rules) (void)rule_index(r);
    if (draws == 0) throw std::invalid_argument("experiment: draws must be positive");
    if (fit.k == 0) throw std::invalid_argument("experiment: k must be positive");
    for (double l : levels)
      if (!(l > 0.0 && l < 1.0)) throw std::invalid_argument("experiment: levels must be in (0, 1)");
    if (delta0_override && model != "ma2") throw std::invalid_argument("delta0 override applies to the ma2 model only");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["model"] = c.model;
  j["summary"] = c.summary;
  j["truth"] = c.truth;
  j["method"] = c.method;
  j["n"] = c.n_values;
  j["rules"] = c.rules;
  j["replications"] = c.replications;
  j["draws"] = c.draws;
  j["metrics"] = c.metrics;
  j["levels"] = c.levels;
  j["fit"] = {{"k", c.fit.k},
              {"batch_size", c.fit.batch_size},
              {"learning_rate", c.fit.learning_rate},
              {"max_epochs", c.fit.max_epochs},
              {"patience", c.fit.patience},
              {"sigma_floor", c.fit.sigma_floor},
              {"validation_fraction", c.fit.validation_fraction}};
  j["mcmc"] = {{"chain_length", c.mcmc.chain_length},
               {"burn_in_fraction", c.mcmc.burn_in_fraction},
               {"initial_scale", c.mcmc.initial_scale},
               {"target_acceptance", c.mcmc.target_acceptance},
               {"thin", c.mcmc.thin}};
  j["abc"] = {{"particles", c.abc.particles},
              {"quantile", c.abc.quantile},
              {"min_tolerance", c.abc.min_tolerance},
              {"min_improvement", c.abc.min_improvement},
              {"max_simulations", c.abc.max_simulations},
              {"max_rounds", c.abc.max_rounds}};
  j["oracle"] = {{"plug_in_covariance", c.oracle.plug_in_covariance},
                 {"particles", c.oracle.smc.particles},
                 {"ess_threshold", c.oracle.smc.ess_threshold},
                 {"moves", c.oracle.smc.moves},
                 {"final_moves", c.oracle.smc.final_moves},
                 {"max_stages", c.oracle.smc.max_stages}};
  j["max_oversample"] = c.max_oversample;
  j["master_seed"] = c.master_seed;
  j["output"] = c.output;
  j["workers"] = c.workers;
  j["delta0_override"] = c.delta0_override ? nlohmann::json(*c.delta0_override) : nlohmann::json(nullptr);
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> top{"model", "summary", "truth", "method", "n", "rules", "replications", "draws", "metrics",
                                            "levels", "fit", "mcmc", "abc", "oracle", "max_oversample", "master_seed", "output",
                                            "workers", "delta0_override"};
  for (const auto& [key, _] : j.items())
    if (std::find(top.begin(), top.end(), key) == top.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  ExperimentConfig c;
  auto get = [&](const nlohmann::json& obj, const char* key, auto& dst) {
    if (obj.contains(key)) dst = obj.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get(j, "model", c.model);
  get(j, "summary", c.summary);
  get(j, "truth", c.truth);
  get(j, "method", c.method);
  get(j, "n", c.n_values);
  get(j, "rules", c.rules);
  get(j, "replications", c.replications);
  get(j, "draws", c.draws);
  get(j, "metrics", c.metrics);
  get(j, "levels", c.levels);
  if (j.contains("fit")) {
    const auto& f = j["fit"];
    get(f, "k", c.fit.k);
    get(f, "batch_size", c.fit.batch_size);
    get(f, "learning_rate", c.fit.learning_rate);
    get(f, "max_epochs", c.fit.max_epochs);
    get(f, "patience", c.fit.patience);
    get(f, "sigma_floor", c.fit.sigma_floor);
    get(f, "validation_fraction", c.fit.validation_fraction);
  }
  if (j.contains("mcmc")) {
    const auto& m = j["mcmc"];
    get(m, "chain_length", c.mcmc.chain_length);
    get(m, "burn_in_fraction", c.mcmc.burn_in_fraction);
    get(m, "initial_scale", c.mcmc.initial_scale);
    get(m, "target_acceptance", c.mcmc.target_acceptance);
    get(m, "thin", c.mcmc.thin);
  }
  if (j.contains("abc")) {
    const auto& a = j["abc"];
    get(a, "particles", c.abc.particles);
    get(a, "quantile", c.abc.quantile);
    get(a, "min_tolerance", c.abc.min_tolerance);
    get(a, "min_improvement", c.abc.min_improvement);
    get(a, "max_simulations", c.abc.max_simulations);
    get(a, "max_rounds", c.abc.max_rounds);
  }
  if (j.contains("oracle")) {
    const auto& o = j["oracle"];
    get(o, "plug_in_covariance", c.oracle.plug_in_covariance);
    get(o, "particles", c.oracle.smc.particles);
    get(o, "ess_threshold", c.oracle.smc.ess_threshold);
    get(o, "moves", c.oracle.smc.moves);
    get(o, "final_moves", c.oracle.smc.final_moves);
    get(o, "max_stages", c.oracle.smc.max_stages);
  }
  get(j, "max_oversample", c.max_oversample);
  get(j, "master_seed", c.master_seed);
  get(j, "output", c.output);
  get(j, "workers", c.workers);
  if (j.contains("delta0_override") && !j["delta0_override"].is_null()) c.delta0_override = j["delta0_override"].get<double>();
  return c;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return hash_string(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Seeds

/// Observed data depend on (master, model, n, replication) only, so every
/// rule and method sees the same datasets.
inline std::uint64_t data_seed(std::uint64_t master, const std::string& model, std::size_t n, std::size_t rep) {
  return hash_combine(hash_combine(hash_combine(hash_combine(master, hash_string("data")), hash_string(model)), n), rep);
}

inline std::uint64_t cell_seed(std::uint64_t master, const std::string& model, const std::string& method, std::size_t n,
                               const std::string& rule, std::size_t rep) {
  std::uint64_t h = hash_combine(master, hash_string("cell"));
  h = hash_combine(h, hash_string(model));
  h = hash_combine(h, hash_string(method));
  h = hash_combine(h, n);
  h = hash_combine(h, hash_string(rule));
  return hash_combine(h, rep);
}

// ---------------------------------------------------------------------------
// Results

struct ResultRow {
  std::string model;
  std::string method;
  std::size_t n = 0;
  std::string rule;
  std::size_t realized_n = 0;
  std::size_t replication = 0;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
  double wall_clock = 0.0;  // seconds for the whole cell; written to the timings file only
  std::uint64_t simulation_budget = 0;
  std::string note;
};

inline bool row_less(const ResultRow& a, const ResultRow& b) {
  return std::forward_as_tuple(a.model, a.method, a.n, a.rule == "" ? 0 : rule_index(a.rule), a.replication, a.metric) <
         std::forward_as_tuple(b.model, b.method, b.n, b.rule == "" ? 0 : rule_index(b.rule), b.replication, b.metric);
}

inline bool has_errors(const std::vector<ResultRow>& rows) {
  return std::any_of(rows.begin(), rows.end(), [](const ResultRow& r) { return r.metric == "error"; });
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? '\'' : (ch == '\n' ? ' ' : ch);
  return out + "\"";
}

inline const char* kResultHeader = "model,method,n,rule,N,replication,seed,metric,value,simulation_budget,note";

inline std::string results_csv(std::vector<ResultRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), row_less);
  std::ostringstream out;
  out << kResultHeader << '\n';
  for (const auto& r : rows) {
    out << r.model << ',' << r.method << ',' << r.n << ',' << r.rule << ',' << r.realized_n << ',' << r.replication << ','
        << hex64(r.seed) << ',' << r.metric << ',' << format_double(r.value) << ',' << r.simulation_budget << ',' << csv_escape(r.note)
        << '\n';
  }
  return out.str();
}

/// Per-cell wall-clock, kept apart from the results so reruns compare byte for byte.
inline std::string timings_csv(std::vector<ResultRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), row_less);
  std::ostringstream out;
  out << "model,method,n,rule,replication,seconds\n";
  std::string last;
  for (const auto& r : rows) {
    std::ostringstream key;
    key << r.model << ',' << r.method << ',' << r.n << ',' << r.rule << ',' << r.replication;
    if (key.str() == last) continue;
    last = key.str();
    out << last << ',' << format_double(r.wall_clock) << '\n';
  }
  return out.str();
}

inline std::vector<ResultRow> parse_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kResultHeader) throw std::runtime_error("results file has an unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 11) throw std::runtime_error("malformed result row: " + line);
    ResultRow r;
    r.model = c[0];
    r.method = c[1];
    r.n = std::stoull(c[2]);
    r.rule = c[3];
    r.realized_n = std::stoull(c[4]);
    r.replication = std::stoull(c[5]);
    r.seed = std::stoull(c[6], nullptr, 16);
    r.metric = c[7];
    r.value = parse_double(c[8]);
    r.simulation_budget = std::stoull(c[9]);
    r.note = c[10];
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string level_tag(double level) { return std::to_string(static_cast<int>(std::lround(level * 100.0))); }

// ---------------------------------------------------------------------------
// Tables

/// Coverage per (parameter, n, rule) from "hitXX:<param>" rows. Rows are n,
/// columns are rules, each cell "c80/c90/c95".
inline std::string coverage_table_csv(const std::vector<ResultRow>& rows) {
  // key: parameter, n, rule index -> level tag -> (hits, reps)
  std::map<std::tuple<std::string, std::size_t, std::size_t>, std::map<int, std::pair<std::size_t, std::size_t>>> cells;
  std::vector<std::size_t> rule_ids;
  std::vector<int> levels;
  for (const auto& r : rows) {
    if (r.metric.rfind("hit", 0) != 0) continue;
    const auto colon = r.metric.find(':');
    if (colon == std::string::npos) continue;
    const int level = std::stoi(r.metric.substr(3, colon - 3));
    const std::string param = r.metric.substr(colon + 1);
    const std::size_t ri = rule_index(r.rule);
    auto& c = cells[{param, r.n, ri}][level];
    c.first += r.value > 0.5 ? 1 : 0;
    c.second += 1;
    if (std::find(rule_ids.begin(), rule_ids.end(), ri) == rule_ids.end()) rule_ids.push_back(ri);
    if (std::find(levels.begin(), levels.end(), level) == levels.end()) levels.push_back(level);
  }
  std::sort(rule_ids.begin(), rule_ids.end());
  std::sort(levels.begin(), levels.end());
  std::ostringstream out;
  out << "parameter,n";
  for (auto ri : rule_ids) out << ",N=" << known_rules()[ri];
  out << '\n';
  std::map<std::pair<std::string, std::size_t>, bool> row_keys;
  for (const auto& [key, _] : cells) row_keys[{std::get<0>(key), std::get<1>(key)}] = true;
  for (const auto& [rk, _] : row_keys) {
    out << rk.first << ',' << rk.second;
    for (auto ri : rule_ids) {
      out << ',';
      const auto it = cells.find({rk.first, rk.second, ri});
      if (it == cells.end()) continue;
      bool first = true;
      for (int l : levels) {
        const auto lt = it->second.find(l);
        char buf[32];
        if (lt == it->second.end()) std::snprintf(buf, sizeof buf, "NA");
        else std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(lt->second.first) / static_cast<double>(lt->second.second));
        out << (first ? "" : "/") << buf;
        first = false;
      }
    }
    out << '\n';
  }
  return out.str();
}

struct MetricSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double sd = 0.0;
};

/// Mean and sd across replications of one metric for a given (n, rule).
inline MetricSummary summarize_metric(const std::vector<ResultRow>& rows, std::size_t n, const std::string& rule, const std::string& metric) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.n == n && r.rule == rule && r.metric == metric && std::isfinite(r.value)) v.push_back(r.value);
  MetricSummary s;
  s.count = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x / static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(s.sd / static_cast<double>(v.size() - 1));
  }
  return s;
}

/// Mean and sd per (metric, n, rule) for non-indicator metrics.
inline std::string summary_csv(const std::vector<ResultRow>& rows) {
  std::map<std::tuple<std::string, std::size_t, std::size_t>, bool> keys;
  for (const auto& r : rows)
    if (r.metric.rfind("hit", 0) != 0 && r.metric != "error") keys[{r.metric, r.n, rule_index(r.rule)}] = true;
  std::ostringstream out;
  out << "metric,n,rule,count,mean,sd\n";
  for (const auto& [k, _] : keys) {
    const auto& rule = known_rules()[std::get<2>(k)];
    const auto s = summarize_metric(rows, std::get<1>(k), rule, std::get<0>(k));
    out << std::get<0>(k) << ',' << std::get<1>(k) << ',' << rule << ',' << s.count << ',' << format_double(s.mean) << ','
        << format_double(s.sd) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Running

/// Hook applied to each simulated observed summary before inference.
using ObservedHook = std::function<void(std::vector<double>&)>;

inline DrawSet oracle_draws(const ModelSpec& spec, std::span<const double> s_obs, const ExperimentConfig& cfg, std::size_t m, Stream rng) {
  if (spec.model == ModelId::toy) {
    const auto post = toy_exact_posterior(s_obs[0], spec.n);
    std::vector<double> v;
    v.reserve(m);
    while (v.size() < m) {
      const double x = post.mean + post.sd * rng.normal();
      if (spec.in_support(std::span<const double>(&x, 1))) v.push_back(x);
    }
    return DrawSet(spec.names, std::move(v), "oracle-exact");
  }
  std::optional<std::vector<double>> plug;
  if (cfg.oracle.plug_in_covariance) plug = spec.truth;
  const auto like = oracle_likelihood(spec, plug);
  const std::vector<double> s(s_obs.begin(), s_obs.end());
  TemperedSMCConfig smc = cfg.oracle.smc;
  smc.particles = m;
  return tempered_smc([&](std::span<const double> t) { return like.log_likelihood(s, t); }, spec, smc, rng).draws;
}

inline bool oracle_available(const ModelSpec& spec) { return spec.model != ModelId::stereo; }

inline std::vector<double> observed_summary(const ModelSpec& spec, std::uint64_t seed) {
  Stream r(seed);
  return simulate_summaries(spec, spec.truth, r).values;
}

/// Components used for a cell: the configured k unless N < 10k, then N / 10.
inline std::size_t cell_components(const FitConfig& fit, std::size_t n_sims) {
  return std::max<std::size_t>(1, std::min(fit.k, n_sims / 10));
}

struct Cell {
  std::size_t n = 0;
  std::string rule;
  std::size_t rep = 0;
};

inline std::vector<ResultRow> run_cell(const ExperimentConfig& cfg, const Cell& cell, const std::vector<double>& s_obs, const DrawSet* oracle) {
  const ModelSpec spec = cfg.spec_for(cell.n);
  const std::size_t big_n = n_schedule(cell.n, cell.rule);
  const std::uint64_t seed = cell_seed(cfg.master_seed, cfg.model, cfg.method, cell.n, cell.rule, cell.rep);
  std::vector<ResultRow> rows;
  const auto start = std::chrono::steady_clock::now();
  auto add = [&](std::string metric, double value, std::uint64_t budget, std::string note = {}) {
    rows.push_back({cfg.model, cfg.method, cell.n, cell.rule, big_n, cell.rep, seed, std::move(metric), value, 0.0, budget, std::move(note)});
  };
  auto wants = [&](const char* m) { return std::find(cfg.metrics.begin(), cfg.metrics.end(), m) != cfg.metrics.end(); };
  try {
    Stream rng(seed);
    DrawSet draws;
    std::uint64_t budget = big_n;
    if (cfg.method == "npe") {
      NPEConfig npe{cfg.fit, cfg.draws, cfg.max_oversample};
      npe.fit.k = cell_components(cfg.fit, big_n);
      auto r = run_npe(spec, s_obs, big_n, npe, rng);
      draws = std::move(r.draws);
      add("components", static_cast<double>(npe.fit.k), budget);
      add("leaked_fraction", draws.leaked_fraction, budget);
    } else if (cfg.method == "nle") {
      NLEConfig nle{cfg.fit, cfg.mcmc};
      nle.fit.k = cell_components(cfg.fit, big_n);
      auto r = run_nle(spec, s_obs, big_n, nle, rng);
      draws = std::move(r.draws);
      add("components", static_cast<double>(nle.fit.k), budget);
      add("acceptance_rate", r.acceptance_rate, budget);
    } else if (cfg.method == "abc-smc") {
      ABCSMCConfig abc = cfg.abc;
      abc.max_simulations = std::max<std::uint64_t>(big_n, abc.particles);
      auto r = abc_smc(spec, s_obs, abc, rng);
      budget = r.total_simulations;
      draws = std::move(r.draws);
      add("rounds", static_cast<double>(r.rounds), budget);
    } else {
      if (!oracle_available(spec)) throw std::invalid_argument("no oracle posterior for model " + cfg.model);
      draws = oracle_draws(spec, s_obs, cfg, cfg.draws, rng);
      budget = 0;
    }
    if (wants("coverage")) {
      for (double level : cfg.levels) {
        const auto ci = credible_interval(draws, level);
        for (std::size_t p = 0; p < spec.param_dim(); ++p)
          add("hit" + level_tag(level) + ":" + spec.names[p], ci[p].contains(spec.truth[p]) ? 1.0 : 0.0, budget);
      }
    }
    if (wants("bias")) {
      const auto b = posterior_mean_bias(draws, spec.truth);
      for (std::size_t p = 0; p < spec.param_dim(); ++p) add("bias:" + spec.names[p], b[p], budget);
    }
    if (wants("kld") && oracle && draws.uniform_weights()) add("kld", knn_kld(*oracle, draws).value, budget);
    if (wants("gaussianity") && draws.uniform_weights()) add("gaussianity", gaussianity_kld(draws, Stream(seed).split("gaussianity")).value, budget);
  } catch (const std::exception& e) {
    rows.clear();
    add("error", std::numeric_limits<double>::quiet_NaN(), big_n, e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (auto& r : rows) r.wall_clock = secs;
  return rows;
}

/// Runs every (n, rule, replication) cell. Failures become error rows. The
/// observed summary of a replication is shared by all rules; `hook` may
/// modify it after simulation.
inline std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg, const ObservedHook& hook = {}) {
  cfg.validate();
  std::vector<ResultRow> rows;
  if (cfg.replications == 0) return rows;
  const bool need_oracle = std::find(cfg.metrics.begin(), cfg.metrics.end(), "kld") != cfg.metrics.end() && cfg.method != "oracle";

  struct Group {
    std::size_t n, rep;
    std::vector<double> s_obs;
    std::optional<DrawSet> oracle;
    std::string error;
  };
  std::vector<Group> groups;
  for (auto n : cfg.n_values)
    for (std::size_t rep = 0; rep < cfg.replications; ++rep) groups.push_back({n, rep, {}, {}, {}});
  parallel_for(groups.size(), [&](std::size_t g) {
    auto& grp = groups[g];
    try {
      const ModelSpec spec = cfg.spec_for(grp.n);
      const std::uint64_t ds = data_seed(cfg.master_seed, cfg.model, grp.n, grp.rep);
      grp.s_obs = observed_summary(spec, ds);
      if (hook) hook(grp.s_obs);
      if (need_oracle && oracle_available(spec)) grp.oracle = oracle_draws(spec, grp.s_obs, cfg, cfg.draws, Stream(ds).split("oracle"));
    } catch (const std::exception& e) {
      grp.error = e.what();
    }
  }, static_cast<unsigned>(std::max<std::size_t>(1, cfg.workers)));

  std::vector<std::pair<std::size_t, Cell>> cells;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (const auto& rule : cfg.rules) cells.push_back({g, Cell{groups[g].n, rule, groups[g].rep}});
  std::vector<std::vector<ResultRow>> out(cells.size());
  parallel_for(cells.size(), [&](std::size_t i) {
    const auto& [g, cell] = cells[i];
    const auto& grp = groups[g];
    if (!grp.error.empty()) {
      out[i].push_back({cfg.model, cfg.method, cell.n, cell.rule, n_schedule(cell.n, cell.rule), cell.rep,
                        cell_seed(cfg.master_seed, cfg.model, cfg.method, cell.n, cell.rule, cell.rep), "error",
                        std::numeric_limits<double>::quiet_NaN(), 0.0, 0, grp.error});
      return;
    }
    out[i] = run_cell(cfg, cell, grp.s_obs, grp.oracle ? &*grp.oracle : nullptr);
  }, static_cast<unsigned>(std::max<std::size_t>(1, cfg.workers)));
  for (auto& v : out) rows.insert(rows.end(), v.begin(), v.end());
  std::stable_sort(rows.begin(), rows.end(), row_less);
  return rows;
}

/// MA(2) study with the first summary of each observed dataset forced to
/// delta0; no override runs the plain experiment.
inline std::vector<ResultRow> incompatibility_study(ExperimentConfig cfg, std::optional<double> delta0) {
  if (cfg.model != "ma2") throw std::invalid_argument("incompatibility study requires the ma2 model");
  cfg.delta0_override = delta0;
  if (!delta0) return run_experiment(cfg);
  const double d0 = *delta0;
  return run_experiment(cfg, [d0](std::vector<double>& s) { s[0] = d0; });
}

/// Writes results.csv, timings.csv, coverage.csv, summary.csv and config.json
/// into dir.
inline void write_experiment(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::vector<ResultRow>& rows) {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    f << text;
  };
  put("results.csv", results_csv(rows));
  put("timings.csv", timings_csv(rows));
  put("coverage.csv", coverage_table_csv(rows));
  put("summary.csv", summary_csv(rows));
  nlohmann::json meta;
  meta["schema_version"] = kResultSchemaVersion;
  meta["config"] = to_json(cfg);
  meta["config_hash"] = hex64(config_hash(cfg));
  meta["rows"] = rows.size();
  meta["error_rows"] = std::count_if(rows.begin(), rows.end(), [](const ResultRow& r) { return r.metric == "error"; });
  save_json(meta, dir / "results.json");
}

}  // namespace sbi
