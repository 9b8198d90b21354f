// Command-line front end. Every subcommand starts from a JSON experiment
// config (--config) and applies flag overrides on top. Relative output paths
// are resolved under $SBI_OUTPUT_ROOT when it is set.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sbi/sbi.hpp"

namespace fs = std::filesystem;
using namespace sbi;

namespace {

fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("SBI_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& f : split_csv_line(s))
    if (!f.empty()) out.push_back(parse_double(f));
  return out;
}

struct Common {
  std::string config_file;
  std::optional<std::string> model, summary, method, out, theta, s_obs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> draws, k, epochs, workers;
  std::vector<std::size_t> n_values;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "JSON experiment config")->check(CLI::ExistingFile);
    app->add_option("--model", model, "gk | ma2 | stereo | toy");
    app->add_option("--summary", summary, "summary statistic set");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--out", out, "output path");
    app->add_option("--draws", draws, "posterior draws");
    app->add_option("--k", k, "mixture components");
    app->add_option("--epochs", epochs, "maximum training epochs");
    app->add_option("--workers", workers, "concurrent cells");
    app->add_option("--n", n_values, "sample size(s)");
    app->add_option("--theta", theta, "parameter vector, comma separated");
  }

  [[nodiscard]] ExperimentConfig config() const {
    ExperimentConfig c;
    if (!config_file.empty()) c = experiment_from_json(load_json(config_file));
    if (model) {
      c.model = *model;
      if (!summary) c.summary.clear();
      if (!theta) c.truth.clear();
    }
    if (summary) c.summary = *summary;
    if (method) c.method = *method;
    if (seed) c.master_seed = *seed;
    if (out) c.output = *out;
    if (draws) c.draws = *draws;
    if (k) c.fit.k = *k;
    if (epochs) c.fit.max_epochs = *epochs;
    if (workers) c.workers = *workers;
    if (!n_values.empty()) c.n_values = n_values;
    if (theta) c.truth = parse_list(*theta);
    return c;
  }

  /// Observed summary from --s-obs, else simulated at the configured truth.
  [[nodiscard]] std::vector<double> observed(const ExperimentConfig& c, const ModelSpec& spec) const {
    std::vector<double> s = s_obs ? parse_list(*s_obs) : observed_summary(spec, data_seed(c.master_seed, c.model, spec.n, 0));
    check_observed(spec, s);
    return s;
  }
};

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

void emit_draws(const DrawSet& d, const Common& o, const ExperimentConfig& c, const char* fallback) {
  const fs::path p = output_path(o.out ? *o.out : fallback);
  DrawSet copy = d;
  copy.config_hash = config_hash(c);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_drawset(copy, p);
  std::cout << "wrote " << copy.size() << " draws to " << p.string() << '\n';
}

int report_rows(const std::vector<ResultRow>& rows, const fs::path& dir) {
  std::size_t errors = 0;
  for (const auto& r : rows)
    if (r.metric == "error") {
      ++errors;
      std::cerr << "error: n=" << r.n << " rule=" << r.rule << " rep=" << r.replication << ": " << r.note << '\n';
    }
  std::cout << rows.size() << " rows (" << errors << " errors) in " << dir.string() << '\n';
  return errors == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation-based inference experiments"};
  app.require_subcommand(1);
  int code = 0;

  // simulate
  Common sim;
  std::size_t sim_count = 1;
  bool sim_prior = false;
  auto* simulate = app.add_subcommand("simulate", "simulate summary vectors");
  sim.add(simulate);
  simulate->add_option("--count", sim_count, "number of datasets");
  simulate->add_flag("--prior", sim_prior, "draw parameters from the prior");
  simulate->callback([&] {
    const auto c = sim.config();
    const auto spec = c.spec_for(c.n_values.front());
    Stream rng(c.master_seed);
    std::ostringstream out;
    for (std::size_t i = 0; i < spec.param_dim(); ++i) out << spec.names[i] << ',';
    for (std::size_t i = 0; i < spec.summary_dim(); ++i) out << 's' << i + 1 << (i + 1 < spec.summary_dim() ? "," : "\n");
    for (std::size_t r = 0; r < sim_count; ++r) {
      Stream sr = rng.split(r);
      const auto theta = sim_prior ? prior_sample(spec, sr).values : spec.truth;
      const auto s = simulate_summaries(spec, theta, sr).values;
      for (double t : theta) out << format_double(t) << ',';
      for (std::size_t i = 0; i < s.size(); ++i) out << format_double(s[i]) << (i + 1 < s.size() ? "," : "\n");
    }
    if (sim.out) write_text(output_path(*sim.out), out.str());
    else std::cout << out.str();
  });

  // fit-npe / fit-nle
  Common npe_o, nle_o;
  std::size_t npe_sims = 10000, nle_sims = 10000;
  auto* fit_npe = app.add_subcommand("fit-npe", "neural posterior estimation");
  npe_o.add(fit_npe);
  fit_npe->add_option("--sims", npe_sims, "training simulations");
  fit_npe->add_option("--s-obs", npe_o.s_obs, "observed summary, comma separated");
  fit_npe->callback([&] {
    const auto c = npe_o.config();
    const auto spec = c.spec_for(c.n_values.front());
    const auto s = npe_o.observed(c, spec);
    NPEConfig cfg{c.fit, c.draws, c.max_oversample};
    auto r = run_npe(spec, s, npe_sims, cfg, Stream(c.master_seed));
    const fs::path p = output_path(npe_o.out ? *npe_o.out : "npe_draws.csv");
    emit_draws(r.draws, npe_o, c, "npe_draws.csv");
    save_json(to_json(r.model), fs::path(p).replace_extension(".model.json"));
    std::cout << "leaked fraction " << format_double(r.draws.leaked_fraction) << '\n';
  });

  auto* fit_nle = app.add_subcommand("fit-nle", "neural likelihood estimation with MCMC");
  nle_o.add(fit_nle);
  fit_nle->add_option("--sims", nle_sims, "training simulations");
  fit_nle->add_option("--s-obs", nle_o.s_obs, "observed summary, comma separated");
  fit_nle->callback([&] {
    const auto c = nle_o.config();
    const auto spec = c.spec_for(c.n_values.front());
    const auto s = nle_o.observed(c, spec);
    NLEConfig cfg{c.fit, c.mcmc};
    auto r = run_nle(spec, s, nle_sims, cfg, Stream(c.master_seed));
    const fs::path p = output_path(nle_o.out ? *nle_o.out : "nle_draws.csv");
    emit_draws(r.draws, nle_o, c, "nle_draws.csv");
    save_json(to_json(r.model), fs::path(p).replace_extension(".model.json"));
    std::cout << "acceptance rate " << format_double(r.acceptance_rate) << '\n';
  });

  // abc
  Common abc_o;
  std::optional<std::size_t> abc_particles;
  std::optional<std::uint64_t> abc_budget;
  auto* abc = app.add_subcommand("abc", "ABC sequential Monte Carlo");
  abc_o.add(abc);
  abc->add_option("--particles", abc_particles, "population size");
  abc->add_option("--max-sims", abc_budget, "simulation budget");
  abc->add_option("--s-obs", abc_o.s_obs, "observed summary, comma separated");
  abc->callback([&] {
    const auto c = abc_o.config();
    const auto spec = c.spec_for(c.n_values.front());
    const auto s = abc_o.observed(c, spec);
    ABCSMCConfig cfg = c.abc;
    if (abc_particles) cfg.particles = *abc_particles;
    if (abc_budget) cfg.max_simulations = *abc_budget;
    const auto r = abc_smc(spec, s, cfg, Stream(c.master_seed));
    emit_draws(r.draws, abc_o, c, "abc_draws.csv");
    std::cout << r.rounds << " rounds, " << r.total_simulations << " simulations, final tolerance "
              << format_double(r.tolerances.back()) << '\n';
  });

  // oracle-sample
  Common or_o;
  bool plug_in = false;
  auto* oracle = app.add_subcommand("oracle-sample", "sample the Gaussian-summary oracle posterior");
  or_o.add(oracle);
  oracle->add_option("--s-obs", or_o.s_obs, "observed summary, comma separated");
  oracle->add_flag("--plug-in", plug_in, "fix the summary covariance at the true parameter");
  oracle->callback([&] {
    auto c = or_o.config();
    if (plug_in) c.oracle.plug_in_covariance = true;
    const auto spec = c.spec_for(c.n_values.front());
    const auto s = or_o.observed(c, spec);
    const auto d = oracle_draws(spec, s, c, c.draws, Stream(c.master_seed).split("oracle"));
    emit_draws(d, or_o, c, "oracle_draws.csv");
  });

  // kld
  std::string kld_p, kld_q;
  std::size_t kld_k = 1;
  auto* kld = app.add_subcommand("kld", "nearest-neighbour KL divergence KL(P||Q) between two draw files");
  kld->add_option("p", kld_p, "draws from P")->required()->check(CLI::ExistingFile);
  kld->add_option("q", kld_q, "draws from Q")->required()->check(CLI::ExistingFile);
  kld->add_option("--neighbors", kld_k, "neighbour index k");
  kld->callback([&] {
    const auto e = knn_kld(read_drawset(kld_p), read_drawset(kld_q), kld_k);
    std::cout << format_double(e.value) << '\n';
  });

  // experiment
  Common ex_o;
  std::vector<std::string> ex_rules;
  std::optional<std::size_t> ex_reps;
  std::vector<std::string> ex_metrics;
  bool full_scale = false;
  auto* experiment = app.add_subcommand("experiment", "run a replication grid");
  ex_o.add(experiment);
  experiment->add_option("--method", ex_o.method, "npe | nle | abc-smc | oracle");
  experiment->add_option("--rules", ex_rules, "N-rules: n nlogn n1.5 n2");
  experiment->add_option("--reps", ex_reps, "replications per cell");
  experiment->add_option("--metrics", ex_metrics, "coverage bias kld gaussianity");
  experiment->add_flag("--full-scale", full_scale, "100 replications and n up to 5000");
  experiment->callback([&] {
    auto c = ex_o.config();
    if (!ex_rules.empty()) c.rules = ex_rules;
    if (ex_reps) c.replications = *ex_reps;
    if (!ex_metrics.empty()) c.metrics = ex_metrics;
    if (full_scale) c.apply_full_scale();
    const auto rows = run_experiment(c);
    const fs::path dir = output_path(c.output);
    write_experiment(dir, c, rows);
    code = report_rows(rows, dir);
  });

  // coverage-table
  std::string cov_in;
  std::optional<std::string> cov_out;
  auto* cov = app.add_subcommand("coverage-table", "rebuild the coverage table from a results file");
  cov->add_option("results", cov_in, "results.csv")->required()->check(CLI::ExistingFile);
  cov->add_option("--out", cov_out, "output csv (default stdout)");
  cov->callback([&] {
    std::ifstream in(cov_in);
    const auto table = coverage_table_csv(parse_results_csv(in));
    if (cov_out) write_text(output_path(*cov_out), table);
    else std::cout << table;
  });

  // incompat
  Common in_o;
  std::vector<double> deltas;
  std::optional<std::size_t> in_reps;
  std::vector<std::string> in_rules;
  auto* incompat = app.add_subcommand("incompat", "MA(2) study with the lag-0 autocovariance forced to delta0");
  in_o.add(incompat);
  incompat->add_option("--method", in_o.method, "npe | nle | abc-smc");
  incompat->add_option("--delta0", deltas, "forced lag-0 values; omit for the unmodified data");
  incompat->add_option("--reps", in_reps, "replications per cell");
  incompat->add_option("--rules", in_rules, "N-rules: n nlogn n1.5 n2");
  incompat->callback([&] {
    auto c = in_o.config();
    if (!in_o.model) c.model = "ma2";
    if (c.truth.empty()) c.truth = {0.0, 0.0};  // b0(theta) = 1 sits just above delta0 = 0.99
    if (in_reps) c.replications = *in_reps;
    if (!in_rules.empty()) c.rules = in_rules;
    const fs::path root = output_path(c.output);
    std::vector<std::optional<double>> runs;
    if (deltas.empty()) runs.push_back(std::nullopt);
    for (double d : deltas) runs.emplace_back(d);
    for (const auto& d : runs) {
      const auto rows = incompatibility_study(c, d);
      ExperimentConfig written = c;
      written.delta0_override = d;
      char tag[64] = "observed";
      if (d) std::snprintf(tag, sizeof tag, "delta0_%g", *d);
      const fs::path dir = root / tag;
      write_experiment(dir, written, rows);
      code = std::max(code, report_rows(rows, dir));
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return code;
}
