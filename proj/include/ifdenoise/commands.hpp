#pragma once

// The command-line subcommands as library calls. Each takes the flat config
// plus flag overrides and returns a process exit code; ConfigError escapes to
// the caller, which maps it to kExitConfig.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ifdenoise/bootstrap.hpp"
#include "ifdenoise/dataset.hpp"
#include "ifdenoise/experiment.hpp"
#include "ifdenoise/flat_config.hpp"
#include "ifdenoise/oracle.hpp"
#include "ifdenoise/random.hpp"

namespace ifdenoise::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitConfig = 2;

struct Options {
  FlatConfig config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
  std::optional<std::string> strategy;
};

namespace fs = std::filesystem;

namespace detail {

inline fs::path out_dir(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

template <class T>
T parsed(const FieldTable<T>& table, const FlatConfig& flat) {
  T cfg;
  apply_config(cfg, table, flat);
  return cfg;
}

inline void write(const fs::path& p, const std::string& text) { ifdenoise::detail::write_text(p, text); }

}  // namespace detail

// --- gen ----------------------------------------------------------------------

struct GenConfig {
  SyntheticSpec synthetic;
  std::size_t test_size = 500;  // per class; 0 skips test.jsonl
};

inline FieldTable<GenConfig> gen_fields() {
  FieldTable<GenConfig> t = {number_field("gen.test_size", &GenConfig::test_size)};
  nest(t, "synthetic", &GenConfig::synthetic, synthetic_fields());
  return t;
}

// <out>/data.jsonl and, unless gen.test_size = 0, a noise-free <out>/test.jsonl.
inline int gen(const Options& o, std::ostream& log = std::cerr) {
  GenConfig cfg = detail::parsed(gen_fields(), o.config);
  if (o.seed) cfg.synthetic.seed = *o.seed;
  cfg.synthetic.validate();
  const fs::path dir = detail::out_dir(o);
  const Dataset data = generate_synthetic(cfg.synthetic);
  save_dataset(data, (dir / "data.jsonl").string());
  if (cfg.test_size > 0) save_dataset(make_test_set(cfg.synthetic, cfg.test_size, cfg.synthetic.seed), (dir / "test.jsonl").string());
  log << "wrote " << data.size() << " examples to " << (dir / "data.jsonl").string() << "\n";
  return kExitOk;
}

// --- denoise ------------------------------------------------------------------

struct DenoiseConfig {
  std::string data_path;  // empty: generate from synthetic.*
  std::string seed_path;  // empty: draw data.seed_size verifiably clean examples
  std::size_t feature_dim = 10;
  std::size_t seed_size = 50;
  SyntheticSpec synthetic;
  BootstrapConfig bootstrap;
};

inline FieldTable<DenoiseConfig> denoise_fields() {
  using T = DenoiseConfig;
  FieldTable<T> t = {string_field("data.path", &T::data_path), string_field("data.seed_path", &T::seed_path),
                     number_field("data.feature_dim", &T::feature_dim),
                     number_field("data.seed_size", &T::seed_size)};
  nest(t, "synthetic", &T::synthetic, synthetic_fields());
  for (auto& f : bootstrap_fields()) {
    t.push_back({f.key, [set = f.set](T& c, const std::string& s) { set(c.bootstrap, s); },
                 [get = f.get](const T& c) { return get(c.bootstrap); }});
  }
  return t;
}

// Writes report.json, history.csv, scores.csv, recovered.json and model.json.
inline int denoise(const Options& o, std::ostream& log = std::cerr) {
  DenoiseConfig cfg = detail::parsed(denoise_fields(), o.config);
  if (o.seed) {
    cfg.bootstrap.seed = *o.seed;
    cfg.synthetic.seed = *o.seed;
  }
  if (o.strategy) cfg.bootstrap.selection.strategy = parse_strategy(*o.strategy);
  cfg.bootstrap.jobs = o.jobs;
  cfg.bootstrap.validate();

  Dataset c0, d0;
  if (!cfg.seed_path.empty()) {
    if (cfg.data_path.empty()) throw ConfigError("data.seed_path needs data.path");
    c0 = load_dataset(cfg.seed_path, cfg.feature_dim);
    d0 = load_dataset(cfg.data_path, cfg.feature_dim);
  } else {
    const Dataset full =
        cfg.data_path.empty() ? generate_synthetic(cfg.synthetic) : load_dataset(cfg.data_path, cfg.feature_dim);
    std::tie(c0, d0) = partition_seed(full, cfg.seed_size, cfg.bootstrap.seed);
  }
  const fs::path dir = detail::out_dir(o);
  RunReport r = run_bootstrap(c0, d0, cfg.bootstrap);

  detail::write(dir / "report.json", to_json(r).dump(2) + "\n");
  std::ostringstream hist, scores;
  write_history_csv(r, hist);
  write_score_csv(r.scores, scores);
  detail::write(dir / "history.csv", hist.str());
  detail::write(dir / "scores.csv", scores.str());
  detail::write(dir / "recovered.json", nlohmann::json(r.recovered).dump() + "\n");
  if (r.student.size() > 0) detail::write(dir / "model.json", to_json(r.student).dump(2) + "\n");

  log << to_string(cfg.bootstrap.selection.strategy) << ": |C0|=" << c0.size() << " |D0|=" << d0.size()
      << " recovered " << r.recovered.size() << " in " << r.history.size() << " iterations\n";
  if (!r.ok) {
    log << "run failed: " << r.error << "\n";
    return kExitFailed;
  }
  return kExitOk;
}

// --- validate-if / lemma-check -----------------------------------------------

struct OracleRunConfig {
  std::string data_path;  // empty: synthetic.*, noise free
  std::string test_path;
  std::size_t feature_dim = 10;
  SyntheticSpec synthetic;
  TrainConfig train;
  std::size_t test_points = 4;
  std::size_t probe = 0;
  int k_top = 40;
  int sign_k = 10;
  std::size_t lemma_points = 5;

  OracleRunConfig() {
    synthetic.n_pos = 250;
    synthetic.n_neg = 250;
  }
};

inline FieldTable<OracleRunConfig> oracle_fields() {
  using T = OracleRunConfig;
  FieldTable<T> t = {string_field("data.path", &T::data_path),
                     string_field("data.test_path", &T::test_path),
                     number_field("data.feature_dim", &T::feature_dim),
                     number_field("oracle.test_points", &T::test_points),
                     number_field("oracle.probe", &T::probe),
                     number_field("oracle.k_top", &T::k_top),
                     number_field("oracle.sign_k", &T::sign_k),
                     number_field("oracle.lemma_points", &T::lemma_points)};
  nest(t, "synthetic", &T::synthetic, synthetic_fields());
  nest(t, "train", &T::train, train_fields());
  return t;
}

namespace detail {

inline OracleRunConfig oracle_config(const Options& o) {
  OracleRunConfig cfg = parsed(oracle_fields(), o.config);
  if (o.seed) cfg.synthetic.seed = *o.seed;
  if (o.strategy) throw ConfigError("--strategy does not apply to the oracle commands");
  cfg.train.validate();
  if (cfg.data_path.empty()) cfg.synthetic.validate();
  return cfg;
}

inline Dataset oracle_train(const OracleRunConfig& cfg) {
  return cfg.data_path.empty() ? generate_synthetic(cfg.synthetic) : load_dataset(cfg.data_path, cfg.feature_dim);
}

// First `count` examples of the test file, or alternating classes from a
// fresh noise-free draw.
inline Dataset oracle_test_points(const OracleRunConfig& cfg) {
  if (cfg.test_points == 0) throw ConfigError("oracle.test_points must be positive");
  Dataset out(cfg.data_path.empty() ? cfg.synthetic.feature_dim : cfg.feature_dim, "test");
  if (!cfg.test_path.empty()) {
    const Dataset all = load_dataset(cfg.test_path, cfg.feature_dim);
    if (all.size() < cfg.test_points) throw ConfigError("data.test_path has fewer than oracle.test_points examples");
    for (std::size_t i = 0; i < cfg.test_points; ++i) out.add(all[i]);
    return out;
  }
  const std::size_t per = (cfg.test_points + 1) / 2;
  const Dataset all = make_test_set(cfg.synthetic, per, cfg.synthetic.seed);
  for (std::size_t i = 0; i < cfg.test_points; ++i) out.add(all[i % 2 ? per + i / 2 : i / 2]);
  return out;
}

}  // namespace detail

// oracle_report.json and scatter.csv.
inline int validate_if(const Options& o, std::ostream& log = std::cerr) {
  const OracleRunConfig cfg = detail::oracle_config(o);
  const Dataset train = detail::oracle_train(cfg);
  const Dataset tests = detail::oracle_test_points(cfg);
  const fs::path dir = detail::out_dir(o);
  OracleReport r = if_loo_correlation(train, tests, cfg.train, cfg.probe, cfg.k_top, o.jobs, cfg.sign_k);
  detail::write(dir / "oracle_report.json", to_json(r).dump(2) + "\n");
  std::ostringstream csv;
  write_scatter_csv(r, csv);
  detail::write(dir / "scatter.csv", csv.str());
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
  log << "pearson all=" << show(r.pearson_all) << " top" << r.k_top << "=" << show(r.pearson_topk)
      << " sign@" << r.sign_k << "=" << r.sign_agreement_topk << " over " << r.points.size() << " fits\n";
  return kExitOk;
}

// lemma.json: per-example diagnostics and the median relative error.
inline int lemma_check(const Options& o, std::ostream& log = std::cerr) {
  const OracleRunConfig cfg = detail::oracle_config(o);
  const Dataset train = detail::oracle_train(cfg);
  if (cfg.lemma_points == 0 || cfg.lemma_points > train.size())
    throw ConfigError("oracle.lemma_points must be in [1, training set size]");
  std::vector<std::size_t> idx(train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = make_rng(cfg.synthetic.seed, stream::kOracle);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cfg.lemma_points);

  std::vector<LemmaDiagnostics> diags(idx.size());
  parallel_for(idx.size(), o.jobs, [&](std::size_t i) { diags[i] = relabel_retrain_delta(train, train[idx[i]].id, cfg.train); });
  nlohmann::json arr = nlohmann::json::array();
  std::vector<double> errs;
  for (const auto& d : diags) {
    arr.push_back(to_json(d));
    if (!d.degenerate) errs.push_back(d.relative_error);
  }
  nlohmann::json j = {{"n", train.size()}, {"diagnostics", arr}};
  j["median_relative_error"] = errs.empty() ? nlohmann::json(nullptr) : nlohmann::json(median_of(errs));
  const fs::path dir = detail::out_dir(o);
  detail::write(dir / "lemma.json", j.dump(2) + "\n");
  log << "n=" << train.size() << " median relative error " << (errs.empty() ? std::string("n/a") : std::to_string(median_of(errs)))
      << " over " << errs.size() << " examples\n";
  return kExitOk;
}

// --- sweep / report -------------------------------------------------------------

inline int sweep(const Options& o, std::ostream& log = std::cerr) {
  ExperimentConfig cfg = experiment_config_from_flat(o.config);
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.strategy) cfg.strategies = {*o.strategy};
  if (!o.out.empty()) cfg.out_dir = o.out;
  cfg.jobs = o.jobs;
  ExperimentOutcome out = run_experiment(cfg);
  for (const auto& r : out.results) {
    if (!r.ok) log << "failed: " << r.cell.name() << ": " << r.error << "\n";
  }
  log << out.results.size() << " cells, " << out.failed << " failed; results in " << cfg.out_dir << "\n";
  return out.failed ? kExitFailed : kExitOk;
}

// Re-aggregates <out>/runs/*.json and prints summary.csv.
inline int report(const Options& o, std::ostream& stdout_ = std::cout) {
  if (o.out.empty()) throw ConfigError("--out is required");
  if (!o.config.empty()) throw ConfigError("report takes no config keys");
  const std::vector<CellResult> results = load_cell_results(o.out);
  if (results.empty()) throw Error("no run files under '" + (fs::path(o.out) / "runs").string() + "'");
  write_report(results, o.out);
  write_summary_csv(summarize(results), stdout_);
  for (const auto& r : results) {
    if (!r.ok) return kExitFailed;
  }
  return kExitOk;
}

}  // namespace ifdenoise::cli
