#pragma once

// Downstream evaluation and the sweep driver: strategy x noise ratio x seed
// size x seed cells, each written to its own files under the output directory.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ifdenoise/bootstrap.hpp"
#include "ifdenoise/dataset.hpp"
#include "ifdenoise/error.hpp"
#include "ifdenoise/flat_config.hpp"
#include "ifdenoise/metrics.hpp"
#include "ifdenoise/model.hpp"
#include "ifdenoise/parallel.hpp"
#include "ifdenoise/random.hpp"

namespace ifdenoise {

struct DownstreamResult {
  Metrics metrics;
  bool degenerate = false;  // empty D^r: majority-class predictor, nothing predicted positive
};

inline Metrics prediction_metrics(const ModelParams& p, const Dataset& test) {
  std::size_t predicted = 0, relevant = 0, hits = 0;
  for (const auto& z : test) {
    if (!z.true_label) throw FormatError("test example '" + z.id + "' has no true_label");
    const bool pos = predict_proba(p, z.features).second > 0.5;
    predicted += pos;
    relevant += *z.true_label == 1;
    hits += pos && *z.true_label == 1;
  }
  return make_metrics(predicted, relevant, hits);
}

// Fits the classifier on the D^r examples plus every negative of `dirty` and
// scores positive-class prediction on `test`.
inline DownstreamResult downstream_eval(const IdSet& recovered, const Dataset& dirty, const Dataset& test,
                                        const TrainConfig& cfg) {
  std::size_t relevant = 0;
  for (const auto& z : test) {
    if (!z.true_label) throw FormatError("test example '" + z.id + "' has no true_label");
    relevant += *z.true_label == 1;
  }
  for (const auto& id : recovered) {
    if (!dirty.contains(id)) throw Error("recovered id '" + id + "' is not in the dirty set");
  }
  if (recovered.empty()) return {make_metrics(0, relevant, 0), true};

  Dataset train(dirty.feature_dim(), dirty.name() + ":downstream");
  for (const auto& z : dirty) {
    if (z.label == 0 || recovered.count(z.id)) train.add(z);
  }
  return {prediction_metrics(fit(train, cfg).params, test), false};
}

// Same classifier trained on the dirty set as labelled.
inline Metrics raw_dirty_eval(const Dataset& dirty, const Dataset& test, const TrainConfig& cfg) {
  return prediction_metrics(fit(dirty, cfg).params, test);
}

// Noise-free held-out set from the same generator, ids prefixed "t".
inline Dataset make_test_set(const SyntheticSpec& base, std::size_t per_class, std::uint64_t seed) {
  SyntheticSpec spec = base;
  spec.n_pos = spec.n_neg = per_class;
  spec.noise_ratio = 0.0;
  spec.seed = derive_seed(seed, stream::kTestSet);
  Dataset raw = generate_synthetic(spec);
  Dataset out(raw.feature_dim(), base.name + ":test");
  for (Example e : raw) {
    e.id = "t" + e.id;
    out.add(std::move(e));
  }
  return out;
}

// --- configuration ----------------------------------------------------------

struct ExperimentConfig {
  std::string data_path;  // empty: synthetic data
  std::string test_path;
  std::size_t feature_dim = 10;  // for data_path / test_path
  SyntheticSpec synthetic;
  std::vector<std::string> strategies = {"cr2"};
  std::vector<double> noise_ratios = {0.5};
  std::vector<std::size_t> seed_sizes = {50};
  std::vector<std::uint64_t> seeds = {0};
  std::size_t test_size = 500;  // per class
  BootstrapConfig bootstrap;
  std::string out_dir = "out";
  int jobs = 1;

  void validate() const {
    if (strategies.empty()) throw ConfigError("experiment.strategies is empty");
    for (const auto& s : strategies) parse_strategy(s);
    if (noise_ratios.empty() || seed_sizes.empty() || seeds.empty())
      throw ConfigError("experiment sweep axes must be nonempty");
    for (double r : noise_ratios) {
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("experiment.noise_ratios must lie in [0, 1)");
    }
    for (std::size_t m : seed_sizes) {
      if (m == 0) throw ConfigError("experiment.seed_sizes must be positive");
    }
    if (data_path.empty()) {
      synthetic.validate();
      if (test_size == 0) throw ConfigError("experiment.test_size must be positive");
    } else {
      if (test_path.empty()) throw ConfigError("data.path needs data.test_path");
      if (noise_ratios.size() != 1) throw ConfigError("a file dataset has one noise level: set one noise ratio");
      if (feature_dim == 0) throw ConfigError("data.feature_dim must be positive");
    }
    if (out_dir.empty()) throw ConfigError("experiment.out_dir is empty");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    bootstrap.validate();
  }
};

inline FieldTable<ExperimentConfig> experiment_fields() {
  using T = ExperimentConfig;
  FieldTable<T> t = {string_field("data.path", &T::data_path),
                     string_field("data.test_path", &T::test_path),
                     number_field("data.feature_dim", &T::feature_dim),
                     list_field("experiment.strategies", &T::strategies),
                     list_field("experiment.noise_ratios", &T::noise_ratios),
                     list_field("experiment.seed_sizes", &T::seed_sizes),
                     list_field("experiment.seeds", &T::seeds),
                     number_field("experiment.test_size", &T::test_size),
                     string_field("experiment.out_dir", &T::out_dir)};
  nest(t, "synthetic", &T::synthetic, synthetic_fields());
  for (auto& f : bootstrap_fields()) {
    t.push_back({f.key, [set = f.set](T& o, const std::string& s) { set(o.bootstrap, s); },
                 [get = f.get](const T& o) { return get(o.bootstrap); }});
  }
  return t;
}

inline ExperimentConfig experiment_config_from_flat(const FlatConfig& flat) {
  ExperimentConfig cfg;
  apply_config(cfg, experiment_fields(), flat);
  return cfg;
}

// --- cells ------------------------------------------------------------------

struct Cell {
  std::string strategy;
  double noise_ratio = 0.0;
  std::size_t seed_size = 0;
  std::uint64_t seed = 0;

  std::string name() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", noise_ratio);
    return strategy + "_rho" + buf + "_m" + std::to_string(seed_size) + "_s" + std::to_string(seed);
  }
  std::string group() const { return name().substr(0, name().rfind("_s")); }
};

inline std::vector<Cell> expand_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> out;
  for (const auto& s : cfg.strategies)
    for (double r : cfg.noise_ratios)
      for (std::size_t m : cfg.seed_sizes)
        for (std::uint64_t seed : cfg.seeds) out.push_back({s, r, m, seed});
  return out;
}

struct CellResult {
  Cell cell;
  bool ok = true;
  std::string error;
  RunReport run;
  std::optional<Metrics> selection;  // final D^r vs truly clean positives of D_0
  std::optional<DownstreamResult> downstream;
  std::optional<Metrics> baseline;  // raw dirty set
  int peak_iteration = -1;          // best selection F1 along the history
  double peak_f1 = 0.0;
};

struct CellData {
  Dataset c0, d0, test;
};

inline CellData cell_data(const ExperimentConfig& cfg, const Cell& cell) {
  Dataset full, test;
  if (cfg.data_path.empty()) {
    SyntheticSpec spec = cfg.synthetic;
    spec.noise_ratio = cell.noise_ratio;
    spec.seed = cell.seed;
    full = generate_synthetic(spec);
    test = make_test_set(cfg.synthetic, cfg.test_size, cell.seed);
  } else {
    full = load_dataset(cfg.data_path, cfg.feature_dim);
    test = load_dataset(cfg.test_path, cfg.feature_dim);
  }
  auto [c0, d0] = partition_seed(full, cell.seed_size, cell.seed);
  return {std::move(c0), std::move(d0), std::move(test)};
}

inline CellResult run_cell(const ExperimentConfig& cfg, const Cell& cell) {
  CellResult r;
  r.cell = cell;
  try {
    CellData data = cell_data(cfg, cell);
    BootstrapConfig bc = cfg.bootstrap;
    bc.selection.strategy = parse_strategy(cell.strategy);
    bc.seed = cell.seed;
    bc.jobs = 1;
    r.run = run_bootstrap(data.c0, data.d0, bc);
    if (!r.run.ok) {
      r.ok = false;
      r.error = r.run.error;
      return r;
    }
    for (const auto& h : r.run.history) {
      if (h.recovered && h.recovered->f1 > r.peak_f1) {
        r.peak_f1 = h.recovered->f1;
        r.peak_iteration = h.iteration;
      }
    }
    if (detail::has_truth(data.d0)) r.selection = selection_metrics(r.run.recovered, data.d0);
    r.downstream = downstream_eval(r.run.recovered, data.d0, data.test, bc.train);
    r.baseline = raw_dirty_eval(data.d0, data.test, bc.train);
  } catch (const Error& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

// --- serialization ----------------------------------------------------------

inline nlohmann::json to_json(const Cell& c) {
  return {{"strategy", c.strategy}, {"noise_ratio", c.noise_ratio}, {"seed_size", c.seed_size}, {"seed", c.seed}};
}

inline Cell cell_from_json(const nlohmann::json& j) {
  return {j.at("strategy").get<std::string>(), j.at("noise_ratio").get<double>(),
          j.at("seed_size").get<std::size_t>(), j.at("seed").get<std::uint64_t>()};
}

// Deterministic: no wall-clock fields.
inline nlohmann::json to_json(const CellResult& r) {
  auto opt = [](const std::optional<Metrics>& m) { return m ? detail::metrics_json(*m) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"cell", to_json(r.cell)},
                      {"status", r.ok ? "ok" : "failed"},
                      {"error", r.error},
                      {"selection", opt(r.selection)},
                      {"baseline", opt(r.baseline)},
                      {"peak_iteration", r.peak_iteration},
                      {"peak_f1", r.peak_f1},
                      {"run", to_json(r.run, false)}};
  if (r.downstream) {
    j["downstream"] = detail::metrics_json(r.downstream->metrics);
    j["downstream"]["degenerate"] = r.downstream->degenerate;
  } else {
    j["downstream"] = nullptr;
  }
  return j;
}

inline CellResult cell_result_from_json(const nlohmann::json& j) {
  try {
    auto opt = [](const nlohmann::json& v) {
      return v.is_null() ? std::optional<Metrics>() : std::optional<Metrics>(detail::metrics_from_json(v));
    };
    CellResult r;
    r.cell = cell_from_json(j.at("cell"));
    r.ok = j.at("status").get<std::string>() == "ok";
    r.error = j.at("error").get<std::string>();
    r.selection = opt(j.at("selection"));
    r.baseline = opt(j.at("baseline"));
    r.peak_iteration = j.at("peak_iteration").get<int>();
    r.peak_f1 = j.at("peak_f1").get<double>();
    r.run = run_report_from_json(j.at("run"));
    if (!j.at("downstream").is_null()) {
      r.downstream = DownstreamResult{detail::metrics_from_json(j.at("downstream")),
                                      j.at("downstream").at("degenerate").get<bool>()};
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("cell result: ") + e.what());
  }
}

// --- aggregation ------------------------------------------------------------

struct SummaryRow {
  std::string strategy;
  double noise_ratio = 0.0;
  std::size_t seed_size = 0;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double downstream_f1_mean = 0.0;
  double downstream_f1_median = 0.0;
  double baseline_f1_mean = 0.0;
  double selection_precision_mean = 0.0;
  double selection_recall_mean = 0.0;
  double selection_f1_mean = 0.0;
  double recovered_mean = 0.0;

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

// Mean / median over the successful seeds of each (strategy, rho, m) group,
// rows sorted by that key.
inline std::vector<SummaryRow> summarize(const std::vector<CellResult>& results) {
  std::vector<CellResult const*> sorted;
  for (const auto& c : results) sorted.push_back(&c);
  std::stable_sort(sorted.begin(), sorted.end(), [](const CellResult* a, const CellResult* b) {
    return std::tie(a->cell.strategy, a->cell.noise_ratio, a->cell.seed_size, a->cell.seed) <
           std::tie(b->cell.strategy, b->cell.noise_ratio, b->cell.seed_size, b->cell.seed);
  });
  std::vector<SummaryRow> rows;
  std::map<std::tuple<std::string, double, std::size_t>, std::size_t> index;
  struct Acc {
    std::vector<double> f1, base, p, r, sf1, size;
  };
  std::vector<Acc> acc;
  for (const CellResult* cp : sorted) {
    const CellResult& c = *cp;
    const auto key = std::make_tuple(c.cell.strategy, c.cell.noise_ratio, c.cell.seed_size);
    auto [it, fresh] = index.emplace(key, rows.size());
    if (fresh) {
      SummaryRow row;
      row.strategy = c.cell.strategy;
      row.noise_ratio = c.cell.noise_ratio;
      row.seed_size = c.cell.seed_size;
      rows.push_back(row);
      acc.emplace_back();
    }
    SummaryRow& row = rows[it->second];
    Acc& a = acc[it->second];
    ++row.runs;
    if (!c.ok) {
      ++row.failed;
      continue;
    }
    if (c.downstream) a.f1.push_back(c.downstream->metrics.f1);
    if (c.baseline) a.base.push_back(c.baseline->f1);
    if (c.selection) {
      a.p.push_back(c.selection->precision);
      a.r.push_back(c.selection->recall);
      a.sf1.push_back(c.selection->f1);
    }
    a.size.push_back(static_cast<double>(c.run.recovered.size()));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].downstream_f1_mean = detail::mean_of(acc[i].f1);
    rows[i].downstream_f1_median = median_of(acc[i].f1);
    rows[i].baseline_f1_mean = detail::mean_of(acc[i].base);
    rows[i].selection_precision_mean = detail::mean_of(acc[i].p);
    rows[i].selection_recall_mean = detail::mean_of(acc[i].r);
    rows[i].selection_f1_mean = detail::mean_of(acc[i].sf1);
    rows[i].recovered_mean = detail::mean_of(acc[i].size);
  }
  return rows;
}

inline nlohmann::json to_json(const SummaryRow& r) {
  return {{"strategy", r.strategy},
          {"noise_ratio", r.noise_ratio},
          {"seed_size", r.seed_size},
          {"runs", r.runs},
          {"failed", r.failed},
          {"downstream_f1_mean", r.downstream_f1_mean},
          {"downstream_f1_median", r.downstream_f1_median},
          {"baseline_f1_mean", r.baseline_f1_mean},
          {"selection_precision_mean", r.selection_precision_mean},
          {"selection_recall_mean", r.selection_recall_mean},
          {"selection_f1_mean", r.selection_f1_mean},
          {"recovered_mean", r.recovered_mean}};
}

inline nlohmann::json summary_json(const std::vector<CellResult>& results) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : summarize(results)) rows.push_back(to_json(r));
  std::map<std::string, std::string> errors;
  for (const auto& c : results) {
    if (!c.ok) errors[c.cell.name()] = c.error;
  }
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& [name, error] : errors) failed.push_back({{"cell", name}, {"error", error}});
  return {{"cells", results.size()}, {"failed", failed}, {"rows", rows}};
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& out) {
  out << "strategy,noise_ratio,seed_size,runs,failed,downstream_f1_mean,downstream_f1_median,"
         "baseline_f1_mean,selection_precision,selection_recall,selection_f1,recovered\n";
  for (const auto& r : rows) {
    out << r.strategy << ',' << detail::short_double(r.noise_ratio) << ',' << r.seed_size << ',' << r.runs
        << ',' << r.failed << ',' << detail::short_double(r.downstream_f1_mean) << ','
        << detail::short_double(r.downstream_f1_median) << ',' << detail::short_double(r.baseline_f1_mean)
        << ',' << detail::short_double(r.selection_precision_mean) << ','
        << detail::short_double(r.selection_recall_mean) << ','
        << detail::short_double(r.selection_f1_mean) << ',' << detail::short_double(r.recovered_mean)
        << '\n';
  }
}

// Per-iteration selection metrics averaged over the seeds of one group. An
// empty D^r counts as P = R = F1 = 0.
inline void write_curve_csv(const std::vector<const CellResult*>& group, std::ostream& out) {
  std::size_t len = 0;
  for (const auto* c : group) len = std::max(len, c->run.history.size());
  out << "iteration,seeds,clean_size,precision,recall,f1\n";
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<double> size, p, r, f;
    for (const auto* c : group) {
      if (t >= c->run.history.size()) continue;
      const auto& h = c->run.history[t];
      size.push_back(static_cast<double>(h.clean_size));
      if (h.recovered) {
        p.push_back(h.recovered->precision);
        r.push_back(h.recovered->recall);
        f.push_back(h.recovered->f1);
      }
    }
    out << t << ',' << size.size() << ',' << detail::short_double(detail::mean_of(size)) << ',';
    if (p.empty()) {
      out << ",,\n";
    } else {
      out << detail::short_double(detail::mean_of(p)) << ',' << detail::short_double(detail::mean_of(r))
          << ',' << detail::short_double(detail::mean_of(f)) << '\n';
    }
  }
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace detail

// summary.json, summary.csv and curves/<group>.csv from a set of cell results.
inline void write_report(const std::vector<CellResult>& results, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "curves");
  detail::write_text(dir / "summary.json", summary_json(results).dump(2) + "\n");
  std::ostringstream csv;
  write_summary_csv(summarize(results), csv);
  detail::write_text(dir / "summary.csv", csv.str());

  std::map<std::string, std::vector<const CellResult*>> groups;
  for (const auto& c : results) {
    if (c.ok) groups[c.cell.group()].push_back(&c);
  }
  for (const auto& [name, group] : groups) {
    std::ostringstream curve;
    write_curve_csv(group, curve);
    detail::write_text(dir / "curves" / (name + ".csv"), curve.str());
  }
}

// Reads every runs/*.json under `dir`, in name order.
inline std::vector<CellResult> load_cell_results(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir / "runs", ec)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  if (ec) throw IoError("cannot read '" + (dir / "runs").string() + "'");
  std::sort(files.begin(), files.end());
  std::vector<CellResult> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(f.string() + ": " + e.what());
    }
    out.push_back(cell_result_from_json(j));
  }
  return out;
}

struct ExperimentOutcome {
  std::vector<CellResult> results;
  std::size_t failed = 0;
};

// Runs every cell (up to cfg.jobs at once), writes runs/<cell>.json and
// runs/<cell>.history.csv per cell, then the aggregate report.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::filesystem::path dir = cfg.out_dir;
  std::filesystem::create_directories(dir / "runs");
  {
    std::ostringstream echo;
    write_flat_config(dump_config(cfg, experiment_fields()), echo);
    detail::write_text(dir / "config.txt", echo.str());
  }
  const std::vector<Cell> cells = expand_cells(cfg);
  ExperimentOutcome out;
  out.results.resize(cells.size());
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t i) {
    CellResult r = run_cell(cfg, cells[i]);
    const std::string name = cells[i].name();
    detail::write_text(dir / "runs" / (name + ".json"), to_json(r).dump(2) + "\n");
    std::ostringstream hist;
    write_history_csv(r.run, hist);
    detail::write_text(dir / "runs" / (name + ".history.csv"), hist.str());
    out.results[i] = std::move(r);
  });
  for (const auto& r : out.results) out.failed += !r.ok;
  write_report(out.results, dir);
  return out;
}

}  // namespace ifdenoise
