#pragma once

#include <chrono>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ifdenoise/dataset.hpp"
#include "ifdenoise/error.hpp"
#include "ifdenoise/flat_config.hpp"
#include "ifdenoise/influence.hpp"
#include "ifdenoise/metrics.hpp"
#include "ifdenoise/model.hpp"
#include "ifdenoise/random.hpp"
#include "ifdenoise/selection.hpp"

namespace ifdenoise {

struct BootstrapConfig {
  int t_max = 20;
  int sample_size = 200;
  SelectionConfig selection;
  ConsistencyConfig consistency;
  TrainConfig train;
  SolverConfig solver;
  std::uint64_t seed = 0;
  int jobs = 1;  // not part of the config echo: results do not depend on it

  void validate() const {
    if (t_max < 0) throw ConfigError("bootstrap.t_max must be >= 0");
    if (sample_size < 1) throw ConfigError("bootstrap.sample_size must be >= 1");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    selection.validate();
    consistency.validate();
    train.validate();
    solver.lissa.validate();
  }
};

inline FieldTable<SelectionConfig> selection_fields() {
  using T = SelectionConfig;
  return {number_field("relaxation", &T::relaxation),
          number_field("k", &T::k),
          number_field("cap_fraction", &T::cap_fraction),
          {"strategy", [](T& t, const std::string& s) { t.strategy = parse_strategy(s); },
           [](const T& t) { return to_string(t.strategy); }}};
}

inline FieldTable<BootstrapConfig> bootstrap_fields() {
  using T = BootstrapConfig;
  FieldTable<T> t = {number_field("bootstrap.t_max", &T::t_max),
                     number_field("bootstrap.sample_size", &T::sample_size),
                     number_field("bootstrap.seed", &T::seed)};
  nest(t, "selection", &T::selection, selection_fields());
  nest(t, "consistency", &T::consistency, consistency_fields());
  nest(t, "train", &T::train, train_fields());
  nest(t, "solver", &T::solver, solver_fields());
  return t;
}

struct PartitionState {
  Dataset clean;
  Dataset dirty;
  VoteLedger ledger;
  ModelParams student;
  ModelParams teacher;
  int iteration = 0;
};

struct IterationRecord {
  int iteration = 0;
  std::size_t clean_size = 0;  // |C_t| before the update
  std::size_t dirty_size = 0;
  IdSet candidates;  // capped per-iteration selection
  IdSet promoted;    // passed the vote this iteration
  std::optional<Metrics> recovered;        // cumulative D^r vs truly clean positives of D_0
  std::optional<double> admission_noise;   // fraction of `promoted` with true_label 0
  bool fit_converged = true;
  double seconds = 0.0;
};

struct RunReport {
  IdSet recovered;  // D^r
  std::vector<IterationRecord> history;
  std::vector<ScoreRecord> scores;
  FlatConfig config;
  bool ok = true;
  std::string error;
  ModelParams student;  // last fitted student; not serialized with the report
};

inline std::string base_id(const std::string& sampled_id) {
  return sampled_id.substr(0, sampled_id.rfind('#'));
}

// `size` uniform draws with replacement. Draw i is renamed `<id>#<i>` so the
// sample is a valid Dataset.
inline Dataset sample_clean(const Dataset& clean, int size, std::uint64_t seed, int iteration) {
  if (clean.empty()) throw ConfigError("sample_clean: clean set is empty");
  if (size < 1) throw ConfigError("sample_clean: size must be >= 1");
  Rng rng = make_rng(seed, stream::kIteration + static_cast<std::uint64_t>(iteration));
  std::uniform_int_distribution<std::size_t> pick(0, clean.size() - 1);
  Dataset out(clean.feature_dim(), clean.name() + "~");
  for (int i = 0; i < size; ++i) {
    Example e = clean[pick(rng)];
    e.id += "#" + std::to_string(i);
    out.add(std::move(e));
  }
  return out;
}

namespace detail {

inline bool has_truth(const Dataset& d) {
  for (const auto& z : d) {
    if (!z.true_label) return false;
  }
  return true;
}

inline PartitionState initial_state(const Dataset& c0, const Dataset& d0, const BootstrapConfig& cfg) {
  if (c0.empty()) throw ConfigError("bootstrap: seed set C0 is empty");
  if (c0.feature_dim() != d0.feature_dim())
    throw DimensionError("bootstrap: C0 and D0 feature dimensions differ");
  for (const auto& z : d0) {
    if (c0.contains(z.id)) throw ConfigError("bootstrap: '" + z.id + "' is in both C0 and D0");
  }
  PartitionState s{c0, d0, {}, initial_params(c0, cfg.train), {}, 0};
  s.teacher = s.student;
  return s;
}

}  // namespace detail

// One pass of sample -> fit -> score -> select -> vote -> update. Scores are
// appended to `scores_out`.
inline IterationRecord bootstrap_step(PartitionState& s, const Dataset& c0, const Dataset& d0,
                                      const BootstrapConfig& cfg,
                                      std::vector<ScoreRecord>* scores_out = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  const int t = s.iteration;
  const Strategy strategy = cfg.selection.strategy;
  IterationRecord rec;
  rec.iteration = t;
  rec.clean_size = s.clean.size();
  rec.dirty_size = s.dirty.size();

  const bool warm = cfg.train.backend == Backend::Mlp1 && t > 0;
  const std::size_t cap = selection_cap(cfg.selection.cap_fraction, s.dirty.size());
  std::vector<ScoreRecord> scores;

  if (strategy == Strategy::Cr1) {
    if (!s.dirty.empty()) {
      FitResult f = fit(s.dirty, cfg.train, warm ? &s.student : nullptr);
      s.student = f.params;
      rec.fit_converged = f.converged;
      InfluenceContext ctx(s.student, s.dirty, cfg.train.lambda, cfg.solver);
      PooledScorer scorer(ctx, s.clean, s.dirty.size());
      scores = score_positives(scorer, s.dirty, t, strategy, cfg.jobs);
    }
    rec.candidates = apply_cap(select_candidates(scores, cfg.selection.relaxation), scores, cap);
  } else {
    const Dataset sample = sample_clean(s.clean, cfg.sample_size, cfg.seed, t);
    FitResult f = strategy == Strategy::Cr2Ts
                      ? fit_consistency(sample, s.teacher, cfg.consistency.alpha, cfg.train,
                                        warm ? &s.student : nullptr)
                      : fit(sample, cfg.train, warm ? &s.student : nullptr);
    s.student = f.params;
    rec.fit_converged = f.converged;
    if (strategy == Strategy::Cr2Ts) s.teacher = ema_update(s.teacher, s.student, cfg.consistency.beta);

    if (strategy == Strategy::Conf) {
      auto [chosen, conf] = confidence_select(s.student, s.dirty, cap, t);
      rec.candidates = std::move(chosen);
      scores = std::move(conf);
    } else {
      // The consistency term is left out of the Hessian: plain loss on the sample.
      InfluenceContext ctx(s.student, sample, cfg.train.lambda, cfg.solver);
      PooledScorer scorer(ctx, sample, sample.size());
      scores = score_positives(scorer, s.dirty, t, strategy, cfg.jobs);
      rec.candidates = apply_cap(select_candidates(scores, cfg.selection.relaxation), scores, cap);
    }
  }

  rec.promoted = record_and_vote(s.ledger, rec.candidates, cfg.selection.k);
  if (!rec.promoted.empty() && detail::has_truth(s.dirty)) {
    std::size_t noisy = 0;
    for (const auto& id : rec.promoted) noisy += *s.dirty.find(id)->true_label == 0;
    rec.admission_noise = static_cast<double>(noisy) / static_cast<double>(rec.promoted.size());
  }
  auto [next_clean, next_dirty] = update_sets(s.clean, s.dirty, rec.promoted);
  s.clean = std::move(next_clean);
  s.dirty = std::move(next_dirty);
  ++s.iteration;

  if (detail::has_truth(d0)) {
    IdSet dr;
    for (const auto& z : s.clean) {
      if (!c0.contains(z.id)) dr.insert(z.id);
    }
    rec.recovered = selection_metrics(dr, d0);
  }
  if (scores_out) scores_out->insert(scores_out->end(), scores.begin(), scores.end());
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

// Runs t_max iterations and returns D^r = C_tmax \ C_0. A failure inside an
// iteration stops the run; the report keeps the completed iterations.
inline RunReport run_bootstrap(const Dataset& c0, const Dataset& d0, const BootstrapConfig& cfg) {
  cfg.validate();
  RunReport report;
  report.config = dump_config(cfg, bootstrap_fields());
  PartitionState s = detail::initial_state(c0, d0, cfg);
  try {
    for (int t = 0; t < cfg.t_max; ++t) report.history.push_back(bootstrap_step(s, c0, d0, cfg, &report.scores));
  } catch (const Error& e) {
    report.ok = false;
    report.error = "iteration " + std::to_string(s.iteration) + ": " + e.what();
  }
  report.student = s.student;
  for (const auto& z : s.clean) {
    if (!c0.contains(z.id)) report.recovered.insert(z.id);
  }
  return report;
}

inline BootstrapConfig bootstrap_config_from_flat(const FlatConfig& flat) {
  BootstrapConfig cfg;
  apply_config(cfg, bootstrap_fields(), flat);
  return cfg;
}

// --- serialization ---------------------------------------------------------

namespace detail {

inline nlohmann::json metrics_json(const Metrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"predicted", m.predicted},
          {"relevant", m.relevant},   {"hits", m.hits},     {"empty", m.empty}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m;
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.predicted = j.at("predicted").get<std::size_t>();
  m.relevant = j.at("relevant").get<std::size_t>();
  m.hits = j.at("hits").get<std::size_t>();
  m.empty = j.at("empty").get<bool>();
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const RunReport& r, bool with_timing = true) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : r.history) {
    nlohmann::json j = {{"iteration", h.iteration},
                        {"clean_size", h.clean_size},
                        {"dirty_size", h.dirty_size},
                        {"candidates", h.candidates},
                        {"promoted", h.promoted},
                        {"fit_converged", h.fit_converged}};
    j["recovered"] = h.recovered ? detail::metrics_json(*h.recovered) : nlohmann::json(nullptr);
    j["admission_noise"] = h.admission_noise ? nlohmann::json(*h.admission_noise) : nlohmann::json(nullptr);
    if (with_timing) j["seconds"] = h.seconds;
    hist.push_back(std::move(j));
  }
  return {{"status", r.ok ? "ok" : "failed"}, {"error", r.error},     {"recovered", r.recovered},
          {"history", hist},                  {"config", r.config}};
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  try {
    RunReport r;
    r.ok = j.at("status").get<std::string>() == "ok";
    r.error = j.at("error").get<std::string>();
    r.recovered = j.at("recovered").get<IdSet>();
    r.config = j.at("config").get<FlatConfig>();
    for (const auto& h : j.at("history")) {
      IterationRecord rec;
      rec.iteration = h.at("iteration").get<int>();
      rec.clean_size = h.at("clean_size").get<std::size_t>();
      rec.dirty_size = h.at("dirty_size").get<std::size_t>();
      rec.candidates = h.at("candidates").get<IdSet>();
      rec.promoted = h.at("promoted").get<IdSet>();
      rec.fit_converged = h.at("fit_converged").get<bool>();
      if (!h.at("recovered").is_null()) rec.recovered = detail::metrics_from_json(h.at("recovered"));
      if (!h.at("admission_noise").is_null()) rec.admission_noise = h.at("admission_noise").get<double>();
      if (h.contains("seconds")) rec.seconds = h.at("seconds").get<double>();
      r.history.push_back(std::move(rec));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run report: ") + e.what());
  }
}

// iteration,|C|,|D~c|,|Dc|,precision,recall,f1,seconds. Metric cells are empty
// when the dataset carries no ground truth or nothing has been recovered yet.
inline void write_history_csv(const RunReport& r, std::ostream& out) {
  out << "iteration,clean_size,candidates,promoted,precision,recall,f1,seconds\n";
  for (const auto& h : r.history) {
    out << h.iteration << ',' << h.clean_size << ',' << h.candidates.size() << ','
        << h.promoted.size() << ',';
    if (h.recovered && !h.recovered->empty) {
      out << detail::short_double(h.recovered->precision) << ',' << detail::short_double(h.recovered->recall) << ','
          << detail::short_double(h.recovered->f1);
    } else {
      out << ",,";
    }
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.6f", h.seconds);
    out << ',' << secs << '\n';
  }
}

}  // namespace ifdenoise
