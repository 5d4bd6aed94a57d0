#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ifdenoise/dataset.hpp"
#include "ifdenoise/error.hpp"
#include "ifdenoise/influence.hpp"
#include "ifdenoise/model.hpp"

namespace ifdenoise {

struct SelectionConfig {
  double relaxation = 0.0;
  int k = 3;
  double cap_fraction = 0.1;
  Strategy strategy = Strategy::Cr2;

  void validate() const {
    if (!(relaxation >= 0.0) || !std::isfinite(relaxation))
      throw ConfigError("selection.relaxation must be >= 0");
    if (k < 0) throw ConfigError("selection.k must be >= 0");
    if (!(cap_fraction > 0.0 && cap_fraction <= 1.0))
      throw ConfigError("selection.cap_fraction must be in (0, 1]");
  }
};

// Vote counts per id. Ids handed out by record_and_vote are remembered so an
// instance is promoted once.
class VoteLedger {
 public:
  int iteration() const { return iteration_; }
  int count(const std::string& id) const {
    auto it = counts_.find(id);
    return it == counts_.end() ? 0 : it->second;
  }
  const std::map<std::string, int>& counts() const { return counts_; }
  const IdSet& promoted() const { return promoted_; }

  // Adds one vote to each id; the ledger then moves to the next iteration.
  void record(const IdSet& ids) {
    for (const auto& id : ids) ++counts_[id];
    ++iteration_;
  }

  IdSet over_threshold(int k) const {
    IdSet out;
    for (const auto& [id, c] : counts_) {
      if (c > k && !promoted_.count(id)) out.insert(id);
    }
    return out;
  }

  void mark_promoted(const IdSet& ids) { promoted_.insert(ids.begin(), ids.end()); }

 private:
  std::map<std::string, int> counts_;
  IdSet promoted_;
  int iteration_ = 0;
};

inline std::size_t selection_cap(double cap_fraction, std::size_t dirty_size) {
  // 1e-12 slack keeps products like 0.1 * 30 from rounding up to 4.
  return static_cast<std::size_t>(std::ceil(cap_fraction * static_cast<double>(dirty_size) - 1e-12));
}

// { id : score + r > 0 }
inline IdSet select_candidates(const std::vector<ScoreRecord>& scores, double r) {
  IdSet out;
  for (const auto& s : scores) {
    if (s.score + r > 0.0) out.insert(s.example_id);
  }
  return out;
}

namespace detail {

inline std::vector<std::pair<std::string, double>> ranked(const IdSet& ids,
                                                          const std::map<std::string, double>& score) {
  std::vector<std::pair<std::string, double>> v;
  v.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = score.find(id);
    if (it == score.end()) throw Error("no score for candidate '" + id + "'");
    v.emplace_back(id, it->second);
  }
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return v;
}

inline IdSet top(const IdSet& ids, const std::map<std::string, double>& score, std::size_t cap) {
  if (ids.size() <= cap) return ids;
  auto v = ranked(ids, score);
  IdSet out;
  for (std::size_t i = 0; i < cap; ++i) out.insert(v[i].first);
  return out;
}

}  // namespace detail

inline IdSet apply_cap(const IdSet& candidates, const std::vector<ScoreRecord>& scores,
                       std::size_t cap) {
  std::map<std::string, double> by_id;
  for (const auto& s : scores) by_id[s.example_id] = s.score;
  return detail::top(candidates, by_id, cap);
}

// Records this iteration's candidates and returns the ids whose count now
// exceeds k (each id only once over the ledger's lifetime).
inline IdSet record_and_vote(VoteLedger& ledger, const IdSet& candidates, int k) {
  ledger.record(candidates);
  IdSet out = ledger.over_threshold(k);
  ledger.mark_promoted(out);
  return out;
}

// Positively labelled instances with own-label confidence above 0.5, best
// `cap` of them. Returns the scores too so they can be logged.
inline std::pair<IdSet, std::vector<ScoreRecord>> confidence_select(const ModelParams& params,
                                                                    const Dataset& dirty,
                                                                    std::size_t cap,
                                                                    int iteration = 0) {
  std::vector<ScoreRecord> scores;
  std::map<std::string, double> by_id;
  IdSet passing;
  for (const auto& z : dirty) {
    if (z.label != 1) continue;
    const auto [p0, p1] = predict_proba(params, z.features);
    const double conf = z.label == 1 ? p1 : p0;
    scores.push_back({z.id, iteration, conf, Strategy::Conf});
    by_id[z.id] = conf;
    if (conf > 0.5) passing.insert(z.id);
  }
  return {detail::top(passing, by_id, cap), std::move(scores)};
}

// Moves the examples named in `promote` from dirty to clean.
inline std::pair<Dataset, Dataset> update_sets(const Dataset& clean, const Dataset& dirty,
                                               const IdSet& promote) {
  for (const auto& id : promote) {
    if (!dirty.contains(id)) throw Error("update_sets: '" + id + "' is not in the dirty set");
  }
  Dataset next_clean = clean;
  Dataset next_dirty(dirty.feature_dim(), dirty.name());
  for (const auto& z : dirty) {
    if (promote.count(z.id)) {
      next_clean.add(z);
    } else {
      next_dirty.add(z);
    }
  }
  return {std::move(next_clean), std::move(next_dirty)};
}

}  // namespace ifdenoise
