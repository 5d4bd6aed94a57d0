#pragma once

#include <cstddef>

#include "ifdenoise/dataset.hpp"
#include "ifdenoise/error.hpp"

namespace ifdenoise {

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t predicted = 0;  // |selected| or predicted positives
  std::size_t relevant = 0;   // truly clean positives / true positives in test
  std::size_t hits = 0;
  bool empty = false;  // nothing selected / predicted: precision set to 0

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

inline double f1_score(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline Metrics make_metrics(std::size_t predicted, std::size_t relevant, std::size_t hits) {
  Metrics m;
  m.predicted = predicted;
  m.relevant = relevant;
  m.hits = hits;
  m.empty = predicted == 0;
  m.precision = predicted ? static_cast<double>(hits) / static_cast<double>(predicted) : 0.0;
  m.recall = relevant ? static_cast<double>(hits) / static_cast<double>(relevant) : 0.0;
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

inline bool truly_clean_positive(const Example& z) {
  if (!z.true_label) throw FormatError("example '" + z.id + "' has no true_label");
  return z.label == 1 && *z.true_label == 1;
}

// How well `selected` recovers the truly clean positives of `dataset`.
inline Metrics selection_metrics(const IdSet& selected, const Dataset& dataset) {
  std::size_t relevant = 0, hits = 0;
  for (const auto& z : dataset) {
    if (truly_clean_positive(z)) {
      ++relevant;
      if (selected.count(z.id)) ++hits;
    }
  }
  for (const auto& id : selected) {
    if (!dataset.contains(id)) throw Error("selected id '" + id + "' is not in the dataset");
  }
  return make_metrics(selected.size(), relevant, hits);
}

}  // namespace ifdenoise
