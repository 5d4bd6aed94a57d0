#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ifdenoise/error.hpp"
#include "ifdenoise/random.hpp"

namespace ifdenoise {

using IdSet = std::set<std::string>;

// One featurized instance z = (x, y). `label` is the observed (possibly noisy)
// label; `true_label` is ground truth and only read by evaluation code.
struct Example {
  std::string id;
  Eigen::VectorXd features;
  int label = 0;
  std::optional<int> true_label;
  double weight = 1.0;

  bool verifiably_clean() const { return true_label && *true_label == label; }
  bool noisy() const { return true_label && *true_label != label; }

  friend bool operator==(const Example& a, const Example& b) {
    return a.id == b.id && a.label == b.label && a.true_label == b.true_label &&
           a.weight == b.weight && a.features.size() == b.features.size() &&
           a.features == b.features;
  }
};

class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(std::size_t feature_dim, std::string name = {})
      : name_(std::move(name)), feature_dim_(feature_dim) {
    if (feature_dim == 0) throw DimensionError("dataset feature_dim must be positive");
  }

  void add(Example e) {
    if (static_cast<std::size_t>(e.features.size()) != feature_dim_) {
      throw DimensionError("example '" + e.id + "' has " + std::to_string(e.features.size()) +
                           " features, dataset declares " + std::to_string(feature_dim_));
    }
    if (e.label != 0 && e.label != 1) {
      throw FormatError("example '" + e.id + "' has non-binary label");
    }
    if (e.true_label && *e.true_label != 0 && *e.true_label != 1) {
      throw FormatError("example '" + e.id + "' has non-binary true_label");
    }
    if (!index_.emplace(e.id, examples_.size()).second) {
      throw FormatError("duplicate example id '" + e.id + "'");
    }
    examples_.push_back(std::move(e));
  }

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t size() const { return examples_.size(); }
  bool empty() const { return examples_.empty(); }

  const Example& operator[](std::size_t i) const { return examples_[i]; }
  const std::vector<Example>& examples() const { return examples_; }
  auto begin() const { return examples_.begin(); }
  auto end() const { return examples_.end(); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  const Example* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &examples_[it->second];
  }

  IdSet ids() const {
    IdSet out;
    for (const auto& e : examples_) out.insert(e.id);
    return out;
  }

  std::vector<std::string> id_sequence() const {
    std::vector<std::string> out;
    out.reserve(examples_.size());
    for (const auto& e : examples_) out.push_back(e.id);
    return out;
  }

  // Examples whose id is (or is not) in `keep`, in dataset order.
  Dataset subset(const IdSet& keep, bool complement = false) const {
    Dataset out(feature_dim_, name_);
    for (const auto& e : examples_) {
      if ((keep.count(e.id) != 0) != complement) out.add(e);
    }
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.feature_dim_ == b.feature_dim_ && a.examples_ == b.examples_;
  }

 private:
  std::string name_;
  std::size_t feature_dim_ = 0;
  std::vector<Example> examples_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// JSON-lines I/O: one object per line with id, features, label, true_label
// (and weight when it differs from 1).

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Shortest text that parses back to the same double.
inline std::string short_double(double v) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, end) : format_double(v);
}

inline Example parse_example_line(const std::string& line, std::size_t lineno,
                                  std::size_t feature_dim) {
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("line " + std::to_string(lineno) + ": " + why);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(std::string("invalid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw fail("record is not a JSON object");
  if (!j.contains("id") || !j["id"].is_string()) throw fail("missing string field 'id'");
  if (!j.contains("features") || !j["features"].is_array()) {
    throw fail("missing array field 'features'");
  }
  if (!j.contains("label") || !j["label"].is_number_integer()) {
    throw fail("missing integer field 'label'");
  }
  Example e;
  e.id = j["id"].get<std::string>();
  const auto& f = j["features"];
  if (f.size() != feature_dim) {
    throw DimensionError("line " + std::to_string(lineno) + ": record '" + e.id + "' has " +
                         std::to_string(f.size()) + " features, expected " +
                         std::to_string(feature_dim));
  }
  e.features.resize(static_cast<Eigen::Index>(f.size()));
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f[i].is_number()) throw fail("non-numeric feature in '" + e.id + "'");
    e.features[static_cast<Eigen::Index>(i)] = f[i].get<double>();
  }
  e.label = j["label"].get<int>();
  if (j.contains("true_label") && !j["true_label"].is_null()) {
    if (!j["true_label"].is_number_integer()) throw fail("'true_label' is not an integer");
    e.true_label = j["true_label"].get<int>();
  }
  if (j.contains("weight")) {
    if (!j["weight"].is_number()) throw fail("'weight' is not a number");
    e.weight = j["weight"].get<double>();
  }
  if (e.label != 0 && e.label != 1) throw fail("label must be 0 or 1");
  if (e.true_label && *e.true_label != 0 && *e.true_label != 1) {
    throw fail("true_label must be 0 or 1");
  }
  return e;
}

}  // namespace detail

inline std::string example_to_json_line(const Example& e) {
  std::string out = "{\"id\":" + nlohmann::json(e.id).dump() + ",\"features\":[";
  for (Eigen::Index i = 0; i < e.features.size(); ++i) {
    if (!std::isfinite(e.features[i])) {
      throw IoError("example '" + e.id + "' has a non-finite feature");
    }
    if (i) out += ',';
    out += detail::format_double(e.features[i]);
  }
  out += "],\"label\":" + std::to_string(e.label);
  if (e.true_label) out += ",\"true_label\":" + std::to_string(*e.true_label);
  if (e.weight != 1.0) out += ",\"weight\":" + detail::format_double(e.weight);
  out += '}';
  return out;
}

inline Dataset read_dataset(std::istream& in, std::size_t feature_dim, std::string name = {}) {
  Dataset ds(feature_dim, std::move(name));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Example e = detail::parse_example_line(line, lineno, feature_dim);
    if (ds.contains(e.id)) {
      throw FormatError("line " + std::to_string(lineno) + ": duplicate id '" + e.id + "'");
    }
    ds.add(std::move(e));
  }
  return ds;
}

inline Dataset load_dataset(const std::string& path, std::size_t feature_dim) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file '" + path + "'");
  return read_dataset(in, feature_dim, path);
}

inline void write_dataset(const Dataset& ds, std::ostream& out) {
  for (const auto& e : ds) out << example_to_json_line(e) << '\n';
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_dataset(ds, out);
  out.flush();
  if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Synthetic data: two isotropic Gaussian clusters at +/- mean_offset * 1.

enum class NoiseSource { Generate, Resample };

struct ClassGenerator {
  Eigen::VectorXd mean;
  double stddev = 1.0;

  Eigen::VectorXd sample(Rng& rng) const {
    std::normal_distribution<double> normal(0.0, stddev);
    Eigen::VectorXd x(mean.size());
    for (Eigen::Index i = 0; i < mean.size(); ++i) x[i] = mean[i] + normal(rng);
    return x;
  }
};

struct SyntheticSpec {
  std::size_t n_pos = 290;
  std::size_t n_neg = 290;
  double noise_ratio = 0.0;
  std::size_t feature_dim = 10;
  double mean_offset = 1.0;
  double stddev = 1.5;
  std::uint64_t seed = 0;
  NoiseSource noise_source = NoiseSource::Generate;
  std::string name = "synthetic";

  void validate() const {
    if (n_pos == 0 || n_neg == 0) throw ConfigError("synthetic spec needs n_pos, n_neg > 0");
    if (!(noise_ratio >= 0.0 && noise_ratio < 1.0)) {
      throw ConfigError("noise ratio must lie in [0, 1)");
    }
    if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
    if (!(stddev > 0.0)) throw ConfigError("stddev must be positive");
  }

  ClassGenerator positive_generator() const {
    return {Eigen::VectorXd::Constant(static_cast<Eigen::Index>(feature_dim), mean_offset), stddev};
  }
  ClassGenerator negative_generator() const {
    return {Eigen::VectorXd::Constant(static_cast<Eigen::Index>(feature_dim), -mean_offset),
            stddev};
  }
};

// Number of flipped negatives that brings a set of N examples to noise ratio rho.
inline std::size_t noise_count(std::size_t n, double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("noise ratio must lie in [0, 1)");
  const double x = rho * static_cast<double>(n) / (1.0 - rho);
  const double nearest = std::round(x);
  // rho * N / (1 - rho) often lands a few ulps above an integer (0.9 * 580 / 0.1).
  if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, x)) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(x));
}

namespace detail {

inline std::string make_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "z%06zu", i);
  return buf;
}

}  // namespace detail

// Appends ceil(rho N / (1 - rho)) negatives relabelled as positive. Features
// come from `negative_generator` when given, otherwise they are resampled from
// the dataset's own true negatives.
inline Dataset inject_noise(const Dataset& dataset, double rho, std::uint64_t seed,
                            const ClassGenerator* negative_generator = nullptr) {
  const std::size_t m = noise_count(dataset.size(), rho);
  Dataset out = dataset;
  if (m == 0) return out;

  std::vector<std::size_t> negatives;
  if (!negative_generator) {
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto& e = dataset[i];
      if (e.true_label.value_or(e.label) == 0) negatives.push_back(i);
    }
    if (negatives.empty()) throw ConfigError("cannot resample noise: dataset has no negatives");
  }

  Rng rng = make_rng(seed, stream::kNoise);
  std::size_t next_id = dataset.size();
  for (std::size_t j = 0; j < m; ++j) {
    Example e;
    while (out.contains(detail::make_id(next_id))) ++next_id;
    e.id = detail::make_id(next_id++);
    if (negative_generator) {
      e.features = negative_generator->sample(rng);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, negatives.size() - 1);
      e.features = dataset[negatives[pick(rng)]].features;
    }
    e.label = 1;
    e.true_label = 0;
    out.add(std::move(e));
  }
  return out;
}

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds(spec.feature_dim, spec.name);
  const auto pos = spec.positive_generator();
  const auto neg = spec.negative_generator();
  Rng pos_rng = make_rng(spec.seed, stream::kPositives);
  Rng neg_rng = make_rng(spec.seed, stream::kNegatives);
  std::size_t next = 0;
  for (std::size_t i = 0; i < spec.n_pos; ++i) {
    ds.add({detail::make_id(next++), pos.sample(pos_rng), 1, 1, 1.0});
  }
  for (std::size_t i = 0; i < spec.n_neg; ++i) {
    ds.add({detail::make_id(next++), neg.sample(neg_rng), 0, 0, 1.0});
  }
  const bool generate = spec.noise_source == NoiseSource::Generate;
  return inject_noise(ds, spec.noise_ratio, spec.seed, generate ? &neg : nullptr);
}

// Splits off m uniformly chosen verifiably clean examples as the seed set C0.
// Both outputs keep the input order.
inline std::pair<Dataset, Dataset> partition_seed(const Dataset& dataset, std::size_t m,
                                                  std::uint64_t seed) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].verifiably_clean()) eligible.push_back(i);
  }
  if (eligible.size() < m) {
    throw ConfigError("partition_seed: only " + std::to_string(eligible.size()) +
                      " verifiably clean examples, need " + std::to_string(m));
  }
  Rng rng = make_rng(seed, stream::kPartition);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<char> chosen(dataset.size(), 0);
  for (std::size_t i = 0; i < m; ++i) chosen[eligible[i]] = 1;

  Dataset c0(dataset.feature_dim(), dataset.name() + ":seed");
  Dataset d0(dataset.feature_dim(), dataset.name() + ":dirty");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    (chosen[i] ? c0 : d0).add(dataset[i]);
  }
  return {std::move(c0), std::move(d0)};
}

}  // namespace ifdenoise
