#pragma once

// Flat key=value configuration: `section.key = value` per line, `#` comments.
// Each config struct exposes a table of fields; tables compose under prefixes.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ifdenoise/dataset.hpp"
#include "ifdenoise/error.hpp"
#include "ifdenoise/influence.hpp"
#include "ifdenoise/model.hpp"

namespace ifdenoise {

using FlatConfig = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline FlatConfig parse_flat_config(std::istream& in, const std::string& origin = "config") {
  FlatConfig out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!out.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return out;
}

inline FlatConfig load_flat_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_flat_config(in, path);
}

inline void write_flat_config(const FlatConfig& cfg, std::ostream& out) {
  for (const auto& [k, v] : cfg) out << k << " = " << v << "\n";
}

// --- value codecs ----------------------------------------------------------

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty())
    throw ConfigError("bad value for '" + key + "': '" + s + "'");
  return v;
}

template <class T>
std::string print(T v) {
  if constexpr (std::is_floating_point_v<T>) {
    return short_double(v);
  } else {
    return std::to_string(v);
  }
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(item);
    } else {
      out.push_back(parse_number<T>(key, item));
    }
  }
  if (out.empty()) throw ConfigError("'" + key + "' needs at least one value");
  return out;
}

template <class T>
std::string print_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, std::string>) {
      out += v[i];
    } else {
      out += print(v[i]);
    }
  }
  return out;
}

}  // namespace detail

template <class T>
struct Field {
  std::string key;
  std::function<void(T&, const std::string&)> set;
  std::function<std::string(const T&)> get;
};

template <class T>
using FieldTable = std::vector<Field<T>>;

template <class T, class M>
Field<T> number_field(std::string key, M T::*member) {
  return {key,
          [key, member](T& t, const std::string& s) { t.*member = detail::parse_number<M>(key, s); },
          [member](const T& t) { return detail::print(t.*member); }};
}

template <class T, class M>
Field<T> list_field(std::string key, std::vector<M> T::*member) {
  return {key,
          [key, member](T& t, const std::string& s) { t.*member = detail::parse_list<M>(key, s); },
          [member](const T& t) { return detail::print_list(t.*member); }};
}

template <class T>
Field<T> string_field(std::string key, std::string T::*member) {
  return {key, [member](T& t, const std::string& s) { t.*member = s; },
          [member](const T& t) { return t.*member; }};
}

// Re-homes a sub-table under `prefix.` and a member of the outer struct.
template <class Outer, class Inner>
void nest(FieldTable<Outer>& into, const std::string& prefix, Inner Outer::*member,
          const FieldTable<Inner>& inner) {
  for (const auto& f : inner) {
    into.push_back({prefix + "." + f.key,
                    [member, set = f.set](Outer& o, const std::string& s) { set(o.*member, s); },
                    [member, get = f.get](const Outer& o) { return get(o.*member); }});
  }
}

// Applies every entry of `cfg`; any key outside the table is an error.
template <class T>
void apply_config(T& target, const FieldTable<T>& table, const FlatConfig& cfg) {
  std::map<std::string, const Field<T>*> index;
  for (const auto& f : table) index[f.key] = &f;
  for (const auto& [k, v] : cfg) {
    auto it = index.find(k);
    if (it == index.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second->set(target, v);
  }
}

template <class T>
FlatConfig dump_config(const T& source, const FieldTable<T>& table) {
  FlatConfig out;
  for (const auto& f : table) out[f.key] = f.get(source);
  return out;
}

// --- tables for the component configs ---------------------------------------

inline FieldTable<TrainConfig> train_fields() {
  using T = TrainConfig;
  return {number_field("lambda", &T::lambda),
          number_field("learning_rate", &T::learning_rate),
          number_field("max_iters", &T::max_iters),
          number_field("grad_tol", &T::grad_tol),
          number_field("seed", &T::seed),
          {"backend", [](T& t, const std::string& s) { t.backend = parse_backend(s); },
           [](const T& t) { return to_string(t.backend); }},
          number_field("hidden_dim", &T::hidden_dim)};
}

inline FieldTable<ConsistencyConfig> consistency_fields() {
  using T = ConsistencyConfig;
  return {number_field("alpha", &T::alpha), number_field("beta", &T::beta)};
}

inline FieldTable<LissaConfig> lissa_fields() {
  using T = LissaConfig;
  return {number_field("depth", &T::depth), number_field("scale", &T::scale),
          number_field("repeats", &T::repeats), number_field("batch_size", &T::batch_size),
          number_field("seed", &T::seed)};
}

inline FieldTable<SolverConfig> solver_fields() {
  using T = SolverConfig;
  FieldTable<T> t = {{"kind", [](T& c, const std::string& s) { c.kind = parse_solver(s); },
                      [](const T& c) { return to_string(c.kind); }},
                     number_field("cg_tol", &T::cg_tol)};
  nest(t, "lissa", &T::lissa, lissa_fields());
  return t;
}

inline std::string to_string(NoiseSource s) {
  return s == NoiseSource::Generate ? "generate" : "resample";
}

inline NoiseSource parse_noise_source(const std::string& s) {
  if (s == "generate") return NoiseSource::Generate;
  if (s == "resample") return NoiseSource::Resample;
  throw ConfigError("unknown noise source '" + s + "' (expected generate or resample)");
}

inline FieldTable<SyntheticSpec> synthetic_fields() {
  using T = SyntheticSpec;
  return {number_field("n_pos", &T::n_pos),
          number_field("n_neg", &T::n_neg),
          number_field("noise_ratio", &T::noise_ratio),
          number_field("feature_dim", &T::feature_dim),
          number_field("mean_offset", &T::mean_offset),
          number_field("stddev", &T::stddev),
          number_field("seed", &T::seed),
          {"noise_source", [](T& t, const std::string& s) { t.noise_source = parse_noise_source(s); },
           [](const T& t) { return to_string(t.noise_source); }},
          string_field("name", &T::name)};
}

}  // namespace ifdenoise
