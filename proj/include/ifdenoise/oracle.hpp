#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ifdenoise/dataset.hpp"
#include "ifdenoise/error.hpp"
#include "ifdenoise/influence.hpp"
#include "ifdenoise/model.hpp"
#include "ifdenoise/parallel.hpp"

namespace ifdenoise {

// Retraining fits are pushed to this tolerance (or the caller's, if tighter):
// loss changes of order 1/n must not drown in optimizer slack.
inline constexpr double kOracleGradTol = 1e-10;

struct OraclePoint {
  std::string example_id;
  double estimated = 0.0;
  double actual = 0.0;
};

struct OracleReport {
  std::vector<OraclePoint> points;  // probed training points, descending |estimated|
  std::optional<double> pearson_all;
  std::optional<double> pearson_topk;
  int k_top = 40;
  int sign_k = 10;
  double sign_agreement_topk = 0.0;
};

struct LemmaDiagnostics {
  std::string example_id;
  std::size_t n = 0;
  double h_norm = 0.0;       // |h(x)|
  double w_gap = 0.0;        // |w_y - w_y'|
  double tau = 0.0;          // smallest singular value of dh/dphi; 0 when phi is empty
  Eigen::VectorXd predicted;
  Eigen::VectorXd actual;
  double relative_error = 0.0;
  bool degenerate = false;  // |actual| below 1e-12
};

namespace detail {

inline TrainConfig oracle_config(const TrainConfig& cfg) {
  if (cfg.backend != Backend::Linear)
    throw ConfigError("retraining oracles require the linear backend");
  TrainConfig c = cfg;
  c.grad_tol = std::min(cfg.grad_tol, kOracleGradTol);
  c.max_iters = std::max(cfg.max_iters, 200000);
  return c;
}

// Same examples with `id` removed from the data term: weight 0, normalizer n.
inline Dataset drop_from_objective(const Dataset& train, const std::string& id) {
  if (!train.contains(id)) throw Error("'" + id + "' is not in the training set");
  Dataset out(train.feature_dim(), train.name());
  for (Example e : train) {
    if (e.id == id) e.weight = 0.0;
    out.add(std::move(e));
  }
  return out;
}

inline FitResult checked_fit(const Dataset& train, const TrainConfig& cfg, const ModelParams* init) {
  FitResult f = fit(train, cfg, init);
  if (!f.converged)
    throw SolverError("oracle retraining did not converge", f.grad_norm);
  return f;
}

inline double mean_loss(const ModelParams& p, const Dataset& set) {
  double s = 0.0;
  for (const auto& z : set) s += loss(p, z);
  return s / static_cast<double>(set.size());
}

inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace detail

// L(z_test, theta_{-z}) - L(z_test, theta) from two full fits.
inline double loo_retrain_delta(const Dataset& train, const Example& z_remove, const Example& z_test,
                                const TrainConfig& cfg) {
  const TrainConfig c = detail::oracle_config(cfg);
  const FitResult full = detail::checked_fit(train, c, nullptr);
  const FitResult without =
      detail::checked_fit(detail::drop_from_objective(train, z_remove.id), c, &full.params);
  return loss(without.params, z_test) - loss(full.params, z_test);
}

// Exact parameter change from relabelling z versus the first-order prediction
// n^-1 (H + lambda I)^-1 (grad L(z) - grad L(z')).
inline LemmaDiagnostics relabel_retrain_delta(const Dataset& train, const std::string& z_id,
                                              const TrainConfig& cfg) {
  const TrainConfig c = detail::oracle_config(cfg);
  const Example* z = train.find(z_id);
  if (!z) throw Error("'" + z_id + "' is not in the training set");
  Example flipped = *z;
  flipped.label = 1 - z->label;

  Dataset relabelled(train.feature_dim(), train.name());
  for (const auto& e : train) relabelled.add(e.id == z_id ? flipped : e);

  const FitResult full = detail::checked_fit(train, c, nullptr);
  const FitResult moved = detail::checked_fit(relabelled, c, &full.params);

  LemmaDiagnostics d;
  d.example_id = z_id;
  d.n = train.size();
  const Eigen::VectorXd rhs = grad(full.params, *z) - grad(full.params, flipped);
  d.predicted = inverse_hvp_exact(full.params, train, rhs, c.lambda) / static_cast<double>(train.size());
  d.actual = moved.params.flat() - full.params.flat();
  d.h_norm = encode(full.params, z->features).norm();
  d.w_gap = (full.params.w(z->label) - full.params.w(flipped.label)).norm();
  d.tau = 0.0;
  const double a = d.actual.norm();
  d.degenerate = a < 1e-12;
  d.relative_error = d.degenerate ? std::numeric_limits<double>::quiet_NaN()
                                  : (d.predicted - d.actual).norm() / a;
  return d;
}

// Estimated vs retrained change of the mean test loss when each probed
// training point is removed. probe = 0 probes every training point, otherwise
// the `probe` largest |estimate|.
inline OracleReport if_loo_correlation(const Dataset& train, const Dataset& test_points,
                                       const TrainConfig& cfg, std::size_t probe = 0, int k_top = 40,
                                       int jobs = 1, int sign_k = 10) {
  if (test_points.empty()) throw ConfigError("if_loo_correlation: no test points");
  if (probe > train.size()) throw ConfigError("if_loo_correlation: probe exceeds training set size");
  const TrainConfig c = detail::oracle_config(cfg);
  const FitResult full = detail::checked_fit(train, c, nullptr);
  InfluenceContext ctx(full.params, train, c.lambda);
  PooledScorer scorer(ctx, test_points, train.size());

  std::vector<OraclePoint> pts;
  pts.reserve(train.size());
  for (const auto& z : train) pts.push_back({z.id, scorer.score(z), 0.0});
  std::stable_sort(pts.begin(), pts.end(), [](const OraclePoint& a, const OraclePoint& b) {
    return std::abs(a.estimated) > std::abs(b.estimated);
  });
  if (probe > 0) pts.resize(probe);

  const double base = detail::mean_loss(full.params, test_points);
  parallel_for(pts.size(), jobs, [&](std::size_t i) {
    const FitResult without =
        detail::checked_fit(detail::drop_from_objective(train, pts[i].example_id), c, &full.params);
    pts[i].actual = detail::mean_loss(without.params, test_points) - base;
  });

  OracleReport r;
  r.k_top = k_top;
  r.sign_k = sign_k;
  std::vector<double> est, act;
  for (const auto& p : pts) {
    est.push_back(p.estimated);
    act.push_back(p.actual);
  }
  r.pearson_all = detail::pearson(est, act);
  const std::size_t k = std::min<std::size_t>(pts.size(), static_cast<std::size_t>(k_top));
  r.pearson_topk = detail::pearson({est.begin(), est.begin() + static_cast<std::ptrdiff_t>(k)},
                                   {act.begin(), act.begin() + static_cast<std::ptrdiff_t>(k)});
  const std::size_t ks = std::min<std::size_t>(pts.size(), static_cast<std::size_t>(sign_k));
  std::size_t agree = 0;
  for (std::size_t i = 0; i < ks; ++i) agree += (est[i] > 0) == (act[i] > 0);
  r.sign_agreement_topk = ks ? static_cast<double>(agree) / static_cast<double>(ks) : 0.0;
  r.points = std::move(pts);
  return r;
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json to_json(const OracleReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.points)
    pts.push_back({{"example_id", p.example_id}, {"estimated", p.estimated}, {"actual", p.actual}});
  return {{"pearson_all", opt(r.pearson_all)},
          {"pearson_topk", opt(r.pearson_topk)},
          {"pearson_computed", r.pearson_all.has_value()},
          {"k_top", r.k_top},
          {"sign_k", r.sign_k},
          {"sign_agreement_topk", r.sign_agreement_topk},
          {"points", pts}};
}

inline void write_scatter_csv(const OracleReport& r, std::ostream& out) {
  out << "example_id,estimated,actual\n";
  for (const auto& p : r.points)
    out << detail::csv_field(p.example_id) << ',' << detail::short_double(p.estimated) << ','
        << detail::short_double(p.actual) << '\n';
}

inline nlohmann::json to_json(const LemmaDiagnostics& d) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j = {{"example_id", d.example_id},
                      {"n", d.n},
                      {"h_norm", d.h_norm},
                      {"w_gap", d.w_gap},
                      {"tau", d.tau},
                      {"predicted", vec(d.predicted)},
                      {"actual", vec(d.actual)},
                      {"degenerate", d.degenerate}};
  j["relative_error"] = d.degenerate ? nlohmann::json(nullptr) : nlohmann::json(d.relative_error);
  return j;
}

}  // namespace ifdenoise
