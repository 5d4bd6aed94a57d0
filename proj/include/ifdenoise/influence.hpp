#pragma once

// Inverse Hessian-vector products and support scores.
//
// S(z, z') = (1/n) grad L(z')^T (H + lambda I)^{-1} grad L(z) estimates how much
// the loss on z' rises when z is dropped from the n-example training set.

#include <Eigen/Dense>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ifdenoise/dataset.hpp"
#include "ifdenoise/error.hpp"
#include "ifdenoise/model.hpp"
#include "ifdenoise/parallel.hpp"
#include "ifdenoise/random.hpp"

namespace ifdenoise {

enum class Strategy { Cr1, Cr2, Cr2Ts, Conf };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Cr1: return "cr1";
    case Strategy::Cr2: return "cr2";
    case Strategy::Cr2Ts: return "cr2ts";
    case Strategy::Conf: return "conf";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "cr1") return Strategy::Cr1;
  if (s == "cr2") return Strategy::Cr2;
  if (s == "cr2ts") return Strategy::Cr2Ts;
  if (s == "conf") return Strategy::Conf;
  throw ConfigError("unknown strategy '" + s + "' (expected cr1|cr2|cr2ts|conf)");
}

struct LissaConfig {
  int depth = 1000;
  double scale = 5.0;  // must bound the damped Hessian spectrum
  int repeats = 4;
  int batch_size = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (depth < 1) throw ConfigError("lissa.depth must be >= 1");
    if (!(scale > 0.0)) throw ConfigError("lissa.scale must be > 0");
    if (repeats < 1) throw ConfigError("lissa.repeats must be >= 1");
    if (batch_size < 1) throw ConfigError("lissa.batch_size must be >= 1");
  }
};

enum class SolverKind { Cg, Dense, Lissa };

inline std::string to_string(SolverKind k) {
  switch (k) {
    case SolverKind::Cg: return "cg";
    case SolverKind::Dense: return "dense";
    case SolverKind::Lissa: return "lissa";
  }
  return "?";
}

inline SolverKind parse_solver(const std::string& s) {
  if (s == "cg" || s == "exact") return SolverKind::Cg;
  if (s == "dense") return SolverKind::Dense;
  if (s == "lissa") return SolverKind::Lissa;
  throw ConfigError("unknown solver '" + s + "' (expected cg|dense|lissa)");
}

struct SolverConfig {
  SolverKind kind = SolverKind::Cg;
  double cg_tol = 1e-10;  // relative residual target of the CG recursion
  LissaConfig lissa;
};

// Largest parameter count for which the dense route assembles (H + lambda I).
inline constexpr Eigen::Index kMaxDenseParams = 2000;

namespace detail {

inline double relative_residual(const ModelParams& params, const Dataset& train,
                                const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                                double lambda) {
  const double vn = v.norm();
  return (hvp(params, train, u, lambda) - v).norm() / (vn > 0.0 ? vn : 1.0);
}

}  // namespace detail

// Conjugate gradient on a symmetric positive definite operator, from x0 until
// the recursive residual drops below tol * |v|.
template <class Apply>
Eigen::VectorXd conjugate_gradient(Apply&& apply, const Eigen::VectorXd& v, double tol,
                                   Eigen::VectorXd x0, int max_iters) {
  const double vn = v.norm();
  const double target = tol * vn;
  Eigen::VectorXd x = std::move(x0);
  Eigen::VectorXd r = v - apply(x);
  Eigen::VectorXd d = r;
  double rr = r.squaredNorm();
  for (int it = 0; it < max_iters && std::sqrt(rr) > target; ++it) {
    const Eigen::VectorXd Ad = apply(d);
    const double curvature = d.dot(Ad);
    if (!(curvature > 0.0)) {
      throw IndefiniteHessianError("conjugate gradient met non-positive curvature " +
                                       std::to_string(curvature) + "; increase damping",
                                   std::sqrt(rr) / std::max(vn, 1e-300));
    }
    const double step = rr / curvature;
    x += step * d;
    r -= step * Ad;
    const double rr_next = r.squaredNorm();
    d = r + (rr_next / rr) * d;
    rr = rr_next;
  }
  return x;
}

namespace detail {

inline Eigen::VectorXd damped_cg(const ModelParams& params, const Dataset& train,
                                 const Eigen::VectorXd& v, double lambda, double tol,
                                 Eigen::VectorXd x0) {
  const int max_iters = static_cast<int>(std::max<Eigen::Index>(50, 10 * params.size()));
  return conjugate_gradient([&](const Eigen::VectorXd& x) { return hvp(params, train, x, lambda); },
                            v, tol, std::move(x0), max_iters);
}

}  // namespace detail

// Solves (H + lambda I) u = v to ||(H + lambda I) u - v|| <= 1e-8 ||v||.
inline Eigen::VectorXd inverse_hvp_exact(const ModelParams& params, const Dataset& train,
                                         const Eigen::VectorXd& v, double lambda,
                                         SolverKind method = SolverKind::Cg,
                                         double cg_tol = 1e-10) {
  if (v.size() != params.size()) throw DimensionError("inverse_hvp: vector length mismatch");
  if (v.norm() == 0.0) return Eigen::VectorXd::Zero(v.size());
  constexpr double kAccept = 1e-8;

  Eigen::VectorXd u;
  if (method == SolverKind::Dense) {
    const Eigen::Index p = params.size();
    if (p > kMaxDenseParams) {
      throw SolverError("dense inverse-HVP limited to " + std::to_string(kMaxDenseParams) +
                        " parameters");
    }
    Eigen::MatrixXd A(p, p);
    for (Eigen::Index i = 0; i < p; ++i) {
      A.col(i) = hvp(params, train, Eigen::VectorXd::Unit(p, i), lambda);
    }
    A = 0.5 * (A + A.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) {
      throw IndefiniteHessianError("damped Hessian is not positive definite; increase damping");
    }
    u = llt.solve(v);
  } else {
    u = detail::damped_cg(params, train, v, lambda, cg_tol, Eigen::VectorXd::Zero(v.size()));
    // Restarted CG repairs drift between the recursive and true residual.
    for (int restart = 0;
         restart < 3 && detail::relative_residual(params, train, u, v, lambda) > 0.1 * kAccept;
         ++restart) {
      u = detail::damped_cg(params, train, v, lambda, cg_tol, u);
    }
  }
  const double res = detail::relative_residual(params, train, u, v, lambda);
  if (!(res <= kAccept)) {
    throw SolverError("inverse-HVP did not converge: relative residual " + std::to_string(res),
                      res);
  }
  return u;
}

// Stochastic recursion u_{j+1} = v + (I - (H_batch + lambda I)/scale) u_j,
// started at u_0 = v; returns the mean over repeats of u_depth / scale.
inline Eigen::VectorXd inverse_hvp_lissa(const ModelParams& params, const Dataset& train,
                                         const Eigen::VectorXd& v, double lambda,
                                         const LissaConfig& cfg) {
  cfg.validate();
  if (v.size() != params.size()) throw DimensionError("inverse_hvp: vector length mismatch");
  if (train.empty()) throw SolverError("LiSSA needs a nonempty training set");
  const double vn = v.norm();
  if (vn == 0.0) return Eigen::VectorXd::Zero(v.size());
  const bool full_batch = static_cast<std::size_t>(cfg.batch_size) >= train.size();

  Eigen::VectorXd total = Eigen::VectorXd::Zero(v.size());
  std::vector<std::size_t> batch(full_batch ? 0 : static_cast<std::size_t>(cfg.batch_size));
  for (int r = 0; r < cfg.repeats; ++r) {
    Rng rng = make_rng(derive_seed(cfg.seed, stream::kLissa), static_cast<std::uint64_t>(r));
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    Eigen::VectorXd u = v;
    for (int j = 0; j < cfg.depth; ++j) {
      for (auto& b : batch) b = pick(rng);
      const Eigen::VectorXd Hu =
          detail::mean_hessian_vector(params, train.examples(), batch, u) + lambda * u;
      u = v + u - Hu / cfg.scale;
      const double un = u.norm();
      if (!std::isfinite(un) || un > 1e6 * vn) {
        std::ostringstream msg;
        msg << "LiSSA diverged at repeat " << r << ", step " << j + 1 << ": |u| = " << un
            << " vs |v| = " << vn << "; raise lissa.scale";
        throw SolverError(msg.str(), un / vn);
      }
    }
    total += u / cfg.scale;
  }
  return total / static_cast<double>(cfg.repeats);
}

// Fitted parameters together with the training set whose damped Hessian they
// define. Solves are pure, so one context can serve many threads.
class InfluenceContext {
 public:
  InfluenceContext(ModelParams params, Dataset train, double lambda, SolverConfig solver = {})
      : params_(std::move(params)), train_(std::move(train)), lambda_(lambda), solver_(solver) {
    if (train_.feature_dim() != static_cast<std::size_t>(params_.input_dim())) {
      throw DimensionError("influence context: dataset does not match model");
    }
  }

  const ModelParams& params() const { return params_; }
  const Dataset& train() const { return train_; }
  std::size_t n() const { return train_.size(); }
  double lambda() const { return lambda_; }
  const SolverConfig& solver() const { return solver_; }

  Eigen::VectorXd solve(const Eigen::VectorXd& v) const {
    if (solver_.kind == SolverKind::Lissa) {
      return inverse_hvp_lissa(params_, train_, v, lambda_, solver_.lissa);
    }
    return inverse_hvp_exact(params_, train_, v, lambda_, solver_.kind, solver_.cg_tol);
  }

 private:
  ModelParams params_;
  Dataset train_;
  double lambda_;
  SolverConfig solver_;
};

// S(z_train, z_test) for a model fitted on n examples.
inline double support_score(const InfluenceContext& ctx, std::size_t n, const Example& z_train,
                            const Example& z_test) {
  const Eigen::VectorXd u = ctx.solve(grad(ctx.params(), z_train));
  return grad(ctx.params(), z_test).dot(u) / static_cast<double>(n);
}

namespace detail {

inline Eigen::VectorXd summed_gradient(const ModelParams& params, const Dataset& set) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(params.size());
  for (const auto& z : set) g += grad(params, z);
  return g;
}

}  // namespace detail

// Criterion 1 marginal: mean over the clean set C of S(z_d, z_c), for a model
// fitted on the dirty set (n = |D|). One solve on grad L(z_d).
inline double marginal_score_test(const InfluenceContext& ctx_on_dirty, const Example& z_d,
                                  const Dataset& clean, std::size_t n) {
  if (clean.empty()) throw ConfigError("marginal_score_test: clean set is empty");
  const Eigen::VectorXd u = ctx_on_dirty.solve(grad(ctx_on_dirty.params(), z_d));
  const Eigen::VectorXd g = detail::summed_gradient(ctx_on_dirty.params(), clean);
  return g.dot(u) / (static_cast<double>(n) * static_cast<double>(clean.size()));
}

// Criterion 2 marginal: mean over the clean training sample of S(z_c, z_d),
// for a model fitted on that sample (n = |C~|). One solve on the summed clean
// gradient.
inline double marginal_score_train(const InfluenceContext& ctx_on_clean, const Dataset& clean,
                                   const Example& z_d, std::size_t n) {
  if (clean.empty()) throw ConfigError("marginal_score_train: clean set is empty");
  const Eigen::VectorXd u =
      ctx_on_clean.solve(detail::summed_gradient(ctx_on_clean.params(), clean));
  return grad(ctx_on_clean.params(), z_d).dot(u) /
         (static_cast<double>(n) * static_cast<double>(clean.size()));
}

// Batch form of both marginals: u = (H + lambda I)^{-1} mean_{z in ref} grad L(z)
// is computed once; score(z) = grad L(z)^T u / n. By symmetry of H this equals
// the average of the pairwise scores in either slot order.
class PooledScorer {
 public:
  PooledScorer(const InfluenceContext& ctx, const Dataset& reference, std::size_t n)
      : params_(ctx.params()), n_(n) {
    if (reference.empty()) throw ConfigError("pooled scorer: reference set is empty");
    pooled_ = ctx.solve(detail::summed_gradient(ctx.params(), reference) /
                        static_cast<double>(reference.size()));
  }

  double score(const Example& z) const {
    return grad(params_, z).dot(pooled_) / static_cast<double>(n_);
  }

  const Eigen::VectorXd& pooled_inverse_hvp() const { return pooled_; }

 private:
  ModelParams params_;
  std::size_t n_;
  Eigen::VectorXd pooled_;
};

// ---------------------------------------------------------------------------

struct ScoreRecord {
  std::string example_id;
  int iteration = 0;
  double score = 0.0;  // estimated change in test loss (nats), or confidence for conf
  Strategy strategy = Strategy::Cr2;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

// Scores every positively labelled example of `dirty`.
inline std::vector<ScoreRecord> score_positives(const PooledScorer& scorer, const Dataset& dirty,
                                                int iteration, Strategy strategy, int jobs = 1) {
  std::vector<std::size_t> positives;
  for (std::size_t i = 0; i < dirty.size(); ++i) {
    if (dirty[i].label == 1) positives.push_back(i);
  }
  std::vector<ScoreRecord> out(positives.size());
  parallel_for(positives.size(), jobs, [&](std::size_t k) {
    const Example& z = dirty[positives[k]];
    const double s = scorer.score(z);
    if (!std::isfinite(s)) throw SolverError("non-finite support score for '" + z.id + "'");
    out[k] = {z.id, iteration, s, strategy};
  });
  return out;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

inline void write_score_csv(const std::vector<ScoreRecord>& records, std::ostream& out,
                            bool header = true) {
  if (header) out << "example_id,iteration,strategy,score\n";
  for (const auto& r : records) {
    out << detail::csv_field(r.example_id) << ',' << r.iteration << ',' << to_string(r.strategy)
        << ',' << detail::short_double(r.score) << '\n';
  }
}

inline std::vector<ScoreRecord> read_score_csv(std::istream& in) {
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = detail::split_csv_line(line);
    if (lineno == 1 && !f.empty() && f[0] == "example_id") continue;
    if (f.size() != 4) {
      throw FormatError("score CSV line " + std::to_string(lineno) + ": expected 4 fields");
    }
    try {
      out.push_back({f[0], std::stoi(f[1]), std::stod(f[3]), parse_strategy(f[2])});
    } catch (const std::logic_error&) {
      throw FormatError("score CSV line " + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

}  // namespace ifdenoise
