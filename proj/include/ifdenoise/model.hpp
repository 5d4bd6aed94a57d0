#pragma once

// Binary softmax classifier p(y | x, theta) = softmax(w_y^T h(x, phi)) with two
// encoders: LINEAR (h = [x, 1]) and MLP1 (h = [tanh(W1 x + b1), 1]). The
// trailing constant makes w_y carry a per-class bias.
//
// Flattened parameter layout: [w0 | w1 | W1 (row-major, hidden x input) | b1].

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ifdenoise/dataset.hpp"
#include "ifdenoise/detail/dual.hpp"
#include "ifdenoise/error.hpp"
#include "ifdenoise/random.hpp"

namespace ifdenoise {

enum class Backend { Linear, Mlp1 };

inline std::string to_string(Backend b) { return b == Backend::Linear ? "linear" : "mlp1"; }

inline Backend parse_backend(const std::string& s) {
  if (s == "linear") return Backend::Linear;
  if (s == "mlp1") return Backend::Mlp1;
  throw ConfigError("unknown backend '" + s + "' (expected linear|mlp1)");
}

namespace detail {

struct Layout {
  Backend backend = Backend::Linear;
  Eigen::Index input = 0;
  Eigen::Index hidden = 0;

  Eigen::Index encoder() const { return (backend == Backend::Linear ? input : hidden) + 1; }
  Eigen::Index w(int label) const { return label * encoder(); }
  Eigen::Index weights() const { return 2 * encoder(); }
  Eigen::Index bias() const { return weights() + hidden * input; }
  Eigen::Index size() const {
    return backend == Backend::Linear ? 2 * encoder() : 2 * encoder() + hidden * input + hidden;
  }
};

}  // namespace detail

class ModelParams {
 public:
  ModelParams() = default;

  // All-zero parameters of the given shape.
  ModelParams(Backend backend, Eigen::Index input_dim, Eigen::Index hidden_dim = 0)
      : layout_{backend, input_dim, backend == Backend::Linear ? 0 : hidden_dim} {
    if (input_dim <= 0) throw DimensionError("model input dimension must be positive");
    if (backend == Backend::Mlp1 && hidden_dim <= 0) {
      throw DimensionError("mlp1 backend needs hidden_dim > 0");
    }
    values_ = Eigen::VectorXd::Zero(layout_.size());
  }

  static ModelParams from_flat(Backend backend, Eigen::Index input_dim, Eigen::Index hidden_dim,
                               Eigen::VectorXd values) {
    ModelParams p(backend, input_dim, hidden_dim);
    if (values.size() != p.size()) {
      throw DimensionError("flat parameter vector has length " + std::to_string(values.size()) +
                           ", shape needs " + std::to_string(p.size()));
    }
    p.values_ = std::move(values);
    return p;
  }

  Backend backend() const { return layout_.backend; }
  Eigen::Index input_dim() const { return layout_.input; }
  Eigen::Index hidden_dim() const { return layout_.hidden; }
  Eigen::Index encoder_dim() const { return layout_.encoder(); }
  Eigen::Index size() const { return values_.size(); }
  const detail::Layout& layout() const { return layout_; }

  const Eigen::VectorXd& flat() const { return values_; }
  Eigen::VectorXd& flat() { return values_; }

  auto w(int label) const { return values_.segment(layout_.w(label), layout_.encoder()); }

  bool same_shape(const ModelParams& o) const {
    return layout_.backend == o.layout_.backend && layout_.input == o.layout_.input &&
           layout_.hidden == o.layout_.hidden;
  }

 private:
  detail::Layout layout_;
  Eigen::VectorXd values_;
};

struct TrainConfig {
  double lambda = 0.01;         // L2 coefficient and Hessian damping
  double learning_rate = 1.0;   // first trial step of the line search
  int max_iters = 20000;
  double grad_tol = 1e-7;
  std::uint64_t seed = 0;
  Backend backend = Backend::Linear;
  int hidden_dim = 8;

  void validate() const {
    if (!(lambda > 0.0)) throw ConfigError("train.lambda must be > 0");
    if (!(grad_tol > 0.0)) throw ConfigError("train.grad_tol must be > 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (max_iters < 0) throw ConfigError("train.max_iters must be >= 0");
    if (backend == Backend::Mlp1 && hidden_dim <= 0) {
      throw ConfigError("train.hidden_dim must be > 0 for mlp1");
    }
  }
};

struct ConsistencyConfig {
  double alpha = 1.0;
  double beta = 0.9;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("consistency.alpha must be >= 0");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("consistency.beta must lie in [0, 1]");
  }
};

struct FitResult {
  ModelParams params;
  bool converged = false;
  int iterations = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  bool single_label = false;  // training set carried only one label
};

namespace detail {

using std::exp;

template <class T>
T sigmoid(const T& z) {
  if (value_of(z) >= 0.0) return T(1.0) / (T(1.0) + exp(-z));
  const T e = exp(z);
  return e / (T(1.0) + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline void check_input(const ModelParams& p, const Eigen::VectorXd& x) {
  if (x.size() != p.input_dim()) {
    throw DimensionError("feature vector has " + std::to_string(x.size()) +
                         " entries, model expects " + std::to_string(p.input_dim()));
  }
}

// Fills h and returns the logit difference a1 - a0.
template <class T>
T forward(const Layout& L, const T* th, const double* x, std::vector<T>& h) {
  const Eigen::Index enc = L.encoder();
  h.resize(static_cast<std::size_t>(enc));
  if (L.backend == Backend::Linear) {
    for (Eigen::Index i = 0; i < L.input; ++i) h[i] = T(x[i]);
  } else {
    using std::tanh;
    const T* W1 = th + L.weights();
    const T* b1 = th + L.bias();
    for (Eigen::Index j = 0; j < L.hidden; ++j) {
      T u = b1[j];
      const T* row = W1 + j * L.input;
      for (Eigen::Index k = 0; k < L.input; ++k) u += row[k] * T(x[k]);
      h[j] = tanh(u);
    }
  }
  h[enc - 1] = T(1.0);
  const T* w0 = th + L.w(0);
  const T* w1 = th + L.w(1);
  T diff(0.0);
  for (Eigen::Index i = 0; i < enc; ++i) diff += (w1[i] - w0[i]) * h[i];
  return diff;
}

// Adds scale * d(objective)/d(theta) given d(objective)/d(logit_k) = g_k.
template <class T>
void backward(const Layout& L, const T* th, const double* x, const std::vector<T>& h,
              const T& g0, const T& g1, const T& scale, T* out) {
  const Eigen::Index enc = L.encoder();
  const T s0 = scale * g0;
  const T s1 = scale * g1;
  for (Eigen::Index i = 0; i < enc; ++i) {
    out[L.w(0) + i] += s0 * h[i];
    out[L.w(1) + i] += s1 * h[i];
  }
  if (L.backend == Backend::Mlp1) {
    const T* w0 = th + L.w(0);
    const T* w1 = th + L.w(1);
    for (Eigen::Index j = 0; j < L.hidden; ++j) {
      const T gu = (s0 * w0[j] + s1 * w1[j]) * (T(1.0) - h[j] * h[j]);
      T* row = out + L.weights() + j * L.input;
      for (Eigen::Index k = 0; k < L.input; ++k) row[k] += gu * T(x[k]);
      out[L.bias() + j] += gu;
    }
  }
}

// d(-log p(label))/d(logits), written so that 1 - p never cancels.
template <class T>
std::pair<T, T> nll_logit_grad(const T& diff, int label) {
  if (label == 1) {
    const T p0 = sigmoid(-diff);
    return {p0, -p0};
  }
  const T p1 = sigmoid(diff);
  return {-p1, p1};
}

inline double nll_from_diff(double diff, int label) {
  return label == 1 ? softplus(-diff) : softplus(diff);
}

struct Evaluation {
  double value = 0.0;
  Eigen::VectorXd gradient;
};

// Mean weighted loss (+ alpha * mean KL(q || p)) + lambda/2 |theta|^2.
inline Evaluation evaluate_objective(const Layout& L, const Eigen::VectorXd& theta,
                                     const Dataset& train, double lambda,
                                     const std::vector<double>& teacher_p1, double alpha,
                                     bool need_grad) {
  Evaluation ev;
  const double inv_n = 1.0 / static_cast<double>(train.size());
  if (need_grad) ev.gradient = Eigen::VectorXd::Zero(theta.size());
  std::vector<double> h;
  double total = 0.0;
  const bool consistency = alpha != 0.0 && !teacher_p1.empty();
  for (std::size_t i = 0; i < train.size(); ++i) {
    const Example& z = train[i];
    const double diff = forward(L, theta.data(), z.features.data(), h);
    double loss = nll_from_diff(diff, z.label);
    auto [g0, g1] = nll_logit_grad(diff, z.label);
    if (consistency) {
      const double q1 = teacher_p1[i];
      const double q0 = 1.0 - q1;
      const double logp1 = -softplus(-diff);
      const double logp0 = -softplus(diff);
      double kl = 0.0;
      if (q0 > 0.0) kl += q0 * (std::log(q0) - logp0);
      if (q1 > 0.0) kl += q1 * (std::log(q1) - logp1);
      loss += alpha * kl;
      const double p1 = sigmoid(diff);
      const double p0 = sigmoid(-diff);
      g0 += alpha * (p0 - q0);
      g1 += alpha * (p1 - q1);
    }
    total += z.weight * loss;
    if (need_grad) {
      backward(L, theta.data(), z.features.data(), h, g0, g1, z.weight * inv_n,
               ev.gradient.data());
    }
  }
  ev.value = total * inv_n + 0.5 * lambda * theta.squaredNorm();
  if (need_grad) ev.gradient += lambda * theta;
  return ev;
}

struct DescentStats {
  bool converged = false;
  int iterations = 0;
  double value = 0.0;
  double grad_norm = 0.0;
};

// Full-batch gradient descent. The trial step is the Barzilai-Borwein length,
// accepted under an Armijo test with halving backtracking. Once objective
// differences fall below rounding, a step is accepted if it shrinks the
// gradient norm instead.
template <class Eval>
DescentStats gradient_descent(Eval&& eval, Eigen::VectorXd& theta, const TrainConfig& cfg) {
  DescentStats st;
  Evaluation cur = eval(theta, true);
  double gnorm = cur.gradient.norm();
  double step = cfg.learning_rate;
  for (; st.iterations < cfg.max_iters; ++st.iterations) {
    if (gnorm <= cfg.grad_tol) {
      st.converged = true;
      break;
    }
    const double flat_tol = 1e-14 * std::max(1.0, std::abs(cur.value));
    double t = step;
    bool accepted = false;
    Eigen::VectorXd cand;
    Evaluation next;
    for (int bt = 0; bt < 80 && !accepted; ++bt, t *= 0.5) {
      cand = theta - t * cur.gradient;
      next = eval(cand, false);
      if (!std::isfinite(next.value)) continue;
      if (next.value <= cur.value - 1e-4 * t * gnorm * gnorm) {
        next = eval(cand, true);
        accepted = true;
      } else if (next.value - cur.value <= flat_tol) {
        next = eval(cand, true);
        accepted = next.gradient.norm() < gnorm;
      }
    }
    if (!accepted) break;  // stalled; report best-so-far
    const Eigen::VectorXd s = cand - theta;
    const Eigen::VectorXd y = next.gradient - cur.gradient;
    const double sy = s.dot(y);
    step = sy > 0.0 ? s.squaredNorm() / sy : 2.0 * step;
    step = std::clamp(step, 1e-12, 1e12);
    theta = std::move(cand);
    cur = std::move(next);
    gnorm = cur.gradient.norm();
  }
  if (!st.converged && gnorm <= cfg.grad_tol) st.converged = true;
  st.value = cur.value;
  st.grad_norm = gnorm;
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------

// Encoder output h(x, phi) including the trailing constant.
inline Eigen::VectorXd encode(const ModelParams& params, const Eigen::VectorXd& x) {
  detail::check_input(params, x);
  std::vector<double> h;
  detail::forward(params.layout(), params.flat().data(), x.data(), h);
  return Eigen::Map<const Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(h.size()));
}

// Returns (p0, p1).
inline std::pair<double, double> predict_proba(const ModelParams& params,
                                               const Eigen::VectorXd& x) {
  detail::check_input(params, x);
  std::vector<double> h;
  const double diff = detail::forward(params.layout(), params.flat().data(), x.data(), h);
  return {detail::sigmoid(-diff), detail::sigmoid(diff)};
}

// -log p(z.label | z.x); no regularization, no example weight.
inline double loss(const ModelParams& params, const Example& z) {
  detail::check_input(params, z.features);
  std::vector<double> h;
  const double diff =
      detail::forward(params.layout(), params.flat().data(), z.features.data(), h);
  return detail::nll_from_diff(diff, z.label);
}

inline Eigen::VectorXd grad(const ModelParams& params, const Example& z) {
  detail::check_input(params, z.features);
  std::vector<double> h;
  const auto& L = params.layout();
  const double* th = params.flat().data();
  const double diff = detail::forward(L, th, z.features.data(), h);
  auto [g0, g1] = detail::nll_logit_grad(diff, z.label);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(params.size());
  detail::backward(L, th, z.features.data(), h, g0, g1, 1.0, out.data());
  return out;
}

namespace detail {

// (1/n) sum_i w_i Hess_i v over the examples at `indices` (all when empty),
// where n = number of examples visited.
inline Eigen::VectorXd mean_hessian_vector(const ModelParams& params,
                                           const std::vector<Example>& examples,
                                           const std::vector<std::size_t>& indices,
                                           const Eigen::VectorXd& v) {
  const auto& L = params.layout();
  const Eigen::Index p = params.size();
  std::vector<Dual> th(static_cast<std::size_t>(p));
  for (Eigen::Index i = 0; i < p; ++i) th[i] = Dual(params.flat()[i], v[i]);
  std::vector<Dual> acc(static_cast<std::size_t>(p));
  std::vector<Dual> h;
  const std::size_t n = indices.empty() ? examples.size() : indices.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Example& z = examples[indices.empty() ? k : indices[k]];
    const Dual diff = forward(L, th.data(), z.features.data(), h);
    auto [g0, g1] = nll_logit_grad(diff, z.label);
    backward(L, th.data(), z.features.data(), h, g0, g1, Dual(z.weight * inv_n), acc.data());
  }
  Eigen::VectorXd out(p);
  for (Eigen::Index i = 0; i < p; ++i) out[i] = acc[i].d;
  return out;
}

}  // namespace detail

// (H + lambda I) v with H the mean per-example loss Hessian over `train`.
inline Eigen::VectorXd hvp(const ModelParams& params, const Dataset& train,
                           const Eigen::VectorXd& v, double lambda) {
  if (v.size() != params.size()) {
    throw DimensionError("hvp: vector length " + std::to_string(v.size()) +
                         " != parameter count " + std::to_string(params.size()));
  }
  if (train.feature_dim() != static_cast<std::size_t>(params.input_dim())) {
    throw DimensionError("hvp: dataset dimension does not match model");
  }
  if (train.empty()) return lambda * v;
  return detail::mean_hessian_vector(params, train.examples(), {}, v) + lambda * v;
}

// Mean weighted per-example loss plus (lambda/2)|theta|^2.
inline double objective(const ModelParams& params, const Dataset& train, double lambda) {
  return detail::evaluate_objective(params.layout(), params.flat(), train, lambda, {}, 0.0, false)
      .value;
}

inline Eigen::VectorXd objective_gradient(const ModelParams& params, const Dataset& train,
                                          double lambda) {
  return detail::evaluate_objective(params.layout(), params.flat(), train, lambda, {}, 0.0, true)
      .gradient;
}

namespace detail {

inline std::vector<double> teacher_probabilities(const ModelParams& teacher, const Dataset& train) {
  std::vector<double> q1;
  q1.reserve(train.size());
  for (const auto& z : train) q1.push_back(predict_proba(teacher, z.features).second);
  return q1;
}

inline ModelParams initial_params(const Dataset& train, const TrainConfig& cfg) {
  ModelParams p(cfg.backend, static_cast<Eigen::Index>(train.feature_dim()), cfg.hidden_dim);
  if (cfg.backend == Backend::Mlp1) {
    Rng rng = make_rng(cfg.seed, stream::kInit);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.flat()[i] = u(rng);
  }
  return p;
}

inline FitResult run_fit(const Dataset& train, const TrainConfig& cfg, const ModelParams* init,
                         const std::vector<double>& teacher_p1, double alpha) {
  cfg.validate();
  if (train.empty()) throw ConfigError("fit: training set is empty");
  ModelParams params = init ? *init : initial_params(train, cfg);
  if (params.input_dim() != static_cast<Eigen::Index>(train.feature_dim())) {
    throw DimensionError("fit: initial parameters do not match dataset dimension");
  }
  bool has[2] = {false, false};
  for (const auto& z : train) has[z.label] = true;

  const Layout L = params.layout();
  auto eval = [&](const Eigen::VectorXd& th, bool need_grad) {
    return evaluate_objective(L, th, train, cfg.lambda, teacher_p1, alpha, need_grad);
  };
  const DescentStats st = gradient_descent(eval, params.flat(), cfg);
  FitResult r;
  r.params = std::move(params);
  r.converged = st.converged;
  r.iterations = st.iterations;
  r.objective = st.value;
  r.grad_norm = st.grad_norm;
  r.single_label = !(has[0] && has[1]);
  return r;
}

}  // namespace detail

// Minimizes mean weighted loss + (lambda/2)|theta|^2. LINEAR starts from zero
// (the optimum is unique); MLP1 from seeded uniform(-0.1, 0.1) unless `init`.
inline FitResult fit(const Dataset& train, const TrainConfig& cfg,
                     const ModelParams* init = nullptr) {
  return detail::run_fit(train, cfg, init, {}, 0.0);
}

// Consistency-regularized fit: loss + alpha * mean KL(q_teacher || p_student),
// the teacher held fixed.
inline FitResult fit_consistency(const Dataset& train, const ModelParams& teacher, double alpha,
                                 const TrainConfig& cfg, const ModelParams* init = nullptr) {
  if (!(alpha >= 0.0)) throw ConfigError("consistency alpha must be >= 0");
  if (teacher.input_dim() != static_cast<Eigen::Index>(train.feature_dim())) {
    throw DimensionError("fit_consistency: teacher does not match dataset dimension");
  }
  if (alpha == 0.0) return detail::run_fit(train, cfg, init, {}, 0.0);
  return detail::run_fit(train, cfg, init, detail::teacher_probabilities(teacher, train), alpha);
}

inline double consistency_objective(const ModelParams& params, const Dataset& train,
                                    const ModelParams& teacher, double alpha, double lambda) {
  return detail::evaluate_objective(params.layout(), params.flat(), train, lambda,
                                    detail::teacher_probabilities(teacher, train), alpha, false)
      .value;
}

// teacher <- beta * teacher + (1 - beta) * student
inline ModelParams ema_update(const ModelParams& teacher, const ModelParams& student,
                              double beta) {
  if (!teacher.same_shape(student)) throw DimensionError("ema_update: shape mismatch");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("ema_update: beta must lie in [0, 1]");
  ModelParams out = teacher;
  if (beta == 1.0) return out;
  if (beta == 0.0) return student;
  out.flat() = beta * teacher.flat() + (1.0 - beta) * student.flat();
  return out;
}

// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelParams& p) {
  nlohmann::json j;
  j["backend"] = to_string(p.backend());
  j["input_dim"] = p.input_dim();
  j["hidden_dim"] = p.hidden_dim();
  j["values"] = std::vector<double>(p.flat().data(), p.flat().data() + p.size());
  return j;
}

inline ModelParams model_params_from_json(const nlohmann::json& j) {
  try {
    const auto values = j.at("values").get<std::vector<double>>();
    return ModelParams::from_flat(
        parse_backend(j.at("backend").get<std::string>()), j.at("input_dim").get<Eigen::Index>(),
        j.at("hidden_dim").get<Eigen::Index>(),
        Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model params JSON: ") + e.what());
  }
}

}  // namespace ifdenoise
