#pragma once

#include <cstdint>
#include <iostream>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/constraint.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

enum class Variant { Aipod, EAipod, E2Aipod };

// Counter roles multiplexing the NoiseG / NoiseF streams within one outer
// iteration; see pack_counter.
inline constexpr std::uint64_t kRoleLowerGrad = 0;  // phi^{k,s}
inline constexpr std::uint64_t kRoleWHess = 1;      // phi^k_(n) in w
inline constexpr std::uint64_t kRoleMedium = 2;     // xi/phi^k_(n) in the u loop
inline constexpr std::uint64_t kRoleDf = 3;         // phi^k in d_f

struct SolverConfig {
  Variant variant = Variant::EAipod;
  double alpha = 0.02;
  double beta = 0.01;
  double rho = 0.5;
  double delta = 1.0;
  double p = 0.3;  // lower-level projection probability
  double q = 0.3;  // medium-level projection probability
  int S = 5;       // lower-level steps per outer round
  int T = 2;       // inner UL steps (e-aipod) / UL projection period (e2-aipod)
  int N = 10;      // medium-level steps per outer round (e2-aipod)
  int K = 400;     // outer rounds
  NeumannConfig neumann{1.0, 3, 0.0, std::nullopt};  // l_g1 = 0 -> take from problem
  std::uint64_t master_seed = 0;
  int eval_every = 1;
  int ll_batch = 1;
  bool record_iterates = false;
};

// Test-only overrides for the projection coins.
struct TestHooks {
  std::optional<bool> force_ll_coin;
  std::optional<bool> force_ml_coin;
};

struct Counters {
  std::uint64_t ll_projections = 0;
  std::uint64_t ul_explicit_projections = 0;
  std::uint64_t ul_implicit_projections = 0;  // V2-sandwich / u-projection events
  std::uint64_t g_grad_samples = 0;
  std::uint64_t g_hess_samples = 0;
  std::uint64_t f_grad_samples = 0;
};

// Communication-round accounting for federated runs (zero elsewhere). Rounds
// count server barriers; scalars_transferred adds one d-vector per client per
// averaging round.
struct CommLog {
  std::uint64_t ll_rounds = 0;
  std::uint64_t ul_rounds = 0;
  std::uint64_t ml_rounds = 0;
  std::uint64_t hvp_rounds = 0;
  std::uint64_t scalars_transferred = 0;
};

struct MetricRow {
  long k = 0;
  double error_inst = 0.0;         // stationarity + ||y - y*(x)||^2
  double error_running_avg = 0.0;  // mean of error_inst over emitted rows
  double stationarity = 0.0;
  Counters counters;
  CommLog comm;
  double wall_ms = 0.0;  // kept at 0 so traces are byte-reproducible
};

struct RunTrace {
  std::vector<MetricRow> rows;
  std::vector<Eigen::VectorXd> xs;  // outer iterates, when recorded
  std::vector<Eigen::VectorXd> ys;
  Counters counters;
  Eigen::VectorXd x_final, y_final;
};

namespace detail {

inline void validate_config(const BilevelProblem& p, const SolverConfig& cfg) {
  if (cfg.p <= 0.0 || cfg.p > 1.0) throw std::invalid_argument("solver: p must lie in (0, 1]");
  if (cfg.q <= 0.0 || cfg.q > 1.0) throw std::invalid_argument("solver: q must lie in (0, 1]");
  if (cfg.delta < 1.0) throw std::invalid_argument("solver: delta must be >= 1");
  if (cfg.alpha <= 0.0 || cfg.beta <= 0.0 || cfg.rho <= 0.0) {
    throw std::invalid_argument("solver: step sizes must be positive");
  }
  if (cfg.S < 0 || cfg.T < 1 || cfg.N < 1 || cfg.K < 0) {
    throw std::invalid_argument("solver: loop counts out of range");
  }
  if (cfg.eval_every < 1 || cfg.ll_batch < 1) {
    throw std::invalid_argument("solver: eval_every and ll_batch must be >= 1");
  }
  if (cfg.variant == Variant::E2Aipod && !p.meta.coupling_is_zero) {
    throw CapabilityError("e2-aipod requires a problem with zero coupling (h = 0)");
  }
  if (cfg.beta > 1.0 / p.meta.l_g1) {
    std::cerr << "warning: beta = " << cfg.beta << " exceeds 1/l_g1 = "
              << 1.0 / p.meta.l_g1 << "\n";
  }
  if (cfg.variant == Variant::E2Aipod) {
    const double s2 = p.meta.noise.std_g2 * p.meta.noise.std_g2;
    double bound = 1.0 / p.meta.l_g1;
    if (s2 > 0.0) bound = std::min(bound, p.meta.mu_g / (4.0 * s2));
    if (cfg.rho > bound) {
      std::cerr << "warning: rho = " << cfg.rho << " exceeds recommended bound " << bound
                << "\n";
    }
  }
}

inline NeumannConfig resolve_neumann(const BilevelProblem& p, const SolverConfig& cfg) {
  NeumannConfig n = cfg.neumann;
  if (n.l_g1 <= 0.0) n.l_g1 = p.meta.l_g1;
  return n;
}

// x + delta * (proj - x); the delta = 1 case short-circuits so it coincides
// exactly with a plain projected step.
inline Eigen::VectorXd delta_combine(const Eigen::VectorXd& x_prev,
                                     const Eigen::VectorXd& proj, double delta) {
  if (delta == 1.0) return proj;
  return x_prev + delta * (proj - x_prev);
}

// Gradient of g averaged over a batch of i.i.d. draws within one token.
inline Eigen::VectorXd batched_grad_gy(const BilevelProblem& p, const Eigen::VectorXd& x,
                                       const Eigen::VectorXd& y, std::uint64_t seed,
                                       const SampleToken& tok, int batch) {
  if (batch <= 1) return grad_gy_s(p, x, y, seed, tok, 0);
  Eigen::VectorXd acc = grad_gy_s(p, x, y, seed, tok, 0);
  for (int j = 1; j < batch; ++j) {
    acc += grad_gy_s(p, x, y, seed, tok,
                     static_cast<std::uint64_t>(j) * static_cast<std::uint64_t>(p.dy));
  }
  acc /= static_cast<double>(batch);
  return acc;
}

// Trace bookkeeping shared by the solver loops. Metric evaluation uses only
// deterministic oracles, so it never advances any sample stream.
struct Tracer {
  const BilevelProblem* problem;
  const SolverConfig* cfg;
  const CommLog* comm = nullptr;  // set by the federated runners
  RunTrace trace;
  double error_sum = 0.0;

  explicit Tracer(const BilevelProblem& p, const SolverConfig& c)
      : problem(&p), cfg(&c) {}

  void record_iterates(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (cfg->record_iterates) {
      trace.xs.push_back(x);
      trace.ys.push_back(y);
    }
  }

  bool due(long label) const {
    return label % cfg->eval_every == 0 || label == cfg->K;
  }

  void emit(long label, const Eigen::VectorXd& x_eval, const Eigen::VectorXd& y,
            const Counters& counters) {
    const double stat = stationarity(*problem, x_eval);
    const Eigen::VectorXd ystar = exact_lower_solution(*problem, x_eval);
    const double err = stat + (y - ystar).squaredNorm();
    error_sum += err;
    MetricRow row;
    row.k = label;
    row.error_inst = err;
    row.error_running_avg = error_sum / static_cast<double>(trace.rows.size() + 1);
    row.stationarity = stat;
    row.counters = counters;
    if (comm) row.comm = *comm;
    trace.rows.push_back(row);
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Lower-level loops
// ---------------------------------------------------------------------------

// S projected SGD steps for g(x, .) over Y(x).
inline Eigen::VectorXd lower_pgd(const BilevelProblem& p, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y0, double beta, int S,
                                 std::uint64_t seed, std::uint64_t k, Counters& counters,
                                 int ll_batch = 1) {
  const Eigen::VectorXd b = p.lower_offset(x);
  Eigen::VectorXd y = y0;
  for (int s = 0; s < S; ++s) {
    const SampleToken tok{Stream::NoiseG,
                          pack_counter(kRoleLowerGrad, k, static_cast<std::uint64_t>(s))};
    const Eigen::VectorXd g = detail::batched_grad_gy(p, x, y, seed, tok, ll_batch);
    y = project(*p.lower, b, y - beta * g);
    counters.ll_projections += 1;
    counters.g_grad_samples += static_cast<std::uint64_t>(ll_batch);
  }
  return y;
}

// Proxskip lower loop: SGD corrected by the residual r, projecting only when
// the coin lands. The projection argument is formed as
// (y - beta*g) + beta*(1 - 1/p)*r, algebraically yhat - (beta/p) r, so p = 1
// reproduces plain projected SGD bit for bit.
inline void eaipod_lower(const BilevelProblem& p, const Eigen::VectorXd& x,
                         Eigen::VectorXd& y, Eigen::VectorXd& r, double beta,
                         double prob, int S, std::uint64_t seed, std::uint64_t k,
                         Counters& counters, int ll_batch = 1,
                         const TestHooks& hooks = {}) {
  const Eigen::VectorXd b = p.lower_offset(x);
  const double cfac = beta * (1.0 - 1.0 / prob);
  for (int s = 0; s < S; ++s) {
    const SampleToken tok{Stream::NoiseG,
                          pack_counter(kRoleLowerGrad, k, static_cast<std::uint64_t>(s))};
    const Eigen::VectorXd g = detail::batched_grad_gy(p, x, y, seed, tok, ll_batch);
    counters.g_grad_samples += static_cast<std::uint64_t>(ll_batch);
    const Eigen::VectorXd yhat = y - beta * (g - r);
    const SampleToken coin{Stream::CoinLL,
                           pack_counter(0, k, static_cast<std::uint64_t>(s))};
    const bool theta =
        hooks.force_ll_coin ? *hooks.force_ll_coin : coin_draw(seed, coin, prob);
    if (theta) {
      const Eigen::VectorXd arg = (y - beta * g) + cfac * r;
      const Eigen::VectorXd ynew = project(*p.lower, b, arg);
      counters.ll_projections += 1;
      r += (prob / beta) * (ynew - yhat);
      y = ynew;
    } else {
      y = yhat;
    }
  }
}

// Medium-level loop approximating u*(x, y) by lazily projected SGD on the
// reduced quadratic model, with the correction variable e compensating the
// skipped projections. u and e restart from zero on every call.
inline Eigen::VectorXd e2aipod_medium(const BilevelProblem& p, const Eigen::VectorXd& x,
                                      const Eigen::VectorXd& y, double rho, double q,
                                      int N, std::uint64_t seed, std::uint64_t k,
                                      Counters& counters, const TestHooks& hooks = {}) {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(p.dy);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(p.dy);
  const double re = rho / q;
  const double qr = q / rho;
  for (int n = 0; n < N; ++n) {
    const SampleToken xi{Stream::NoiseF,
                         pack_counter(kRoleMedium, k, static_cast<std::uint64_t>(n))};
    const SampleToken phi{Stream::NoiseG,
                          pack_counter(kRoleMedium, k, static_cast<std::uint64_t>(n))};
    const Eigen::VectorXd fy = grad_fy_s(p, x, y, seed, xi);
    const Eigen::VectorXd hu = hess_gyy_apply_s(p, x, y, seed, phi, u);
    counters.f_grad_samples += 1;
    counters.g_hess_samples += 1;
    const Eigen::VectorXd uhat = u - rho * (fy + hu - e);
    const SampleToken coin{Stream::CoinML,
                           pack_counter(0, k, static_cast<std::uint64_t>(n))};
    const bool theta =
        hooks.force_ml_coin ? *hooks.force_ml_coin : coin_draw(seed, coin, q);
    if (theta) {
      const Eigen::VectorXd arg = uhat - re * e;
      const Eigen::VectorXd unew = apply_null_projector(*p.lower, arg);
      counters.ul_implicit_projections += 1;
      e += qr * (unew - uhat);
      u = unew;
    } else {
      u = uhat;
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// Solver drivers
// ---------------------------------------------------------------------------

inline RunTrace run_aipod(const BilevelProblem& p, const SolverConfig& cfg,
                          const TestHooks& hooks = {}) {
  detail::validate_config(p, cfg);
  const NeumannConfig neumann = detail::resolve_neumann(p, cfg);
  auto [x, y] = default_start(p, cfg.master_seed);

  Counters counters;
  detail::Tracer tracer(p, cfg);
  tracer.record_iterates(x, y);
  tracer.emit(0, x, y, counters);
  for (int k = 0; k < cfg.K; ++k) {
    y = lower_pgd(p, x, y, cfg.beta, cfg.S, cfg.master_seed,
                  static_cast<std::uint64_t>(k), counters, cfg.ll_batch);
    const Eigen::VectorXd x_prev = x;
    HypergradSample hf =
        estimate_hf(p, x, y, neumann, cfg.master_seed, static_cast<std::uint64_t>(k));
    counters.g_hess_samples += static_cast<std::uint64_t>(hf.phi_draws);
    counters.f_grad_samples += static_cast<std::uint64_t>(hf.xi_draws);
    counters.ul_implicit_projections += static_cast<std::uint64_t>(hf.depth_drawn);
    x = project(*p.upper, p.upper_target, x - cfg.alpha * hf.value);
    counters.ul_explicit_projections += 1;
    tracer.record_iterates(x, y);
    if (tracer.due(k + 1)) tracer.emit(k + 1, x_prev, y, counters);
  }
  tracer.trace.counters = counters;
  tracer.trace.x_final = x;
  tracer.trace.y_final = y;
  return std::move(tracer.trace);
}

inline RunTrace run_eaipod(const BilevelProblem& p, const SolverConfig& cfg,
                           const TestHooks& hooks = {}) {
  detail::validate_config(p, cfg);
  const NeumannConfig neumann = detail::resolve_neumann(p, cfg);
  auto [x, y] = default_start(p, cfg.master_seed);
  Eigen::VectorXd r = Eigen::VectorXd::Zero(p.dy);

  Counters counters;
  detail::Tracer tracer(p, cfg);
  tracer.record_iterates(x, y);
  tracer.emit(0, x, y, counters);
  for (int k = 0; k < cfg.K; ++k) {
    eaipod_lower(p, x, y, r, cfg.beta, cfg.p, cfg.S, cfg.master_seed,
                 static_cast<std::uint64_t>(k), counters, cfg.ll_batch, hooks);
    HypergradSample w =
        estimate_w(p, x, y, neumann, cfg.master_seed, static_cast<std::uint64_t>(k));
    counters.g_hess_samples += static_cast<std::uint64_t>(w.phi_draws);
    counters.f_grad_samples += static_cast<std::uint64_t>(w.xi_draws);
    counters.ul_implicit_projections += static_cast<std::uint64_t>(w.depth_drawn);

    const Eigen::VectorXd x_prev = x;
    Eigen::VectorXd x_inner = x;
    for (int t = 0; t < cfg.T; ++t) {
      const SampleToken xi{Stream::NoiseF,
                           pack_counter(0, static_cast<std::uint64_t>(k),
                                        static_cast<std::uint64_t>(t))};
      const Eigen::VectorXd hf = grad_fx_s(p, x_inner, y, cfg.master_seed, xi) + w.value;
      if (t > 0) counters.f_grad_samples += 1;  // t = 0 reuses w's xi draw
      x_inner -= cfg.alpha * hf;
    }
    const Eigen::VectorXd proj = project(*p.upper, p.upper_target, x_inner);
    counters.ul_explicit_projections += 1;
    x = detail::delta_combine(x, proj, cfg.delta);
    tracer.record_iterates(x, y);
    if (tracer.due(k + 1)) tracer.emit(k + 1, x_prev, y, counters);
  }
  tracer.trace.counters = counters;
  tracer.trace.x_final = x;
  tracer.trace.y_final = y;
  return std::move(tracer.trace);
}

inline RunTrace run_e2aipod(const BilevelProblem& p, const SolverConfig& cfg,
                            const TestHooks& hooks = {}) {
  detail::validate_config(p, cfg);
  auto [x, y] = default_start(p, cfg.master_seed);
  Eigen::VectorXd r = Eigen::VectorXd::Zero(p.dy);

  Counters counters;
  detail::Tracer tracer(p, cfg);
  tracer.record_iterates(x, y);
  tracer.emit(0, project(*p.upper, p.upper_target, x), y, counters);
  for (int k = 0; k < cfg.K; ++k) {
    eaipod_lower(p, x, y, r, cfg.beta, cfg.p, cfg.S, cfg.master_seed,
                 static_cast<std::uint64_t>(k), counters, cfg.ll_batch, hooks);
    const Eigen::VectorXd u =
        e2aipod_medium(p, x, y, cfg.rho, cfg.q, cfg.N, cfg.master_seed,
                       static_cast<std::uint64_t>(k), counters, hooks);

    const SampleToken xi{Stream::NoiseF, pack_counter(0, static_cast<std::uint64_t>(k), 0)};
    const SampleToken phi{Stream::NoiseG,
                          pack_counter(kRoleDf, static_cast<std::uint64_t>(k), 0)};
    const Eigen::VectorXd df = grad_fx_s(p, x, y, cfg.master_seed, xi) +
                               hess_gxy_apply_s(p, x, y, cfg.master_seed, phi, u);
    counters.f_grad_samples += 1;
    counters.g_hess_samples += 1;

    const Eigen::VectorXd x_prev = x;
    if (k % cfg.T == 0) {
      x = project(*p.upper, p.upper_target, x - cfg.alpha * df);
      counters.ul_explicit_projections += 1;
    } else {
      x = x - cfg.alpha * df;
    }
    tracer.record_iterates(x, y);
    if (tracer.due(k + 1)) {
      // Metrics live at the projected virtual point; this projection is not
      // part of the algorithm and is not counted.
      tracer.emit(k + 1, project(*p.upper, p.upper_target, x_prev), y, counters);
    }
  }
  tracer.trace.counters = counters;
  tracer.trace.x_final = x;
  tracer.trace.y_final = y;
  return std::move(tracer.trace);
}

inline RunTrace run_solver(const BilevelProblem& p, const SolverConfig& cfg,
                           const TestHooks& hooks = {}) {
  switch (cfg.variant) {
    case Variant::Aipod:
      return run_aipod(p, cfg, hooks);
    case Variant::EAipod:
      return run_eaipod(p, cfg, hooks);
    case Variant::E2Aipod:
      return run_e2aipod(p, cfg, hooks);
  }
  throw std::invalid_argument("run_solver: unknown variant");
}

}  // namespace bilevel
