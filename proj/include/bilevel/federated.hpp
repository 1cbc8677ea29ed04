#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/constraint.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/solver.hpp"

namespace bilevel {

// Per-client iterates of the simulated federation.
struct ClientState {
  int id = 0;
  Eigen::VectorXd x, y, r, u, e;
};

struct FedRun {
  RunTrace trace;
  CommLog comm;
};

// Mean of per-client blocks; the consensus projection broadcasts it back.
inline Eigen::VectorXd server_average(const std::vector<Eigen::VectorXd>& blocks) {
  return block_mean(blocks);
}

namespace detail {

inline void require_consensus(const BilevelProblem& p, const char* who) {
  if (!p.clients || !p.lower->consensus || !p.meta.coupling_is_zero) {
    throw CapabilityError(std::string(who) + ": requires a consensus-structured problem");
  }
}

inline Eigen::VectorXd stack_blocks(const std::vector<Eigen::VectorXd>& blocks) {
  Eigen::Index n = 0;
  for (const auto& b : blocks) n += b.size();
  Eigen::VectorXd out(n);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.segment(at, b.size()) = b;
    at += b.size();
  }
  return out;
}

inline std::vector<Eigen::VectorXd> split_blocks(const Eigen::VectorXd& v, int clients,
                                                 int d) {
  std::vector<Eigen::VectorXd> out(clients);
  for (int m = 0; m < clients; ++m) {
    out[m] = v.segment(static_cast<Eigen::Index>(m) * d, d);
  }
  return out;
}

inline Eigen::VectorXd client_batched_grad_gy(const BilevelProblem& p, int m,
                                              const Eigen::VectorXd& xm,
                                              const Eigen::VectorXd& ym,
                                              std::uint64_t seed, const SampleToken& tok,
                                              int batch) {
  if (batch <= 1) return client_grad_gy_s(p, m, xm, ym, seed, tok, 0);
  Eigen::VectorXd acc = client_grad_gy_s(p, m, xm, ym, seed, tok, 0);
  for (int j = 1; j < batch; ++j) {
    acc += client_grad_gy_s(p, m, xm, ym, seed, tok,
                            static_cast<std::uint64_t>(j) * static_cast<std::uint64_t>(p.dy));
  }
  acc /= static_cast<double>(batch);
  return acc;
}

}  // namespace detail

// Per-client Hessian-vector-product evaluation of the w blocks: clients apply
// their own curvature samples, the server averages d-vectors (N' + 1 rounds);
// no Hessian leaves a client.
inline std::vector<Eigen::VectorXd> fed_w_hvp(const BilevelProblem& p,
                                              const std::vector<Eigen::VectorXd>& xs,
                                              const std::vector<Eigen::VectorXd>& ys,
                                              const NeumannConfig& cfg, std::uint64_t seed,
                                              std::uint64_t k, Counters& counters,
                                              CommLog& comm) {
  detail::require_consensus(p, "fed_w_hvp");
  const int clients = p.clients->clients;
  const int d = p.clients->block_dim;
  const auto blocks = detail::consensus_w_blocks(p, detail::stack_blocks(xs),
                                                 detail::stack_blocks(ys), cfg, seed, k);
  counters.g_hess_samples += static_cast<std::uint64_t>(blocks.depth) + 1;
  counters.f_grad_samples += 1;
  counters.ul_implicit_projections += static_cast<std::uint64_t>(blocks.depth);
  comm.hvp_rounds += static_cast<std::uint64_t>(blocks.depth) + 1;
  comm.scalars_transferred += static_cast<std::uint64_t>(clients) *
                              static_cast<std::uint64_t>(d) *
                              (static_cast<std::uint64_t>(blocks.depth) + 1);
  return blocks.w_blocks;
}

// Federated Proxskip lower round: local corrected SGD steps; on a shared coin
// the clients ship their proposals to the server, which averages and
// broadcasts. Identical arithmetic to the centralized loop on the lifted
// problem.
inline void fed_lower_round(const BilevelProblem& p, std::vector<ClientState>& clients,
                            const SolverConfig& cfg, std::uint64_t k, Counters& counters,
                            CommLog& comm, const TestHooks& hooks) {
  const int M = p.clients->clients;
  const int d = p.clients->block_dim;
  const double cfac = cfg.beta * (1.0 - 1.0 / cfg.p);
  std::vector<Eigen::VectorXd> g(M), yhat(M), args(M);
  for (int s = 0; s < cfg.S; ++s) {
    const SampleToken tok{Stream::NoiseG,
                          pack_counter(kRoleLowerGrad, k, static_cast<std::uint64_t>(s))};
    for (int m = 0; m < M; ++m) {
      g[m] = detail::client_batched_grad_gy(p, m, clients[m].x, clients[m].y,
                                            cfg.master_seed, tok, cfg.ll_batch);
      yhat[m] = clients[m].y - cfg.beta * (g[m] - clients[m].r);
    }
    counters.g_grad_samples += static_cast<std::uint64_t>(cfg.ll_batch);
    const SampleToken coin{Stream::CoinLL,
                           pack_counter(0, k, static_cast<std::uint64_t>(s))};
    const bool theta = hooks.force_ll_coin ? *hooks.force_ll_coin
                                           : coin_draw(cfg.master_seed, coin, cfg.p);
    if (theta) {
      for (int m = 0; m < M; ++m) {
        args[m] = (clients[m].y - cfg.beta * g[m]) + cfac * clients[m].r;
      }
      const Eigen::VectorXd avg = server_average(args);
      counters.ll_projections += 1;
      comm.ll_rounds += 1;
      comm.scalars_transferred +=
          static_cast<std::uint64_t>(M) * static_cast<std::uint64_t>(d);
      for (int m = 0; m < M; ++m) {
        clients[m].r += (cfg.p / cfg.beta) * (avg - yhat[m]);
        clients[m].y = avg;
      }
    } else {
      for (int m = 0; m < M; ++m) clients[m].y = yhat[m];
    }
  }
}

inline FedRun run_fed_eaipod(const BilevelProblem& p, const SolverConfig& cfg,
                             const TestHooks& hooks = {}) {
  detail::require_consensus(p, "run_fed_eaipod");
  detail::validate_config(p, cfg);
  const NeumannConfig neumann = detail::resolve_neumann(p, cfg);
  const int M = p.clients->clients;
  const int d = p.clients->block_dim;

  auto [x0, y0] = default_start(p, cfg.master_seed);
  std::vector<ClientState> clients(M);
  for (int m = 0; m < M; ++m) {
    clients[m].id = m;
    clients[m].x = x0.segment(static_cast<Eigen::Index>(m) * d, d);
    clients[m].y = y0.segment(static_cast<Eigen::Index>(m) * d, d);
    clients[m].r = Eigen::VectorXd::Zero(d);
  }

  Counters counters;
  CommLog comm;
  detail::Tracer tracer(p, cfg);
  tracer.comm = &comm;
  tracer.record_iterates(x0, y0);
  tracer.emit(0, x0, y0, counters);
  std::vector<Eigen::VectorXd> xin(M), xprev(M), xlist(M), ylist(M);
  for (int k = 0; k < cfg.K; ++k) {
    fed_lower_round(p, clients, cfg, static_cast<std::uint64_t>(k), counters, comm, hooks);

    for (int m = 0; m < M; ++m) {
      xlist[m] = clients[m].x;
      ylist[m] = clients[m].y;
    }
    const std::vector<Eigen::VectorXd> w = fed_w_hvp(
        p, xlist, ylist, neumann, cfg.master_seed, static_cast<std::uint64_t>(k),
        counters, comm);

    for (int m = 0; m < M; ++m) {
      xprev[m] = clients[m].x;
      xin[m] = clients[m].x;
    }
    for (int t = 0; t < cfg.T; ++t) {
      const SampleToken xi{Stream::NoiseF,
                           pack_counter(0, static_cast<std::uint64_t>(k),
                                        static_cast<std::uint64_t>(t))};
      for (int m = 0; m < M; ++m) {
        const Eigen::VectorXd hf =
            client_grad_fx_s(p, m, xin[m], clients[m].y, cfg.master_seed, xi) + w[m];
        xin[m] -= cfg.alpha * hf;
      }
      if (t > 0) counters.f_grad_samples += 1;
    }
    const Eigen::VectorXd avg = server_average(xin);
    counters.ul_explicit_projections += 1;
    comm.ul_rounds += 1;
    comm.scalars_transferred +=
        static_cast<std::uint64_t>(M) * static_cast<std::uint64_t>(d);
    for (int m = 0; m < M; ++m) {
      clients[m].x = detail::delta_combine(xprev[m], avg, cfg.delta);
    }

    for (int m = 0; m < M; ++m) {
      xlist[m] = clients[m].x;
      ylist[m] = clients[m].y;
    }
    const Eigen::VectorXd x_stacked = detail::stack_blocks(xlist);
    const Eigen::VectorXd y_stacked = detail::stack_blocks(ylist);
    tracer.record_iterates(x_stacked, y_stacked);
    if (tracer.due(k + 1)) {
      tracer.emit(k + 1, detail::stack_blocks(xprev), y_stacked, counters);
    }
  }
  for (int m = 0; m < M; ++m) {
    xlist[m] = clients[m].x;
    ylist[m] = clients[m].y;
  }
  tracer.trace.counters = counters;
  tracer.trace.x_final = detail::stack_blocks(xlist);
  tracer.trace.y_final = detail::stack_blocks(ylist);
  return {std::move(tracer.trace), comm};
}

inline FedRun run_fed_e2aipod(const BilevelProblem& p, const SolverConfig& cfg,
                              const TestHooks& hooks = {}) {
  detail::require_consensus(p, "run_fed_e2aipod");
  detail::validate_config(p, cfg);
  const int M = p.clients->clients;
  const int d = p.clients->block_dim;

  auto [x0, y0] = default_start(p, cfg.master_seed);
  std::vector<ClientState> clients(M);
  for (int m = 0; m < M; ++m) {
    clients[m].id = m;
    clients[m].x = x0.segment(static_cast<Eigen::Index>(m) * d, d);
    clients[m].y = y0.segment(static_cast<Eigen::Index>(m) * d, d);
    clients[m].r = Eigen::VectorXd::Zero(d);
  }

  Counters counters;
  CommLog comm;
  detail::Tracer tracer(p, cfg);
  tracer.comm = &comm;
  tracer.record_iterates(x0, y0);
  tracer.emit(0, project(*p.upper, p.upper_target, x0), y0, counters);
  const double re = cfg.rho / cfg.q;
  const double qr = cfg.q / cfg.rho;
  std::vector<Eigen::VectorXd> uhat(M), args(M), xlist(M), ylist(M), xprev(M), df(M);
  for (int k = 0; k < cfg.K; ++k) {
    fed_lower_round(p, clients, cfg, static_cast<std::uint64_t>(k), counters, comm, hooks);

    // Medium-level rounds; u and e restart from zero.
    for (int m = 0; m < M; ++m) {
      clients[m].u = Eigen::VectorXd::Zero(d);
      clients[m].e = Eigen::VectorXd::Zero(d);
    }
    for (int n = 0; n < cfg.N; ++n) {
      const SampleToken xi{Stream::NoiseF,
                           pack_counter(kRoleMedium, static_cast<std::uint64_t>(k),
                                        static_cast<std::uint64_t>(n))};
      const SampleToken phi{Stream::NoiseG,
                            pack_counter(kRoleMedium, static_cast<std::uint64_t>(k),
                                         static_cast<std::uint64_t>(n))};
      for (int m = 0; m < M; ++m) {
        const Eigen::VectorXd fy =
            client_grad_fy_s(p, m, clients[m].x, clients[m].y, cfg.master_seed, xi);
        const Eigen::VectorXd hu =
            client_hess_gyy_s(p, m, clients[m].x, clients[m].y, cfg.master_seed, phi) *
            clients[m].u;
        uhat[m] = clients[m].u - cfg.rho * (fy + hu - clients[m].e);
      }
      counters.f_grad_samples += 1;
      counters.g_hess_samples += 1;
      const SampleToken coin{Stream::CoinML,
                             pack_counter(0, static_cast<std::uint64_t>(k),
                                          static_cast<std::uint64_t>(n))};
      const bool theta = hooks.force_ml_coin ? *hooks.force_ml_coin
                                             : coin_draw(cfg.master_seed, coin, cfg.q);
      if (theta) {
        for (int m = 0; m < M; ++m) args[m] = uhat[m] - re * clients[m].e;
        const Eigen::VectorXd avg = server_average(args);
        counters.ul_implicit_projections += 1;
        comm.ml_rounds += 1;
        comm.scalars_transferred +=
            static_cast<std::uint64_t>(M) * static_cast<std::uint64_t>(d);
        for (int m = 0; m < M; ++m) {
          clients[m].e += qr * (avg - uhat[m]);
          clients[m].u = avg;
        }
      } else {
        for (int m = 0; m < M; ++m) clients[m].u = uhat[m];
      }
    }

    const SampleToken xi{Stream::NoiseF, pack_counter(0, static_cast<std::uint64_t>(k), 0)};
    const SampleToken phi{Stream::NoiseG,
                          pack_counter(kRoleDf, static_cast<std::uint64_t>(k), 0)};
    for (int m = 0; m < M; ++m) {
      df[m] = client_grad_fx_s(p, m, clients[m].x, clients[m].y, cfg.master_seed, xi) +
              client_hess_gxy_s(p, m, clients[m].x, clients[m].y, cfg.master_seed, phi) *
                  clients[m].u;
    }
    counters.f_grad_samples += 1;
    counters.g_hess_samples += 1;

    for (int m = 0; m < M; ++m) xprev[m] = clients[m].x;
    if (k % cfg.T == 0) {
      for (int m = 0; m < M; ++m) args[m] = clients[m].x - cfg.alpha * df[m];
      const Eigen::VectorXd avg = server_average(args);
      counters.ul_explicit_projections += 1;
      comm.ul_rounds += 1;
      comm.scalars_transferred +=
          static_cast<std::uint64_t>(M) * static_cast<std::uint64_t>(d);
      for (int m = 0; m < M; ++m) clients[m].x = avg;
    } else {
      for (int m = 0; m < M; ++m) clients[m].x = clients[m].x - cfg.alpha * df[m];
    }

    for (int m = 0; m < M; ++m) {
      xlist[m] = clients[m].x;
      ylist[m] = clients[m].y;
    }
    const Eigen::VectorXd x_stacked = detail::stack_blocks(xlist);
    const Eigen::VectorXd y_stacked = detail::stack_blocks(ylist);
    tracer.record_iterates(x_stacked, y_stacked);
    if (tracer.due(k + 1)) {
      tracer.emit(k + 1,
                  project(*p.upper, p.upper_target, detail::stack_blocks(xprev)),
                  y_stacked, counters);
    }
  }
  for (int m = 0; m < M; ++m) {
    xlist[m] = clients[m].x;
    ylist[m] = clients[m].y;
  }
  tracer.trace.counters = counters;
  tracer.trace.x_final = detail::stack_blocks(xlist);
  tracer.trace.y_final = detail::stack_blocks(ylist);
  return {std::move(tracer.trace), comm};
}

}  // namespace bilevel
