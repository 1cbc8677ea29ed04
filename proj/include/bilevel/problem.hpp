#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "bilevel/constraint.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

// Additive zero-mean Gaussian perturbation levels for the stochastic oracles.
struct NoiseModel {
  double std_f = 0.0;   // f gradients
  double std_g1 = 0.0;  // g gradient
  double std_g2 = 0.0;  // g second-derivative blocks
};

struct ProblemMetadata {
  double mu_g = 1.0;   // strong convexity of g in y
  double l_g1 = 1.0;   // Lipschitz constant of grad g
  NoiseModel noise;
  bool coupling_is_zero = false;  // h == 0
};

// How Hessian noise is laid out: dense symmetric perturbation of the whole
// block, or independent per-client symmetric perturbations of the diagonal
// blocks (consensus problems keep cross-client curvature exactly zero).
enum class HessianNoiseLayout { Dense, BlockDiagonal };

// Per-client oracle handles for consensus-structured problems. The lifted
// oracles are assembled from these, so a federated run and a centralized run
// on the lifted problem see identical values.
struct ClientOracles {
  int clients = 0;
  int block_dim = 0;
  std::function<double(int, const Eigen::VectorXd&, const Eigen::VectorXd&)> f_value;
  std::function<Eigen::VectorXd(int, const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_fx;
  std::function<Eigen::VectorXd(int, const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_fy;
  std::function<Eigen::VectorXd(int, const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_gy;
  std::function<Eigen::MatrixXd(int, const Eigen::VectorXd&, const Eigen::VectorXd&)> hess_gyy;
  std::function<Eigen::MatrixXd(int, const Eigen::VectorXd&, const Eigen::VectorXd&)> hess_gxy;
};

enum class ProblemKind { Synthetic, FederatedQuadratic, Custom };

// Everything needed to rebuild a problem instance bit-identically.
struct ProblemSpec {
  ProblemKind kind = ProblemKind::Synthetic;
  int d = 100;
  int rank_a = 50;
  int rank_b = 50;
  std::uint64_t seed = 0;
  NoiseModel noise{0.1, 0.1, 0.1};
  double heterogeneity = 0.5;  // federated only
  int m_clients = 5;           // federated only
};

/**
 * Oracle bundle for one bilevel instance
 *
 *   min_{Bx = e} f(x, y*(x))   s.t.   y*(x) = argmin_{Ay + h(x) = c} g(x, y).
 *
 * Deterministic oracles are plain closures; stochastic evaluation goes through
 * the *_s free functions below, which add noise keyed by (seed, token, index)
 * so every draw is reproducible and slice-consistent across federated clients.
 * Instances are immutable after construction and safe to share.
 */
struct BilevelProblem {
  int dx = 0;
  int dy = 0;
  std::shared_ptr<const SubspaceDecomposition> upper;  // B
  Eigen::VectorXd upper_target;                        // e
  std::shared_ptr<const SubspaceDecomposition> lower;  // A
  Eigen::VectorXd lower_target;                        // c

  // Coupling h(x) and its Jacobian (rows x dx); unset when h == 0.
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> coupling;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> coupling_jacobian;

  std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)> f_value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_fx;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_fy;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_gy;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> hess_gyy;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> hess_gxy;

  ProblemMetadata meta;
  HessianNoiseLayout hess_noise_layout = HessianNoiseLayout::Dense;
  std::optional<ClientOracles> clients;

  // Closed-form lower-level solution, when the instance has one.
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> exact_lower;

  ProblemSpec spec;

  bool has_coupling() const { return static_cast<bool>(coupling); }

  // Lower-level right-hand side c - h(x).
  Eigen::VectorXd lower_offset(const Eigen::VectorXd& x) const {
    if (!has_coupling()) return lower_target;
    return lower_target - coupling(x);
  }
};

inline Eigen::VectorXd exact_lower_solution(const BilevelProblem& p,
                                            const Eigen::VectorXd& x) {
  if (!p.exact_lower) {
    throw CapabilityError("exact_lower_solution: no closed form for this problem kind");
  }
  return p.exact_lower(x);
}

// ---------------------------------------------------------------------------
// Stochastic oracle evaluation
// ---------------------------------------------------------------------------
//
// Noise index layout within one token:
//   grad g / grad f:  coordinate index (grad_fy offset by dx)
//   hess_gyy:         dense: i*dy + j over the full block, symmetrized;
//                     block-diagonal: m*d*d + i*d + j per client block
//   hess_gxy:         same shapes, offset past the gyy region

namespace detail {

inline Eigen::MatrixXd symmetric_noise(std::uint64_t seed, const SampleToken& tok,
                                       Eigen::Index n, double std_dev,
                                       std::uint64_t offset) {
  Eigen::MatrixXd e(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      e(i, j) = normal_draw(seed, tok,
                            offset + static_cast<std::uint64_t>(i * n + j));
    }
  }
  return 0.5 * std_dev * (e + e.transpose());
}

inline Eigen::MatrixXd plain_matrix_noise(std::uint64_t seed, const SampleToken& tok,
                                          Eigen::Index rows, Eigen::Index cols,
                                          double std_dev, std::uint64_t offset) {
  Eigen::MatrixXd e(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      e(i, j) = std_dev * normal_draw(seed, tok,
                                      offset + static_cast<std::uint64_t>(i * cols + j));
    }
  }
  return e;
}

inline std::uint64_t hess_xy_offset(const BilevelProblem& p) {
  if (p.hess_noise_layout == HessianNoiseLayout::BlockDiagonal && p.clients) {
    const std::uint64_t d = static_cast<std::uint64_t>(p.clients->block_dim);
    return static_cast<std::uint64_t>(p.clients->clients) * d * d;
  }
  return static_cast<std::uint64_t>(p.dy) * static_cast<std::uint64_t>(p.dy);
}

}  // namespace detail

inline Eigen::VectorXd grad_gy_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y, std::uint64_t seed,
                                 const SampleToken& tok, std::uint64_t index_offset = 0) {
  Eigen::VectorXd g = p.grad_gy(x, y);
  const double s = p.meta.noise.std_g1;
  if (s > 0.0) {
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      g[i] += s * normal_draw(seed, tok, index_offset + static_cast<std::uint64_t>(i));
    }
  }
  return g;
}

inline Eigen::VectorXd grad_fx_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y, std::uint64_t seed,
                                 const SampleToken& tok) {
  Eigen::VectorXd g = p.grad_fx(x, y);
  const double s = p.meta.noise.std_f;
  if (s > 0.0) {
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      g[i] += s * normal_draw(seed, tok, static_cast<std::uint64_t>(i));
    }
  }
  return g;
}

inline Eigen::VectorXd grad_fy_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y, std::uint64_t seed,
                                 const SampleToken& tok) {
  Eigen::VectorXd g = p.grad_fy(x, y);
  const double s = p.meta.noise.std_f;
  if (s > 0.0) {
    const auto base = static_cast<std::uint64_t>(p.dx);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      g[i] += s * normal_draw(seed, tok, base + static_cast<std::uint64_t>(i));
    }
  }
  return g;
}

inline double f_value_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& y, std::uint64_t seed,
                        const SampleToken& tok) {
  double v = p.f_value(x, y);
  if (p.meta.noise.std_f > 0.0) {
    v += p.meta.noise.std_f *
         normal_draw(seed, tok, static_cast<std::uint64_t>(p.dx + p.dy));
  }
  return v;
}

inline Eigen::MatrixXd hess_gyy_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& y, std::uint64_t seed,
                                  const SampleToken& tok) {
  Eigen::MatrixXd h = p.hess_gyy(x, y);
  const double s = p.meta.noise.std_g2;
  if (s == 0.0) return h;
  if (p.hess_noise_layout == HessianNoiseLayout::BlockDiagonal && p.clients) {
    const int d = p.clients->block_dim;
    for (int m = 0; m < p.clients->clients; ++m) {
      const std::uint64_t off = static_cast<std::uint64_t>(m) *
                                static_cast<std::uint64_t>(d) * static_cast<std::uint64_t>(d);
      h.block(static_cast<Eigen::Index>(m) * d, static_cast<Eigen::Index>(m) * d, d, d) +=
          detail::symmetric_noise(seed, tok, d, s, off);
    }
    return h;
  }
  h += detail::symmetric_noise(seed, tok, p.dy, s, 0);
  return h;
}

inline Eigen::MatrixXd hess_gxy_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& y, std::uint64_t seed,
                                  const SampleToken& tok) {
  Eigen::MatrixXd h = p.hess_gxy(x, y);
  const double s = p.meta.noise.std_g2;
  if (s == 0.0) return h;
  const std::uint64_t base = detail::hess_xy_offset(p);
  if (p.hess_noise_layout == HessianNoiseLayout::BlockDiagonal && p.clients) {
    const int d = p.clients->block_dim;
    for (int m = 0; m < p.clients->clients; ++m) {
      const std::uint64_t off = base + static_cast<std::uint64_t>(m) *
                                           static_cast<std::uint64_t>(d) *
                                           static_cast<std::uint64_t>(d);
      h.block(static_cast<Eigen::Index>(m) * d, static_cast<Eigen::Index>(m) * d, d, d) +=
          detail::plain_matrix_noise(seed, tok, d, d, s, off);
    }
    return h;
  }
  h += detail::plain_matrix_noise(seed, tok, p.dx, p.dy, s, base);
  return h;
}

// Per-client stochastic oracles. Noise indices are the lifted indices of the
// client's slice, so these return exactly the corresponding blocks of the
// lifted *_s evaluations.
inline Eigen::MatrixXd client_hess_gyy_s(const BilevelProblem&, int, const Eigen::VectorXd&,
                                         const Eigen::VectorXd&, std::uint64_t,
                                         const SampleToken&);
inline Eigen::MatrixXd client_hess_gxy_s(const BilevelProblem&, int, const Eigen::VectorXd&,
                                         const Eigen::VectorXd&, std::uint64_t,
                                         const SampleToken&);

// Stochastic Hessian-vector products. Consensus problems apply their diagonal
// blocks client by client, the same arithmetic the federated simulator uses.
inline Eigen::VectorXd hess_gyy_apply_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& y, std::uint64_t seed,
                                        const SampleToken& tok, const Eigen::VectorXd& v) {
  if (p.clients && p.hess_noise_layout == HessianNoiseLayout::BlockDiagonal) {
    const int d = p.clients->block_dim;
    Eigen::VectorXd out(p.dy);
    for (int m = 0; m < p.clients->clients; ++m) {
      const Eigen::Index off = static_cast<Eigen::Index>(m) * d;
      out.segment(off, d) =
          client_hess_gyy_s(p, m, x.segment(off, d), y.segment(off, d), seed, tok) *
          v.segment(off, d);
    }
    return out;
  }
  return hess_gyy_s(p, x, y, seed, tok) * v;
}

inline Eigen::VectorXd hess_gxy_apply_s(const BilevelProblem& p, const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& y, std::uint64_t seed,
                                        const SampleToken& tok, const Eigen::VectorXd& v) {
  if (p.clients && p.hess_noise_layout == HessianNoiseLayout::BlockDiagonal) {
    const int d = p.clients->block_dim;
    Eigen::VectorXd out(p.dx);
    for (int m = 0; m < p.clients->clients; ++m) {
      const Eigen::Index off = static_cast<Eigen::Index>(m) * d;
      out.segment(off, d) =
          client_hess_gxy_s(p, m, x.segment(off, d), y.segment(off, d), seed, tok) *
          v.segment(off, d);
    }
    return out;
  }
  return hess_gxy_s(p, x, y, seed, tok) * v;
}

inline Eigen::VectorXd client_grad_gy_s(const BilevelProblem& p, int m,
                                        const Eigen::VectorXd& xm,
                                        const Eigen::VectorXd& ym, std::uint64_t seed,
                                        const SampleToken& tok,
                                        std::uint64_t batch_offset = 0) {
  const auto& co = *p.clients;
  Eigen::VectorXd g = co.grad_gy(m, xm, ym);
  const double s = p.meta.noise.std_g1;
  if (s > 0.0) {
    const std::uint64_t base =
        batch_offset + static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(co.block_dim);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      g[i] += s * normal_draw(seed, tok, base + static_cast<std::uint64_t>(i));
    }
  }
  return g;
}

inline Eigen::VectorXd client_grad_fx_s(const BilevelProblem& p, int m,
                                        const Eigen::VectorXd& xm,
                                        const Eigen::VectorXd& ym, std::uint64_t seed,
                                        const SampleToken& tok) {
  const auto& co = *p.clients;
  Eigen::VectorXd g = co.grad_fx(m, xm, ym);
  const double s = p.meta.noise.std_f;
  if (s > 0.0) {
    const std::uint64_t base =
        static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(co.block_dim);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      g[i] += s * normal_draw(seed, tok, base + static_cast<std::uint64_t>(i));
    }
  }
  return g;
}

inline Eigen::VectorXd client_grad_fy_s(const BilevelProblem& p, int m,
                                        const Eigen::VectorXd& xm,
                                        const Eigen::VectorXd& ym, std::uint64_t seed,
                                        const SampleToken& tok) {
  const auto& co = *p.clients;
  Eigen::VectorXd g = co.grad_fy(m, xm, ym);
  const double s = p.meta.noise.std_f;
  if (s > 0.0) {
    const std::uint64_t base =
        static_cast<std::uint64_t>(p.dx) +
        static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(co.block_dim);
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      g[i] += s * normal_draw(seed, tok, base + static_cast<std::uint64_t>(i));
    }
  }
  return g;
}

inline Eigen::MatrixXd client_hess_gyy_s(const BilevelProblem& p, int m,
                                         const Eigen::VectorXd& xm,
                                         const Eigen::VectorXd& ym, std::uint64_t seed,
                                         const SampleToken& tok) {
  const auto& co = *p.clients;
  Eigen::MatrixXd h = co.hess_gyy(m, xm, ym);
  const double s = p.meta.noise.std_g2;
  if (s > 0.0) {
    const std::uint64_t d = static_cast<std::uint64_t>(co.block_dim);
    h += detail::symmetric_noise(seed, tok, co.block_dim, s,
                                 static_cast<std::uint64_t>(m) * d * d);
  }
  return h;
}

inline Eigen::MatrixXd client_hess_gxy_s(const BilevelProblem& p, int m,
                                         const Eigen::VectorXd& xm,
                                         const Eigen::VectorXd& ym, std::uint64_t seed,
                                         const SampleToken& tok) {
  const auto& co = *p.clients;
  Eigen::MatrixXd h = co.hess_gxy(m, xm, ym);
  const double s = p.meta.noise.std_g2;
  if (s > 0.0) {
    const std::uint64_t d = static_cast<std::uint64_t>(co.block_dim);
    h += detail::plain_matrix_noise(
        seed, tok, co.block_dim, co.block_dim, s,
        detail::hess_xy_offset(p) + static_cast<std::uint64_t>(m) * d * d);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Built-in problem: randomly generated equality-constrained instance with
//   f(x, y) = sin(c.x + d.y) + ln(||x + y||^2 + 1),  g(x, y) = 0.5 ||x - y||^2,
//   X = {Bx = 0},  Y(x) = {Ay + Hx = 0}.
// A and B are rank-deficient by construction (products of Gaussian factors)
// and H = A G so that -Hx is always in Ran(A): Y(x) is nonempty for every x.
// ---------------------------------------------------------------------------

inline BilevelProblem build_synthetic(int d, int rank_a, int rank_b,
                                      std::uint64_t seed,
                                      const NoiseModel& noise = NoiseModel{0.1, 0.1, 0.1}) {
  if (d < 1) throw std::invalid_argument("build_synthetic: d must be positive");
  if (rank_a < 1 || rank_a >= d || rank_b < 1 || rank_b >= d) {
    throw std::invalid_argument(
        "build_synthetic: constraint ranks must satisfy 0 < rank < d");
  }

  const auto tok = [seed](std::uint64_t ctr) { return SampleToken{Stream::Init, ctr}; };
  const Eigen::MatrixXd a =
      gaussian_matrix(seed, tok(0), rank_a, rank_a) * gaussian_matrix(seed, tok(1), rank_a, d);
  const Eigen::MatrixXd b =
      gaussian_matrix(seed, tok(2), rank_b, rank_b) * gaussian_matrix(seed, tok(3), rank_b, d);
  auto lower = std::make_shared<const SubspaceDecomposition>(decompose(a));
  auto upper = std::make_shared<const SubspaceDecomposition>(decompose(b));

  const Eigen::MatrixXd h_mat = a * gaussian_matrix(seed, tok(4), d, d, 0.3 / std::sqrt(d));
  const double vec_std = 0.25 / std::sqrt(static_cast<double>(d));
  const Eigen::VectorXd c_vec = gaussian_vector(seed, tok(5), d, vec_std);
  const Eigen::VectorXd d_vec = gaussian_vector(seed, tok(6), d, vec_std);

  BilevelProblem p;
  p.dx = d;
  p.dy = d;
  p.upper = upper;
  p.upper_target = Eigen::VectorXd::Zero(rank_b);
  p.lower = lower;
  p.lower_target = Eigen::VectorXd::Zero(rank_a);
  p.coupling = [h_mat](const Eigen::VectorXd& x) { return (h_mat * x).eval(); };
  p.coupling_jacobian = [h_mat](const Eigen::VectorXd&) { return h_mat; };

  p.f_value = [c_vec, d_vec](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return std::sin(c_vec.dot(x) + d_vec.dot(y)) + std::log((x + y).squaredNorm() + 1.0);
  };
  p.grad_fx = [c_vec, d_vec](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    const double cs = std::cos(c_vec.dot(x) + d_vec.dot(y));
    return (cs * c_vec + 2.0 * (x + y) / ((x + y).squaredNorm() + 1.0)).eval();
  };
  p.grad_fy = [c_vec, d_vec](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    const double cs = std::cos(c_vec.dot(x) + d_vec.dot(y));
    return (cs * d_vec + 2.0 * (x + y) / ((x + y).squaredNorm() + 1.0)).eval();
  };
  p.grad_gy = [](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return (y - x).eval();
  };
  p.hess_gyy = [d](const Eigen::VectorXd&, const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Identity(d, d).eval();
  };
  p.hess_gxy = [d](const Eigen::VectorXd&, const Eigen::VectorXd&) {
    return (-Eigen::MatrixXd::Identity(d, d)).eval();
  };

  // argmin of 0.5||x - y||^2 over {Ay = -Hx} is the projection of x.
  p.exact_lower = [lower, h_mat](const Eigen::VectorXd& x) {
    return (x - lower->pinv * (lower->matrix * x) - lower->pinv * (h_mat * x)).eval();
  };

  p.meta = ProblemMetadata{1.0, 1.0, noise, false};
  p.hess_noise_layout = HessianNoiseLayout::Dense;
  p.spec = ProblemSpec{ProblemKind::Synthetic, d, rank_a, rank_b, seed, noise, 0.0, 0};
  return p;
}

// ---------------------------------------------------------------------------
// Built-in problem: M-client consensus bilevel instance with per-client
// strongly convex quadratics
//   g_m(x, y) = 0.5 (y - Q_m x - b_m)^T D_m (y - Q_m x - b_m),
//   f_m(x, y) = 1/(2M) ||x + y - t_m||^2,
// lifted as f = sum_m f_m, g = sum_m g_m over block vectors with consensus
// constraints at both levels. heterogeneity scales client differences and the
// spread of the diagonal curvatures D_m (entries in [1, 1 + heterogeneity]).
// ---------------------------------------------------------------------------

inline BilevelProblem build_federated_quadratic(int clients, int d, double heterogeneity,
                                                std::uint64_t seed,
                                                const NoiseModel& noise = NoiseModel{0.1, 0.1, 0.1}) {
  if (clients < 2) throw std::invalid_argument("build_federated_quadratic: need M >= 2");
  if (d < 1) throw std::invalid_argument("build_federated_quadratic: d must be positive");
  if (heterogeneity < 0.0) {
    throw std::invalid_argument("build_federated_quadratic: heterogeneity must be nonnegative");
  }

  const auto tok = [seed](std::uint64_t ctr) { return SampleToken{Stream::Init, ctr}; };
  const double mat_std = 1.0 / std::sqrt(static_cast<double>(d));
  const Eigen::MatrixXd q0 = gaussian_matrix(seed, tok(10), d, d, mat_std);
  const Eigen::VectorXd b0 = gaussian_vector(seed, tok(11), d);
  const Eigen::VectorXd t0 = gaussian_vector(seed, tok(12), d);

  std::vector<Eigen::MatrixXd> q_m(clients);
  std::vector<Eigen::VectorXd> b_m(clients), t_m(clients), d_m(clients);
  for (int m = 0; m < clients; ++m) {
    const std::uint64_t md = static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(d);
    q_m[m] = q0 + heterogeneity *
                      gaussian_matrix(seed, tok(13), d, d, mat_std,
                                      static_cast<std::uint64_t>(m) * d * d);
    b_m[m] = b0 + heterogeneity * gaussian_vector(seed, tok(14), d, 1.0, md);
    t_m[m] = t0 + heterogeneity * gaussian_vector(seed, tok(15), d, 1.0, md);
    Eigen::VectorXd diag(d);
    for (int i = 0; i < d; ++i) {
      diag[i] = 1.0 + heterogeneity * unit_draw(seed, tok(16), md + static_cast<std::uint64_t>(i));
    }
    d_m[m] = diag;
  }

  auto dec = std::make_shared<const SubspaceDecomposition>(consensus_constraints(clients, d));
  const Eigen::Index n = static_cast<Eigen::Index>(clients) * d;
  const double inv_m = 1.0 / static_cast<double>(clients);

  ClientOracles co;
  co.clients = clients;
  co.block_dim = d;
  co.f_value = [t_m, inv_m](int m, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return 0.5 * inv_m * (x + y - t_m[m]).squaredNorm();
  };
  co.grad_fx = [t_m, inv_m](int m, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return (inv_m * (x + y - t_m[m])).eval();
  };
  co.grad_fy = co.grad_fx;
  co.grad_gy = [q_m, b_m, d_m](int m, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return (d_m[m].array() * (y - q_m[m] * x - b_m[m]).array()).matrix().eval();
  };
  co.hess_gyy = [d_m](int m, const Eigen::VectorXd&, const Eigen::VectorXd&) {
    return Eigen::MatrixXd(d_m[m].asDiagonal());
  };
  co.hess_gxy = [q_m, d_m](int m, const Eigen::VectorXd&, const Eigen::VectorXd&) {
    return (-q_m[m].transpose() * d_m[m].asDiagonal()).eval();
  };

  BilevelProblem p;
  p.dx = static_cast<int>(n);
  p.dy = static_cast<int>(n);
  p.upper = dec;
  p.upper_target = Eigen::VectorXd::Zero(dec->rows());
  p.lower = dec;
  p.lower_target = Eigen::VectorXd::Zero(dec->rows());

  const ClientOracles oracles = co;
  const int M = clients;
  p.f_value = [oracles, M, d](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    double v = 0.0;
    for (int m = 0; m < M; ++m) {
      v += oracles.f_value(m, x.segment(static_cast<Eigen::Index>(m) * d, d),
                           y.segment(static_cast<Eigen::Index>(m) * d, d));
    }
    return v;
  };
  auto stack_grad = [M, d](auto&& fn, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(M) * d);
    for (int m = 0; m < M; ++m) {
      out.segment(static_cast<Eigen::Index>(m) * d, d) =
          fn(m, x.segment(static_cast<Eigen::Index>(m) * d, d),
             y.segment(static_cast<Eigen::Index>(m) * d, d));
    }
    return out;
  };
  p.grad_fx = [oracles, stack_grad](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return stack_grad(oracles.grad_fx, x, y);
  };
  p.grad_fy = [oracles, stack_grad](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return stack_grad(oracles.grad_fy, x, y);
  };
  p.grad_gy = [oracles, stack_grad](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return stack_grad(oracles.grad_gy, x, y);
  };
  auto stack_hess = [M, d, n](auto&& fn, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
    for (int m = 0; m < M; ++m) {
      out.block(static_cast<Eigen::Index>(m) * d, static_cast<Eigen::Index>(m) * d, d, d) =
          fn(m, x.segment(static_cast<Eigen::Index>(m) * d, d),
             y.segment(static_cast<Eigen::Index>(m) * d, d));
    }
    return out;
  };
  p.hess_gyy = [oracles, stack_hess](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return stack_hess(oracles.hess_gyy, x, y);
  };
  p.hess_gxy = [oracles, stack_hess](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return stack_hess(oracles.hess_gxy, x, y);
  };

  // Consensus minimizer: all blocks equal ybar with sum_m D_m (ybar - Q_m x_m - b_m) = 0.
  p.exact_lower = [q_m, b_m, d_m, M, d](const Eigen::VectorXd& x) {
    Eigen::VectorXd num = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd den = Eigen::VectorXd::Zero(d);
    for (int m = 0; m < M; ++m) {
      const Eigen::VectorXd xm = x.segment(static_cast<Eigen::Index>(m) * d, d);
      num += (d_m[m].array() * (q_m[m] * xm + b_m[m]).array()).matrix();
      den += d_m[m];
    }
    const Eigen::VectorXd ybar = (num.array() / den.array()).matrix();
    return broadcast_blocks(ybar, M);
  };

  p.meta = ProblemMetadata{1.0, 1.0 + heterogeneity, noise, true};
  p.hess_noise_layout = HessianNoiseLayout::BlockDiagonal;
  p.clients = co;
  p.spec = ProblemSpec{ProblemKind::FederatedQuadratic, d,      0,          0,
                       seed,                            noise,  heterogeneity, clients};
  return p;
}

inline BilevelProblem build_problem(const ProblemSpec& spec) {
  switch (spec.kind) {
    case ProblemKind::Synthetic:
      return build_synthetic(spec.d, spec.rank_a, spec.rank_b, spec.seed, spec.noise);
    case ProblemKind::FederatedQuadratic:
      return build_federated_quadratic(spec.m_clients, spec.d, spec.heterogeneity,
                                       spec.seed, spec.noise);
    default:
      throw CapabilityError("build_problem: custom problems cannot be rebuilt from a spec");
  }
}

// Feasible default start: projections of standard Gaussian draws.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> default_start(
    const BilevelProblem& p, std::uint64_t master_seed) {
  const Eigen::VectorXd x0 =
      project(*p.upper, p.upper_target,
              gaussian_vector(master_seed, SampleToken{Stream::Init, 100}, p.dx));
  const Eigen::VectorXd y0 =
      project(*p.lower, p.lower_offset(x0),
              gaussian_vector(master_seed, SampleToken{Stream::Init, 101}, p.dy));
  return {x0, y0};
}

}  // namespace bilevel
