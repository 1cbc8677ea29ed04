#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/constraint.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

// Truncated-series estimator settings. depth_cap is the N in "draw N' uniform
// from {0, ..., N-1}"; forced_depth is a test hook pinning N'.
struct NeumannConfig {
  double c_tilde = 1.0;
  int depth_cap = 1;
  double l_g1 = 1.0;
  std::optional<int> forced_depth;
};

struct HypergradSample {
  Eigen::VectorXd value;
  int depth_drawn = 0;      // N'
  long phi_draws = 0;       // second-derivative samples used (N' + 1)
  long xi_draws = 0;        // f-gradient samples used
};

namespace detail {

// Solve (reduced SPD system) via an eigendecomposition; rejects curvature
// below 1e-12, which under the strong-convexity assumption signals a broken
// oracle rather than a hard instance.
inline Eigen::MatrixXd reduced_spd_solve(const Eigen::MatrixXd& reduced,
                                         const Eigen::MatrixXd& rhs,
                                         const char* who) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(reduced);
  if (eig.info() != Eigen::Success) {
    throw ConditioningError(std::string(who) + ": eigendecomposition failed");
  }
  const double min_eig = reduced.rows() > 0 ? eig.eigenvalues().minCoeff() : 1.0;
  if (reduced.rows() > 0 && min_eig <= 1e-12) {
    std::ostringstream msg;
    msg << who << ": reduced Hessian not positive definite (min eigenvalue " << min_eig
        << ")";
    throw ConditioningError(msg.str());
  }
  return eig.eigenvectors() *
         (eig.eigenvalues().cwiseInverse().asDiagonal() *
          (eig.eigenvectors().transpose() * rhs));
}

inline Eigen::MatrixXd reduced_hessian(const BilevelProblem& p, const Eigen::VectorXd& x,
                                       const Eigen::VectorXd& y) {
  const Eigen::MatrixXd& v2 = p.lower->null_basis;
  return v2.transpose() * (p.hess_gyy(x, y) * v2);
}

}  // namespace detail

// Jacobian of the lower-level solution map under linear equality constraints:
//   dy*/dx = -V2 (V2^T G V2)^{-1} V2^T (G_yx - G A^+ Dh) - A^+ Dh,
// with G the y-Hessian of g at (x, y*). The inner solve works in the reduced
// (dy - r)-dimensional kernel coordinates, never inverting a full dy x dy
// matrix.
inline Eigen::MatrixXd exact_implicit_jacobian(
    const BilevelProblem& p, const Eigen::VectorXd& x,
    const std::optional<Eigen::VectorXd>& y_star = std::nullopt) {
  const Eigen::VectorXd y = y_star ? *y_star : exact_lower_solution(p, x);
  const Eigen::MatrixXd hyy = p.hess_gyy(x, y);
  const Eigen::MatrixXd gyx = p.hess_gxy(x, y).transpose();  // dy x dx
  const Eigen::MatrixXd& v2 = p.lower->null_basis;

  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(p.dy, p.dx);  // A^+ Dh
  if (p.has_coupling()) {
    m = p.lower->pinv * p.coupling_jacobian(x);
  }
  const Eigen::MatrixXd reduced = v2.transpose() * (hyy * v2);
  const Eigen::MatrixXd rhs = v2.transpose() * (gyx - hyy * m);
  const Eigen::MatrixXd s =
      detail::reduced_spd_solve(reduced, rhs, "exact_implicit_jacobian");
  return -v2 * s - m;
}

// Total gradient of F(x) = f(x, y*(x)) by the chain rule, evaluated through
// the adjoint of the implicit Jacobian (one reduced solve, no dy x dx matrix).
inline Eigen::VectorXd exact_upper_gradient(
    const BilevelProblem& p, const Eigen::VectorXd& x,
    const std::optional<Eigen::VectorXd>& y_star = std::nullopt) {
  const Eigen::VectorXd y = y_star ? *y_star : exact_lower_solution(p, x);
  const Eigen::VectorXd fx = p.grad_fx(x, y);
  const Eigen::VectorXd fy = p.grad_fy(x, y);
  const Eigen::MatrixXd hyy = p.hess_gyy(x, y);
  const Eigen::MatrixXd gxy = p.hess_gxy(x, y);  // dx x dy
  const Eigen::MatrixXd& v2 = p.lower->null_basis;

  const Eigen::MatrixXd reduced = v2.transpose() * (hyy * v2);
  const Eigen::VectorXd z =
      v2 * detail::reduced_spd_solve(reduced, v2.transpose() * fy,
                                     "exact_upper_gradient");
  Eigen::VectorXd grad = fx - gxy * z;
  if (p.has_coupling()) {
    const Eigen::MatrixXd m = p.lower->pinv * p.coupling_jacobian(x);
    grad += m.transpose() * (hyy * z - fy);
  }
  return grad;
}

// Minimizer of the reduced quadratic model over Ker(A):
//   u*(x, y) = -V2 (V2^T G V2)^{-1} V2^T grad_y f(x, y).
inline Eigen::VectorXd closed_form_ustar(const BilevelProblem& p,
                                         const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& y) {
  const Eigen::MatrixXd& v2 = p.lower->null_basis;
  const Eigen::MatrixXd reduced = detail::reduced_hessian(p, x, y);
  const Eigen::VectorXd s = detail::reduced_spd_solve(
      reduced, v2.transpose() * p.grad_fy(x, y), "closed_form_ustar");
  return -v2 * s;
}

// Squared norm of the upper gradient projected onto Ker(B): the stationarity
// measure. Equals ||(x - Proj_X(x - lambda grad F)) / lambda||^2 for any
// lambda > 0 at feasible x.
inline double stationarity(const BilevelProblem& p, const Eigen::VectorXd& x) {
  return weighted_norm_sq(*p.upper, exact_upper_gradient(p, x));
}

namespace detail {

// Blockwise Hessian-vector recursion for consensus problems (h = 0): clients
// hold their own curvature blocks; only d-length vectors are averaged. This
// is exactly the arithmetic of the federated simulator, so a centralized run
// on a consensus problem and the federated run coincide bit for bit.
struct ConsensusW {
  std::vector<Eigen::VectorXd> w_blocks;
  int depth = 0;
};

inline ConsensusW consensus_w_blocks(const BilevelProblem& p, const Eigen::VectorXd& x,
                                     const Eigen::VectorXd& y, const NeumannConfig& cfg,
                                     std::uint64_t seed, std::uint64_t k) {
  const auto& co = *p.clients;
  const int M = co.clients;
  const int d = co.block_dim;
  const int depth =
      cfg.forced_depth
          ? *cfg.forced_depth
          : static_cast<int>(uniform_index(
                seed, SampleToken{Stream::NeumannDepth, k},
                static_cast<std::uint64_t>(cfg.depth_cap)));

  const SampleToken xi{Stream::NoiseF, pack_counter(0, k, 0)};
  std::vector<Eigen::VectorXd> local(M);
  for (int m = 0; m < M; ++m) {
    local[m] = client_grad_fy_s(p, m, x.segment(static_cast<Eigen::Index>(m) * d, d),
                                y.segment(static_cast<Eigen::Index>(m) * d, d), seed, xi);
  }
  Eigen::VectorXd v = block_mean(local);
  v *= cfg.c_tilde * static_cast<double>(cfg.depth_cap) / cfg.l_g1;

  const double step = cfg.c_tilde / cfg.l_g1;
  for (int n = 1; n <= depth; ++n) {
    const SampleToken phi{Stream::NoiseG, pack_counter(1, k, static_cast<std::uint64_t>(n))};
    for (int m = 0; m < M; ++m) {
      const Eigen::MatrixXd hm =
          client_hess_gyy_s(p, m, x.segment(static_cast<Eigen::Index>(m) * d, d),
                            y.segment(static_cast<Eigen::Index>(m) * d, d), seed, phi);
      local[m] = v - step * (hm * v);
    }
    v = block_mean(local);
  }

  const SampleToken phi0{Stream::NoiseG, pack_counter(1, k, 0)};
  ConsensusW out;
  out.depth = depth;
  out.w_blocks.resize(M);
  for (int m = 0; m < M; ++m) {
    const Eigen::MatrixXd gm =
        client_hess_gxy_s(p, m, x.segment(static_cast<Eigen::Index>(m) * d, d),
                          y.segment(static_cast<Eigen::Index>(m) * d, d), seed, phi0);
    out.w_blocks[m] = -(gm * v);
  }
  return out;
}

}  // namespace detail

// Randomized truncated-series estimate of the implicit correction term
//   w = { -Dh^T A^+T + (Dh^T A^+T G(phi_0) - G_xy(phi_0))
//         V2 [ (cN/l) prod_n (I - (c/l) V2^T G(phi_n) V2) ] V2^T } grad_y f(xi)
// with the product applied to the reduced vector factor by factor, one i.i.d.
// curvature sample per factor, never materializing the product matrix. The
// same xi sample is shared with the grad_x f term of estimate_hf.
inline HypergradSample estimate_w(const BilevelProblem& p, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& y, const NeumannConfig& cfg,
                                  std::uint64_t seed, std::uint64_t k) {
  if (cfg.depth_cap < 1) throw std::invalid_argument("estimate_w: depth cap must be >= 1");
  if (cfg.c_tilde <= 0.0 || cfg.c_tilde > 1.0) {
    throw std::invalid_argument("estimate_w: c_tilde must lie in (0, 1]");
  }

  if (p.clients && p.lower->consensus && !p.has_coupling()) {
    const auto blocks = detail::consensus_w_blocks(p, x, y, cfg, seed, k);
    HypergradSample out;
    out.depth_drawn = blocks.depth;
    out.phi_draws = blocks.depth + 1;
    out.xi_draws = 1;
    out.value.resize(p.dx);
    const int d = p.clients->block_dim;
    for (int m = 0; m < p.clients->clients; ++m) {
      out.value.segment(static_cast<Eigen::Index>(m) * d, d) = blocks.w_blocks[m];
    }
    return out;
  }

  const int depth =
      cfg.forced_depth
          ? *cfg.forced_depth
          : static_cast<int>(uniform_index(
                seed, SampleToken{Stream::NeumannDepth, k},
                static_cast<std::uint64_t>(cfg.depth_cap)));

  const SampleToken xi{Stream::NoiseF, pack_counter(0, k, 0)};
  const Eigen::VectorXd fy = grad_fy_s(p, x, y, seed, xi);
  const Eigen::MatrixXd& v2 = p.lower->null_basis;

  Eigen::VectorXd t = v2.transpose() * fy;
  const double step = cfg.c_tilde / cfg.l_g1;
  for (int n = 1; n <= depth; ++n) {
    const SampleToken phi{Stream::NoiseG, pack_counter(1, k, static_cast<std::uint64_t>(n))};
    const Eigen::MatrixXd h = hess_gyy_s(p, x, y, seed, phi);
    t -= step * (v2.transpose() * (h * (v2 * t)));
  }
  t *= cfg.c_tilde * static_cast<double>(cfg.depth_cap) / cfg.l_g1;
  const Eigen::VectorXd bracket = v2 * t;

  const SampleToken phi0{Stream::NoiseG, pack_counter(1, k, 0)};
  const Eigen::MatrixXd gxy0 = hess_gxy_s(p, x, y, seed, phi0);

  HypergradSample out;
  out.depth_drawn = depth;
  out.phi_draws = depth + 1;
  out.xi_draws = 1;
  if (p.has_coupling()) {
    const Eigen::MatrixXd hyy0 = hess_gyy_s(p, x, y, seed, phi0);
    const Eigen::MatrixXd dh = p.coupling_jacobian(x);
    out.value = -dh.transpose() * (p.lower->pinv.transpose() * fy) +
                dh.transpose() * (p.lower->pinv.transpose() * (hyy0 * bracket)) -
                gxy0 * bracket;
  } else {
    out.value = -(gxy0 * bracket);
  }
  return out;
}

// Upper gradient estimator grad_x f(x, y; xi) + w, sharing the xi draw with w.
inline HypergradSample estimate_hf(const BilevelProblem& p, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& y, const NeumannConfig& cfg,
                                   std::uint64_t seed, std::uint64_t k) {
  HypergradSample w = estimate_w(p, x, y, cfg, seed, k);
  const SampleToken xi{Stream::NoiseF, pack_counter(0, k, 0)};
  w.value += grad_fx_s(p, x, y, seed, xi);
  return w;
}

}  // namespace bilevel
