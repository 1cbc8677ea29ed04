#pragma once

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/federated.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/solver.hpp"

namespace bilevel {

struct VerifyCheck {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

// Quadratic instance with tunable curvature spread: g = 0.5 (y-x)^T D (y-x)
// with diag(D) spaced over [mu, l], f = 0.5 ||x + y - t||^2, h = 0. Used when
// a test needs mu_g < l_g1.
inline BilevelProblem make_anisotropic_quadratic(int d, int rank_a, int rank_b,
                                                 double mu, double l, std::uint64_t seed,
                                                 const NoiseModel& noise = NoiseModel{}) {
  if (mu <= 0.0 || l < mu) throw std::invalid_argument("make_anisotropic_quadratic: need 0 < mu <= l");
  const auto tok = [seed](std::uint64_t ctr) { return SampleToken{Stream::Init, ctr + 40}; };
  const Eigen::MatrixXd a =
      gaussian_matrix(seed, tok(0), rank_a, rank_a) * gaussian_matrix(seed, tok(1), rank_a, d);
  const Eigen::MatrixXd b =
      gaussian_matrix(seed, tok(2), rank_b, rank_b) * gaussian_matrix(seed, tok(3), rank_b, d);
  const Eigen::VectorXd t = gaussian_vector(seed, tok(4), d);
  Eigen::VectorXd diag(d);
  for (int i = 0; i < d; ++i) {
    diag[i] = d == 1 ? mu : mu + (l - mu) * static_cast<double>(i) / (d - 1);
  }
  auto lower = std::make_shared<const SubspaceDecomposition>(decompose(a));
  auto upper = std::make_shared<const SubspaceDecomposition>(decompose(b));

  BilevelProblem p;
  p.dx = d;
  p.dy = d;
  p.upper = upper;
  p.upper_target = Eigen::VectorXd::Zero(rank_b);
  p.lower = lower;
  p.lower_target = Eigen::VectorXd::Zero(rank_a);
  p.f_value = [t](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return 0.5 * (x + y - t).squaredNorm();
  };
  p.grad_fx = [t](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return (x + y - t).eval();
  };
  p.grad_fy = p.grad_fx;
  p.grad_gy = [diag](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return (diag.array() * (y - x).array()).matrix().eval();
  };
  p.hess_gyy = [diag](const Eigen::VectorXd&, const Eigen::VectorXd&) {
    return Eigen::MatrixXd(diag.asDiagonal());
  };
  p.hess_gxy = [diag](const Eigen::VectorXd&, const Eigen::VectorXd&) {
    return Eigen::MatrixXd((-diag).asDiagonal());
  };
  p.exact_lower = [lower, diag](const Eigen::VectorXd& x) {
    const Eigen::MatrixXd& v2 = lower->null_basis;
    const Eigen::MatrixXd reduced = v2.transpose() * diag.asDiagonal() * v2;
    const Eigen::VectorXd rhs = v2.transpose() * (diag.array() * x.array()).matrix();
    return (v2 * reduced.ldlt().solve(rhs)).eval();
  };
  p.meta = ProblemMetadata{mu, l, noise, true};
  p.spec.kind = ProblemKind::Custom;
  return p;
}

// ---------------------------------------------------------------------------
// Individual checks (each returns the measured error)
// ---------------------------------------------------------------------------

inline double fd_upper_gradient_error(const BilevelProblem& p, const Eigen::VectorXd& x,
                                      double h = 1e-5) {
  auto big_f = [&](const Eigen::VectorXd& xx) {
    return p.f_value(xx, exact_lower_solution(p, xx));
  };
  const Eigen::VectorXd g = exact_upper_gradient(p, x);
  Eigen::VectorXd fd(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    fd[i] = (big_f(xp) - big_f(xm)) / (2.0 * h);
  }
  return (fd - g).norm() / g.norm();
}

inline double fd_implicit_jacobian_error(const BilevelProblem& p, const Eigen::VectorXd& x,
                                         double h = 1e-5) {
  const Eigen::MatrixXd j = exact_implicit_jacobian(p, x);
  Eigen::MatrixXd fd(j.rows(), j.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    fd.col(i) = (exact_lower_solution(p, xp) - exact_lower_solution(p, xm)) / (2.0 * h);
  }
  return (fd - j).norm() / j.norm();
}

// Largest tolerance-scaled residual of the Moore-Penrose / basis identities;
// <= 1 means every identity holds within its stated tolerance.
inline double projection_algebra_error(const SubspaceDecomposition& dec) {
  const Eigen::MatrixXd& a = dec.matrix;
  const Eigen::MatrixXd& pi = dec.pinv;
  const double na = std::max(a.norm(), 1e-300);
  const double npi = std::max(pi.norm(), 1e-300);
  const Eigen::Index d = dec.cols();
  double worst = 0.0;
  auto scale = [&worst](double res, double tol) { worst = std::max(worst, res / tol); };
  scale((a * pi * a - a).norm() / na, 1e-10);
  scale((pi * a * pi - pi).norm() / npi, 1e-10);
  scale((dec.null_basis.transpose() * dec.null_basis -
         Eigen::MatrixXd::Identity(dec.null_dim(), dec.null_dim()))
            .norm(),
        1e-12);
  scale((dec.range_basis.transpose() * dec.range_basis -
         Eigen::MatrixXd::Identity(dec.rank, dec.rank))
            .norm(),
        1e-12);
  scale((a * dec.null_basis).norm() / na, 1e-10);
  scale((dec.range_basis * dec.range_basis.transpose() +
         dec.null_basis * dec.null_basis.transpose() - Eigen::MatrixXd::Identity(d, d))
            .norm(),
        1e-10);
  scale((Eigen::MatrixXd::Identity(d, d) - pi * a -
         dec.null_basis * dec.null_basis.transpose())
            .norm(),
        1e-10);
  return worst;
}

// || (x - Proj(x - lambda g)) / lambda ||^2 vs the weighted squared norm of g,
// maximized over lambda in {0.1, 1, 10}; x must be feasible.
inline double projected_step_identity_error(const SubspaceDecomposition& dec,
                                            const Eigen::VectorXd& target,
                                            const Eigen::VectorXd& x,
                                            const Eigen::VectorXd& g) {
  const double want = weighted_norm_sq(dec, g);
  double worst = 0.0;
  for (double lambda : {0.1, 1.0, 10.0}) {
    const Eigen::VectorXd moved = project(dec, target, x - lambda * g);
    const double got = ((x - moved) / lambda).squaredNorm();
    worst = std::max(worst, std::abs(got - want));
  }
  return worst;
}

// Deterministic truncated-series value of w at depth cap N: the independent
// oracle the randomized estimator is averaged against.
inline Eigen::VectorXd truncated_w(const BilevelProblem& p, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& y, double c_tilde, double l_g1,
                                   int depth_cap) {
  const Eigen::MatrixXd& v2 = p.lower->null_basis;
  const Eigen::MatrixXd hyy = p.hess_gyy(x, y);
  const Eigen::MatrixXd reduced = v2.transpose() * (hyy * v2);
  const Eigen::VectorXd fy = p.grad_fy(x, y);
  const double step = c_tilde / l_g1;
  const Eigen::MatrixXd factor =
      Eigen::MatrixXd::Identity(reduced.rows(), reduced.cols()) - step * reduced;

  Eigen::VectorXd term = v2.transpose() * fy;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(term.size());
  for (int n = 0; n < depth_cap; ++n) {
    sum += term;
    term = factor * term;
  }
  const Eigen::VectorXd bracket = v2 * (step * sum);
  const Eigen::MatrixXd gxy = p.hess_gxy(x, y);
  if (!p.has_coupling()) return -(gxy * bracket);
  const Eigen::MatrixXd dh = p.coupling_jacobian(x);
  return -dh.transpose() * (p.lower->pinv.transpose() * fy) +
         dh.transpose() * (p.lower->pinv.transpose() * (hyy * bracket)) - gxy * bracket;
}

// Exact large-depth limit of w (h = 0 relies on closed_form_ustar; coupled
// problems go through the implicit-Jacobian route).
inline Eigen::VectorXd exact_w(const BilevelProblem& p, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& y) {
  if (!p.has_coupling()) {
    return p.hess_gxy(x, y) * closed_form_ustar(p, x, y);
  }
  // w = grad F - grad_x f at (x, y) treated as the lower solution.
  return exact_upper_gradient(p, x, std::optional<Eigen::VectorXd>(y)) - p.grad_fx(x, y);
}

// Relative gap between the exhaustive depth average of estimate_w and the
// deterministic truncated sum (noiseless oracles).
inline double neumann_exhaustive_error(const BilevelProblem& p, const Eigen::VectorXd& x,
                                       const Eigen::VectorXd& y, double c_tilde,
                                       int depth_cap, std::uint64_t seed = 7) {
  NeumannConfig cfg{c_tilde, depth_cap, p.meta.l_g1, std::nullopt};
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(p.dx);
  for (int n = 0; n < depth_cap; ++n) {
    cfg.forced_depth = n;
    mean += estimate_w(p, x, y, cfg, seed, 0).value;
  }
  mean /= static_cast<double>(depth_cap);
  const Eigen::VectorXd want = truncated_w(p, x, y, c_tilde, p.meta.l_g1, depth_cap);
  return (mean - want).norm() / std::max(want.norm(), 1e-300);
}

// Largest per-depth contraction ratio of the truncation gap, minus the ideal
// factor (1 - c mu / l); nonpositive values mean geometric decay at the
// predicted rate.
inline double neumann_contraction_excess(const BilevelProblem& p, const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& y, double c_tilde,
                                         int max_depth) {
  const Eigen::VectorXd wstar = exact_w(p, x, y);
  const double factor = 1.0 - c_tilde * p.meta.mu_g / p.meta.l_g1;
  double prev = (truncated_w(p, x, y, c_tilde, p.meta.l_g1, 1) - wstar).norm();
  double worst = -1.0;
  for (int n = 2; n <= max_depth; ++n) {
    const double cur = (truncated_w(p, x, y, c_tilde, p.meta.l_g1, n) - wstar).norm();
    if (prev > 1e-12 * (1.0 + wstar.norm())) {
      worst = std::max(worst, cur / prev - factor);
    }
    prev = cur;
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Aggregate verification (small noiseless instances)
// ---------------------------------------------------------------------------

inline VerifyReport verify(int d = 12, std::uint64_t seed = 0) {
  if (d > 20) throw std::invalid_argument("verify: use d <= 20 (finite differences)");
  VerifyReport report;
  auto add = [&report](const std::string& name, double measured, double tol) {
    report.checks.push_back({name, measured, tol, measured <= tol});
  };

  const int rank = std::max(1, d / 2 - 1);
  const BilevelProblem p = build_synthetic(d, rank, rank, seed, NoiseModel{});
  const Eigen::VectorXd x =
      project(*p.upper, p.upper_target,
              gaussian_vector(seed, SampleToken{Stream::Init, 900}, d));

  add("upper-gradient-fd", fd_upper_gradient_error(p, x), 1e-5);
  add("implicit-jacobian-fd", fd_implicit_jacobian_error(p, x), 1e-5);
  add("projection-algebra(A)", projection_algebra_error(*p.lower), 1.0);
  add("projection-algebra(B)", projection_algebra_error(*p.upper), 1.0);
  {
    const Eigen::VectorXd g =
        gaussian_vector(seed, SampleToken{Stream::Init, 901}, d);
    add("projected-step-identity",
        projected_step_identity_error(*p.upper, p.upper_target, x, g), 1e-10);
  }
  {
    const Eigen::VectorXd y = exact_lower_solution(p, x);
    add("neumann-exhaustive-mean", neumann_exhaustive_error(p, x, y, 1.0, 8), 1e-12);
  }
  {
    const BilevelProblem aniso =
        make_anisotropic_quadratic(d, rank, rank, 0.5, 1.0, seed);
    const Eigen::VectorXd xa =
        project(*aniso.upper, aniso.upper_target,
                gaussian_vector(seed, SampleToken{Stream::Init, 902}, d));
    const Eigen::VectorXd ya = exact_lower_solution(aniso, xa);
    add("neumann-contraction", neumann_contraction_excess(aniso, xa, ya, 1.0, 16), 1e-9);

    Counters counters;
    const Eigen::VectorXd u =
        e2aipod_medium(aniso, xa, ya, 0.5, 1.0, 400, seed, 0, counters);
    const Eigen::VectorXd ustar = closed_form_ustar(aniso, xa, ya);
    add("ustar-iteration", (u - ustar).norm(), 1e-6);
    add("ustar-kernel-component", (aniso.lower->range_basis.transpose() * ustar).norm(),
        1e-10);
    const Eigen::VectorXd resid = apply_null_projector(
        *aniso.lower, aniso.grad_fy(xa, ya) + aniso.hess_gyy(xa, ya) * ustar);
    add("ustar-optimality-residual", resid.norm(), 1e-8);
  }
  {
    const BilevelProblem fed =
        build_federated_quadratic(3, 2, 0.5, seed, NoiseModel{0.1, 0.1, 0.1});
    SolverConfig cfg;
    cfg.variant = Variant::EAipod;
    cfg.K = 5;
    cfg.alpha = 0.05;
    cfg.beta = 0.1;
    cfg.p = 0.5;
    cfg.record_iterates = true;
    cfg.master_seed = seed;
    const RunTrace central = run_eaipod(fed, cfg);
    const FedRun fedrun = run_fed_eaipod(fed, cfg);
    double worst = 0.0;
    for (std::size_t i = 0; i < central.xs.size(); ++i) {
      worst = std::max(worst,
                       (central.xs[i] - fedrun.trace.xs[i]).cwiseAbs().maxCoeff());
      worst = std::max(worst,
                       (central.ys[i] - fedrun.trace.ys[i]).cwiseAbs().maxCoeff());
    }
    add("federated-lifted-equivalence", worst, 0.0);
  }
  return report;
}

inline int print_report(const VerifyReport& report, std::ostream& os = std::cout) {
  for (const auto& c : report.checks) {
    os << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << "  measured=" << c.measured
       << "  tolerance=" << c.tolerance << "\n";
  }
  os << (report.all_pass() ? "all checks passed" : "CHECKS FAILED") << "\n";
  return report.all_pass() ? 0 : 1;
}

}  // namespace bilevel
