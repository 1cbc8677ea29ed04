#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

namespace bilevel {

struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConditioningError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CapabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Marks a decomposition as the chained-difference consensus matrix over
// `clients` blocks of length `block_dim`. Projections onto its kernel are then
// computed by exact block averaging, the same kernel the federated simulator
// uses, so centralized and federated runs agree bit for bit.
struct ConsensusTag {
  int clients = 0;
  int block_dim = 0;
};

/**
 * SVD-derived geometry of a linear equality constraint matrix A (m x d):
 * Moore-Penrose inverse, orthonormal bases of Ran(A^T) and Ker(A), and the
 * numerical rank. Immutable after construction; safe to share across threads.
 */
struct SubspaceDecomposition {
  Eigen::MatrixXd matrix;        // A, m x d
  Eigen::Index rank = 0;         // r
  Eigen::MatrixXd pinv;          // A^+, d x m
  Eigen::MatrixXd range_basis;   // V1, d x r
  Eigen::MatrixXd null_basis;    // V2, d x (d - r)
  Eigen::VectorXd singular_values;
  double rank_tolerance = 0.0;   // threshold actually used
  std::optional<ConsensusTag> consensus;

  Eigen::Index rows() const { return matrix.rows(); }
  Eigen::Index cols() const { return matrix.cols(); }
  Eigen::Index null_dim() const { return cols() - rank; }
};

namespace detail {

// Deterministic sign convention: the first entry of each right singular
// vector whose magnitude is non-negligible is made positive. Left vectors of
// retained singular triplets flip along so A^+ is unchanged.
inline void fix_singular_vector_signs(Eigen::MatrixXd& u, Eigen::MatrixXd& v,
                                      Eigen::Index rank) {
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    const double scale = v.col(j).cwiseAbs().maxCoeff();
    if (scale == 0.0) continue;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (std::abs(v(i, j)) > 1e-12 * scale) {
        if (v(i, j) < 0.0) {
          v.col(j) = -v.col(j);
          if (j < rank && j < u.cols()) u.col(j) = -u.col(j);
        }
        break;
      }
    }
  }
}

}  // namespace detail

inline SubspaceDecomposition decompose(const Eigen::MatrixXd& a,
                                       double rank_tolerance = 0.0) {
  if (!a.allFinite()) {
    throw std::invalid_argument("decompose: constraint matrix has non-finite entries");
  }
  if (rank_tolerance < 0.0) {
    throw std::invalid_argument("decompose: rank tolerance must be nonnegative");
  }
  const Eigen::Index m = a.rows();
  const Eigen::Index d = a.cols();

  SubspaceDecomposition dec;
  dec.matrix = a;

  if (m == 0 || a.cwiseAbs().maxCoeff() == 0.0) {
    // Empty or all-zero constraint: the kernel is the whole space.
    dec.rank = 0;
    dec.pinv = Eigen::MatrixXd::Zero(d, m);
    dec.range_basis = Eigen::MatrixXd::Zero(d, 0);
    dec.null_basis = Eigen::MatrixXd::Identity(d, d);
    dec.singular_values = Eigen::VectorXd::Zero(std::min(m, d));
    dec.rank_tolerance = rank_tolerance;
    return dec;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::VectorXd sv = svd.singularValues();
  const double sigma_max = sv.size() > 0 ? sv[0] : 0.0;
  const double threshold =
      rank_tolerance > 0.0
          ? rank_tolerance
          : static_cast<double>(std::max(m, d)) *
                std::numeric_limits<double>::epsilon() * sigma_max;

  Eigen::Index r = 0;
  while (r < sv.size() && sv[r] > threshold) ++r;

  Eigen::MatrixXd u = svd.matrixU();
  Eigen::MatrixXd v = svd.matrixV();
  detail::fix_singular_vector_signs(u, v, r);

  dec.rank = r;
  dec.range_basis = v.leftCols(r);
  dec.null_basis = v.rightCols(d - r);
  dec.singular_values = sv;
  dec.rank_tolerance = threshold;
  dec.pinv = dec.range_basis * sv.head(r).cwiseInverse().asDiagonal() *
             u.leftCols(r).transpose();
  return dec;
}

// ---------------------------------------------------------------------------
// Consensus geometry
// ---------------------------------------------------------------------------

// Mean over M stacked blocks, summed in client order then divided once. The
// federated server average uses the same code path.
inline Eigen::VectorXd block_mean_stacked(const Eigen::VectorXd& v, int clients,
                                          int block_dim) {
  Eigen::VectorXd acc = v.segment(0, block_dim);
  for (int m = 1; m < clients; ++m) {
    acc += v.segment(static_cast<Eigen::Index>(m) * block_dim, block_dim);
  }
  acc /= static_cast<double>(clients);
  return acc;
}

inline Eigen::VectorXd block_mean(const std::vector<Eigen::VectorXd>& blocks) {
  if (blocks.empty()) {
    throw std::invalid_argument("block_mean: empty block list");
  }
  Eigen::VectorXd acc = blocks[0];
  for (std::size_t m = 1; m < blocks.size(); ++m) {
    if (blocks[m].size() != acc.size()) {
      throw std::invalid_argument("block_mean: block length mismatch");
    }
    acc += blocks[m];
  }
  acc /= static_cast<double>(blocks.size());
  return acc;
}

inline Eigen::VectorXd broadcast_blocks(const Eigen::VectorXd& block, int clients) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(clients) * block.size());
  for (int m = 0; m < clients; ++m) {
    out.segment(static_cast<Eigen::Index>(m) * block.size(), block.size()) = block;
  }
  return out;
}

// The chained-difference consensus matrix of M blocks of dimension d:
// A = [1 -1; ...; 1 -1] (x) I_d, with Ker(A) spanned by 1_M/sqrt(M) (x) I_d.
inline Eigen::MatrixXd consensus_matrix(int clients, int block_dim) {
  if (clients < 2) throw std::invalid_argument("consensus_matrix: need at least 2 clients");
  if (block_dim < 1) throw std::invalid_argument("consensus_matrix: block dim must be positive");
  const Eigen::Index rows = static_cast<Eigen::Index>(clients - 1) * block_dim;
  const Eigen::Index cols = static_cast<Eigen::Index>(clients) * block_dim;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, cols);
  for (int m = 0; m + 1 < clients; ++m) {
    for (int i = 0; i < block_dim; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(m) * block_dim + i;
      a(row, static_cast<Eigen::Index>(m) * block_dim + i) = 1.0;
      a(row, static_cast<Eigen::Index>(m + 1) * block_dim + i) = -1.0;
    }
  }
  return a;
}

inline SubspaceDecomposition consensus_constraints(int clients, int block_dim) {
  SubspaceDecomposition dec = decompose(consensus_matrix(clients, block_dim));
  dec.consensus = ConsensusTag{clients, block_dim};
  return dec;
}

// ---------------------------------------------------------------------------
// Projections and feasibility
// ---------------------------------------------------------------------------

struct FeasibilityReport {
  bool feasible = false;
  double residual = 0.0;
};

/** Linear equality constraint Av = b against a shared decomposition of A. */
struct AffineConstraint {
  std::shared_ptr<const SubspaceDecomposition> dec;
  Eigen::VectorXd target;  // b
};

inline FeasibilityReport check_feasible(const SubspaceDecomposition& dec,
                                        const Eigen::VectorXd& b,
                                        double tol = 1e-8) {
  if (b.size() != dec.rows()) {
    throw std::invalid_argument("check_feasible: target length mismatch");
  }
  const double residual = (dec.matrix * (dec.pinv * b) - b).norm();
  return {residual <= tol * (1.0 + b.norm()), residual};
}

inline FeasibilityReport check_feasible(const AffineConstraint& c, double tol = 1e-8) {
  return check_feasible(*c.dec, c.target, tol);
}

// Nearest point in {z | Az = b}: (I - A^+ A) v + A^+ b. Consensus-tagged
// decompositions with b = 0 use exact block averaging instead.
inline Eigen::VectorXd project(const SubspaceDecomposition& dec,
                               const Eigen::VectorXd& b, const Eigen::VectorXd& v) {
  if (v.size() != dec.cols()) {
    throw std::invalid_argument("project: vector length mismatch");
  }
  if (dec.consensus && b.isZero(0.0)) {
    return broadcast_blocks(
        block_mean_stacked(v, dec.consensus->clients, dec.consensus->block_dim),
        dec.consensus->clients);
  }
  const auto report = check_feasible(dec, b);
  if (!report.feasible) {
    std::ostringstream msg;
    msg << "project: infeasible constraint, ||A A^+ b - b|| = " << report.residual;
    throw InfeasibleError(msg.str());
  }
  return v - dec.pinv * (dec.matrix * v) + dec.pinv * b;
}

inline Eigen::VectorXd project(const AffineConstraint& c, const Eigen::VectorXd& v) {
  return project(*c.dec, c.target, v);
}

// Orthogonal projection onto Ker(A), computed as V2 (V2^T v); block averaging
// on consensus decompositions.
inline Eigen::VectorXd apply_null_projector(const SubspaceDecomposition& dec,
                                            const Eigen::VectorXd& v) {
  if (v.size() != dec.cols()) {
    throw std::invalid_argument("apply_null_projector: vector length mismatch");
  }
  if (dec.consensus) {
    return broadcast_blocks(
        block_mean_stacked(v, dec.consensus->clients, dec.consensus->block_dim),
        dec.consensus->clients);
  }
  return dec.null_basis * (dec.null_basis.transpose() * v);
}

// v^T (I - A^+ A) v, evaluated as the squared norm of the kernel component so
// the result is nonnegative by construction.
inline double weighted_norm_sq(const SubspaceDecomposition& dec,
                               const Eigen::VectorXd& v) {
  if (v.size() != dec.cols()) {
    throw std::invalid_argument("weighted_norm_sq: vector length mismatch");
  }
  const Eigen::VectorXd w = v - dec.pinv * (dec.matrix * v);
  return w.squaredNorm();
}

}  // namespace bilevel
