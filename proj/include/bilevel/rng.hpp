#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Core>

namespace bilevel {

// Named random substreams. Every draw in the library is a pure function of
// (master seed, stream, counter, index), so consuming one stream never shifts
// another. That is what makes the p=1 / T=1 / delta=1 solver reductions and
// the federated-vs-lifted runs bit-for-bit comparable.
enum class Stream : std::uint64_t {
  NoiseF = 0,        // xi draws (f gradients)
  NoiseG = 1,        // phi draws (g gradient and second-derivative blocks)
  CoinLL = 2,        // lower-level projection coins (theta)
  CoinML = 3,        // medium-level projection coins (theta-tilde)
  NeumannDepth = 4,  // truncation depth draws
  Init = 5,          // problem data and initial iterates
};

struct SampleToken {
  Stream stream;
  std::uint64_t counter = 0;
};

// Packs (role, outer index k, inner index i) into one counter. Roles keep the
// different uses of a stream within one outer iteration disjoint.
inline constexpr std::uint64_t pack_counter(std::uint64_t role, std::uint64_t k,
                                            std::uint64_t inner) {
  return (role << 61) | (k << 21) | inner;
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_draw(std::uint64_t seed, const SampleToken& tok,
                               std::uint64_t index) {
  std::uint64_t h = mix64(seed ^ 0x6A09E667F3BCC909ULL);
  h = mix64(h ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(tok.stream) + 1)));
  h = mix64(h ^ (0xC2B2AE3D27D4EB4FULL * tok.counter));
  h = mix64(h ^ (0x165667B19E3779F9ULL * index));
  return h;
}

inline double to_unit(std::uint64_t h) {
  // 53 bits -> [0, 1)
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Uniform draw in [0, 1).
inline double unit_draw(std::uint64_t seed, const SampleToken& tok,
                        std::uint64_t index = 0) {
  return detail::to_unit(detail::hash_draw(seed, tok, index));
}

// Standard normal via Box-Muller on two hashed uniforms.
inline double normal_draw(std::uint64_t seed, const SampleToken& tok,
                          std::uint64_t index = 0) {
  const double u1 =
      1.0 - detail::to_unit(detail::hash_draw(seed, tok, 2 * index));  // (0, 1]
  const double u2 = detail::to_unit(detail::hash_draw(seed, tok, 2 * index + 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Bernoulli coin with success probability p; p = 1 always succeeds.
inline bool coin_draw(std::uint64_t seed, const SampleToken& tok, double p) {
  return unit_draw(seed, tok) < p;
}

// Uniform integer in {0, ..., n - 1}.
inline std::uint64_t uniform_index(std::uint64_t seed, const SampleToken& tok,
                                   std::uint64_t n) {
  const auto v = static_cast<std::uint64_t>(unit_draw(seed, tok) * static_cast<double>(n));
  return v < n ? v : n - 1;
}

inline Eigen::VectorXd gaussian_vector(std::uint64_t seed, const SampleToken& tok,
                                       Eigen::Index n, double std_dev = 1.0,
                                       std::uint64_t index_offset = 0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    v[i] = std_dev * normal_draw(seed, tok, index_offset + static_cast<std::uint64_t>(i));
  }
  return v;
}

// Column-major fill; index_offset keys the first entry so disjoint regions of
// one token never collide.
inline Eigen::MatrixXd gaussian_matrix(std::uint64_t seed, const SampleToken& tok,
                                       Eigen::Index rows, Eigen::Index cols,
                                       double std_dev = 1.0,
                                       std::uint64_t index_offset = 0) {
  Eigen::MatrixXd m(rows, cols);
  std::uint64_t idx = index_offset;
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      m(i, j) = std_dev * normal_draw(seed, tok, idx++);
    }
  }
  return m;
}

}  // namespace bilevel
