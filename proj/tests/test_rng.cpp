#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bilevel/rng.hpp"

using namespace bilevel;

TEST_CASE("draws are pure functions of (seed, stream, counter, index)") {
  const SampleToken tok{Stream::NoiseG, pack_counter(1, 17, 3)};
  CHECK(normal_draw(42, tok, 5) == normal_draw(42, tok, 5));
  CHECK(unit_draw(42, tok, 5) == unit_draw(42, tok, 5));
  CHECK(normal_draw(42, tok, 5) != normal_draw(43, tok, 5));
  CHECK(normal_draw(42, tok, 5) != normal_draw(42, tok, 6));
  const SampleToken other{Stream::NoiseF, tok.counter};
  CHECK(normal_draw(42, tok, 5) != normal_draw(42, other, 5));
}

TEST_CASE("counter packing keeps roles and indices disjoint") {
  CHECK(pack_counter(0, 3, 4) != pack_counter(1, 3, 4));
  CHECK(pack_counter(0, 3, 4) != pack_counter(0, 4, 4));
  CHECK(pack_counter(0, 3, 4) != pack_counter(0, 3, 5));
  CHECK((pack_counter(2, (1ull << 39), (1ull << 20)) >> 61) == 2);
}

TEST_CASE("unit draws live in [0,1) and coins respect the probability") {
  int heads = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const SampleToken tok{Stream::CoinLL, static_cast<std::uint64_t>(i)};
    const double u = unit_draw(9, tok);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    if (coin_draw(9, tok, 0.3)) ++heads;
  }
  const double rate = static_cast<double>(heads) / n;
  CHECK(std::abs(rate - 0.3) < 4.0 * std::sqrt(0.3 * 0.7 / n));

  // p = 1 always lands, p -> 0 never does.
  for (int i = 0; i < 100; ++i) {
    const SampleToken tok{Stream::CoinML, static_cast<std::uint64_t>(i)};
    CHECK(coin_draw(9, tok, 1.0));
  }
}

TEST_CASE("normal draws have roughly standard moments") {
  double sum = 0.0, sum2 = 0.0;
  const int n = 40000;
  const SampleToken tok{Stream::NoiseF, 0};
  for (int i = 0; i < n; ++i) {
    const double z = normal_draw(123, tok, static_cast<std::uint64_t>(i));
    sum += z;
    sum2 += z * z;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 5.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("uniform_index covers {0..n-1}") {
  std::array<int, 7> hits{};
  for (int i = 0; i < 7000; ++i) {
    const SampleToken tok{Stream::NeumannDepth, static_cast<std::uint64_t>(i)};
    const auto v = uniform_index(5, tok, 7);
    REQUIRE(v < 7);
    hits[v]++;
  }
  for (int h : hits) CHECK(h > 700);
}
