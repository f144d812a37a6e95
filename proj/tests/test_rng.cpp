#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "owsd/rng.hpp"

using namespace owsd;

TEST_CASE("rng streams are reproducible per seed") {
  Rng a(1234), b(1234), c(1235);
  for (int i = 0; i < 64; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  bool any_diff = false;
  Rng a2(1234);
  for (int i = 0; i < 64; ++i) any_diff |= a2.next_u64() != c.next_u64();
  CHECK(any_diff);
}

TEST_CASE("derive_seed separates streams deterministically") {
  CHECK(derive_seed(42, 1) == derive_seed(42, 1));
  CHECK(derive_seed(42, 1) != derive_seed(42, 2));
  CHECK(derive_seed(42, 1) != derive_seed(43, 1));
}

TEST_CASE("uniform stays inside its interval") {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(-2.5, 1.5);
    CHECK(u >= -2.5);
    CHECK(u < 1.5);
  }
}

TEST_CASE("uniform_index stays in range and hits every bucket") {
  Rng rng(6);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const std::size_t k = rng.uniform_index(7);
    REQUIRE(k < 7);
    ++counts[k];
  }
  for (int c : counts) CHECK(c > 0);
}

TEST_CASE("normal draws match requested moments") {
  Rng rng(11);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal(0.5, 2.0);
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean - 0.5) < 0.02);
  CHECK(std::abs(std::sqrt(var) - 2.0) < 0.02);
}

TEST_CASE("bernoulli honors the edge probabilities") {
  Rng rng(12);
  for (int i = 0; i < 100; ++i) {
    CHECK_FALSE(rng.bernoulli(0.0));
    CHECK(rng.bernoulli(1.0));
  }
}

TEST_CASE("shuffle permutes deterministically") {
  std::vector<std::size_t> v(50);
  std::iota(v.begin(), v.end(), 0);
  std::vector<std::size_t> w = v;

  Rng a(77);
  a.shuffle(v);
  Rng b(77);
  b.shuffle(w);
  CHECK(v == w);

  std::vector<std::size_t> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> expect(50);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(sorted == expect);

  std::vector<std::size_t> u(50);
  std::iota(u.begin(), u.end(), 0);
  CHECK(v != u);  // 50 elements staying put would mean the shuffle is a no-op
}
