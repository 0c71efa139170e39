#include <doctest.h>

#include <cmath>

#include "adatrans/rng.hpp"

using namespace adatrans;

TEST_CASE("rng streams are deterministic and independent of derivation order") {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(7);
  Rng s1 = base.stream("alpha");
  (void)base.stream("beta");
  Rng s2 = base.stream("alpha");
  CHECK(s1.next_u64() == s2.next_u64());
}

TEST_CASE("normal draws have sane moments") {
  Rng rng(123);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("sample_without_replacement returns sorted distinct indices") {
  Rng rng(5);
  const auto idx = sample_without_replacement(100, 10, rng);
  REQUIRE(idx.size() == 10);
  for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] > idx[i - 1]);
  for (int v : idx) {
    CHECK(v >= 0);
    CHECK(v < 100);
  }
}

TEST_CASE("content hashing distinguishes rows and matches itself") {
  const double r1[3] = {1.0, 2.0, 3.0};
  const double r2[3] = {1.0, 2.0, 3.5};
  CHECK(hash_doubles(r1, 3) == hash_doubles(r1, 3));
  CHECK(hash_doubles(r1, 3) != hash_doubles(r2, 3));
}
