#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "enkf_lab/rng.hpp"
#include "enkf_lab/stats.hpp"

using namespace enkf_lab;

TEST_CASE("philox known-answer vector") {
  // Reference output of the 4x32-10 block for counter 0, key 0.
  RngStream s(0);
  CHECK(s.next_u64() == ((static_cast<uint64_t>(0xe169c58du) << 32) | 0x6627e8d5u));
  CHECK(s.next_u64() == ((static_cast<uint64_t>(0x9b00dbd8u) << 32) | 0xbc57ac4cu));
}

TEST_CASE("streams are deterministic and keyed") {
  RngStream a = RngStream::derive(42, "purpose", 7);
  RngStream b = RngStream::derive(42, "purpose", 7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c = RngStream::derive(42, "purpose", 8);
  RngStream d = RngStream::derive(42, "other", 7);
  RngStream e = RngStream::derive(43, "purpose", 7);
  RngStream base = RngStream::derive(42, "purpose", 7);
  const uint64_t first = base.next_u64();
  CHECK(c.next_u64() != first);
  CHECK(d.next_u64() != first);
  CHECK(e.next_u64() != first);
}

TEST_CASE("uniform moments") {
  RngStream s = RngStream::derive(1, "uniform");
  const int n = 200000;
  RunningMoments m;
  for (int i = 0; i < n; ++i) m.add(s.next_double());
  CHECK(std::abs(m.mean() - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
  CHECK(m.variance() == doctest::Approx(1.0 / 12.0).epsilon(0.02));
}

TEST_CASE("normal moments and tail") {
  RngStream s = RngStream::derive(2, "normal");
  const int n = 400000;
  RunningMoments m;
  long beyond3 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = s.next_normal();
    m.add(x);
    if (std::abs(x) > 3.0) ++beyond3;
  }
  CHECK(std::abs(m.mean()) < 4.0 / std::sqrt(static_cast<double>(n)));
  CHECK(m.variance() == doctest::Approx(1.0).epsilon(0.02));
  // P(|Z| > 3) = 0.0027
  CHECK(beyond3 / static_cast<double>(n) == doctest::Approx(0.0027).epsilon(0.25));
}

TEST_CASE("substreams are uncorrelated") {
  RngStream a = RngStream::derive(3, "replica", 0);
  RngStream b = RngStream::derive(3, "replica", 1);
  const int n = 100000;
  double sum_ab = 0.0;
  for (int i = 0; i < n; ++i) sum_ab += a.next_normal() * b.next_normal();
  CHECK(std::abs(sum_ab / n) < 4.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("matrix fill order is column-major") {
  RngStream a = RngStream::derive(4, "fill");
  RngStream b = RngStream::derive(4, "fill");
  const Matrix m = a.normal_matrix(2, 2);
  CHECK(m(0, 0) == b.next_normal());
  CHECK(m(1, 0) == b.next_normal());
  CHECK(m(0, 1) == b.next_normal());
  CHECK(m(1, 1) == b.next_normal());
}

TEST_CASE("generator version tag is pinned") {
  CHECK(std::string(kGeneratorVersion) == "philox4x32-10/polar-v1");
}
