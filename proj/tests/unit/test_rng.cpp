#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "hm/rng.hpp"

using namespace hm;

TEST_CASE("counter stream is a pure function of key and index") {
  CounterRng a(42);
  CounterRng b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.at(static_cast<std::uint64_t>(i)));
  CHECK(CounterRng(1).at(0) != CounterRng(2).at(0));
}

TEST_CASE("derived seeds differ by name and index") {
  std::set<std::uint64_t> s;
  for (std::uint64_t i = 0; i < 100; ++i) {
    s.insert(derive_seed(7, "mc", i));
    s.insert(derive_seed(7, "shuffle", i));
  }
  CHECK(s.size() == 200);
  static_assert(derive_seed(1, "x", 2) == derive_seed(1, "x", 2));
}

TEST_CASE("uniforms lie in [0, 1) with the right mean") {
  CounterRng r(3);
  double m = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    m += u;
  }
  CHECK(m / 20000 == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("normals have zero mean and unit variance") {
  CounterRng r(4);
  double m = 0, v = 0;
  const int n = 20000;
  std::vector<double> xs(n);
  for (auto& x : xs) {
    x = r.normal();
    m += x;
  }
  m /= n;
  for (double x : xs) v += (x - m) * (x - m);
  CHECK(std::abs(m) < 0.03);
  CHECK(v / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("uniform_int stays in range and covers it") {
  CounterRng r(5);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto k = r.uniform_int(7);
    CHECK(k < 7);
    seen.insert(k);
  }
  CHECK(seen.size() == 7);
}
