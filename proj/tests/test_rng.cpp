#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "shadowalign/error.hpp"
#include "shadowalign/rng.hpp"
#include "shadowalign/symmetry.hpp"

using namespace shadowalign;

TEST_CASE("splitmix64 reference output") {
  std::uint64_t s = 0;
  CHECK(splitmix64(s) == 0xe220a8397b1dcdafULL);
  CHECK(splitmix64(s) == 0x6e789e6aa1b965f4ULL);
}

TEST_CASE("mt19937_64 stream is the standard one") {
  Rng rng(5489);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = rng.next_u64();
  CHECK(v == 9981545732273789042ULL);
}

TEST_CASE("derived seeds depend on seed and salt") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
  CHECK(derive_seed(0, std::uint64_t{0}) != 0);
  const SeedBundle b = SeedBundle::from_master(7);
  CHECK(b.wi != b.bo);
  CHECK(b.bo != b.ds);
  CHECK(b == SeedBundle::from_master(7));
}

TEST_CASE("uniform and below stay in range") {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(rng.below(7) < 7);
  }
  CHECK_THROWS_AS(rng.below(0), InvalidArgument);
}

TEST_CASE("below is uniform (chi-square, 7 bins)") {
  Rng rng(11);
  std::vector<double> counts(7, 0.0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) counts[rng.below(7)] += 1;
  double chi2 = 0;
  for (double c : counts) chi2 += (c - n / 7.0) * (c - n / 7.0) / (n / 7.0);
  CHECK(chi2 < 22.46);  // df 6, p = 0.001
}

TEST_CASE("normal has unit moments") {
  Rng rng(5);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("random permutations are uniform over S4 (chi-square)") {
  Rng rng(13);
  std::map<std::vector<std::size_t>, double> counts;
  const int n = 48000;
  for (int i = 0; i < n; ++i) counts[random_permutation(4, rng).mapping()] += 1;
  REQUIRE(counts.size() == 24);
  double chi2 = 0;
  for (const auto& [p, c] : counts) chi2 += (c - n / 24.0) * (c - n / 24.0) / (n / 24.0);
  CHECK(chi2 < 49.73);  // df 23, p = 0.001
}

TEST_CASE("sample without replacement gives distinct indices") {
  Rng rng(17);
  const auto s = rng.sample_without_replacement(50, 20);
  CHECK(s.size() == 20);
  CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 20);
  CHECK(*std::max_element(s.begin(), s.end()) < 50);
  Rng a(2), b(2);
  std::vector<int> x{1, 2, 3, 4, 5, 6}, y = x;
  a.shuffle(x);
  b.shuffle(y);
  CHECK(x == y);
}
