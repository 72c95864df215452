#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace shadowalign {

// SplitMix64 (Steele, Lea, Flood 2014). Used only to derive independent seeds
// from a master seed. Test vector: state 0 -> first output 0xe220a8397b1dcdaf.
std::uint64_t splitmix64(std::uint64_t& state);

// Stable 64-bit mix of a seed and a salt, for deriving per-job seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t derive_seed(std::uint64_t seed, const std::string& salt);

// Deterministic stream on top of std::mt19937_64, whose output sequence is
// fixed by the C++ standard (10000th draw from the default seed 5489 is
// 9981545732273789042). The conversions to floats, bounded integers and
// normals are implemented here rather than through <random> distributions,
// whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n), unbiased (rejection sampling). n > 0.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller (pairs cached).
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

  // k distinct indices from [0, n), in sampled order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// One seed per randomness factor: weight initialisation, batch ordering and
// dropout selection. Each seeds its own Rng; the streams never share draws.
struct SeedBundle {
  std::uint64_t wi = 0;
  std::uint64_t bo = 0;
  std::uint64_t ds = 0;

  static SeedBundle from_master(std::uint64_t master);
  bool operator==(const SeedBundle&) const = default;
};

}  // namespace shadowalign
