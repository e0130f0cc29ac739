#pragma once

#include <cstdint>
#include <string_view>

namespace hm {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// FNV-1a over the bytes of a name.
constexpr std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Derives an independent sub-seed from (seed, name, index).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                    std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ hash_name(name)) + splitmix64(index ^ 0xD1B54A32D192ED03ULL));
}

/// Counter-based generator: value i of a stream is a pure function of
/// (key, i), so any element can be replayed without advancing state.
class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key) : key_(key) {}

  constexpr std::uint64_t at(std::uint64_t i) const {
    return splitmix64(key_ ^ splitmix64(i));
  }
  /// Uniform in [0, 1) with 53 random bits.
  constexpr double uniform_at(std::uint64_t i) const {
    return static_cast<double>(at(i) >> 11) * 0x1.0p-53;
  }

  std::uint64_t next_u64() { return at(counter_++); }
  double uniform() { return uniform_at(counter_++); }
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

  CounterRng split(std::string_view name) const { return CounterRng(derive_seed(key_, name)); }
  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace hm
