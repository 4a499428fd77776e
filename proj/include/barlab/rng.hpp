#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace barlab {

// Counter-based randomness.  Every consumer owns a stream identified by a
// 64-bit key; the j-th value of stream `key` is a pure function of (key, j),
// so draws never depend on evaluation order across streams.  The generator is
// the splitmix64 output function evaluated at arbitrary offsets:
//
//   out(key, j) = fin(key + (j + 1) * 0x9E3779B97F4A7C15)
//   fin(z):  z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9;
//            z ^= z >> 27;  z *= 0x94D049BB133111EB;  z ^= z >> 31
//
// mix64(a, b) below is out(a, b) and is the single seed-derivation rule of
// the project: replicate seeds are mix64(master_seed, r), per-cell noise
// streams are keyed by mix64(seed ^ kStreamNoise, label), initial-state draws
// by mix64(seed ^ kStreamInit, label).

inline constexpr std::uint64_t kSplitmixGamma = 0x9E3779B97F4A7C15ull;

inline constexpr std::uint64_t splitmix_fin(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t mix64(std::uint64_t key, std::uint64_t j) {
  return splitmix_fin(key + (j + 1) * kSplitmixGamma);
}

// Stream-purpose tags (first hex digits of pi), xor-ed into the tree seed so
// the noise stream of mother k never collides with the initial draw of cell k.
inline constexpr std::uint64_t kStreamNoise = 0x243F6A8885A308D3ull;
inline constexpr std::uint64_t kStreamInit = 0x13198A2E03707344ull;

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix64(key_, counter_++); }

  // uniform on [0, 1), 53-bit resolution
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform on (0, 1], safe under log
  double next_unit_pos() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // independent standard normal pair (Box-Muller; consumes two words)
  std::pair<double, double> next_normal_pair() {
    const double u1 = next_unit_pos();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(t), r * std::sin(t)};
  }

  double next_normal() { return next_normal_pair().first; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace barlab
