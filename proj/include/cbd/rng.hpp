#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace cbd {

// xoshiro256++ seeded through splitmix64. Self-contained so that streams are
// bit-reproducible across compilers and standard libraries.
struct Rng {
  std::array<std::uint64_t, 4> s{};

  static constexpr std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : s) w = splitmix64(x);
  }

  static constexpr std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s[0] + s[3], 23) + s[0];
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // Box-Muller; the second variate is discarded to keep the stream stateless.
  float normal(float mean, float sd) {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sd * static_cast<float>(r * std::cos(2.0 * std::numbers::pi * u2));
  }

  // Deterministic child-stream derivation: every pipeline stage hashes its
  // name (or index) into the root seed so stages are independently
  // reproducible.
  static std::uint64_t derive(std::uint64_t root, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ root;
    for (const char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    std::uint64_t x = h;
    return splitmix64(x);
  }

  static std::uint64_t derive(std::uint64_t root, std::uint64_t k) {
    std::uint64_t x = root ^ (0x9e3779b97f4a7c15ULL + k * 0xd1342543de82ef95ULL);
    return splitmix64(x);
  }
};

}  // namespace cbd
