#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace mdat {

// Deterministic, platform-independent random streams. Every consumer derives
// its own stream from (master seed, purpose tag, indices), so results do not
// depend on call order across modules and runs resume bit-exactly.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  // xoshiro256**
  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // standard normal via Box-Muller (one draw per call, no cached spare)
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

// Stream keyed by a master seed, a purpose tag, and up to three indices.
inline Rng derive_rng(std::uint64_t master, std::string_view purpose, std::uint64_t a = 0,
                      std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t st = master;
  std::uint64_t h = splitmix64(st);
  st ^= hash_tag(purpose);
  h ^= splitmix64(st);
  st ^= a + 0x9e3779b97f4a7c15ULL;
  h ^= splitmix64(st);
  st ^= b + 0x7f4a7c159e3779b9ULL;
  h ^= splitmix64(st);
  st ^= c + 0x2545f4914f6cdd1dULL;
  h ^= splitmix64(st);
  return Rng(h);
}

}  // namespace mdat
