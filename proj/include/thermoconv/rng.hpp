#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace thermoconv {

// Philox4x32-10 (Salmon et al., SC'11). Counter-based: the output depends only
// on (counter, key), which is what makes streams order-independent.
using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

inline PhiloxCounter philox4x32_10(PhiloxCounter c, PhiloxKey k) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int r = 0; r < 10; ++r) {
    const std::uint64_t p0 = std::uint64_t(m0) * c[0];
    const std::uint64_t p1 = std::uint64_t(m1) * c[2];
    c = {std::uint32_t(p1 >> 32) ^ c[1] ^ k[0], std::uint32_t(p1), std::uint32_t(p0 >> 32) ^ c[3] ^ k[1],
         std::uint32_t(p0)};
    k[0] += w0;
    k[1] += w1;
  }
  return c;
}

// Distinct draw purposes get distinct keys so e.g. initial-state sampling never
// reuses increment randomness.
enum class Stream : std::uint32_t { Increments = 0, Initial = 1, Auxiliary = 2 };

// Standard normals for one (seed, stream, path, step, substep) cell. Each
// Philox block yields two normals via Box-Muller.
class KeyedNormal {
 public:
  KeyedNormal(std::uint64_t seed, Stream stream, std::uint64_t path, std::uint64_t step, std::uint32_t substep = 0)
      : key_{std::uint32_t(seed), std::uint32_t(seed >> 32) ^ (0x85EBCA6Bu * (std::uint32_t(stream) + 1u))},
        ctr_{0u, substep ^ (std::uint32_t(step >> 32) * 0xC2B2AE35u), std::uint32_t(step), std::uint32_t(path)} {
    key_[0] ^= std::uint32_t(path >> 32) * 0x27D4EB2Fu;
  }

  double operator()() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const PhiloxCounter r = philox4x32_10(ctr_, key_);
    ++ctr_[0];
    const double u1 = unit(r[0], r[1]);
    const double u2 = unit(r[2], r[3]);
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    spare_ = rad * std::sin(ang);
    have_spare_ = true;
    return rad * std::cos(ang);
  }

  // Uniform on (0, 1), consuming one block.
  double uniform() {
    const PhiloxCounter r = philox4x32_10(ctr_, key_);
    ++ctr_[0];
    return unit(r[0], r[1]);
  }

 private:
  static double unit(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t x = (std::uint64_t(hi) << 32 | lo) >> 11;
    return (double(x) + 0.5) * 0x1p-53;
  }

  PhiloxKey key_;
  PhiloxCounter ctr_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace thermoconv
