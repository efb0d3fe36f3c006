#pragma once

#include <cstdint>
#include <cstring>

namespace ocw {

// IEEE 754 binary16 conversions. Serialized scales and binary-factor
// envelopes are stored at 16 bits, so quantization code rounds through
// fp16 to keep in-memory and on-disk values identical.

inline uint16_t fp16_encode(float f) {
  uint32_t x;
  std::memcpy(&x, &f, 4);
  const uint32_t sign = (x >> 16) & 0x8000u;
  x &= 0x7fffffffu;
  if (x >= 0x47800000u) {                       // overflow or inf/nan
    if (x > 0x7f800000u) return uint16_t(sign | 0x7e00u);  // nan
    return uint16_t(sign | 0x7c00u);            // inf (finite overflow saturates below)
  }
  if (x < 0x38800000u) {                        // subnormal half
    if (x < 0x33000000u) return uint16_t(sign); // rounds to zero
    const int shift = 126 - int(x >> 23);
    uint32_t mant = (x & 0x7fffffu) | 0x800000u;
    uint32_t rounded = mant >> (shift + 1);
    uint32_t round_bit = (mant >> shift) & 1u;
    uint32_t sticky = (mant & ((1u << shift) - 1u)) != 0;
    if (round_bit && (sticky || (rounded & 1u))) rounded += 1;
    return uint16_t(sign | rounded);
  }
  // normal range
  uint32_t mant = x & 0x7fffffu;
  int exp = int(x >> 23) - 127 + 15;
  uint16_t h = uint16_t(sign | (uint32_t(exp) << 10) | (mant >> 13));
  uint32_t round_bit = (mant >> 12) & 1u;
  uint32_t sticky = (mant & 0xfffu) != 0;
  if (round_bit && (sticky || (h & 1u))) h += 1;  // may carry into exponent: still valid
  if ((h & 0x7fffu) >= 0x7c00u) return uint16_t(sign | 0x7c00u);
  return h;
}

inline float fp16_decode(uint16_t h) {
  const uint32_t sign = uint32_t(h & 0x8000u) << 16;
  const uint32_t exp = (h >> 10) & 0x1fu;
  const uint32_t mant = h & 0x3ffu;
  uint32_t x;
  if (exp == 0) {
    if (mant == 0) {
      x = sign;
    } else {
      // subnormal: normalize
      int e = -1;
      uint32_t m = mant;
      while (!(m & 0x400u)) {
        m <<= 1;
        e--;
      }
      m &= 0x3ffu;
      x = sign | uint32_t(127 - 15 + e + 1) << 23 | (m << 13);
    }
  } else if (exp == 31) {
    x = sign | 0x7f800000u | (mant << 13);
  } else {
    x = sign | uint32_t(exp - 15 + 127) << 23 | (mant << 13);
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

// Round a float to the nearest fp16-representable value.
inline float fp16_round(float f) { return fp16_decode(fp16_encode(f)); }

// Smallest positive fp16 value (subnormal), used to keep scales > 0.
inline constexpr float kFp16MinPositive = 5.9604644775390625e-08f;  // 2^-24

}  // namespace ocw
