#include "pspseg/rng.hpp"

#include "pspseg/errors.hpp"

namespace pspseg {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

Philox::Philox(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

Philox::Block Philox::generate(const Block& counter, std::array<std::uint32_t, 2> key) {
  Block c = counter;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, c[0], hi0, lo0);
    mulhilo(kMul1, c[2], hi1, lo1);
    c = {hi1 ^ c[1] ^ key[0], lo1, hi0 ^ c[3] ^ key[1], lo0};
  }
  return c;
}

std::uint32_t Philox::next_u32() {
  if (lane_ >= 4) {
    const Block counter{static_cast<std::uint32_t>(position_), static_cast<std::uint32_t>(position_ >> 32),
                        static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    buffer_ = generate(counter, {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
    ++position_;
    lane_ = 0;
  }
  return buffer_[lane_++];
}

std::uint64_t Philox::next_u64() {
  const std::uint64_t hi = next_u32();
  return (hi << 32) | next_u32();
}

double Philox::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Philox::below(std::uint64_t n) {
  if (n == 0) throw ContractError("Philox::below needs a positive bound");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  for (;;) {
    const std::uint64_t v = next_u64();
    if (v < limit) return v % n;
  }
}

double Philox::normal() {
  double s = 0;
  for (int i = 0; i < 12; ++i) s += uniform();
  return s - 6.0;
}

void Philox::seek(std::uint64_t position, std::uint32_t lane) {
  if (lane < 4) {
    if (position == 0) throw ContractError("Philox::seek: mid-block lane needs a consumed block");
    position_ = position - 1;
    lane_ = 4;
    next_u32();
    lane_ = lane;
  } else {
    position_ = position;
    lane_ = 4;
  }
}

std::uint64_t stream_id(std::uint32_t tag, std::uint64_t a, std::uint64_t b) {
  return mix64(mix64(mix64(tag) ^ a) ^ b);
}

}  // namespace pspseg
