#pragma once

#include <array>
#include <cstdint>

namespace pspseg {

// Philox4x32-10 counter-based generator (Salmon et al., Random123). The
// 128-bit counter is split into a 64-bit stream id and a 64-bit position, the
// 64-bit key is the seed. Every draw is a pure function of (seed, stream,
// position), so any point of a run can be reproduced without replaying it.
class Philox {
 public:
  using Block = std::array<std::uint32_t, 4>;

  explicit Philox(std::uint64_t seed, std::uint64_t stream = 0);

  static Block generate(const Block& counter, std::array<std::uint32_t, 2> key);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  // Standard normal approximated by the centred sum of 12 uniforms; only
  // additions, so results match across IEEE-754 platforms.
  double normal();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t position() const { return position_; }
  std::uint32_t lane() const { return lane_; }
  // Restores a state previously read through position()/lane().
  void seek(std::uint64_t position, std::uint32_t lane);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t position_ = 0;
  std::uint32_t lane_ = 4;
  Block buffer_{};
};

// Derives a stream id from a purpose tag and up to two indices.
std::uint64_t stream_id(std::uint32_t tag, std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace pspseg
