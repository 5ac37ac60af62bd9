#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace evln {

/// Deterministic pseudo-random source.
///
/// Algorithm: xoshiro256** (Blackman & Vigna, 2018) with its 256-bit state
/// filled by four successive splitmix64 outputs of the seed. All derived
/// draws use only integer arithmetic plus IEEE-754 double operations, so the
/// sequence is identical on every conforming platform:
///   uniform()      = (next() >> 11) * 2^-53                 in [0, 1)
///   normal()       = sqrt(-2 ln(1 - u1)) * cos(2*pi*u2)      Box-Muller, one
///                    output per two uniforms (no cached spare)
///   index(n)       = unbiased rejection sampling on next() modulo n
///
/// Rng is a value type: copying it snapshots the stream, which is how noise
/// and dropout masks are replayed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next();
  double uniform();
  double normal();
  // Uniform integer in [0, n). n must be > 0.
  std::size_t index(std::size_t n);

  // Independent stream derived from this generator's seed and a stream id.
  // Does not advance *this.
  Rng derive(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.s_[0] == b.s_[0] && a.s_[1] == b.s_[1] && a.s_[2] == b.s_[2] &&
           a.s_[3] == b.s_[3];
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

// Fisher-Yates shuffle driven by Rng::index (std::shuffle is
// implementation-defined and would break cross-platform determinism).
template <typename T>
void shuffle(std::span<T> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = rng.index(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace evln
