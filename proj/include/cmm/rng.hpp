#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace cmm {

/// Counter-based random stream.
///
/// A stream is identified by a 64-bit key derived from a master seed plus an
/// arbitrary list of entity ids (satellite, vehicle, particle, step, ...).
/// Draws are a pure function of (key, counter), so streams for different
/// entities never share state and the draw order across entities does not
/// matter. Output is bit-identical across platforms.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : key_(key) {}

  /// Derive a stream key from a master seed and entity ids.
  static std::uint64_t derive_key(std::uint64_t seed,
                                  std::initializer_list<std::uint64_t> ids) {
    std::uint64_t k = mix(seed ^ 0x6c6d6d2d726e6721ull);
    for (std::uint64_t id : ids) k = mix(k ^ mix(id + 0x9e3779b97f4a7c15ull));
    return k;
  }

  static RngStream keyed(std::uint64_t seed,
                         std::initializer_list<std::uint64_t> ids) {
    return RngStream(derive_key(seed, ids));
  }

  std::uint64_t next_u64() {
    counter_ += 0x9e3779b97f4a7c15ull;
    return mix(key_ ^ mix(counter_));
  }

  /// Uniform in [0, 1).
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (no state carried between draws).
  double normal() {
    // u1 in (0, 1] so the log is finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  // splitmix64 finalizer.
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cmm
