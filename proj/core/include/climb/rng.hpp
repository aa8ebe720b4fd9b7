#pragma once

#include <cstdint>
#include <random>

namespace climb {

// Deterministic random source. All randomness in the project flows through
// this class so that a run is reproducible from a single seed. Normal draws
// use Box-Muller on top of mt19937_64 rather than std::normal_distribution,
// whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    // 53 mantissa bits, same construction on every platform.
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  int64_t uniform_int(int64_t lo, int64_t hi);

  // Standard normal via Box-Muller; caches the second draw of each pair.
  double normal();

  double normal(double mean, double stdev) { return mean + stdev * normal(); }

  // Independent substream for a given purpose. Keeps module-level draws
  // decoupled: adding a draw in one place does not shift another module's
  // sequence.
  Rng fork(uint64_t stream) const;

  uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace climb
