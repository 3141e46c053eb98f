#pragma once

#include <cstdint>

namespace psteer {

// Deterministic stream generator: xoshiro256++ seeded through SplitMix64.
// Identical seeds produce identical sequences on every platform; fixtures
// written against a seed stay valid across toolchains. Concurrent tasks take
// independent streams via derive(task_index) = SeededRng(seed ^ task_index).
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform double in [0, 1) with 53 random bits.
    double next_double();

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi);

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

    // Gaussian via the Marsaglia polar method; the spare value is cached, so
    // draws consume the underlying stream in a reproducible pattern.
    double normal(double mean, double stddev);

    // Independent stream for a sub-task: same algorithm, seed ^ index.
    SeededRng derive(std::uint64_t index) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace psteer
