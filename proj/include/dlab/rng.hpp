#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace dlab {

// Stream seed for run `index` under `master`:
//   splitmix64(master + 0x9E3779B97F4A7C15 * (index + 1)).
// Distinct indices give decorrelated mt19937_64 streams.
std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index);

std::uint64_t splitmix64(std::uint64_t x);

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double gaussian() { return normal_(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

    std::mt19937_64& engine() { return engine_; }

    // Text snapshot of the engine and normal-distribution state.
    std::string save_state() const;
    void load_state(const std::string& state);

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace dlab
