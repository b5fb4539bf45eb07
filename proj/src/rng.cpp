#include "dlab/rng.hpp"

#include <sstream>

#include "dlab/error.hpp"

namespace dlab {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(master + 0x9E3779B97F4A7C15ull * (index + 1));
}

std::string Rng::save_state() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_;
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_ >> normal_;
    if (!is) throw DataError("malformed RNG state snapshot");
}

}  // namespace dlab
