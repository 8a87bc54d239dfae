#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace iomm {

// splitmix64; used to derive independent sub-stream seeds.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

// Deterministic random stream. Every random draw in the project flows through
// this type, and the stream for a given seed is fixed by the recipe below so
// tests can replay it independently:
//
//   next_u64()  raw std::mt19937_64 output, engine seeded directly with the
//               64-bit seed (no seed_seq)
//   uniform()   (next_u64() >> 11) * 2^-53, double in [0, 1)
//   normal()    Box-Muller on two uniform() draws u1, u2:
//               r = sqrt(-2 ln(1 - u1)), the cos(2*pi*u2) variate is returned
//               first and the sin variate is cached for the next call
//   below(n)    next_u64() % n (n is always tiny relative to 2^64)
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]; keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Serialized cursor: mt19937_64 text state + Box-Muller cache (bit-exact).
    std::string save_state() const {
        std::ostringstream os;
        os << engine_ << " " << (has_cached_ ? 1 : 0) << " ";
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(cached_));
        std::memcpy(&bits, &cached_, sizeof(bits));
        os << bits;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        uint64_t bits = 0;
        is >> engine_ >> flag >> bits;
        if (!is) throw std::runtime_error("Rng::load_state: malformed cursor");
        has_cached_ = flag != 0;
        std::memcpy(&cached_, &bits, sizeof(bits));
    }

  private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace iomm
