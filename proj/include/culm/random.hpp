#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace culm {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& s) {
    std::uint64_t z = (s += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
} // namespace detail

/// Seeded random stream with hand-rolled transforms so numeric sequences
/// are bit-stable for a given seed (std::* distributions are not portable,
/// the raw mt19937_64 sequence is). State round-trips through a string,
/// which checkpoints persist.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    /// Independent stream for (seed, stream_id), for parallel workers.
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + stream_id * 0xd1342543de82ef95ULL);
        std::uint64_t mixed = detail::splitmix64(s);
        return Rng(mixed);
    }

    void reseed(std::uint64_t seed) {
        engine_.seed(seed);
        have_spare_ = false;
        spare_ = 0.0;
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer on [lo, hi] inclusive (rejection-free unbiased
    /// enough for simulation use via 64-bit multiply-shift).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        const unsigned __int128 wide =
            static_cast<unsigned __int128>(engine_()) * static_cast<unsigned __int128>(span);
        return lo + static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 64));
    }

    /// Standard normal via Box-Muller (spare value cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::string state() const {
        std::ostringstream os;
        os << engine_ << ' ' << (have_spare_ ? 1 : 0);
        if (have_spare_) {
            os << ' ';
            os.precision(17);
            os << spare_;
        }
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        int flag = 0;
        is >> flag;
        have_spare_ = (flag != 0);
        spare_ = 0.0;
        if (have_spare_) is >> spare_;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace culm
