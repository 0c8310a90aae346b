#ifndef C3OWD_RNG_HPP
#define C3OWD_RNG_HPP

#include <cmath>
#include <cstdint>

#include "c3owd/types.hpp"

namespace c3owd {

// SplitMix64-based generator. All distributions are implemented here rather
// than via <random> so that identical seeds give bit-identical streams on
// every platform. split() derives an independent child stream from the
// parent's seed and a stream id, which keeps parallel data generation
// deterministic regardless of scheduling.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; one pair per two draws, cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    std::uint64_t next_below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    /// Independent child stream; pure function of the parent seed and id.
    Rng split(std::uint64_t stream) const {
        std::uint64_t z = seed_ ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL);
        z = (z ^ (z >> 30)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

    std::uint64_t seed() const { return seed_; }

    Matd gaussian(Index rows, Index cols, double scale = 1.0) {
        Matd m(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) m(i, j) = scale * normal();
        return m;
    }

    Vecd gaussian_vec(Index n, double scale = 1.0) {
        Vecd v(n);
        for (Index i = 0; i < n; ++i) v(i) = scale * normal();
        return v;
    }

    Matd uniform_mat(Index rows, Index cols, double lo, double hi) {
        Matd m(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) m(i, j) = uniform(lo, hi);
        return m;
    }

    Vecd uniform_vec(Index n, double lo, double hi) {
        Vecd v(n);
        for (Index i = 0; i < n; ++i) v(i) = uniform(lo, hi);
        return v;
    }

  private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace c3owd

#endif
