#ifndef C3OWD_BENCH_HPP
#define C3OWD_BENCH_HPP

#include <algorithm>
#include <chrono>
#include <vector>

#include "c3owd/biwkv.hpp"
#include "c3owd/rng.hpp"

namespace c3owd {

struct BenchRow {
    Index t_len = 0;
    double scan_ms = 0.0;
    double naive_ms = 0.0;
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

template <typename F>
double time_ms(F&& body, int inner_repeats) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < inner_repeats; ++r) body();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() /
           static_cast<double>(inner_repeats);
}

}  // namespace detail

/// Wall-clock medians for the scan and naive kernels per sequence length.
/// Absolute numbers are machine-dependent; only ratios between sizes are
/// meaningful. The scan is repeated internally until a sample spans at least
/// ~10 ms so small sizes are not timer-noise.
inline std::vector<BenchRow> bench_biwkv(const std::vector<Index>& sizes, Index channels, int reps,
                                         std::uint64_t seed) {
    std::vector<BenchRow> rows;
    Rng root(seed);
    volatile double sink = 0.0;
    for (Index t_len : sizes) {
        Rng rng = root.split(static_cast<std::uint64_t>(t_len));
        const Matd k = rng.gaussian(t_len, channels);
        const Matd v = rng.gaussian(t_len, channels);
        const Vecd w = rng.uniform_vec(channels, -3.0, 3.0);
        const Vecd u = rng.uniform_vec(channels, -3.0, 3.0);

        BenchRow row;
        row.t_len = t_len;

        auto run_scan = [&] { sink = sink + biwkv_scan<double>(k, v, w, u)(0, 0); };
        auto run_naive = [&] { sink = sink + biwkv_naive<double>(k, v, w, u)(0, 0); };

        const double probe = detail::time_ms(run_scan, 1);
        const int inner = probe >= 10.0 ? 1 : static_cast<int>(std::max(1.0, 12.0 / std::max(probe, 1e-3)));
        std::vector<double> scan_samples, naive_samples;
        for (int r = 0; r < reps; ++r) scan_samples.push_back(detail::time_ms(run_scan, inner));
        for (int r = 0; r < reps; ++r) naive_samples.push_back(detail::time_ms(run_naive, 1));
        row.scan_ms = detail::median(scan_samples);
        row.naive_ms = detail::median(naive_samples);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace c3owd

#endif
