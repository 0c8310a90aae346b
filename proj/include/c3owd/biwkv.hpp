#ifndef C3OWD_BIWKV_HPP
#define C3OWD_BIWKV_HPP

#include <cmath>
#include <limits>

#include "c3owd/types.hpp"

namespace c3owd {

/// Per-channel decay w (nats per normalized-distance step) and self-importance
/// bonus u (nats). No sign constraint on w; the decay weight e^{-(|t-i|-1) w/T}
/// is well-defined for any finite value.
struct BiWkvParams {
    Vecd w;
    Vecd u;
};

/// Keys and values of one token sequence, both T x C.
struct TokenSequence {
    Matd k;
    Matd v;

    Index length() const { return k.rows(); }
    Index channels() const { return k.cols(); }
};

inline void check_biwkv_args(Index t_len, Index channels, const Matd& k, const Matd& v,
                             const Vecd& w, const Vecd& u) {
    require(t_len >= 1, "biwkv: sequence length must be >= 1");
    require(k.rows() == v.rows() && k.cols() == v.cols(), "biwkv: k/v shape mismatch");
    require(w.size() == channels && u.size() == channels, "biwkv: w/u channel mismatch");
    require_finite(k, "biwkv keys");
    require_finite(v, "biwkv values");
    require_finite(w, "biwkv decay");
    require_finite(u, "biwkv self-importance");
}

/// Bidirectional WKV attention, literal double sum:
///   out_t = [sum_{i != t} e^{-(|t-i|-1) w/T + k_i} v_i + e^{u + k_t} v_t]
///         / [sum_{i != t} e^{-(|t-i|-1) w/T + k_i}     + e^{u + k_t}]
/// per channel, stabilized by subtracting the max exponent per output.
/// Every output is a convex combination of the values.
template <typename S>
Mat<S> biwkv_naive(const Mat<S>& k, const Mat<S>& v, const Vec<S>& w, const Vec<S>& u) {
    const Index t_len = k.rows(), channels = k.cols();
    if constexpr (std::is_same_v<S, double>) check_biwkv_args(t_len, channels, k, v, w, u);
    const S inv_t = S(1) / static_cast<S>(t_len);

    Mat<S> out(t_len, channels);
    for (Index c = 0; c < channels; ++c) {
        const S wc = w(c) * inv_t;
        for (Index t = 0; t < t_len; ++t) {
            S max_e = u(c) + k(t, c);
            for (Index i = 0; i < t_len; ++i) {
                if (i == t) continue;
                const S d = static_cast<S>(std::abs(t - i) - 1);
                max_e = std::max(max_e, -d * wc + k(i, c));
            }
            S num = std::exp(u(c) + k(t, c) - max_e) * v(t, c);
            S den = std::exp(u(c) + k(t, c) - max_e);
            for (Index i = 0; i < t_len; ++i) {
                if (i == t) continue;
                const S d = static_cast<S>(std::abs(t - i) - 1);
                const S e = std::exp(-d * wc + k(i, c) - max_e);
                num += e * v(i, c);
                den += e;
            }
            out(t, c) = num / den;
        }
    }
    if (!out.allFinite()) throw NumericError("biwkv_naive: non-finite output");
    return out;
}

namespace detail {

/// Running sum of e^{exponent} terms kept as (max exponent, scaled num, scaled den)
/// so exponentials are only taken of non-positive arguments.
template <typename S>
struct WkvState {
    S m = -std::numeric_limits<S>::infinity();
    S num = S(0);
    S den = S(0);

    void decay_and_add(S decay, S exponent, S value) {
        const S shifted = m - decay;
        const S m_new = std::max(shifted, exponent);
        const S scale_old = std::exp(shifted - m_new);
        const S scale_new = std::exp(exponent - m_new);
        num = scale_old * num + scale_new * value;
        den = scale_old * den + scale_new;
        m = m_new;
    }
};

}  // namespace detail

/// Linear-time evaluation of biwkv_naive via one forward and one backward scan
/// over F_t = e^{-w/T} F_{t-1} + e^{k_{t-1}} v_{t-1} and its mirror, combined
/// with the self term. O(T*C) time, agrees with the naive form to ~1e-13.
template <typename S>
Mat<S> biwkv_scan(const Mat<S>& k, const Mat<S>& v, const Vec<S>& w, const Vec<S>& u) {
    const Index t_len = k.rows(), channels = k.cols();
    if constexpr (std::is_same_v<S, double>) check_biwkv_args(t_len, channels, k, v, w, u);
    const S inv_t = S(1) / static_cast<S>(t_len);

    Mat<S> out(t_len, channels);
    std::vector<detail::WkvState<S>> back(static_cast<std::size_t>(t_len));
    for (Index c = 0; c < channels; ++c) {
        const S wc = w(c) * inv_t;

        detail::WkvState<S> rev;
        for (Index t = t_len - 1; t >= 0; --t) {
            back[static_cast<std::size_t>(t)] = rev;
            rev.decay_and_add(wc, k(t, c), v(t, c));
        }

        detail::WkvState<S> fwd;
        for (Index t = 0; t < t_len; ++t) {
            const detail::WkvState<S>& rst = back[static_cast<std::size_t>(t)];
            const S self_e = u(c) + k(t, c);
            const S m_all = std::max({fwd.m, rst.m, self_e});
            const S sf = std::exp(fwd.m - m_all);
            const S sr = std::exp(rst.m - m_all);
            const S ss = std::exp(self_e - m_all);
            const S num = sf * fwd.num + sr * rst.num + ss * v(t, c);
            const S den = sf * fwd.den + sr * rst.den + ss;
            out(t, c) = num / den;
            fwd.decay_and_add(wc, k(t, c), v(t, c));
        }
    }
    if (!out.allFinite()) throw NumericError("biwkv_scan: non-finite output");
    return out;
}

inline Matd biwkv_naive(const TokenSequence& seq, const BiWkvParams& p) {
    return biwkv_naive<double>(seq.k, seq.v, p.w, p.u);
}

inline Matd biwkv_scan(const TokenSequence& seq, const BiWkvParams& p) {
    return biwkv_scan<double>(seq.k, seq.v, p.w, p.u);
}

struct BiWkvGrads {
    Matd dk;
    Matd dv;
    Vecd dw;
    Vecd du;
};

/// Analytic gradients of the quotient form, evaluated against the O(T^2) sum.
/// With P_{ti} = alpha_{ti} / sum_j alpha_{tj} (the convex weights):
///   dv_j += g_t P_{tj},  dk_j += g_t P_{tj} (v_j - out_t),
///   du   += g_t P_{tt} (v_t - out_t),
///   dw   -= g_t P_{ti} (v_i - out_t) (|t-i|-1)/T   for i != t.
BiWkvGrads biwkv_backward(const Matd& k, const Matd& v, const Vecd& w, const Vecd& u,
                          const Matd& upstream);

inline BiWkvGrads biwkv_backward(const TokenSequence& seq, const BiWkvParams& p, const Matd& upstream) {
    return biwkv_backward(seq.k, seq.v, p.w, p.u, upstream);
}

}  // namespace c3owd

#endif
