#include "c3owd/biwkv.hpp"

namespace c3owd {

BiWkvGrads biwkv_backward(const Matd& k, const Matd& v, const Vecd& w, const Vecd& u,
                          const Matd& upstream) {
    const Index t_len = k.rows(), channels = k.cols();
    check_biwkv_args(t_len, channels, k, v, w, u);
    require(upstream.rows() == t_len && upstream.cols() == channels,
            "biwkv_backward: upstream shape mismatch");
    const double inv_t = 1.0 / static_cast<double>(t_len);

    BiWkvGrads g;
    g.dk = Matd::Zero(t_len, channels);
    g.dv = Matd::Zero(t_len, channels);
    g.dw = Vecd::Zero(channels);
    g.du = Vecd::Zero(channels);

    Vecd weights(t_len);
    for (Index c = 0; c < channels; ++c) {
        const double wc = w(c) * inv_t;
        for (Index t = 0; t < t_len; ++t) {
            double max_e = u(c) + k(t, c);
            for (Index i = 0; i < t_len; ++i) {
                if (i == t) continue;
                const double d = static_cast<double>(std::abs(t - i) - 1);
                max_e = std::max(max_e, -d * wc + k(i, c));
            }
            double den = 0.0;
            for (Index i = 0; i < t_len; ++i) {
                const double e = (i == t) ? u(c) + k(t, c)
                                          : -static_cast<double>(std::abs(t - i) - 1) * wc + k(i, c);
                weights(i) = std::exp(e - max_e);
                den += weights(i);
            }
            weights /= den;
            const double out_t = weights.dot(v.col(c));
            const double g_t = upstream(t, c);

            for (Index i = 0; i < t_len; ++i) {
                const double p = weights(i);
                g.dv(i, c) += g_t * p;
                g.dk(i, c) += g_t * p * (v(i, c) - out_t);
                if (i == t) {
                    g.du(c) += g_t * p * (v(t, c) - out_t);
                } else {
                    const double d = static_cast<double>(std::abs(t - i) - 1);
                    g.dw(c) -= g_t * p * (v(i, c) - out_t) * d * inv_t;
                }
            }
        }
    }
    if (!g.dk.allFinite() || !g.dv.allFinite() || !g.dw.allFinite() || !g.du.allFinite())
        throw NumericError("biwkv_backward: non-finite gradient");
    return g;
}

}  // namespace c3owd
