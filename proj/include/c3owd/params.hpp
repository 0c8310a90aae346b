#ifndef C3OWD_PARAMS_HPP
#define C3OWD_PARAMS_HPP

#include <vector>

#include "c3owd/types.hpp"

namespace c3owd {

// Parameter structs expose their trainable members through visit(p, f) with f
// overloaded on Matd& and Vecd&. Gradients reuse the parameter struct type so
// the same visitation drives flattening, SGD steps, and EMA mixing.

struct ParamBlock {
    double* data;
    Index n;
};

template <typename P>
std::vector<ParamBlock> param_blocks(P& p) {
    std::vector<ParamBlock> blocks;
    visit(p, [&blocks](auto& m) { blocks.push_back({m.data(), static_cast<Index>(m.size())}); });
    return blocks;
}

template <typename P>
Index param_count(P& p) {
    Index n = 0;
    visit(p, [&n](auto& m) { n += static_cast<Index>(m.size()); });
    return n;
}

template <typename P>
Vecd to_vector(P& p) {
    Vecd out(param_count(p));
    Index at = 0;
    visit(p, [&](auto& m) {
        out.segment(at, m.size()) = Eigen::Map<const Vecd>(m.data(), m.size());
        at += m.size();
    });
    return out;
}

template <typename P>
void from_vector(P& p, const Vecd& v) {
    require(v.size() == param_count(p), "from_vector: size mismatch");
    Index at = 0;
    visit(p, [&](auto& m) {
        Eigen::Map<Vecd>(m.data(), m.size()) = v.segment(at, m.size());
        at += m.size();
    });
}

template <typename P>
void set_zero(P& p) {
    visit(p, [](auto& m) { m.setZero(); });
}

/// dst += alpha * src, blockwise over matching structures.
template <typename P>
void scale_add(P& dst, P& src, double alpha) {
    auto a = param_blocks(dst);
    auto b = param_blocks(src);
    require(a.size() == b.size(), "scale_add: structure mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) {
        require(a[i].n == b[i].n, "scale_add: block size mismatch");
        Eigen::Map<Vecd>(a[i].data, a[i].n) += alpha * Eigen::Map<const Vecd>(b[i].data, b[i].n);
    }
}

template <typename P>
double sq_norm(P& p) {
    double s = 0.0;
    visit(p, [&s](auto& m) { s += Eigen::Map<const Vecd>(m.data(), m.size()).squaredNorm(); });
    return s;
}

/// slow = m * slow + (1 - m) * online.
template <typename P>
void ema_mix(P& slow, P& online, double m) {
    auto a = param_blocks(slow);
    auto b = param_blocks(online);
    require(a.size() == b.size(), "ema_mix: structure mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) {
        require(a[i].n == b[i].n, "ema_mix: block size mismatch");
        Eigen::Map<Vecd> s(a[i].data, a[i].n);
        s = m * s + (1.0 - m) * Eigen::Map<const Vecd>(b[i].data, b[i].n);
    }
}

}  // namespace c3owd

#endif
