#ifndef C3OWD_OPS_HPP
#define C3OWD_OPS_HPP

#include <cmath>

#include "c3owd/types.hpp"

namespace c3owd {

template <typename S>
Mat<S> sigmoid(const Mat<S>& x) {
    return x.unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
}

template <typename S>
Mat<S> squared_relu(const Mat<S>& x) {
    return x.unaryExpr([](S v) { return v > S(0) ? v * v : S(0); });
}

/// Row-wise softmax with max subtraction; total on any finite input.
template <typename S>
Mat<S> softmax_rows(const Mat<S>& x) {
    Mat<S> out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const S m = x.row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (x.row(r).array() - m).exp();
        out.row(r) = e / e.sum();
    }
    return out;
}

/// d softmax given outputs p and upstream dp, row-wise.
template <typename S>
Mat<S> softmax_rows_backward(const Mat<S>& p, const Mat<S>& dp) {
    Mat<S> dx(p.rows(), p.cols());
    for (Index r = 0; r < p.rows(); ++r) {
        const S dot = (p.row(r).array() * dp.row(r).array()).sum();
        dx.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
    }
    return dx;
}

struct LayerNormParams {
    Vecd gain;
    Vecd bias;
    double eps = 1e-5;
};

struct LayerNormCache {
    Matd x_hat;     // pre-affine output
    Vecd inv_std;   // 0 where the zero-variance guard fired
};

/// Per-row normalization over the trailing axis: mean 0, population variance 1,
/// then affine. Rows with variance below eps^2 return zeros pre-affine.
Matd layer_norm(const Matd& x, const LayerNormParams& p, LayerNormCache* cache = nullptr);

struct LayerNormGrads {
    Vecd gain;
    Vecd bias;
};

Matd layer_norm_backward(const Matd& dy, const LayerNormCache& cache, const LayerNormParams& p,
                         LayerNormGrads& grads);

/// y = x W + 1 b^T, x: n x in, W: in x out.
struct LinearParams {
    Matd W;
    Vecd b;

    static LinearParams zeros(Index in, Index out);
    static LinearParams identity(Index n);
};

struct LinearGrads {
    Matd W;
    Vecd b;
};

Matd linear(const Matd& x, const LinearParams& p);
Matd linear_backward(const Matd& x, const LinearParams& p, const Matd& dy, LinearGrads& grads);

/// Accumulating variant; grads must already be sized.
Matd linear_backward_acc(const Matd& x, const LinearParams& p, const Matd& dy, LinearGrads& grads);

inline double sigmoid_scalar(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Numerically stable log(1 + e^x).
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// L2-normalize rows; throws on a zero-norm row.
Matd normalize_rows(const Matd& x);

/// Backward of row normalization given inputs x and upstream dy.
Matd normalize_rows_backward(const Matd& x, const Matd& dy);

}  // namespace c3owd

#endif
