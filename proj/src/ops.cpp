#include "c3owd/ops.hpp"

namespace c3owd {

Matd layer_norm(const Matd& x, const LayerNormParams& p, LayerNormCache* cache) {
    const Index n = x.rows(), c = x.cols();
    require(c >= 1, "layer_norm: zero-size trailing axis");
    require(p.gain.size() == c && p.bias.size() == c, "layer_norm: gain/bias size mismatch");
    require(p.eps > 0, "layer_norm: eps must be positive");

    Matd x_hat(n, c);
    Vecd inv_std(n);
    const double guard = p.eps * p.eps;
    for (Index r = 0; r < n; ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        if (var < guard) {
            x_hat.row(r).setZero();
            inv_std(r) = 0.0;
        } else {
            inv_std(r) = 1.0 / std::sqrt(var + p.eps);
            x_hat.row(r) = (x.row(r).array() - mean) * inv_std(r);
        }
    }
    Matd out = (x_hat.array().rowwise() * p.gain.transpose().array()).rowwise() +
               p.bias.transpose().array();
    if (cache) {
        cache->x_hat = std::move(x_hat);
        cache->inv_std = std::move(inv_std);
    }
    require_finite(out, "layer_norm");
    return out;
}

Matd layer_norm_backward(const Matd& dy, const LayerNormCache& cache, const LayerNormParams& p,
                         LayerNormGrads& grads) {
    const Index n = dy.rows(), c = dy.cols();
    grads.gain = (dy.array() * cache.x_hat.array()).colwise().sum().transpose();
    grads.bias = dy.colwise().sum().transpose();

    Matd dx(n, c);
    for (Index r = 0; r < n; ++r) {
        if (cache.inv_std(r) == 0.0) {
            // Guard fired: pre-affine output is constant zero on this row.
            dx.row(r).setZero();
            continue;
        }
        Eigen::RowVectorXd dxh = dy.row(r).array() * p.gain.transpose().array();
        const double mean_dxh = dxh.mean();
        const double mean_dxh_xh = (dxh.array() * cache.x_hat.row(r).array()).mean();
        dx.row(r) = cache.inv_std(r) *
                    (dxh.array() - mean_dxh - cache.x_hat.row(r).array() * mean_dxh_xh);
    }
    return dx;
}

LinearParams LinearParams::zeros(Index in, Index out) {
    return LinearParams{Matd::Zero(in, out), Vecd::Zero(out)};
}

LinearParams LinearParams::identity(Index n) {
    return LinearParams{Matd::Identity(n, n), Vecd::Zero(n)};
}

Matd linear(const Matd& x, const LinearParams& p) {
    require(x.cols() == p.W.rows(), "linear: input width mismatch");
    require(p.b.size() == p.W.cols(), "linear: bias size mismatch");
    return (x * p.W).rowwise() + p.b.transpose();
}

Matd linear_backward(const Matd& x, const LinearParams& p, const Matd& dy, LinearGrads& grads) {
    grads.W = x.transpose() * dy;
    grads.b = dy.colwise().sum().transpose();
    return dy * p.W.transpose();
}

Matd linear_backward_acc(const Matd& x, const LinearParams& p, const Matd& dy, LinearGrads& grads) {
    grads.W += x.transpose() * dy;
    grads.b += dy.colwise().sum().transpose();
    return dy * p.W.transpose();
}

Matd normalize_rows(const Matd& x) {
    Matd out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const double n = x.row(r).norm();
        if (n == 0.0) throw NumericError("normalize_rows: zero-norm row " + std::to_string(r));
        out.row(r) = x.row(r) / n;
    }
    return out;
}

Matd normalize_rows_backward(const Matd& x, const Matd& dy) {
    Matd dx(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const double n = x.row(r).norm();
        if (n == 0.0) throw NumericError("normalize_rows_backward: zero-norm row " + std::to_string(r));
        const Eigen::RowVectorXd y = x.row(r) / n;
        const double dot = y.dot(dy.row(r));
        dx.row(r) = (dy.row(r) - dot * y) / n;
    }
    return dx;
}

}  // namespace c3owd
