#include "c3owd/sampling.hpp"

namespace c3owd {

Matd base_offsets(const Matd& q, const LinearParams& proj) {
    require_finite(q, "base_offsets input");
    return linear(q, proj);
}

Matd text_attention(const Matd& q, const Matd& t) {
    require(q.cols() == t.cols(), "text_attention: shared feature width required");
    require(t.rows() >= 1, "text_attention: empty text bank");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    return softmax_rows<double>(Matd(q * t.transpose() * scale));
}

ModulationMlpParams ModulationMlpParams::init(Index classes, Index hidden, Index two_k, Rng& rng,
                                              double scale, bool zero_final) {
    const double s1 = scale / std::sqrt(static_cast<double>(classes));
    const double s2 = scale / std::sqrt(static_cast<double>(hidden));
    ModulationMlpParams p;
    p.l1 = {rng.gaussian(classes, hidden, s1), Vecd::Zero(hidden)};
    p.l2 = zero_final ? LinearParams::zeros(hidden, two_k)
                      : LinearParams{rng.gaussian(hidden, two_k, s2), Vecd::Zero(two_k)};
    return p;
}

Matd modulation_weights(const Matd& attn, const ModulationMlpParams& p, ModulationCache* cache) {
    require_finite(attn, "modulation_weights input");
    ModulationCache local;
    ModulationCache& c = cache ? *cache : local;
    c.attn = attn;
    c.z1 = linear(attn, p.l1);
    c.a1 = c.z1.array().max(0.0);
    return linear(c.a1, p.l2);
}

Matd modulation_weights_backward(const ModulationCache& c, const ModulationMlpParams& p,
                                 const Matd& dy, ModulationMlpParams& grads) {
    LinearGrads lg;
    const Matd da1 = linear_backward(c.a1, p.l2, dy, lg);
    grads.l2.W += lg.W;
    grads.l2.b += lg.b;
    const Matd dz1 = (c.z1.array() > 0.0).cast<double>() * da1.array();
    const Matd dattn = linear_backward(c.attn, p.l1, dz1, lg);
    grads.l1.W += lg.W;
    grads.l1.b += lg.b;
    return dattn;
}

Matd bilinear_sample(const Tensor& f_ref, const Matd& points) {
    require(f_ref.rank() == 3, "bilinear_sample: [C, H, W] tensor required");
    require(points.cols() == 2, "bilinear_sample: points must be (x, y) pairs");
    const Index c = f_ref.dim(0), h = f_ref.dim(1), w = f_ref.dim(2);
    Matd out = Matd::Zero(points.rows(), c);
    for (Index pidx = 0; pidx < points.rows(); ++pidx) {
        const double xp = points(pidx, 0) * static_cast<double>(w - 1);
        const double yp = points(pidx, 1) * static_cast<double>(h - 1);
        const Index x0 = static_cast<Index>(std::floor(xp));
        const Index y0 = static_cast<Index>(std::floor(yp));
        const double wx = xp - static_cast<double>(x0);
        const double wy = yp - static_cast<double>(y0);
        const Index xs[2] = {x0, x0 + 1};
        const Index ys[2] = {y0, y0 + 1};
        const double wxs[2] = {1.0 - wx, wx};
        const double wys[2] = {1.0 - wy, wy};
        for (int iy = 0; iy < 2; ++iy) {
            if (ys[iy] < 0 || ys[iy] >= h) continue;
            for (int ix = 0; ix < 2; ++ix) {
                if (xs[ix] < 0 || xs[ix] >= w) continue;
                const double weight = wys[iy] * wxs[ix];
                if (weight == 0.0) continue;
                for (Index ch = 0; ch < c; ++ch)
                    out(pidx, ch) += weight * f_ref({ch, ys[iy], xs[ix]});
            }
        }
    }
    return out;
}

BilinearGrads bilinear_sample_backward(const Tensor& f_ref, const Matd& points, const Matd& dy) {
    const Index c = f_ref.dim(0), h = f_ref.dim(1), w = f_ref.dim(2);
    BilinearGrads g;
    g.d_f_ref = Tensor::zeros({c, h, w});
    g.d_points = Matd::Zero(points.rows(), 2);
    for (Index pidx = 0; pidx < points.rows(); ++pidx) {
        const double xp = points(pidx, 0) * static_cast<double>(w - 1);
        const double yp = points(pidx, 1) * static_cast<double>(h - 1);
        const Index x0 = static_cast<Index>(std::floor(xp));
        const Index y0 = static_cast<Index>(std::floor(yp));
        const double wx = xp - static_cast<double>(x0);
        const double wy = yp - static_cast<double>(y0);
        const Index xs[2] = {x0, x0 + 1};
        const Index ys[2] = {y0, y0 + 1};
        const double wxs[2] = {1.0 - wx, wx};
        const double wys[2] = {1.0 - wy, wy};
        // Sign of each corner's contribution to d/dx and d/dy.
        const double sx[2] = {-1.0, 1.0};
        const double sy[2] = {-1.0, 1.0};
        double dxp = 0.0, dyp = 0.0;
        for (int iy = 0; iy < 2; ++iy) {
            if (ys[iy] < 0 || ys[iy] >= h) continue;
            for (int ix = 0; ix < 2; ++ix) {
                if (xs[ix] < 0 || xs[ix] >= w) continue;
                for (Index ch = 0; ch < c; ++ch) {
                    const double f = f_ref({ch, ys[iy], xs[ix]});
                    const double up = dy(pidx, ch);
                    g.d_f_ref({ch, ys[iy], xs[ix]}) += up * wys[iy] * wxs[ix];
                    dxp += up * f * sx[ix] * wys[iy];
                    dyp += up * f * sy[iy] * wxs[ix];
                }
            }
        }
        g.d_points(pidx, 0) = dxp * static_cast<double>(w - 1);
        g.d_points(pidx, 1) = dyp * static_cast<double>(h - 1);
    }
    return g;
}

ModulatedSampleParams ModulatedSampleParams::init(Index dim, Index classes, Index k_points,
                                                  Index channels, Rng& rng, double scale) {
    ModulatedSampleParams p;
    p.offset_proj = LinearParams::zeros(dim, 2 * k_points);
    p.mod_mlp = ModulationMlpParams::init(classes, std::max<Index>(classes, 2 * k_points),
                                          2 * k_points, rng, scale, /*zero_final=*/true);
    const double s = scale / std::sqrt(static_cast<double>(k_points * channels));
    p.out_proj = {rng.gaussian(k_points * channels, dim, s), Vecd::Zero(dim)};
    return p;
}

Matd modulated_sample(const Matd& q, const Matd& t, const Tensor& f_ref, const SamplingSpec& spec,
                      const ModulatedSampleParams& p, ModulatedSampleCache* cache) {
    require(spec.k_points >= 1, "modulated_sample: at least one sampling point required");
    require(spec.ref_points.rows() == q.rows() && spec.ref_points.cols() == 2,
            "modulated_sample: one (x, y) reference per query required");
    const Index n = q.rows(), k = spec.k_points, c = f_ref.dim(0);

    ModulatedSampleCache local;
    ModulatedSampleCache& cc = cache ? *cache : local;
    cc.q = q;
    cc.t = t;
    cc.f_ref = f_ref;

    const Matd delta_base = base_offsets(q, p.offset_proj);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    cc.logits = q * t.transpose() * scale;
    cc.attn = softmax_rows<double>(cc.logits);
    const Matd w_mod = modulation_weights(cc.attn, p.mod_mlp, &cc.mod);
    cc.delta = delta_base + w_mod;
    require(cc.delta.cols() == 2 * k, "modulated_sample: offset head width must be 2K");

    cc.points.resize(n * k, 2);
    for (Index i = 0; i < n; ++i)
        for (Index kp = 0; kp < k; ++kp) {
            cc.points(i * k + kp, 0) = spec.ref_points(i, 0) + cc.delta(i, 2 * kp);
            cc.points(i * k + kp, 1) = spec.ref_points(i, 1) + cc.delta(i, 2 * kp + 1);
        }

    const Matd raw = bilinear_sample(f_ref, cc.points);
    cc.sampled.resize(n, k * c);
    for (Index i = 0; i < n; ++i)
        for (Index kp = 0; kp < k; ++kp) cc.sampled.row(i).segment(kp * c, c) = raw.row(i * k + kp);

    Matd out = linear(cc.sampled, p.out_proj);
    require_finite(out, "modulated_sample output");
    return out;
}

ModulatedSampleInputGrads modulated_sample_backward(const ModulatedSampleCache& cc,
                                                    const SamplingSpec& spec,
                                                    const ModulatedSampleParams& p, const Matd& dy,
                                                    ModulatedSampleParams& grads) {
    const Index n = cc.q.rows(), k = spec.k_points, c = cc.f_ref.dim(0);
    LinearGrads lg;
    const Matd d_sampled = linear_backward(cc.sampled, p.out_proj, dy, lg);
    grads.out_proj.W += lg.W;
    grads.out_proj.b += lg.b;

    Matd d_raw(n * k, c);
    for (Index i = 0; i < n; ++i)
        for (Index kp = 0; kp < k; ++kp) d_raw.row(i * k + kp) = d_sampled.row(i).segment(kp * c, c);

    BilinearGrads bg = bilinear_sample_backward(cc.f_ref, cc.points, d_raw);

    Matd d_delta(n, 2 * k);
    for (Index i = 0; i < n; ++i)
        for (Index kp = 0; kp < k; ++kp) {
            d_delta(i, 2 * kp) = bg.d_points(i * k + kp, 0);
            d_delta(i, 2 * kp + 1) = bg.d_points(i * k + kp, 1);
        }

    // delta = q * W_off + b_off + MLP(softmax(q t^T / sqrt(D)))
    ModulatedSampleInputGrads out;
    out.dq = linear_backward(cc.q, p.offset_proj, d_delta, lg);
    grads.offset_proj.W += lg.W;
    grads.offset_proj.b += lg.b;

    const Matd d_attn = modulation_weights_backward(cc.mod, p.mod_mlp, d_delta, grads.mod_mlp);
    const Matd d_logits = softmax_rows_backward<double>(cc.attn, d_attn);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cc.q.cols()));
    out.dq += d_logits * cc.t * scale;
    out.dt = d_logits.transpose() * cc.q * scale;
    out.d_f_ref = std::move(bg.d_f_ref);
    return out;
}

}  // namespace c3owd
