#include "c3owd/fusion.hpp"

namespace c3owd {

namespace {

// Shifted copy with zero padding; source pixel is (row + dr, col + dc).
Matd shift_tokens(const Matd& x, Index h, Index w, Index c_begin, Index c_end, Index dr, Index dc,
                  Matd& out) {
    for (Index r = 0; r < h; ++r) {
        const Index sr = r + dr;
        for (Index col = 0; col < w; ++col) {
            const Index sc = col + dc;
            const Index t = r * w + col;
            if (sr < 0 || sr >= h || sc < 0 || sc >= w) {
                out.row(t).segment(c_begin, c_end - c_begin).setZero();
            } else {
                out.row(t).segment(c_begin, c_end - c_begin) =
                    x.row(sr * w + sc).segment(c_begin, c_end - c_begin);
            }
        }
    }
    return out;
}

// Direction per quarter group: left, right, up, down sources.
constexpr Index kShiftDr[4] = {0, 0, -1, 1};
constexpr Index kShiftDc[4] = {-1, 1, 0, 0};

Matd shifted_map(const Matd& x, Index h, Index w) {
    const Index c = x.cols();
    require(c % 4 == 0, "q_shift: channel count must be divisible by 4");
    require(x.rows() == h * w, "q_shift: token count must equal h*w");
    Matd out(x.rows(), c);
    const Index group = c / 4;
    for (Index g = 0; g < 4; ++g)
        shift_tokens(x, h, w, g * group, (g + 1) * group, kShiftDr[g], kShiftDc[g], out);
    return out;
}

Matd shifted_map_transpose(const Matd& dy, Index h, Index w) {
    const Index c = dy.cols();
    Matd out(dy.rows(), c);
    const Index group = c / 4;
    // Adjoint of a shift is the opposite shift.
    for (Index g = 0; g < 4; ++g)
        shift_tokens(dy, h, w, g * group, (g + 1) * group, -kShiftDr[g], -kShiftDc[g], out);
    return out;
}

Vecd mu_full(const Vecd& mu, Index c) {
    require(mu.size() == c, "q_shift: mu size mismatch");
    return mu;
}

}  // namespace

Matd q_shift_tokens(const Matd& x, Index h, Index w, const Vecd& mu) {
    const Vecd m = mu_full(mu, x.cols());
    const Matd shifted = shifted_map(x, h, w);
    return (x.array().rowwise() * (1.0 - m.transpose().array())) +
           (shifted.array().rowwise() * m.transpose().array());
}

QShiftGrad q_shift_tokens_backward(const Matd& x, Index h, Index w, const Vecd& mu, const Matd& dy) {
    const Vecd m = mu_full(mu, x.cols());
    const Matd shifted = shifted_map(x, h, w);
    QShiftGrad g;
    g.dmu = ((shifted - x).array() * dy.array()).colwise().sum().transpose();
    const Matd dy_shift_part = dy.array().rowwise() * m.transpose().array();
    g.dx = (dy.array().rowwise() * (1.0 - m.transpose().array())).matrix() +
           shifted_map_transpose(dy_shift_part, h, w);
    return g;
}

Tensor q_shift(const Tensor& x, const Vecd& mu) {
    require(x.rank() == 3, "q_shift: [C, H, W] tensor required");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Matd tokens = chw_to_tokens(x);
    return tokens_to_chw(q_shift_tokens(tokens, h, w, mu), c, h, w);
}

SpatialMixParams SpatialMixParams::init(Index channels, Rng& rng, double scale) {
    const double s = scale / std::sqrt(static_cast<double>(channels));
    SpatialMixParams p;
    p.mu_r = Vecd::Constant(channels, 0.5);
    p.mu_k = Vecd::Constant(channels, 0.5);
    p.mu_v = Vecd::Constant(channels, 0.5);
    p.proj_r = {rng.gaussian(channels, channels, s), Vecd::Zero(channels)};
    p.w_k = rng.gaussian(channels, channels, s);
    p.proj_v = {rng.gaussian(channels, channels, s), Vecd::Zero(channels)};
    p.proj_o = {rng.gaussian(channels, channels, s), Vecd::Zero(channels)};
    p.wkv.w = rng.uniform_vec(channels, 0.3, 1.3);
    p.wkv.u = rng.gaussian_vec(channels, 0.1);
    return p;
}

Matd spatial_mix(const Matd& x, Index h, Index w, const SpatialMixParams& p, SpatialMixCache* cache) {
    require_finite(x, "spatial_mix input");
    SpatialMixCache local;
    SpatialMixCache& c = cache ? *cache : local;
    c.x = x;
    c.h = h;
    c.w = w;
    c.xr = q_shift_tokens(x, h, w, p.mu_r);
    c.xk = q_shift_tokens(x, h, w, p.mu_k);
    c.xv = q_shift_tokens(x, h, w, p.mu_v);
    c.r = linear(c.xr, p.proj_r);
    c.k = c.xk * p.w_k;
    c.v = linear(c.xv, p.proj_v);
    require_finite(c.r, "spatial_mix projections");
    c.wkv = biwkv_scan<double>(c.k, c.v, p.wkv.w, p.wkv.u);
    c.gate = sigmoid<double>(c.r);
    c.gated = c.gate.array() * c.wkv.array();
    Matd out = linear(c.gated, p.proj_o);
    require_finite(out, "spatial_mix output");
    return out;
}

Matd spatial_mix_backward(const SpatialMixCache& c, const SpatialMixParams& p, const Matd& dy,
                          SpatialMixParams& grads) {
    LinearGrads lg;
    const Matd dgated = linear_backward(c.gated, p.proj_o, dy, lg);
    grads.proj_o.W += lg.W;
    grads.proj_o.b += lg.b;

    const Matd dgate = dgated.array() * c.wkv.array();
    const Matd dwkv = dgated.array() * c.gate.array();
    const Matd dr = dgate.array() * c.gate.array() * (1.0 - c.gate.array());

    const BiWkvGrads wg = biwkv_backward(c.k, c.v, p.wkv.w, p.wkv.u, dwkv);
    grads.wkv.w += wg.dw;
    grads.wkv.u += wg.du;

    const Matd dxr = linear_backward(c.xr, p.proj_r, dr, lg);
    grads.proj_r.W += lg.W;
    grads.proj_r.b += lg.b;
    grads.w_k += c.xk.transpose() * wg.dk;
    const Matd dxk = wg.dk * p.w_k.transpose();
    const Matd dxv = linear_backward(c.xv, p.proj_v, wg.dv, lg);
    grads.proj_v.W += lg.W;
    grads.proj_v.b += lg.b;

    QShiftGrad qr = q_shift_tokens_backward(c.x, c.h, c.w, p.mu_r, dxr);
    QShiftGrad qk = q_shift_tokens_backward(c.x, c.h, c.w, p.mu_k, dxk);
    QShiftGrad qv = q_shift_tokens_backward(c.x, c.h, c.w, p.mu_v, dxv);
    grads.mu_r += qr.dmu;
    grads.mu_k += qk.dmu;
    grads.mu_v += qv.dmu;
    return qr.dx + qk.dx + qv.dx;
}

ChannelMixParams ChannelMixParams::init(Index channels, Rng& rng, double scale) {
    const double s = scale / std::sqrt(static_cast<double>(channels));
    ChannelMixParams p;
    p.mu_r = Vecd::Constant(channels, 0.5);
    p.mu_k = Vecd::Constant(channels, 0.5);
    p.proj_r = {rng.gaussian(channels, channels, s), Vecd::Zero(channels)};
    p.proj_k = {rng.gaussian(channels, channels, s), Vecd::Zero(channels)};
    p.proj_v = {rng.gaussian(channels, channels, s), Vecd::Zero(channels)};
    p.proj_o = {rng.gaussian(channels, channels, s), Vecd::Zero(channels)};
    return p;
}

Matd channel_mix(const Matd& x, Index h, Index w, const ChannelMixParams& p, ChannelMixCache* cache) {
    require_finite(x, "channel_mix input");
    ChannelMixCache local;
    ChannelMixCache& c = cache ? *cache : local;
    c.x = x;
    c.h = h;
    c.w = w;
    c.xr = q_shift_tokens(x, h, w, p.mu_r);
    c.xk = q_shift_tokens(x, h, w, p.mu_k);
    c.r = linear(c.xr, p.proj_r);
    c.k = linear(c.xk, p.proj_k);
    require_finite(c.k, "channel_mix projections");
    c.sq = squared_relu<double>(c.k);
    c.v = linear(c.sq, p.proj_v);
    c.gate = sigmoid<double>(c.r);
    c.gated = c.gate.array() * c.v.array();
    Matd out = linear(c.gated, p.proj_o);
    require_finite(out, "channel_mix output");
    return out;
}

Matd channel_mix_backward(const ChannelMixCache& c, const ChannelMixParams& p, const Matd& dy,
                          ChannelMixParams& grads) {
    LinearGrads lg;
    const Matd dgated = linear_backward(c.gated, p.proj_o, dy, lg);
    grads.proj_o.W += lg.W;
    grads.proj_o.b += lg.b;

    const Matd dgate = dgated.array() * c.v.array();
    const Matd dv = dgated.array() * c.gate.array();
    const Matd dr = dgate.array() * c.gate.array() * (1.0 - c.gate.array());

    const Matd dsq = linear_backward(c.sq, p.proj_v, dv, lg);
    grads.proj_v.W += lg.W;
    grads.proj_v.b += lg.b;
    const Matd dk = dsq.array() * 2.0 * c.k.array().max(0.0);

    const Matd dxr = linear_backward(c.xr, p.proj_r, dr, lg);
    grads.proj_r.W += lg.W;
    grads.proj_r.b += lg.b;
    const Matd dxk = linear_backward(c.xk, p.proj_k, dk, lg);
    grads.proj_k.W += lg.W;
    grads.proj_k.b += lg.b;

    QShiftGrad qr = q_shift_tokens_backward(c.x, c.h, c.w, p.mu_r, dxr);
    QShiftGrad qk = q_shift_tokens_backward(c.x, c.h, c.w, p.mu_k, dxk);
    grads.mu_r += qr.dmu;
    grads.mu_k += qk.dmu;
    return qr.dx + qk.dx;
}

BlockParams BlockParams::init(Index fused_channels, Rng& rng, double scale) {
    BlockParams p;
    p.spatial = SpatialMixParams::init(fused_channels, rng, scale);
    p.channel = ChannelMixParams::init(fused_channels, rng, scale);
    p.ln1 = {Vecd::Ones(fused_channels), Vecd::Zero(fused_channels), 1e-5};
    p.ln2 = {Vecd::Ones(fused_channels), Vecd::Zero(fused_channels), 1e-5};
    return p;
}

Matd vrwkv_block_tokens(const Matd& x0, Index h, Index w, const BlockParams& p, BlockCache* cache) {
    BlockCache local;
    BlockCache& c = cache ? *cache : local;
    c.x0 = x0;
    const Matd s = spatial_mix(x0, h, w, p.spatial, &c.spatial);
    c.pre_ln1 = s + x0;
    c.f_spatial = layer_norm(c.pre_ln1, p.ln1, &c.ln1);
    const Matd ch = channel_mix(c.f_spatial, h, w, p.channel, &c.channel);
    c.pre_ln2 = ch + c.f_spatial;
    return layer_norm(c.pre_ln2, p.ln2, &c.ln2);
}

Matd vrwkv_block_tokens_backward(const BlockCache& c, const BlockParams& p, const Matd& dy,
                                 BlockParams& grads) {
    LayerNormGrads ng;
    const Matd d_pre_ln2 = layer_norm_backward(dy, c.ln2, p.ln2, ng);
    grads.ln2.gain += ng.gain;
    grads.ln2.bias += ng.bias;

    const Matd d_from_channel = channel_mix_backward(c.channel, p.channel, d_pre_ln2, grads.channel);
    const Matd d_f_spatial = d_from_channel + d_pre_ln2;

    const Matd d_pre_ln1 = layer_norm_backward(d_f_spatial, c.ln1, p.ln1, ng);
    grads.ln1.gain += ng.gain;
    grads.ln1.bias += ng.bias;

    const Matd d_from_spatial = spatial_mix_backward(c.spatial, p.spatial, d_pre_ln1, grads.spatial);
    return d_from_spatial + d_pre_ln1;
}

Tensor vrwkv_block_level(const Tensor& rgb, const Tensor& ir, const BlockParams& p, BlockCache* cache) {
    require(rgb.rank() == 3 && ir.rank() == 3, "vrwkv_block_level: [C, H, W] tensors required");
    require(rgb.shape() == ir.shape(), "vrwkv_block_level: modality shapes must match");
    const Tensor fused_in = concat_channels(rgb, ir);
    const Index c = fused_in.dim(0), h = fused_in.dim(1), w = fused_in.dim(2);
    const Matd out = vrwkv_block_tokens(chw_to_tokens(fused_in), h, w, p, cache);
    return tokens_to_chw(out, c, h, w);
}

std::vector<Tensor> vrwkv_block(const ModalityPair& pair, const std::vector<BlockParams>& params) {
    require(pair.f_rgb.size() == pair.f_ir.size(), "vrwkv_block: modality level counts differ");
    require(pair.f_rgb.size() == params.size(), "vrwkv_block: one parameter set per level required");
    std::vector<Tensor> out;
    out.reserve(pair.f_rgb.size());
    for (std::size_t l = 0; l < pair.f_rgb.size(); ++l)
        out.push_back(vrwkv_block_level(pair.f_rgb[l], pair.f_ir[l], params[l]));
    return out;
}

FpnParams FpnParams::init(const std::vector<Index>& in_channels, Index out_channels, Rng& rng,
                          double scale) {
    FpnParams p;
    for (Index c : in_channels) {
        const double s = scale / std::sqrt(static_cast<double>(c));
        p.lateral.push_back({rng.gaussian(c, out_channels, s), Vecd::Zero(out_channels)});
    }
    return p;
}

Tensor upsample2x_nearest(const Tensor& x) {
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (Index ch = 0; ch < c; ++ch) {
        auto src = x.plane(ch);
        auto dst = out.plane(ch);
        for (Index r = 0; r < 2 * h; ++r)
            for (Index col = 0; col < 2 * w; ++col) dst(r, col) = src(r / 2, col / 2);
    }
    return out;
}

Tensor downsample2x_sum(const Tensor& dy) {
    const Index c = dy.dim(0), h2 = dy.dim(1), w2 = dy.dim(2);
    Tensor out({c, h2 / 2, w2 / 2});
    for (Index ch = 0; ch < c; ++ch) {
        auto src = dy.plane(ch);
        auto dst = out.plane(ch);
        for (Index r = 0; r < h2; ++r)
            for (Index col = 0; col < w2; ++col) dst(r / 2, col / 2) += src(r, col);
    }
    return out;
}

Tensor multi_scale_merge(const std::vector<Tensor>& levels, const FpnParams& p, FpnCache* cache) {
    require(!levels.empty(), "multi_scale_merge: at least one level required");
    require(levels.size() == p.lateral.size(), "multi_scale_merge: one lateral per level required");
    for (std::size_t l = 0; l + 1 < levels.size(); ++l) {
        require(levels[l].dim(1) == 2 * levels[l + 1].dim(1) &&
                    levels[l].dim(2) == 2 * levels[l + 1].dim(2),
                "multi_scale_merge: non-dyadic spatial ratio between levels");
    }
    FpnCache local;
    FpnCache& c = cache ? *cache : local;
    c.inputs = levels;
    c.laterals.clear();
    const Index out_ch = p.lateral.front().W.cols();
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const Index h = levels[l].dim(1), w = levels[l].dim(2);
        const Matd tok = linear(chw_to_tokens(levels[l]), p.lateral[l]);
        c.laterals.push_back(tokens_to_chw(tok, out_ch, h, w));
    }
    Tensor top = c.laterals.back();
    for (std::size_t l = levels.size() - 1; l-- > 0;) {
        Tensor up = upsample2x_nearest(top);
        up.data() += c.laterals[l].data();
        top = std::move(up);
    }
    top.require_all_finite("multi_scale_merge");
    return top;
}

std::vector<Tensor> multi_scale_merge_backward(const FpnCache& c, const FpnParams& p, const Tensor& dy,
                                               FpnParams& grads) {
    const std::size_t n = c.inputs.size();
    std::vector<Tensor> d_lat;
    d_lat.resize(n);
    Tensor dp = dy;
    for (std::size_t l = 0; l < n; ++l) {
        d_lat[l] = dp;
        if (l + 1 < n) dp = downsample2x_sum(dp);
    }
    std::vector<Tensor> d_inputs;
    d_inputs.reserve(n);
    for (std::size_t l = 0; l < n; ++l) {
        const Index in_ch = c.inputs[l].dim(0), h = c.inputs[l].dim(1), w = c.inputs[l].dim(2);
        const Index out_ch = p.lateral[l].W.cols();
        LinearGrads lg;
        const Matd dx_tok =
            linear_backward(chw_to_tokens(c.inputs[l]), p.lateral[l], d_lat[l].matrix(out_ch, h * w).transpose(), lg);
        grads.lateral[l].W += lg.W;
        grads.lateral[l].b += lg.b;
        d_inputs.push_back(tokens_to_chw(dx_tok, in_ch, h, w));
    }
    return d_inputs;
}

Matd chw_to_tokens(const Tensor& x) {
    require(x.rank() == 3, "chw_to_tokens: [C, H, W] tensor required");
    const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
    return x.matrix(c, hw).transpose();
}

Tensor tokens_to_chw(const Matd& tokens, Index channels, Index h, Index w) {
    require(tokens.rows() == h * w && tokens.cols() == channels, "tokens_to_chw: shape mismatch");
    Tensor out({channels, h, w});
    out.matrix(channels, h * w) = tokens.transpose();
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3, "concat_channels: rank-3 tensors required");
    require(a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2), "concat_channels: spatial shape mismatch");
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    out.data().head(a.size()) = a.data();
    out.data().tail(b.size()) = b.data();
    return out;
}

}  // namespace c3owd
