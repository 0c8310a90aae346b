#ifndef C3OWD_FUSION_HPP
#define C3OWD_FUSION_HPP

#include <vector>

#include "c3owd/biwkv.hpp"
#include "c3owd/ops.hpp"
#include "c3owd/params.hpp"
#include "c3owd/rng.hpp"
#include "c3owd/tensor.hpp"

namespace c3owd {

/// Paired multi-scale features, one entry per pyramid level (finest first).
/// Shapes must match between modalities at every level.
struct ModalityPair {
    std::vector<Tensor> f_rgb;
    std::vector<Tensor> f_ir;
};

// ---------------------------------------------------------------------------
// Q-Shift: channels split into 4 equal groups displaced one pixel in the four
// cardinal directions with zero padding, mixed per channel:
//   out = (1 - mu) .* x + mu .* shifted
// ---------------------------------------------------------------------------

/// Tensor form on a [C, H, W] map; C must be divisible by 4.
Tensor q_shift(const Tensor& x, const Vecd& mu);

/// Token form; tokens are row-major flattenings of an h x w grid.
Matd q_shift_tokens(const Matd& x, Index h, Index w, const Vecd& mu);

struct QShiftGrad {
    Matd dx;
    Vecd dmu;
};

QShiftGrad q_shift_tokens_backward(const Matd& x, Index h, Index w, const Vecd& mu, const Matd& dy);

// ---------------------------------------------------------------------------
// Spatial mix: Q-shifted R/K/V projections, Bi-WKV, receptance gate, output
// projection. Channel mix: Q-shifted R/K projections, SquaredReLU value path,
// receptance gate, output projection.
// ---------------------------------------------------------------------------

struct SpatialMixParams {
    Vecd mu_r, mu_k, mu_v;
    LinearParams proj_r, proj_v, proj_o;
    Matd w_k;  // bias-free: the WKV ratio is invariant to per-channel key shifts
    BiWkvParams wkv;

    static SpatialMixParams init(Index channels, Rng& rng, double scale = 0.3);
};

template <typename F>
void visit(SpatialMixParams& p, F&& f) {
    f(p.mu_r);
    f(p.mu_k);
    f(p.mu_v);
    f(p.proj_r.W);
    f(p.proj_r.b);
    f(p.w_k);
    f(p.proj_v.W);
    f(p.proj_v.b);
    f(p.proj_o.W);
    f(p.proj_o.b);
    f(p.wkv.w);
    f(p.wkv.u);
}

struct SpatialMixCache {
    Matd x, xr, xk, xv;
    Matd r, k, v, wkv, gate, gated;
    Index h = 0, w = 0;
};

Matd spatial_mix(const Matd& x, Index h, Index w, const SpatialMixParams& p,
                 SpatialMixCache* cache = nullptr);

Matd spatial_mix_backward(const SpatialMixCache& cache, const SpatialMixParams& p, const Matd& dy,
                          SpatialMixParams& grads);

struct ChannelMixParams {
    Vecd mu_r, mu_k;
    LinearParams proj_r, proj_k, proj_v, proj_o;

    static ChannelMixParams init(Index channels, Rng& rng, double scale = 0.3);
};

template <typename F>
void visit(ChannelMixParams& p, F&& f) {
    f(p.mu_r);
    f(p.mu_k);
    f(p.proj_r.W);
    f(p.proj_r.b);
    f(p.proj_k.W);
    f(p.proj_k.b);
    f(p.proj_v.W);
    f(p.proj_v.b);
    f(p.proj_o.W);
    f(p.proj_o.b);
}

struct ChannelMixCache {
    Matd x, xr, xk;
    Matd r, k, sq, v, gate, gated;
    Index h = 0, w = 0;
};

Matd channel_mix(const Matd& x, Index h, Index w, const ChannelMixParams& p,
                 ChannelMixCache* cache = nullptr);

Matd channel_mix_backward(const ChannelMixCache& cache, const ChannelMixParams& p, const Matd& dy,
                          ChannelMixParams& grads);

// ---------------------------------------------------------------------------
// One fusion block on a single level: concat(rgb, ir) -> spatial mix ->
// LayerNorm(out + input) -> channel mix -> LayerNorm(out + spatial).
// ---------------------------------------------------------------------------

struct BlockParams {
    SpatialMixParams spatial;
    ChannelMixParams channel;
    LayerNormParams ln1, ln2;

    static BlockParams init(Index fused_channels, Rng& rng, double scale = 0.3);
};

template <typename F>
void visit(BlockParams& p, F&& f) {
    visit(p.spatial, f);
    visit(p.channel, f);
    f(p.ln1.gain);
    f(p.ln1.bias);
    f(p.ln2.gain);
    f(p.ln2.bias);
}

struct BlockCache {
    Matd x0;
    SpatialMixCache spatial;
    Matd pre_ln1;
    LayerNormCache ln1;
    Matd f_spatial;
    ChannelMixCache channel;
    Matd pre_ln2;
    LayerNormCache ln2;
};

/// Token-level block; x0 is the fused [L, C] sequence of an h x w grid.
Matd vrwkv_block_tokens(const Matd& x0, Index h, Index w, const BlockParams& p,
                        BlockCache* cache = nullptr);

Matd vrwkv_block_tokens_backward(const BlockCache& cache, const BlockParams& p, const Matd& dy,
                                 BlockParams& grads);

/// Single-level map form: rgb and ir are [C, H, W]; output is [2C, H, W].
Tensor vrwkv_block_level(const Tensor& rgb, const Tensor& ir, const BlockParams& p,
                         BlockCache* cache = nullptr);

/// All levels of a modality pair.
std::vector<Tensor> vrwkv_block(const ModalityPair& pair, const std::vector<BlockParams>& params);

// ---------------------------------------------------------------------------
// Multi-scale merge: 1x1 lateral projections to a common width, top-down
// nearest-neighbor 2x upsampling with elementwise addition; finest level out.
// ---------------------------------------------------------------------------

struct FpnParams {
    std::vector<LinearParams> lateral;  // finest first

    static FpnParams init(const std::vector<Index>& in_channels, Index out_channels, Rng& rng,
                          double scale = 0.3);
};

template <typename F>
void visit(FpnParams& p, F&& f) {
    for (auto& l : p.lateral) {
        f(l.W);
        f(l.b);
    }
}

struct FpnCache {
    std::vector<Tensor> inputs;
    std::vector<Tensor> laterals;
};

Tensor multi_scale_merge(const std::vector<Tensor>& levels, const FpnParams& p,
                         FpnCache* cache = nullptr);

std::vector<Tensor> multi_scale_merge_backward(const FpnCache& cache, const FpnParams& p,
                                               const Tensor& dy, FpnParams& grads);

// Layout helpers between [C, H, W] maps and row-major [H*W, C] token grids.
Matd chw_to_tokens(const Tensor& x);
Tensor tokens_to_chw(const Matd& tokens, Index channels, Index h, Index w);
Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor upsample2x_nearest(const Tensor& x);
Tensor downsample2x_sum(const Tensor& dy);

}  // namespace c3owd

#endif
