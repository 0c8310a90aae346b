#ifndef C3OWD_SAMPLING_HPP
#define C3OWD_SAMPLING_HPP

#include "c3owd/ops.hpp"
#include "c3owd/params.hpp"
#include "c3owd/rng.hpp"
#include "c3owd/tensor.hpp"

namespace c3owd {

/// K sampling points per query plus normalized reference points in [0,1]^2.
struct SamplingSpec {
    Index k_points = 4;
    Matd ref_points;  // N x 2, (x, y)
};

/// Linear map of queries to 2K offsets; zero-init keeps sampling at the
/// reference points initially.
Matd base_offsets(const Matd& q, const LinearParams& proj);

/// Rows are softmax(q . t^T / sqrt(D)).
Matd text_attention(const Matd& q, const Matd& t);

/// Two-layer MLP (ReLU hidden) from attention rows to 2K modulations.
struct ModulationMlpParams {
    LinearParams l1, l2;

    static ModulationMlpParams init(Index classes, Index hidden, Index two_k, Rng& rng,
                                    double scale = 0.3, bool zero_final = true);
};

template <typename F>
void visit(ModulationMlpParams& p, F&& f) {
    f(p.l1.W);
    f(p.l1.b);
    f(p.l2.W);
    f(p.l2.b);
}

struct ModulationCache {
    Matd attn, z1, a1;
};

Matd modulation_weights(const Matd& attn, const ModulationMlpParams& p,
                        ModulationCache* cache = nullptr);
Matd modulation_weights_backward(const ModulationCache& cache, const ModulationMlpParams& p,
                                 const Matd& dy, ModulationMlpParams& grads);

/// Bilinear interpolation of f_ref [C, H, W] at normalized (x, y) points,
/// x_pix = x * (W - 1). Neighbors outside the grid contribute zeros, so the
/// op is total: fully out-of-range points return zero vectors.
Matd bilinear_sample(const Tensor& f_ref, const Matd& points);

struct BilinearGrads {
    Tensor d_f_ref;
    Matd d_points;
};

BilinearGrads bilinear_sample_backward(const Tensor& f_ref, const Matd& points, const Matd& dy);

// ---------------------------------------------------------------------------
// Full text-modulated sampler: base offsets from queries, attention-driven
// modulation, K bilinear samples per query, output projection to D.
// ---------------------------------------------------------------------------

struct ModulatedSampleParams {
    LinearParams offset_proj;  // D -> 2K
    ModulationMlpParams mod_mlp;
    LinearParams out_proj;  // K*C -> D

    static ModulatedSampleParams init(Index dim, Index classes, Index k_points, Index channels,
                                      Rng& rng, double scale = 0.3);
};

template <typename F>
void visit(ModulatedSampleParams& p, F&& f) {
    f(p.offset_proj.W);
    f(p.offset_proj.b);
    visit(p.mod_mlp, f);
    f(p.out_proj.W);
    f(p.out_proj.b);
}

struct ModulatedSampleCache {
    Matd q, t;
    Matd logits, attn;
    ModulationCache mod;
    Matd delta;      // N x 2K combined offsets
    Matd points;     // (N*K) x 2 absolute normalized positions
    Matd sampled;    // N x (K*C) concatenated samples
    Tensor f_ref;
};

Matd modulated_sample(const Matd& q, const Matd& t, const Tensor& f_ref, const SamplingSpec& spec,
                      const ModulatedSampleParams& p, ModulatedSampleCache* cache = nullptr);

struct ModulatedSampleInputGrads {
    Matd dq;
    Matd dt;
    Tensor d_f_ref;
};

ModulatedSampleInputGrads modulated_sample_backward(const ModulatedSampleCache& cache,
                                                    const SamplingSpec& spec,
                                                    const ModulatedSampleParams& p, const Matd& dy,
                                                    ModulatedSampleParams& grads);

}  // namespace c3owd

#endif
