#ifndef C3OWD_CROSSMODAL_HPP
#define C3OWD_CROSSMODAL_HPP

#include <string>
#include <vector>

#include "c3owd/ops.hpp"
#include "c3owd/params.hpp"
#include "c3owd/rng.hpp"
#include "c3owd/tensor.hpp"

namespace c3owd {

/// One embedding row per class name.
struct TextBank {
    Matd t_clip;  // CLA x D
    std::vector<std::string> class_names;
    bool normalized = false;

    static TextBank load_csv(const std::string& path, bool normalize);
    static TextBank synthetic(Index classes, Index dim, Rng& rng, bool normalize);
};

/// Patch tokens of one feature map with their grid geometry.
struct PatchTokens {
    Matd m;  // N x D
    Index h_p = 0;
    Index w_p = 0;
    Index patch_size = 1;
};

// ---------------------------------------------------------------------------
// Level projection and patch embedding.
// ---------------------------------------------------------------------------

/// Flatten each level to tokens, project to the shared width, concatenate
/// along the token axis. All projections must share an output width.
Matd project_levels(const std::vector<Tensor>& levels, const std::vector<LinearParams>& projections);

struct PatchEmbedCache {
    Matd patches;  // N x (C*p*p)
};

/// Non-overlapping p x p patches, flattened channel-major and projected to D.
PatchTokens patch_embed(const Tensor& c2, Index patch_size, const LinearParams& projection,
                        PatchEmbedCache* cache = nullptr);

void patch_embed_backward(const PatchEmbedCache& cache, const Matd& dm, LinearParams& grads);

// ---------------------------------------------------------------------------
// Cross-sequence WKV: receptance from one modality, keys/values pooled from
// the other. There is no shared coordinate across modalities, so no
// positional decay term: out_a = sigmoid(r_a) .* softmax-pooled values.
// ---------------------------------------------------------------------------

struct CrossWkvParams {
    LinearParams proj_r, proj_v;
    Matd w_k;  // bias-free: softmax pooling is invariant to per-channel key shifts

    static CrossWkvParams init(Index dim, Rng& rng, double scale = 0.3);
};

template <typename F>
void visit(CrossWkvParams& p, F&& f) {
    f(p.proj_r.W);
    f(p.proj_r.b);
    f(p.w_k);
    f(p.proj_v.W);
    f(p.proj_v.b);
}

struct CrossWkvCache {
    Matd recept, kv;
    Matd r, k, v;
    Matd weights;  // B x D, per-channel softmax over rows
    Vecd pooled;   // D
    Matd gate;
};

Matd cross_wkv(const Matd& receptance_seq, const Matd& kv_seq, const CrossWkvParams& p,
               CrossWkvCache* cache = nullptr);

struct CrossWkvInputGrads {
    Matd d_recept;
    Matd d_kv;
};

CrossWkvInputGrads cross_wkv_backward(const CrossWkvCache& cache, const CrossWkvParams& p,
                                      const Matd& dy, CrossWkvParams& grads);

// ---------------------------------------------------------------------------
// Gated bidirectional exchange (one round) and its L-round iteration with
// shared parameters.
// ---------------------------------------------------------------------------

/// Two-layer gate head: tanh hidden, sigmoid output, zero-init final layer so
/// gates start at 0.5.
struct GateMlpParams {
    LinearParams l1, l2;

    static GateMlpParams init(Index dim, Rng& rng, double scale = 0.3);
};

template <typename F>
void visit(GateMlpParams& p, F&& f) {
    f(p.l1.W);
    f(p.l1.b);
    f(p.l2.W);
    f(p.l2.b);
}

struct GateMlpCache {
    Matd in, a1, gate;
};

Matd gate_mlp(const Matd& in, const GateMlpParams& p, GateMlpCache* cache = nullptr);
Matd gate_mlp_backward(const GateMlpCache& cache, const GateMlpParams& p, const Matd& dgate,
                       GateMlpParams& grads);

struct ExchangeParams {
    CrossWkvParams i2t;  // receptance = image tokens, kv = text
    CrossWkvParams t2i;  // receptance = text, kv = image tokens
    GateMlpParams gamma_mlp, delta_mlp;

    static ExchangeParams init(Index dim, Rng& rng, double scale = 0.3);
};

template <typename F>
void visit(ExchangeParams& p, F&& f) {
    visit(p.i2t, f);
    visit(p.t2i, f);
    visit(p.gamma_mlp, f);
    visit(p.delta_mlp, f);
}

/// Outputs of one exchange round; gates lie strictly inside (0,1).
struct ExchangeState {
    Matd m_out;
    Matd t_out;
    Matd gamma;
    Matd delta;
};

struct ExchangeCache {
    Matd m, t;
    CrossWkvCache vi, vt;
    Matd v_i, v_t;
    GateMlpCache gamma, delta;
};

ExchangeState gated_exchange(const Matd& m, const Matd& t, const ExchangeParams& p,
                             ExchangeCache* cache = nullptr);

struct ExchangeInputGrads {
    Matd dm;
    Matd dt;
};

ExchangeInputGrads gated_exchange_backward(const ExchangeCache& cache, const ExchangeParams& p,
                                           const Matd& dm_out, const Matd& dt_out,
                                           ExchangeParams& grads);

struct SemanticFusionCache {
    std::vector<ExchangeCache> rounds;
    std::vector<Matd> m_round;  // per-round m outputs, for auxiliary heads
    std::vector<Matd> t_round;
};

/// L rounds of gated exchange, each consuming the previous round's outputs.
/// Parameters are shared across rounds.
ExchangeState semantic_fusion(const Matd& m, const Matd& t, Index rounds, const ExchangeParams& p,
                              SemanticFusionCache* cache = nullptr);

ExchangeInputGrads semantic_fusion_backward(const SemanticFusionCache& cache, const ExchangeParams& p,
                                            const Matd& dm_out, const Matd& dt_out,
                                            ExchangeParams& grads);

/// Backward with upstream gradients injected at every round's outputs, for
/// consumers that read intermediate rounds. Empty entries mean no injection.
ExchangeInputGrads semantic_fusion_backward_rounds(const SemanticFusionCache& cache,
                                                   const ExchangeParams& p,
                                                   const std::vector<Matd>& dm_rounds,
                                                   const std::vector<Matd>& dt_rounds,
                                                   ExchangeParams& grads);

}  // namespace c3owd

#endif
