#include "c3owd/crossmodal.hpp"

#include <fstream>
#include <sstream>

namespace c3owd {

TextBank TextBank::load_csv(const std::string& path, bool normalize) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("TextBank: cannot open " + path);
    std::vector<std::string> names;
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        require(static_cast<bool>(std::getline(ss, cell, ',')), "TextBank: missing class name");
        names.push_back(cell);
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        require(!row.empty(), "TextBank: row without embedding values");
        if (!rows.empty()) require(row.size() == rows.front().size(), "TextBank: ragged rows");
        rows.push_back(std::move(row));
    }
    require(!rows.empty(), "TextBank: empty file");
    TextBank bank;
    bank.class_names = std::move(names);
    bank.t_clip.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (Index r = 0; r < bank.t_clip.rows(); ++r)
        for (Index c = 0; c < bank.t_clip.cols(); ++c)
            bank.t_clip(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    require_finite(bank.t_clip, "TextBank embeddings");
    if (normalize) bank.t_clip = normalize_rows(bank.t_clip);
    bank.normalized = normalize;
    return bank;
}

TextBank TextBank::synthetic(Index classes, Index dim, Rng& rng, bool normalize) {
    require(classes >= 1, "TextBank: at least one class required");
    TextBank bank;
    bank.t_clip = rng.gaussian(classes, dim);
    for (Index c = 0; c < classes; ++c) bank.class_names.push_back("class_" + std::to_string(c));
    if (normalize) bank.t_clip = normalize_rows(bank.t_clip);
    bank.normalized = normalize;
    return bank;
}

Matd project_levels(const std::vector<Tensor>& levels, const std::vector<LinearParams>& projections) {
    require(!levels.empty(), "project_levels: at least one level required");
    require(levels.size() == projections.size(), "project_levels: one projection per level required");
    const Index d = projections.front().W.cols();
    Index total = 0;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        require(projections[l].W.cols() == d, "project_levels: projection width (D) mismatch");
        total += levels[l].dim(1) * levels[l].dim(2);
    }
    Matd out(total, d);
    Index at = 0;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const Index n = levels[l].dim(1) * levels[l].dim(2);
        out.middleRows(at, n) = linear(levels[l].matrix(levels[l].dim(0), n).transpose(), projections[l]);
        at += n;
    }
    return out;
}

PatchTokens patch_embed(const Tensor& c2, Index patch_size, const LinearParams& projection,
                        PatchEmbedCache* cache) {
    require(c2.rank() == 3, "patch_embed: [C, H, W] tensor required");
    require(patch_size >= 1, "patch_embed: patch size must be positive");
    const Index c = c2.dim(0), h = c2.dim(1), w = c2.dim(2);
    require(h % patch_size == 0 && w % patch_size == 0,
            "patch_embed: spatial dims must be divisible by patch size");
    const Index h_p = h / patch_size, w_p = w / patch_size;
    const Index n = h_p * w_p;
    const Index flat = c * patch_size * patch_size;
    require(projection.W.rows() == flat, "patch_embed: projection input width mismatch");

    Matd patches(n, flat);
    for (Index pr = 0; pr < h_p; ++pr) {
        for (Index pc = 0; pc < w_p; ++pc) {
            const Index row = pr * w_p + pc;
            Index at = 0;
            for (Index ch = 0; ch < c; ++ch) {
                auto plane = c2.plane(ch);
                for (Index dy = 0; dy < patch_size; ++dy)
                    for (Index dx = 0; dx < patch_size; ++dx)
                        patches(row, at++) = plane(pr * patch_size + dy, pc * patch_size + dx);
            }
        }
    }
    if (cache) cache->patches = patches;
    PatchTokens out;
    out.m = linear(patches, projection);
    out.h_p = h_p;
    out.w_p = w_p;
    out.patch_size = patch_size;
    return out;
}

void patch_embed_backward(const PatchEmbedCache& cache, const Matd& dm, LinearParams& grads) {
    grads.W += cache.patches.transpose() * dm;
    grads.b += dm.colwise().sum().transpose();
}

CrossWkvParams CrossWkvParams::init(Index dim, Rng& rng, double scale) {
    const double s = scale / std::sqrt(static_cast<double>(dim));
    return {{rng.gaussian(dim, dim, s), Vecd::Zero(dim)},
            {rng.gaussian(dim, dim, s), Vecd::Zero(dim)},
            rng.gaussian(dim, dim, s)};
}

Matd cross_wkv(const Matd& receptance_seq, const Matd& kv_seq, const CrossWkvParams& p,
               CrossWkvCache* cache) {
    require(kv_seq.rows() >= 1, "cross_wkv: empty kv sequence");
    require_finite(receptance_seq, "cross_wkv receptance input");
    require_finite(kv_seq, "cross_wkv kv input");
    CrossWkvCache local;
    CrossWkvCache& c = cache ? *cache : local;
    c.recept = receptance_seq;
    c.kv = kv_seq;
    c.r = linear(receptance_seq, p.proj_r);
    c.k = kv_seq * p.w_k;
    c.v = linear(kv_seq, p.proj_v);

    // Per-channel softmax over kv rows.
    c.weights.resize(c.k.rows(), c.k.cols());
    for (Index ch = 0; ch < c.k.cols(); ++ch) {
        const double m = c.k.col(ch).maxCoeff();
        Vecd e = (c.k.col(ch).array() - m).exp();
        c.weights.col(ch) = e / e.sum();
    }
    c.pooled = (c.weights.array() * c.v.array()).colwise().sum().transpose();
    c.gate = sigmoid<double>(c.r);
    Matd out = c.gate.array().rowwise() * c.pooled.transpose().array();
    require_finite(out, "cross_wkv output");
    return out;
}

CrossWkvInputGrads cross_wkv_backward(const CrossWkvCache& c, const CrossWkvParams& p, const Matd& dy,
                                      CrossWkvParams& grads) {
    const Matd dgate = dy.array().rowwise() * c.pooled.transpose().array();
    const Vecd dpooled = (dy.array() * c.gate.array()).colwise().sum().transpose();
    const Matd dr = dgate.array() * c.gate.array() * (1.0 - c.gate.array());

    Matd dv = c.weights.array().rowwise() * dpooled.transpose().array();
    Matd dk(c.k.rows(), c.k.cols());
    for (Index ch = 0; ch < c.k.cols(); ++ch)
        dk.col(ch) = c.weights.col(ch).array() *
                     (c.v.col(ch).array() - c.pooled(ch)) * dpooled(ch);

    LinearGrads lg;
    CrossWkvInputGrads out;
    out.d_recept = linear_backward(c.recept, p.proj_r, dr, lg);
    grads.proj_r.W += lg.W;
    grads.proj_r.b += lg.b;
    grads.w_k += c.kv.transpose() * dk;
    out.d_kv = dk * p.w_k.transpose();
    out.d_kv += linear_backward(c.kv, p.proj_v, dv, lg);
    grads.proj_v.W += lg.W;
    grads.proj_v.b += lg.b;
    return out;
}

GateMlpParams GateMlpParams::init(Index dim, Rng& rng, double scale) {
    const double s = scale / std::sqrt(static_cast<double>(2 * dim));
    GateMlpParams p;
    p.l1 = {rng.gaussian(2 * dim, dim, s), Vecd::Zero(dim)};
    p.l2 = LinearParams::zeros(dim, dim);
    return p;
}

Matd gate_mlp(const Matd& in, const GateMlpParams& p, GateMlpCache* cache) {
    GateMlpCache local;
    GateMlpCache& c = cache ? *cache : local;
    c.in = in;
    c.a1 = linear(in, p.l1).array().tanh();
    c.gate = sigmoid<double>(Matd(linear(c.a1, p.l2)));
    return c.gate;
}

Matd gate_mlp_backward(const GateMlpCache& c, const GateMlpParams& p, const Matd& dgate,
                       GateMlpParams& grads) {
    const Matd dz2 = dgate.array() * c.gate.array() * (1.0 - c.gate.array());
    LinearGrads lg;
    const Matd da1 = linear_backward(c.a1, p.l2, dz2, lg);
    grads.l2.W += lg.W;
    grads.l2.b += lg.b;
    const Matd dz1 = da1.array() * (1.0 - c.a1.array().square());
    const Matd din = linear_backward(c.in, p.l1, dz1, lg);
    grads.l1.W += lg.W;
    grads.l1.b += lg.b;
    return din;
}

ExchangeParams ExchangeParams::init(Index dim, Rng& rng, double scale) {
    ExchangeParams p;
    p.i2t = CrossWkvParams::init(dim, rng, scale);
    p.t2i = CrossWkvParams::init(dim, rng, scale);
    p.gamma_mlp = GateMlpParams::init(dim, rng, scale);
    p.delta_mlp = GateMlpParams::init(dim, rng, scale);
    return p;
}

namespace {

Matd hcat(const Matd& a, const Matd& b) {
    Matd out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

}  // namespace

ExchangeState gated_exchange(const Matd& m, const Matd& t, const ExchangeParams& p,
                             ExchangeCache* cache) {
    require(m.cols() == t.cols(), "gated_exchange: feature widths must match");
    ExchangeCache local;
    ExchangeCache& c = cache ? *cache : local;
    c.m = m;
    c.t = t;
    c.v_i = cross_wkv(m, t, p.i2t, &c.vi);
    c.v_t = cross_wkv(t, m, p.t2i, &c.vt);

    ExchangeState out;
    out.gamma = gate_mlp(hcat(m, c.v_i), p.gamma_mlp, &c.gamma);
    out.delta = gate_mlp(hcat(t, c.v_t), p.delta_mlp, &c.delta);
    out.m_out = m.array() + out.gamma.array() * c.v_i.array();
    out.t_out = t.array() + out.delta.array() * c.v_t.array();
    return out;
}

ExchangeInputGrads gated_exchange_backward(const ExchangeCache& c, const ExchangeParams& p,
                                           const Matd& dm_out, const Matd& dt_out,
                                           ExchangeParams& grads) {
    const Index d = c.m.cols();

    // m side: m_out = m + gamma .* V_I
    const Matd dgamma = dm_out.array() * c.v_i.array();
    Matd dv_i = dm_out.array() * c.gamma.gate.array();
    Matd dm = dm_out;
    {
        const Matd din = gate_mlp_backward(c.gamma, p.gamma_mlp, dgamma, grads.gamma_mlp);
        dm += din.leftCols(d);
        dv_i += din.rightCols(d);
    }

    // t side: t_out = t + delta .* V_T
    const Matd ddelta = dt_out.array() * c.v_t.array();
    Matd dv_t = dt_out.array() * c.delta.gate.array();
    Matd dt = dt_out;
    {
        const Matd din = gate_mlp_backward(c.delta, p.delta_mlp, ddelta, grads.delta_mlp);
        dt += din.leftCols(d);
        dv_t += din.rightCols(d);
    }

    const CrossWkvInputGrads gi = cross_wkv_backward(c.vi, p.i2t, dv_i, grads.i2t);
    dm += gi.d_recept;
    dt += gi.d_kv;
    const CrossWkvInputGrads gt = cross_wkv_backward(c.vt, p.t2i, dv_t, grads.t2i);
    dt += gt.d_recept;
    dm += gt.d_kv;

    return {std::move(dm), std::move(dt)};
}

ExchangeState semantic_fusion(const Matd& m, const Matd& t, Index rounds, const ExchangeParams& p,
                              SemanticFusionCache* cache) {
    require(rounds >= 1, "semantic_fusion: at least one round required");
    SemanticFusionCache local;
    SemanticFusionCache& c = cache ? *cache : local;
    c.rounds.resize(static_cast<std::size_t>(rounds));
    c.m_round.clear();
    c.t_round.clear();

    ExchangeState state;
    Matd cur_m = m, cur_t = t;
    for (Index l = 0; l < rounds; ++l) {
        state = gated_exchange(cur_m, cur_t, p, &c.rounds[static_cast<std::size_t>(l)]);
        cur_m = state.m_out;
        cur_t = state.t_out;
        c.m_round.push_back(cur_m);
        c.t_round.push_back(cur_t);
    }
    return state;
}

ExchangeInputGrads semantic_fusion_backward(const SemanticFusionCache& cache, const ExchangeParams& p,
                                            const Matd& dm_out, const Matd& dt_out,
                                            ExchangeParams& grads) {
    Matd dm = dm_out, dt = dt_out;
    for (std::size_t l = cache.rounds.size(); l-- > 0;) {
        ExchangeInputGrads g = gated_exchange_backward(cache.rounds[l], p, dm, dt, grads);
        dm = std::move(g.dm);
        dt = std::move(g.dt);
    }
    return {std::move(dm), std::move(dt)};
}

ExchangeInputGrads semantic_fusion_backward_rounds(const SemanticFusionCache& cache,
                                                   const ExchangeParams& p,
                                                   const std::vector<Matd>& dm_rounds,
                                                   const std::vector<Matd>& dt_rounds,
                                                   ExchangeParams& grads) {
    const std::size_t n = cache.rounds.size();
    require(dm_rounds.size() == n && dt_rounds.size() == n,
            "semantic_fusion_backward_rounds: one injection slot per round required");
    Matd dm, dt;
    for (std::size_t l = n; l-- > 0;) {
        auto add = [](Matd& acc, const Matd& inject) {
            if (inject.size() == 0) return;
            if (acc.size() == 0)
                acc = inject;
            else
                acc += inject;
        };
        add(dm, dm_rounds[l]);
        add(dt, dt_rounds[l]);
        if (dm.size() == 0) dm = Matd::Zero(cache.rounds[l].m.rows(), cache.rounds[l].m.cols());
        if (dt.size() == 0) dt = Matd::Zero(cache.rounds[l].t.rows(), cache.rounds[l].t.cols());
        ExchangeInputGrads g = gated_exchange_backward(cache.rounds[l], p, dm, dt, grads);
        dm = std::move(g.dm);
        dt = std::move(g.dt);
    }
    return {std::move(dm), std::move(dt)};
}

}  // namespace c3owd
