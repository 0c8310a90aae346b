#include "c3owd/gradcheck_suite.hpp"

#include <cstdio>
#include <cstdlib>

#include "c3owd/biwkv.hpp"
#include "c3owd/contrast.hpp"
#include "c3owd/crossmodal.hpp"
#include "c3owd/curriculum.hpp"
#include "c3owd/fusion.hpp"
#include "c3owd/sampling.hpp"

namespace c3owd {

namespace {

Vecd concat(const std::vector<Vecd>& parts) {
    Index n = 0;
    for (const auto& p : parts) n += p.size();
    Vecd out(n);
    Index at = 0;
    for (const auto& p : parts) {
        out.segment(at, p.size()) = p;
        at += p.size();
    }
    return out;
}

double weighted_sum(const Matd& out, const Matd& upstream) {
    return (out.array() * upstream.array()).sum();
}

// Set C3_GRADCHECK_DEBUG=1 to print the worst coordinate of failing checks.
double suite_rel_err(const char* op, const Vecd& analytic, const Vecd& numeric) {
    double worst = 0.0;
    Index wi = 0;
    for (Index i = 0; i < analytic.size(); ++i) {
        const double r = rel_err(analytic(i), numeric(i));
        if (r > worst) {
            worst = r;
            wi = i;
        }
    }
    if (worst > 1e-5 && std::getenv("C3_GRADCHECK_DEBUG")) {
        std::fprintf(stderr, "[gradcheck] %s worst %.3e at %lld: a=%.9e n=%.9e absdiff=%.3e\n", op,
                     worst, static_cast<long long>(wi), analytic(wi), numeric(wi),
                     std::abs(analytic(wi) - numeric(wi)));
    }
    return worst;
}

GradReport check_biwkv(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "biwkv";
    Rng root(cfg.seed + 11);
    double worst = 0.0;
    for (Index inst = 0; inst < cfg.instances; ++inst) {
        Rng rng = root.split(static_cast<std::uint64_t>(inst));
        const Index t_len = 2 + static_cast<Index>(rng.next_below(7));
        const Index c = 1 + static_cast<Index>(rng.next_below(4));
        const Matd k = rng.gaussian(t_len, c);
        const Matd v = rng.gaussian(t_len, c);
        const Vecd w = rng.uniform_vec(c, -1.5, 1.5);
        const Vecd u = rng.uniform_vec(c, -1.5, 1.5);
        const Matd up = rng.gaussian(t_len, c);

        BiWkvGrads g = biwkv_backward(k, v, w, u, up);
        Vecd analytic = concat({flatten(g.dk), flatten(g.dv), g.dw, g.du});
        if (cfg.corrupt) analytic(0) += 1.0;

        auto f = [&](const Vecd& vec) {
            const Index kn = t_len * c;
            const Matd kk = unflatten(vec.segment(0, kn), t_len, c);
            const Matd vv = unflatten(vec.segment(kn, kn), t_len, c);
            const Vecd ww = vec.segment(2 * kn, c);
            const Vecd uu = vec.segment(2 * kn + c, c);
            return weighted_sum(biwkv_naive<double>(kk, vv, ww, uu), up);
        };
        const Vecd x0 = concat({flatten(k), flatten(v), w, u});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
    }
    return {"biwkv", "all", worst};
}

GradReport check_spatial_mix(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "spatial_mix";
    Rng root(cfg.seed + 23);
    const Index c = 4, h = 3, w = 3;
    double worst = 0.0;
    for (Index inst = 0; inst < cfg.instances; ++inst) {
        Rng rng = root.split(static_cast<std::uint64_t>(inst));
        SpatialMixParams p = SpatialMixParams::init(c, rng, 0.6);
        p.mu_r = rng.uniform_vec(c, 0.2, 0.8);
        p.mu_k = rng.uniform_vec(c, 0.2, 0.8);
        p.mu_v = rng.uniform_vec(c, 0.2, 0.8);
        const Matd x = rng.gaussian(h * w, c);
        const Matd up = rng.gaussian(h * w, c);

        SpatialMixCache cache;
        spatial_mix(x, h, w, p, &cache);
        SpatialMixParams grads = p;
        set_zero(grads);
        const Matd dx = spatial_mix_backward(cache, p, up, grads);
        const Vecd analytic = concat({to_vector(grads), flatten(dx)});

        SpatialMixParams probe = p;
        auto f = [&](const Vecd& vec) {
            const Index np = param_count(probe);
            from_vector(probe, vec.segment(0, np));
            const Matd xx = unflatten(vec.segment(np, h * w * c), h * w, c);
            return weighted_sum(spatial_mix(xx, h, w, probe), up);
        };
        const Vecd x0 = concat({to_vector(p), flatten(x)});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
    }
    return {"spatial_mix", "all", worst};
}

GradReport check_channel_mix(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "channel_mix";
    Rng root(cfg.seed + 37);
    const Index c = 4, h = 3, w = 3;
    double worst = 0.0;
    Index done = 0;
    std::uint64_t attempt = 0;
    while (done < cfg.instances) {
        Rng rng = root.split(attempt++);
        ChannelMixParams p = ChannelMixParams::init(c, rng, 0.6);
        p.mu_r = rng.uniform_vec(c, 0.2, 0.8);
        p.mu_k = rng.uniform_vec(c, 0.2, 0.8);
        const Matd x = rng.gaussian(h * w, c);
        const Matd up = rng.gaussian(h * w, c);

        ChannelMixCache cache;
        channel_mix(x, h, w, p, &cache);
        // SquaredReLU is C1 but its second derivative jumps at zero; keep the
        // probe away from the kink.
        if (cache.k.array().abs().minCoeff() < 5e-3) continue;

        ChannelMixParams grads = p;
        set_zero(grads);
        const Matd dx = channel_mix_backward(cache, p, up, grads);
        const Vecd analytic = concat({to_vector(grads), flatten(dx)});

        ChannelMixParams probe = p;
        auto f = [&](const Vecd& vec) {
            const Index np = param_count(probe);
            from_vector(probe, vec.segment(0, np));
            const Matd xx = unflatten(vec.segment(np, h * w * c), h * w, c);
            return weighted_sum(channel_mix(xx, h, w, probe), up);
        };
        const Vecd x0 = concat({to_vector(p), flatten(x)});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
        ++done;
    }
    return {"channel_mix", "all", worst};
}

GradReport check_vrwkv_block(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "vrwkv_block";
    Rng root(cfg.seed + 41);
    const Index c = 8, h = 4, w = 4;  // fused width of a C=4-per-modality level
    double worst = 0.0;
    Index done = 0;
    std::uint64_t attempt = 0;
    while (done < cfg.instances) {
        Rng rng = root.split(attempt++);
        BlockParams p = BlockParams::init(c, rng, 0.5);
        p.spatial.mu_r = rng.uniform_vec(c, 0.2, 0.8);
        p.spatial.mu_k = rng.uniform_vec(c, 0.2, 0.8);
        p.spatial.mu_v = rng.uniform_vec(c, 0.2, 0.8);
        p.channel.mu_r = rng.uniform_vec(c, 0.2, 0.8);
        p.channel.mu_k = rng.uniform_vec(c, 0.2, 0.8);
        const Matd x = rng.gaussian(h * w, c);
        // Small upstream keeps the probe functional's FD noise floor well
        // under the 1e-8 gradient floor of the rel-err formula.
        const Matd up = rng.gaussian(h * w, c, 0.005);

        BlockCache cache;
        vrwkv_block_tokens(x, h, w, p, &cache);
        if (cache.channel.k.array().abs().minCoeff() < 5e-3) continue;

        BlockParams grads = p;
        set_zero(grads);
        const Matd dx = vrwkv_block_tokens_backward(cache, p, up, grads);
        const Vecd analytic = concat({to_vector(grads), flatten(dx)});

        BlockParams probe = p;
        auto f = [&](const Vecd& vec) {
            const Index np = param_count(probe);
            from_vector(probe, vec.segment(0, np));
            const Matd xx = unflatten(vec.segment(np, h * w * c), h * w, c);
            return weighted_sum(vrwkv_block_tokens(xx, h, w, probe), up);
        };
        const Vecd x0 = concat({to_vector(p), flatten(x)});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
        ++done;
    }
    return {"vrwkv_block", "all", worst};
}

GradReport check_gated_exchange(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "gated_exchange";
    Rng root(cfg.seed + 53);
    const Index n = 4, cla = 3, d = 8;
    double worst = 0.0;
    for (Index inst = 0; inst < cfg.instances; ++inst) {
        Rng rng = root.split(static_cast<std::uint64_t>(inst));
        ExchangeParams p = ExchangeParams::init(d, rng, 0.6);
        p.gamma_mlp.l2 = {rng.gaussian(d, d, 0.3), rng.gaussian_vec(d, 0.1)};
        p.delta_mlp.l2 = {rng.gaussian(d, d, 0.3), rng.gaussian_vec(d, 0.1)};
        const Matd m = rng.gaussian(n, d);
        const Matd t = rng.gaussian(cla, d);
        const Matd up_m = rng.gaussian(n, d, 0.005);
        const Matd up_t = rng.gaussian(cla, d, 0.005);

        ExchangeCache cache;
        gated_exchange(m, t, p, &cache);
        ExchangeParams grads = p;
        set_zero(grads);
        const ExchangeInputGrads ig = gated_exchange_backward(cache, p, up_m, up_t, grads);
        const Vecd analytic = concat({to_vector(grads), flatten(ig.dm), flatten(ig.dt)});

        ExchangeParams probe = p;
        auto f = [&](const Vecd& vec) {
            const Index np = param_count(probe);
            from_vector(probe, vec.segment(0, np));
            const Matd mm = unflatten(vec.segment(np, n * d), n, d);
            const Matd tt = unflatten(vec.segment(np + n * d, cla * d), cla, d);
            const ExchangeState st = gated_exchange(mm, tt, probe);
            return weighted_sum(st.m_out, up_m) + weighted_sum(st.t_out, up_t);
        };
        const Vecd x0 = concat({to_vector(p), flatten(m), flatten(t)});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
    }
    return {"gated_exchange", "all", worst};
}

GradReport check_modulated_sample(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "modulated_sample";
    Rng root(cfg.seed + 67);
    const Index n = 3, k_pts = 2, c = 4, hw = 5, d = 6, cla = 3;
    double worst = 0.0;
    Index done = 0;
    std::uint64_t attempt = 0;
    while (done < cfg.instances) {
        Rng rng = root.split(attempt++);
        ModulatedSampleParams p = ModulatedSampleParams::init(d, cla, k_pts, c, rng, 0.5);
        p.offset_proj = {rng.gaussian(d, 2 * k_pts, 0.05), rng.gaussian_vec(2 * k_pts, 0.05)};
        p.mod_mlp.l2 = {rng.gaussian(std::max<Index>(cla, 2 * k_pts), 2 * k_pts, 0.05),
                        rng.gaussian_vec(2 * k_pts, 0.02)};
        SamplingSpec spec{k_pts, rng.uniform_mat(n, 2, 0.15, 0.85)};
        Tensor f_ref({c, hw, hw});
        f_ref.data() = rng.gaussian_vec(c * hw * hw);
        const Matd q = rng.gaussian(n, d);
        const Matd t = rng.gaussian(cla, d);
        const Matd up = rng.gaussian(n, d);

        ModulatedSampleCache cache;
        modulated_sample(q, t, f_ref, spec, p, &cache);

        // Bilinear interpolation is piecewise-linear: stay off grid lines and
        // off the ReLU kink in the modulation MLP.
        bool ok = true;
        for (Index i = 0; i < cache.points.rows() && ok; ++i)
            for (Index j = 0; j < 2; ++j) {
                const double pix = cache.points(i, j) * static_cast<double>(hw - 1);
                const double frac = pix - std::floor(pix);
                if (frac < 1e-2 || frac > 1.0 - 1e-2) ok = false;
            }
        if (cache.mod.z1.array().abs().minCoeff() < 5e-3) ok = false;
        if (!ok) continue;

        ModulatedSampleParams grads = p;
        set_zero(grads);
        const ModulatedSampleInputGrads ig = modulated_sample_backward(cache, spec, p, up, grads);
        const Vecd analytic =
            concat({to_vector(grads), flatten(ig.dq), flatten(ig.dt), ig.d_f_ref.data()});

        ModulatedSampleParams probe = p;
        auto f = [&](const Vecd& vec) {
            const Index np = param_count(probe);
            from_vector(probe, vec.segment(0, np));
            Index at = np;
            const Matd qq = unflatten(vec.segment(at, n * d), n, d);
            at += n * d;
            const Matd tt = unflatten(vec.segment(at, cla * d), cla, d);
            at += cla * d;
            Tensor ff({c, hw, hw});
            ff.data() = vec.segment(at, c * hw * hw);
            return weighted_sum(modulated_sample(qq, tt, ff, spec, probe), up);
        };
        const Vecd x0 = concat({to_vector(p), flatten(q), flatten(t), f_ref.data()});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
        ++done;
    }
    return {"modulated_sample", "all", worst};
}

GradReport check_info_nce_theta(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "info_nce_theta";
    Rng root(cfg.seed + 79);
    const Index d_in = 6, hidden = 8, d_proj = 5, queue_k = 8;
    double worst = 0.0;
    for (Index inst = 0; inst < cfg.instances; ++inst) {
        Rng rng = root.split(static_cast<std::uint64_t>(inst));
        ContrastState state(d_in, hidden, d_proj, queue_k, rng);
        state.alpha = rng.uniform(-0.3, 0.3);
        state.tau = 0.07;
        // Pre-populate the queues so queue columns participate.
        state.q_region.push(rng.gaussian(4, d_proj), {0, 1, 2, 0});
        state.q_text.push(rng.gaussian(4, d_proj), {1, 2, 0, 1});

        ContrastBatch batch;
        const Index n_r = 4, n_t = 3;
        batch.region_feats = rng.gaussian(n_r, d_in);
        batch.region_classes = {0, 1, 2, 1};
        batch.text_feats = rng.gaussian(n_t, d_in);
        batch.text_classes = {0, 1, 2};

        ProjectorParams dtheta = state.theta;
        set_zero(dtheta);
        double dalpha = 0.0;
        contrastive_loss(batch, state, &dtheta, &dalpha);
        Vecd alpha_grad(1);
        alpha_grad(0) = dalpha;
        const Vecd analytic = concat({to_vector(dtheta), alpha_grad});

        auto f = [&](const Vecd& vec) {
            ContrastState probe = state;
            const Index np = param_count(probe.theta);
            Vecd head = vec.segment(0, np);
            from_vector(probe.theta, head);
            probe.alpha = vec(np);
            return contrastive_loss(batch, probe).loss;
        };
        Vecd alpha0(1);
        alpha0(0) = state.alpha;
        const Vecd x0 = concat({to_vector(state.theta), alpha0});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
    }
    return {"info_nce_theta", "theta+alpha", worst};
}

GradReport check_toy_heads(const GradSuiteConfig& cfg) {
    constexpr const char* kOp = "toy_heads";
    Rng root(cfg.seed + 97);
    const Index grid = 4, feat = 6;
    double worst = 0.0;
    Index done = 0;
    std::uint64_t attempt = 0;
    while (done < cfg.instances) {
        Rng rng = root.split(attempt++);
        const Matd cells = rng.gaussian(grid * grid, feat);
        LinearParams obj{rng.gaussian(feat, 1, 0.4), rng.gaussian_vec(1, 0.2)};
        LinearParams box{rng.gaussian(feat, 4, 0.4), rng.gaussian_vec(4, 0.2)};

        std::vector<Box> gt;
        gt.push_back({0.5, 0.5, 2.5, 3.0, 0});
        gt.push_back({1.0 + rng.uniform(), 1.0, 3.5, 3.5, 1});
        const DetTargets targets = make_det_targets(gt, grid);

        // L1 has a kink at zero residual.
        const Matd boxes = linear(cells, box);
        bool ok = true;
        for (Index cell : targets.positive_cells)
            if ((boxes.row(cell) - targets.box.row(cell)).cwiseAbs().minCoeff() < 5e-3) ok = false;
        if (!ok) continue;

        const double fscale = 0.005;
        LinearParams d_obj = LinearParams::zeros(feat, 1);
        LinearParams d_box = LinearParams::zeros(feat, 4);
        Matd d_cells;
        det_head_loss(cells, obj, box, targets, &d_cells, &d_obj, &d_box);
        Vecd analytic = concat(
            {flatten(d_obj.W), d_obj.b, flatten(d_box.W), d_box.b, flatten(d_cells)});
        analytic *= fscale;

        auto f = [&](const Vecd& vec) {
            Index at = 0;
            LinearParams o{unflatten(vec.segment(at, feat), feat, 1), Vecd::Zero(1)};
            at += feat;
            o.b(0) = vec(at++);
            LinearParams b{unflatten(vec.segment(at, feat * 4), feat, 4), Vecd::Zero(4)};
            at += feat * 4;
            b.b = vec.segment(at, 4);
            at += 4;
            const Matd cc = unflatten(vec.segment(at, grid * grid * feat), grid * grid, feat);
            return fscale * det_head_loss(cc, o, b, targets).total;
        };
        const Vecd x0 = concat({flatten(obj.W), obj.b, flatten(box.W), box.b, flatten(cells)});
        worst = std::max(worst, suite_rel_err(kOp, analytic, finite_diff_gradient_richardson(f, x0, cfg.h)));
        ++done;
    }
    return {"toy_heads", "all", worst};
}

}  // namespace

std::vector<GradReport> run_gradcheck(const std::string& module, const GradSuiteConfig& cfg) {
    std::vector<GradReport> out;
    const bool all = module == "all";
    if (all || module == "biwkv") out.push_back(check_biwkv(cfg));
    if (all || module == "vrwkv") {
        out.push_back(check_spatial_mix(cfg));
        out.push_back(check_channel_mix(cfg));
        out.push_back(check_vrwkv_block(cfg));
    }
    if (all || module == "crossmodal") out.push_back(check_gated_exchange(cfg));
    if (all || module == "sampling") out.push_back(check_modulated_sample(cfg));
    if (all || module == "contrast") out.push_back(check_info_nce_theta(cfg));
    if (all || module == "heads") out.push_back(check_toy_heads(cfg));
    require(!out.empty(), "run_gradcheck: unknown module " + module);
    return out;
}

double worst_rel_err(const std::vector<GradReport>& reports) {
    double worst = 0.0;
    for (const auto& r : reports) worst = std::max(worst, r.max_rel_err);
    return worst;
}

}  // namespace c3owd
