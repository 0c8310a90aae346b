#include "c3owd/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace c3owd {

void CurriculumConfig::validate() const {
    require(lambda_c >= 0 && lambda_aux >= 0 && lambda_1 >= 0, "config: loss weights must be >= 0");
    require(lambda_i2t >= 0 && lambda_t2i >= 0, "config: contrast weights must be >= 0");
    require(tau > 0, "config: tau must be positive");
    require(tau_iou > 0 && tau_iou <= 1, "config: tau_iou must be in (0, 1]");
    require(clip > 0, "config: step clip bound must be positive");
    require(momentum >= 0 && momentum <= 1, "config: momentum must be in [0, 1]");
    require(queue_k >= 1 && k_heads >= 0 && l_dec >= 1, "config: invalid head/queue counts");
    require(channels >= 2 && channels % 2 == 0, "config: channels must be even and >= 2");
    require(grid >= 8 && grid % 4 == 0, "config: grid must be a multiple of 4 and >= 8");
    require(grid % patch == 0, "config: grid must be divisible by patch");
    require(feature_dim >= 4, "config: feature_dim too small");
    require(classes >= 2, "config: at least two classes");
    require(stage1_steps >= 1 && stage2_steps >= 1, "config: step counts must be positive");
    require(n_scenes >= 1 && n_eval_scenes >= 1, "config: scene counts must be positive");
}

namespace {

using nlohmann::json;

template <typename T>
void maybe_get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

CurriculumConfig config_from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    json j = json::parse(f);
    CurriculumConfig cfg;
    maybe_get(j, "lambda_c", cfg.lambda_c);
    maybe_get(j, "lambda_aux", cfg.lambda_aux);
    maybe_get(j, "lambda_1", cfg.lambda_1);
    maybe_get(j, "tau", cfg.tau);
    maybe_get(j, "tau_iou", cfg.tau_iou);
    maybe_get(j, "lambda_i2t", cfg.lambda_i2t);
    maybe_get(j, "lambda_t2i", cfg.lambda_t2i);
    maybe_get(j, "queue_k", cfg.queue_k);
    maybe_get(j, "momentum", cfg.momentum);
    maybe_get(j, "k_heads", cfg.k_heads);
    maybe_get(j, "l_dec", cfg.l_dec);
    maybe_get(j, "learning_rate", cfg.learning_rate);
    maybe_get(j, "clip", cfg.clip);
    maybe_get(j, "stage1_steps", cfg.stage1_steps);
    maybe_get(j, "stage2_steps", cfg.stage2_steps);
    maybe_get(j, "channels", cfg.channels);
    maybe_get(j, "grid", cfg.grid);
    maybe_get(j, "feature_dim", cfg.feature_dim);
    maybe_get(j, "patch", cfg.patch);
    maybe_get(j, "classes", cfg.classes);
    maybe_get(j, "k_points", cfg.k_points);
    maybe_get(j, "proj_hidden", cfg.proj_hidden);
    maybe_get(j, "proj_dim", cfg.proj_dim);
    maybe_get(j, "n_scenes", cfg.n_scenes);
    maybe_get(j, "n_eval_scenes", cfg.n_eval_scenes);
    maybe_get(j, "noise_sigma", cfg.noise_sigma);
    cfg.validate();
    return cfg;
}

std::string config_to_json(const CurriculumConfig& cfg) {
    json j;
    j["lambda_c"] = cfg.lambda_c;
    j["lambda_aux"] = cfg.lambda_aux;
    j["lambda_1"] = cfg.lambda_1;
    j["tau"] = cfg.tau;
    j["tau_iou"] = cfg.tau_iou;
    j["lambda_i2t"] = cfg.lambda_i2t;
    j["lambda_t2i"] = cfg.lambda_t2i;
    j["queue_k"] = cfg.queue_k;
    j["momentum"] = cfg.momentum;
    j["k_heads"] = cfg.k_heads;
    j["l_dec"] = cfg.l_dec;
    j["learning_rate"] = cfg.learning_rate;
    j["clip"] = cfg.clip;
    j["stage1_steps"] = cfg.stage1_steps;
    j["stage2_steps"] = cfg.stage2_steps;
    j["channels"] = cfg.channels;
    j["grid"] = cfg.grid;
    j["feature_dim"] = cfg.feature_dim;
    j["patch"] = cfg.patch;
    j["classes"] = cfg.classes;
    j["k_points"] = cfg.k_points;
    j["proj_hidden"] = cfg.proj_hidden;
    j["proj_dim"] = cfg.proj_dim;
    j["n_scenes"] = cfg.n_scenes;
    j["n_eval_scenes"] = cfg.n_eval_scenes;
    j["noise_sigma"] = cfg.noise_sigma;
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

namespace {

constexpr Index kMinBoxSide = 3;

double class_signature(int class_id, Index channel) {
    return 0.6 + 0.4 * std::sin(1.7 * static_cast<double>(class_id + 1) *
                                static_cast<double>(channel + 2));
}

void render_object(Tensor& map, const Box& box, int class_id) {
    const Index h = map.dim(1), w = map.dim(2);
    const Index y_lo = std::clamp<Index>(static_cast<Index>(std::floor(box.y1)), 0, h);
    const Index y_hi = std::clamp<Index>(static_cast<Index>(std::ceil(box.y2)), 0, h);
    const Index x_lo = std::clamp<Index>(static_cast<Index>(std::floor(box.x1)), 0, w);
    const Index x_hi = std::clamp<Index>(static_cast<Index>(std::ceil(box.x2)), 0, w);
    for (Index c = 0; c < map.dim(0); ++c) {
        auto plane = map.plane(c);
        const double v = class_signature(class_id, c);
        for (Index y = y_lo; y < y_hi; ++y)
            for (Index x = x_lo; x < x_hi; ++x) plane(y, x) += v;
    }
}

std::vector<SyntheticScene> gen_scenes(Rng& root, Index n_scenes, Index grid, Index channels,
                                       Index class_lo, Index class_hi, double noise_sigma) {
    require(n_scenes >= 1, "gen_scenes: at least one scene required");
    require(grid >= kMinBoxSide + 2, "gen_scenes: grid too small for any box");
    require(class_hi >= class_lo, "gen_scenes: empty class range");
    std::vector<SyntheticScene> scenes;
    scenes.reserve(static_cast<std::size_t>(n_scenes));
    for (Index s = 0; s < n_scenes; ++s) {
        Rng rng = root.split(static_cast<std::uint64_t>(s));
        SyntheticScene scene;
        scene.rgb = Tensor::zeros({channels, grid, grid});
        scene.ir = Tensor::zeros({channels, grid, grid});
        const Index n_obj = 1 + static_cast<Index>(rng.next_below(3));
        for (Index o = 0; o < n_obj; ++o) {
            const Index max_side = std::max<Index>(kMinBoxSide, grid / 2);
            const Index bw = kMinBoxSide + static_cast<Index>(rng.next_below(
                                               static_cast<std::uint64_t>(max_side - kMinBoxSide + 1)));
            const Index bh = kMinBoxSide + static_cast<Index>(rng.next_below(
                                               static_cast<std::uint64_t>(max_side - kMinBoxSide + 1)));
            const Index x1 = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(grid - bw + 1)));
            const Index y1 = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(grid - bh + 1)));
            Box box{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x1 + bw),
                    static_cast<double>(y1 + bh),
                    static_cast<int>(class_lo + static_cast<Index>(rng.next_below(
                                                    static_cast<std::uint64_t>(class_hi - class_lo + 1))))};
            const double roll = rng.uniform();
            const int vis = roll < 0.6 ? 0 : (roll < 0.8 ? 1 : 2);
            if (vis != 2) render_object(scene.rgb, box, box.class_id);
            if (vis != 1) render_object(scene.ir, box, box.class_id);
            scene.gt.push_back(box);
            scene.visibility.push_back(vis);
        }
        for (Index i = 0; i < scene.rgb.size(); ++i) scene.rgb.data()(i) += noise_sigma * rng.normal();
        for (Index i = 0; i < scene.ir.size(); ++i) scene.ir.data()(i) += noise_sigma * rng.normal();
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

}  // namespace

std::vector<SyntheticScene> gen_stage1_data(std::uint64_t seed, Index n_scenes, Index grid,
                                            Index channels, Index class_lo, Index class_hi,
                                            double noise_sigma) {
    Rng rng(seed);
    return gen_scenes(rng, n_scenes, grid, channels, class_lo, class_hi, noise_sigma);
}

namespace {

Tensor avg_pool2(const Tensor& x) {
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out({c, h / 2, w / 2});
    for (Index ch = 0; ch < c; ++ch) {
        auto src = x.plane(ch);
        auto dst = out.plane(ch);
        for (Index y = 0; y < h / 2; ++y)
            for (Index xx = 0; xx < w / 2; ++xx)
                dst(y, xx) = 0.25 * (src(2 * y, 2 * xx) + src(2 * y, 2 * xx + 1) +
                                     src(2 * y + 1, 2 * xx) + src(2 * y + 1, 2 * xx + 1));
    }
    return out;
}

}  // namespace

std::vector<Tensor> scene_levels(const Tensor& map) {
    std::vector<Tensor> levels;
    levels.push_back(map);
    levels.push_back(avg_pool2(levels[0]));
    levels.push_back(avg_pool2(levels[1]));
    return levels;
}

// ---------------------------------------------------------------------------
// Stage-1 model and detection loss.
// ---------------------------------------------------------------------------

Stage1Model Stage1Model::init(const CurriculumConfig& cfg, Rng& rng) {
    Stage1Model m;
    const Index fused = 2 * cfg.channels;
    for (int l = 0; l < 3; ++l) m.blocks.push_back(BlockParams::init(fused, rng));
    m.fpn = FpnParams::init({fused, fused, fused}, cfg.feature_dim, rng);
    m.obj_head = {rng.gaussian(cfg.feature_dim, 1, 0.2 / std::sqrt(double(cfg.feature_dim))),
                  Vecd::Zero(1)};
    m.box_head = LinearParams::zeros(cfg.feature_dim, 4);
    return m;
}

DetTargets make_det_targets(const std::vector<Box>& gt, Index grid) {
    DetTargets t;
    const Index n = grid * grid;
    t.obj = Vecd::Zero(n);
    t.box = Matd::Zero(n, 4);
    for (Index y = 0; y < grid; ++y) {
        for (Index x = 0; x < grid; ++x) {
            const double cx = static_cast<double>(x) + 0.5;
            const double cy = static_cast<double>(y) + 0.5;
            Index best = -1;
            double best_area = std::numeric_limits<double>::infinity();
            for (std::size_t g = 0; g < gt.size(); ++g) {
                const Box& b = gt[g];
                if (cx >= b.x1 && cx <= b.x2 && cy >= b.y1 && cy <= b.y2) {
                    const double area = (b.x2 - b.x1) * (b.y2 - b.y1);
                    if (area < best_area) {
                        best_area = area;
                        best = static_cast<Index>(g);
                    }
                }
            }
            if (best >= 0) {
                const Index cell = y * grid + x;
                const Box& b = gt[static_cast<std::size_t>(best)];
                t.obj(cell) = 1.0;
                t.box.row(cell) << b.x1 - cx, b.y1 - cy, b.x2 - cx, b.y2 - cy;
                t.positive_cells.push_back(cell);
            }
        }
    }
    return t;
}

DetLoss det_head_loss(const Matd& cell_feats, const LinearParams& obj_head,
                      const LinearParams& box_head, const DetTargets& targets, Matd* d_cell_feats,
                      LinearParams* d_obj, LinearParams* d_box) {
    const Index n = cell_feats.rows();
    require(targets.obj.size() == n, "det_head_loss: target size mismatch");
    const Matd logits = linear(cell_feats, obj_head);
    const Matd boxes = linear(cell_feats, box_head);

    DetLoss loss;
    for (Index i = 0; i < n; ++i) loss.bce += softplus(logits(i, 0)) - targets.obj(i) * logits(i, 0);
    loss.bce /= static_cast<double>(n);

    const Index n_pos = static_cast<Index>(targets.positive_cells.size());
    if (n_pos > 0) {
        for (Index cell : targets.positive_cells)
            loss.l1 += (boxes.row(cell) - targets.box.row(cell)).cwiseAbs().sum();
        loss.l1 /= static_cast<double>(4 * n_pos);
    }
    loss.total = loss.bce + loss.l1;
    if (!std::isfinite(loss.total)) throw NumericError("det_head_loss: non-finite loss");

    if (d_cell_feats || d_obj || d_box) {
        Matd dlogits(n, 1);
        for (Index i = 0; i < n; ++i)
            dlogits(i, 0) = (sigmoid_scalar(logits(i, 0)) - targets.obj(i)) / static_cast<double>(n);
        Matd dboxes = Matd::Zero(n, 4);
        if (n_pos > 0) {
            const double scale = 1.0 / static_cast<double>(4 * n_pos);
            for (Index cell : targets.positive_cells)
                for (Index j = 0; j < 4; ++j) {
                    const double r = boxes(cell, j) - targets.box(cell, j);
                    dboxes(cell, j) = (r > 0 ? scale : (r < 0 ? -scale : 0.0));
                }
        }
        LinearGrads lg;
        Matd dcells = linear_backward(cell_feats, obj_head, dlogits, lg);
        if (d_obj) {
            d_obj->W += lg.W;
            d_obj->b += lg.b;
        }
        dcells += linear_backward(cell_feats, box_head, dboxes, lg);
        if (d_box) {
            d_box->W += lg.W;
            d_box->b += lg.b;
        }
        if (d_cell_feats) *d_cell_feats = std::move(dcells);
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Trunk forward/backward (stage-1 training).
// ---------------------------------------------------------------------------

namespace {

struct TrunkCaches {
    std::vector<BlockCache> blocks;
    std::vector<Index> level_h, level_w, level_c;
    FpnCache fpn;
    std::vector<Tensor> fused_levels;
    Tensor merged;
};

Tensor trunk_forward(const SyntheticScene& scene, const Stage1Model& model, TrunkCaches* caches) {
    const std::vector<Tensor> rgb_levels = scene_levels(scene.rgb);
    const std::vector<Tensor> ir_levels = scene_levels(scene.ir);
    TrunkCaches local;
    TrunkCaches& c = caches ? *caches : local;
    c.blocks.resize(3);
    c.fused_levels.clear();
    c.level_h.clear();
    c.level_w.clear();
    c.level_c.clear();
    for (std::size_t l = 0; l < 3; ++l) {
        c.fused_levels.push_back(
            vrwkv_block_level(rgb_levels[l], ir_levels[l], model.blocks[l], &c.blocks[l]));
        c.level_c.push_back(c.fused_levels.back().dim(0));
        c.level_h.push_back(c.fused_levels.back().dim(1));
        c.level_w.push_back(c.fused_levels.back().dim(2));
    }
    c.merged = multi_scale_merge(c.fused_levels, model.fpn, &c.fpn);
    return c.merged;
}

void trunk_backward(const TrunkCaches& c, const Stage1Model& model, const Tensor& d_merged,
                    Stage1Model& grads) {
    const std::vector<Tensor> d_levels = multi_scale_merge_backward(c.fpn, model.fpn, d_merged, grads.fpn);
    for (std::size_t l = 0; l < 3; ++l) {
        const Matd d_tokens = chw_to_tokens(d_levels[l]);
        vrwkv_block_tokens_backward(c.blocks[l], model.blocks[l], d_tokens, grads.blocks[l]);
    }
}

void clamp_unit(Vecd& v) {
    v = v.cwiseMax(0.0).cwiseMin(1.0);
}

void clamp_mix_ratios(Stage1Model& m) {
    for (auto& b : m.blocks) {
        clamp_unit(b.spatial.mu_r);
        clamp_unit(b.spatial.mu_k);
        clamp_unit(b.spatial.mu_v);
        clamp_unit(b.channel.mu_r);
        clamp_unit(b.channel.mu_k);
    }
}

template <typename P>
double clipped_sgd_step(P& params, P& grads, double lr, double clip) {
    const double gnorm = std::sqrt(sq_norm(grads));
    double factor = lr;
    if (lr * gnorm > clip) factor = clip / gnorm;
    scale_add(params, grads, -factor);
    return factor * gnorm;  // norm of the applied step
}

template <typename P>
P zero_like(const P& p) {
    P z = p;
    set_zero(z);
    return z;
}

}  // namespace

DetLoss stage1_step(const SyntheticScene& scene, Stage1Model& model, const CurriculumConfig& cfg) {
    TrunkCaches caches;
    const Tensor merged = trunk_forward(scene, model, &caches);
    const Index grid = merged.dim(1);
    const Matd cells = chw_to_tokens(merged);
    const DetTargets targets = make_det_targets(scene.gt, grid);

    Stage1Model grads = zero_like(model);
    Matd d_cells;
    const DetLoss loss =
        det_head_loss(cells, model.obj_head, model.box_head, targets, &d_cells, &grads.obj_head,
                      &grads.box_head);
    const Tensor d_merged = tokens_to_chw(d_cells, merged.dim(0), merged.dim(1), merged.dim(2));
    trunk_backward(caches, model, d_merged, grads);
    clipped_sgd_step(model, grads, cfg.learning_rate, cfg.clip);
    clamp_mix_ratios(model);
    return loss;
}

// ---------------------------------------------------------------------------
// Evaluation: greedy IoU-0.5 matching of thresholded cells.
// ---------------------------------------------------------------------------

Stage1Eval evaluate_stage1_cells(const LinearParams& obj_head, const LinearParams& box_head,
                                 const std::vector<Matd>& scene_cells,
                                 const std::vector<DetTargets>& targets,
                                 const std::vector<std::vector<Box>>& gts, Index grid) {
    require(!scene_cells.empty(), "evaluate_stage1: at least one scene required");
    Stage1Eval eval;
    for (std::size_t s = 0; s < scene_cells.size(); ++s) {
        const Matd logits = linear(scene_cells[s], obj_head);
        const Matd boxes = linear(scene_cells[s], box_head);
        double scene_bce = 0.0;
        for (Index i = 0; i < logits.rows(); ++i)
            scene_bce += softplus(logits(i, 0)) - targets[s].obj(i) * logits(i, 0);
        eval.mean_bce += scene_bce / static_cast<double>(logits.rows());

        struct Pred {
            double score;
            Box box;
            bool valid;
        };
        std::vector<Pred> preds;
        for (Index cell = 0; cell < logits.rows(); ++cell) {
            const double score = sigmoid_scalar(logits(cell, 0));
            if (score < 0.5) continue;
            const double cx = static_cast<double>(cell % grid) + 0.5;
            const double cy = static_cast<double>(cell / grid) + 0.5;
            Box b{cx + boxes(cell, 0), cy + boxes(cell, 1), cx + boxes(cell, 2), cy + boxes(cell, 3), -1};
            preds.push_back({score, b, b.x2 > b.x1 && b.y2 > b.y1});
        }
        std::stable_sort(preds.begin(), preds.end(),
                         [](const Pred& a, const Pred& b) { return a.score > b.score; });
        std::vector<bool> matched(gts[s].size(), false);
        Index tp = 0, fp = 0;
        for (const Pred& p : preds) {
            double best = 0.5;
            Index best_g = -1;
            if (p.valid) {
                for (std::size_t g = 0; g < gts[s].size(); ++g) {
                    if (matched[g]) continue;
                    const double v = iou(p.box, gts[s][g]);
                    if (v >= best) {
                        best = v;
                        best_g = static_cast<Index>(g);
                    }
                }
            }
            if (best_g >= 0) {
                matched[static_cast<std::size_t>(best_g)] = true;
                ++tp;
            } else {
                ++fp;
            }
        }
        const Index fn = static_cast<Index>(gts[s].size()) - tp;
        const double denom = static_cast<double>(2 * tp + fp + fn);
        eval.f1 += denom == 0.0 ? 1.0 : 2.0 * static_cast<double>(tp) / denom;
    }
    eval.f1 /= static_cast<double>(scene_cells.size());
    eval.mean_bce /= static_cast<double>(scene_cells.size());
    return eval;
}

// ---------------------------------------------------------------------------
// Stage-2.
// ---------------------------------------------------------------------------

namespace {

struct SceneCache {
    Tensor merged;
    Tensor l2_fused;
    Matd cells;
    DetTargets targets;
    Vecd patch_obj;  // per-patch objectness target
    std::vector<Box> proposals;
    std::vector<Box> gt;
};

Vecd make_patch_targets(const std::vector<Box>& gt, Index grid, Index patch) {
    const Index hp = grid / patch;
    Vecd out = Vecd::Zero(hp * hp);
    for (const Box& b : gt) {
        const double cx = 0.5 * (b.x1 + b.x2);
        const double cy = 0.5 * (b.y1 + b.y2);
        const Index px = std::clamp<Index>(static_cast<Index>(cx) / patch, 0, hp - 1);
        const Index py = std::clamp<Index>(static_cast<Index>(cy) / patch, 0, hp - 1);
        out(py * hp + px) = 1.0;
    }
    return out;
}

std::vector<Box> make_proposals(const std::vector<Box>& gt, Index grid, Rng& rng) {
    std::vector<Box> out;
    for (const Box& b : gt) {
        out.push_back(b);
        for (int j = 0; j < 2; ++j) {
            const double dx = rng.uniform(-1.5, 1.5);
            const double dy = rng.uniform(-1.5, 1.5);
            Box jb{std::clamp(b.x1 + dx, 0.0, double(grid) - 1.0),
                   std::clamp(b.y1 + dy, 0.0, double(grid) - 1.0), 0, 0, -1};
            jb.x2 = std::min(double(grid), jb.x1 + (b.x2 - b.x1));
            jb.y2 = std::min(double(grid), jb.y1 + (b.y2 - b.y1));
            if (jb.x2 > jb.x1 && jb.y2 > jb.y1) out.push_back(jb);
        }
    }
    for (int j = 0; j < 2; ++j) {
        const double w = rng.uniform(2.0, 5.0), h = rng.uniform(2.0, 5.0);
        const double x1 = rng.uniform(0.0, double(grid) - w), y1 = rng.uniform(0.0, double(grid) - h);
        out.push_back({x1, y1, x1 + w, y1 + h, -1});
    }
    return out;
}

double bce_mean(const Matd& logits, const Vecd& y, Matd* dlogits) {
    const Index n = logits.rows();
    double loss = 0.0;
    for (Index i = 0; i < n; ++i) loss += softplus(logits(i, 0)) - y(i) * logits(i, 0);
    loss /= static_cast<double>(n);
    if (dlogits) {
        dlogits->resize(n, 1);
        for (Index i = 0; i < n; ++i)
            (*dlogits)(i, 0) = (sigmoid_scalar(logits(i, 0)) - y(i)) / static_cast<double>(n);
    }
    return loss;
}

Matd patch_ref_points(Index grid, Index patch) {
    const Index hp = grid / patch;
    Matd pts(hp * hp, 2);
    const double denom = static_cast<double>(grid - 1);
    for (Index py = 0; py < hp; ++py)
        for (Index px = 0; px < hp; ++px) {
            const double cx = static_cast<double>(px * patch) + 0.5 * static_cast<double>(patch - 1);
            const double cy = static_cast<double>(py * patch) + 0.5 * static_cast<double>(patch - 1);
            pts(py * hp + px, 0) = cx / denom;
            pts(py * hp + px, 1) = cy / denom;
        }
    return pts;
}

}  // namespace

CurriculumReport run_curriculum(const CurriculumConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CurriculumReport rep;
    Rng root(seed);
    Rng rng_model = root.split(1);
    Rng rng_proposals = root.split(4);
    Rng rng_state = root.split(5);

    // Stage-1 classes are the first half of the bank; stage-2 uses all.
    const Index s1_hi = std::max<Index>(0, cfg.classes / 2 - 1);
    auto train_scenes = [&](std::uint64_t stream, Index class_lo, Index class_hi) {
        Rng r = root.split(stream);
        return gen_scenes(r, cfg.n_scenes, cfg.grid, cfg.channels, class_lo, class_hi,
                          cfg.noise_sigma);
    };
    const std::vector<SyntheticScene> s1_scenes = train_scenes(2, 0, s1_hi);
    const std::vector<SyntheticScene> s2_scenes = train_scenes(3, 0, cfg.classes - 1);
    Rng rng_eval = root.split(6);
    const std::vector<SyntheticScene> eval_scenes =
        gen_scenes(rng_eval, cfg.n_eval_scenes, cfg.grid, cfg.channels, 0, s1_hi, cfg.noise_sigma);

    Stage1Model model = Stage1Model::init(cfg, rng_model);

    // Stage 1.
    rep.stage1_steps = cfg.stage1_steps;
    for (Index t = 0; t < cfg.stage1_steps; ++t) {
        const SyntheticScene& scene =
            s1_scenes[static_cast<std::size_t>(t) % s1_scenes.size()];
        const DetLoss loss = stage1_step(scene, model, cfg);
        if (t == 0) rep.stage1_initial_loss = loss.total;
        if (t + 1 == cfg.stage1_steps) rep.stage1_final_loss = loss.total;
    }

    // Frozen-trunk caches for stage-2 training and stage-1 retention evals.
    auto build_cache = [&](const SyntheticScene& scene, bool with_proposals) {
        SceneCache c;
        TrunkCaches tc;
        c.merged = trunk_forward(scene, model, &tc);
        c.l2_fused = tc.fused_levels[0];
        c.cells = chw_to_tokens(c.merged);
        c.targets = make_det_targets(scene.gt, cfg.grid);
        c.patch_obj = make_patch_targets(scene.gt, cfg.grid, cfg.patch);
        c.gt = scene.gt;
        if (with_proposals) c.proposals = make_proposals(scene.gt, cfg.grid, rng_proposals);
        return c;
    };
    std::vector<SceneCache> s2_cache, eval_cache;
    for (const auto& s : s2_scenes) s2_cache.push_back(build_cache(s, true));
    for (const auto& s : eval_scenes) eval_cache.push_back(build_cache(s, false));

    std::vector<Matd> eval_cells;
    std::vector<DetTargets> eval_targets;
    std::vector<std::vector<Box>> eval_gts;
    for (const auto& c : eval_cache) {
        eval_cells.push_back(c.cells);
        eval_targets.push_back(c.targets);
        eval_gts.push_back(c.gt);
    }
    {
        const Stage1Eval ev =
            evaluate_stage1_cells(model.obj_head, model.box_head, eval_cells, eval_targets, eval_gts,
                                  cfg.grid);
        rep.stage1_f1 = ev.f1;
    }

    // rho * K for the linear head family on the eval set, both computed:
    // K is the operator norm of the design matrix [cells | 1], rho comes from
    // the mean-BCE and mean-L1 structure of the loss.
    double rho_k = 0.0;
    for (const auto& c : eval_cache) {
        Matd design(c.cells.rows(), c.cells.cols() + 1);
        design << c.cells, Vecd::Ones(c.cells.rows());
        const double k_s = operator_norm(design);
        const double n = static_cast<double>(c.cells.rows());
        const double p = static_cast<double>(std::max<std::size_t>(c.targets.positive_cells.size(), 1));
        const double rho_s = std::sqrt(1.0 / n + 1.0 / (4.0 * p));
        rho_k = std::max(rho_k, rho_s * k_s);
    }
    rep.rho_k_coeff = rho_k;

    // Stage-2 trainables; the detection head carries over and keeps training.
    const Index d = cfg.feature_dim;
    const Index flat_patch = 2 * cfg.channels * cfg.patch * cfg.patch;
    Stage2Trainables train;
    train.obj_head = model.obj_head;
    train.box_head = model.box_head;
    train.patch_proj = {rng_model.gaussian(flat_patch, d, 0.3 / std::sqrt(double(flat_patch))),
                        Vecd::Zero(d)};
    train.exchange = ExchangeParams::init(d, rng_model);
    train.sampler = ModulatedSampleParams::init(d, cfg.classes, cfg.k_points, d, rng_model);
    for (Index i = 0; i < cfg.k_heads; ++i) {
        train.enc_heads.push_back(
            {rng_model.gaussian(d, 1, 0.2 / std::sqrt(double(d))), Vecd::Zero(1)});
        train.dec_heads.push_back(
            {rng_model.gaussian(d, 1, 0.2 / std::sqrt(double(d))), Vecd::Zero(1)});
    }
    train.projector = ProjectorParams::init(d, cfg.proj_hidden, cfg.proj_dim, rng_model);
    train.alpha = Vecd::Zero(1);

    Stage2Trainables ema_branch = train;

    TextBank bank = TextBank::synthetic(cfg.classes, d, rng_model, /*normalize=*/true);

    ContrastState cstate(d, cfg.proj_hidden, cfg.proj_dim, cfg.queue_k, rng_state);
    cstate.tau = cfg.tau;
    cstate.m = cfg.momentum;
    cstate.lambda_i2t = cfg.lambda_i2t;
    cstate.lambda_t2i = cfg.lambda_t2i;

    const Matd ref_points = patch_ref_points(cfg.grid, cfg.patch);
    SamplingSpec spec{cfg.k_points, ref_points};
    const double lag_coef = lag_bound_coefficient(1.0 - cfg.momentum);

    auto stage1_eval_loss = [&](const LinearParams& obj, const LinearParams& box) {
        double total = 0.0;
        for (const auto& c : eval_cache)
            total += det_head_loss(c.cells, obj, box, c.targets).total;
        return total / static_cast<double>(eval_cache.size());
    };

    double max_delta = 0.0;
    for (Index t = 0; t < cfg.stage2_steps; ++t) {
        const SceneCache& sc = s2_cache[static_cast<std::size_t>(t) % s2_cache.size()];
        Stage2StepLog log;
        log.step = t;

        Stage2Trainables grads = zero_like(train);

        // Main detection loss on the merged map.
        {
            const DetLoss dl = det_head_loss(sc.cells, train.obj_head, train.box_head, sc.targets,
                                             nullptr, &grads.obj_head, &grads.box_head);
            log.det = dl.total;
        }

        // Encoder auxiliary heads on the merged map.
        for (Index i = 0; i < cfg.k_heads; ++i) {
            Matd dlogits;
            const Matd logits = linear(sc.cells, train.enc_heads[static_cast<std::size_t>(i)]);
            log.aux_enc += bce_mean(logits, sc.targets.obj, &dlogits);
            LinearGrads lg;
            linear_backward(sc.cells, train.enc_heads[static_cast<std::size_t>(i)], dlogits, lg);
            grads.enc_heads[static_cast<std::size_t>(i)].W += lg.W;
            grads.enc_heads[static_cast<std::size_t>(i)].b += lg.b;
        }

        // Exchange rounds and per-round text-modulated sampling feeding the
        // decoder auxiliary heads.
        PatchEmbedCache pe_cache;
        const PatchTokens patches = patch_embed(sc.l2_fused, cfg.patch, train.patch_proj, &pe_cache);
        SemanticFusionCache fus_cache;
        semantic_fusion(patches.m, bank.t_clip, cfg.l_dec, train.exchange, &fus_cache);

        const double aux_scale = cfg.lambda_aux * cfg.lambda_1;
        std::vector<Matd> dm_rounds(static_cast<std::size_t>(cfg.l_dec));
        std::vector<Matd> dt_rounds(static_cast<std::size_t>(cfg.l_dec));
        for (Index l = 0; l < cfg.l_dec; ++l) {
            ModulatedSampleCache ms_cache;
            const Matd& m_l = fus_cache.m_round[static_cast<std::size_t>(l)];
            const Matd& t_l = fus_cache.t_round[static_cast<std::size_t>(l)];
            const Matd sampled = modulated_sample(m_l, t_l, sc.merged, spec, train.sampler, &ms_cache);
            Matd d_sampled = Matd::Zero(sampled.rows(), sampled.cols());
            for (Index i = 0; i < cfg.k_heads; ++i) {
                Matd dlogits;
                const Matd logits = linear(sampled, train.dec_heads[static_cast<std::size_t>(i)]);
                log.aux_dec += bce_mean(logits, sc.patch_obj, &dlogits);
                LinearGrads lg;
                d_sampled += aux_scale *
                             linear_backward(sampled, train.dec_heads[static_cast<std::size_t>(i)],
                                             dlogits, lg);
                grads.dec_heads[static_cast<std::size_t>(i)].W += aux_scale * lg.W;
                grads.dec_heads[static_cast<std::size_t>(i)].b += aux_scale * lg.b;
            }
            ModulatedSampleParams sampler_grads = zero_like(train.sampler);
            const ModulatedSampleInputGrads ig =
                modulated_sample_backward(ms_cache, spec, train.sampler, d_sampled, sampler_grads);
            scale_add(grads.sampler, sampler_grads, 1.0);
            dm_rounds[static_cast<std::size_t>(l)] = ig.dq;
            dt_rounds[static_cast<std::size_t>(l)] = ig.dt;
        }
        {
            ExchangeParams ex_grads = zero_like(train.exchange);
            const ExchangeInputGrads eg = semantic_fusion_backward_rounds(
                fus_cache, train.exchange, dm_rounds, dt_rounds, ex_grads);
            scale_add(grads.exchange, ex_grads, 1.0);
            patch_embed_backward(pe_cache, eg.dm, grads.patch_proj);
        }

        // Contrastive alignment on RoI features of the merged map.
        ContrastBatch batch;
        {
            const auto pos = select_positives(sc.proposals, sc.gt, cfg.tau_iou);
            std::vector<int> present;
            if (!pos.empty()) {
                batch.region_feats.resize(static_cast<Index>(pos.size()), d);
                for (std::size_t r = 0; r < pos.size(); ++r) {
                    batch.region_feats.row(static_cast<Index>(r)) =
                        roi_mean_pool(sc.merged, sc.proposals[static_cast<std::size_t>(pos[r].first)])
                            .transpose();
                    const int cls = sc.gt[static_cast<std::size_t>(pos[r].second)].class_id;
                    batch.region_classes.push_back(cls);
                    if (std::find(present.begin(), present.end(), cls) == present.end())
                        present.push_back(cls);
                }
                std::sort(present.begin(), present.end());
                batch.text_feats.resize(static_cast<Index>(present.size()), d);
                for (std::size_t j = 0; j < present.size(); ++j) {
                    batch.text_feats.row(static_cast<Index>(j)) = bank.t_clip.row(present[j]);
                    batch.text_classes.push_back(present[j]);
                }
            }
        }
        cstate.theta = train.projector;
        cstate.alpha = train.alpha(0);
        ProjectorParams proj_grads = zero_like(train.projector);
        double dalpha = 0.0;
        const ContrastStepResult cres = contrastive_loss(batch, cstate, &proj_grads, &dalpha);
        log.contrast_i2t = cres.loss_i2t;
        log.contrast_t2i = cres.loss_t2i;
        log.contrast = cres.loss;
        scale_add(grads.projector, proj_grads, cfg.lambda_c);
        grads.alpha(0) += cfg.lambda_c * dalpha;

        // Aux losses above were accumulated into grads with their weights for
        // the decoder path; encoder and detection paths are weighted here.
        for (Index i = 0; i < cfg.k_heads; ++i) {
            grads.enc_heads[static_cast<std::size_t>(i)].W *= cfg.lambda_aux;
            grads.enc_heads[static_cast<std::size_t>(i)].b *= cfg.lambda_aux;
        }
        const double aux_total = log.aux_enc + cfg.lambda_1 * log.aux_dec;
        log.total = log.det + cfg.lambda_c * log.contrast + cfg.lambda_aux * aux_total;

        // Optimizer step with the global clip, then the EMA branch.
        log.delta_t = clipped_sgd_step(train, grads, cfg.learning_rate, cfg.clip);
        max_delta = std::max(max_delta, log.delta_t);
        ema_mix(ema_branch, train, cfg.momentum);

        // Contrast state updates in algorithmic order: the keys the loss used
        // (a function of theta_m only), then the projector EMA, then pushes.
        if (!cres.skipped) {
            const Matd r_k = normalize_rows(projector_forward(batch.region_feats, cstate.theta_m));
            const Matd t_k = normalize_rows(projector_forward(batch.text_feats, cstate.theta_m));
            cstate.theta = train.projector;
            cstate.alpha = train.alpha(0);
            ema_mix(cstate.theta_m, cstate.theta, cstate.m);
            cstate.q_region.push(r_k, batch.region_classes);
            cstate.q_text.push(t_k, batch.text_classes);
        }

        // Theorem bookkeeping on the full trainable vector.
        {
            Vecd online = to_vector(train);
            Vecd slow = to_vector(ema_branch);
            log.lag = (online - slow).norm();
        }
        log.loss_gap = std::abs(stage1_eval_loss(ema_branch.obj_head, ema_branch.box_head) -
                                stage1_eval_loss(train.obj_head, train.box_head));
        const double raw_bound = rho_k * lag_coef * max_delta;
        log.bound = std::isfinite(raw_bound) ? raw_bound : std::numeric_limits<double>::max();
        log.gap_ok = log.loss_gap <= log.bound + 1e-12;
        if (!log.gap_ok) rep.bounds_ok = false;

        {
            const Stage1Eval online_ev = evaluate_stage1_cells(
                train.obj_head, train.box_head, eval_cells, eval_targets, eval_gts, cfg.grid);
            const Stage1Eval slow_ev = evaluate_stage1_cells(
                ema_branch.obj_head, ema_branch.box_head, eval_cells, eval_targets, eval_gts, cfg.grid);
            log.online_f1 = online_ev.f1;
            log.momentum_f1 = slow_ev.f1;
        }

        const double recombined =
            log.det + cfg.lambda_c * (cfg.lambda_i2t * log.contrast_i2t +
                                      cfg.lambda_t2i * log.contrast_t2i) +
            cfg.lambda_aux * (log.aux_enc + cfg.lambda_1 * log.aux_dec);
        if (std::abs(recombined - log.total) > 1e-10) rep.additivity_ok = false;

        rep.stage2.push_back(log);
    }

    rep.pass = rep.bounds_ok && rep.additivity_ok;
    return rep;
}

std::string curriculum_report_to_json(const CurriculumReport& rep) {
    json j;
    j["stage1"] = {{"steps", rep.stage1_steps},
                   {"initial_loss", rep.stage1_initial_loss},
                   {"final_loss", rep.stage1_final_loss},
                   {"f1", rep.stage1_f1}};
    j["rho_k_coeff"] = rep.rho_k_coeff;
    j["stage2"] = json::array();
    for (const auto& s : rep.stage2) {
        j["stage2"].push_back({{"step", s.step},
                               {"total", s.total},
                               {"det", s.det},
                               {"contrast_i2t", s.contrast_i2t},
                               {"contrast_t2i", s.contrast_t2i},
                               {"aux_enc", s.aux_enc},
                               {"aux_dec", s.aux_dec},
                               {"delta_t", s.delta_t},
                               {"lag", s.lag},
                               {"loss_gap", s.loss_gap},
                               {"bound", s.bound},
                               {"online_f1", s.online_f1},
                               {"momentum_f1", s.momentum_f1}});
    }
    j["additivity_ok"] = rep.additivity_ok;
    j["bounds_ok"] = rep.bounds_ok;
    j["pass"] = rep.pass;
    return j.dump(2);
}

}  // namespace c3owd
