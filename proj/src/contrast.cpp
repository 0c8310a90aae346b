#include "c3owd/contrast.hpp"

#include <algorithm>
#include <cmath>

namespace c3owd {

double iou(const Box& a, const Box& b) {
    require(a.x2 > a.x1 && a.y2 > a.y1 && b.x2 > b.x1 && b.y2 > b.y1, "iou: boxes need positive area");
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
    const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    return inter / (area_a + area_b - inter);
}

std::vector<std::pair<Index, Index>> select_positives(const std::vector<Box>& proposals,
                                                      const std::vector<Box>& gt, double tau_iou) {
    require(tau_iou > 0.0 && tau_iou <= 1.0, "select_positives: tau_iou must be in (0, 1]");
    std::vector<std::pair<Index, Index>> out;
    if (gt.empty()) return out;
    for (std::size_t p = 0; p < proposals.size(); ++p) {
        double best = -1.0;
        Index best_gt = 0;
        for (std::size_t g = 0; g < gt.size(); ++g) {
            const double v = iou(proposals[p], gt[g]);
            if (v > best) {
                best = v;
                best_gt = static_cast<Index>(g);
            }
        }
        if (best >= tau_iou) out.emplace_back(static_cast<Index>(p), best_gt);
    }
    return out;
}

Vecd ema_update(const Vecd& theta_m, const Vecd& theta, double m) {
    require(theta_m.size() == theta.size(), "ema_update: shape mismatch");
    require(m >= 0.0 && m <= 1.0, "ema_update: m must be in [0, 1]");
    return m * theta_m + (1.0 - m) * theta;
}

FeatureQueue::FeatureQueue(Index capacity, Index dim, Rng& rng) {
    require(capacity >= 1 && dim >= 1, "FeatureQueue: positive capacity and dim required");
    storage_ = rng.gaussian(capacity, dim);
    storage_ = normalize_rows(storage_);
    ids_.assign(static_cast<std::size_t>(capacity), kSentinelClass);
}

void FeatureQueue::push(const Matd& batch, const std::vector<int>& class_ids) {
    const Index b = batch.rows();
    require(b <= capacity(), "FeatureQueue::push: batch larger than capacity");
    require(static_cast<Index>(class_ids.size()) == b, "FeatureQueue::push: one class id per row");
    const Matd unit = normalize_rows(batch);
    for (Index i = 0; i < b; ++i) {
        storage_.row(cursor_) = unit.row(i);
        ids_[static_cast<std::size_t>(cursor_)] = class_ids[static_cast<std::size_t>(i)];
        cursor_ = (cursor_ + 1) % capacity();
    }
    fill_ = std::min(fill_ + b, capacity());
}

Matd similarity_logits(const Matd& queries, const Matd& keys, double alpha) {
    require(queries.cols() == keys.cols(), "similarity_logits: feature width mismatch");
    const Matd q = normalize_rows(queries);
    const Matd k = normalize_rows(keys);
    return q * k.transpose() * std::exp(alpha);
}

namespace {

double row_lse(const Eigen::RowVectorXd& scaled, const std::vector<Index>* subset) {
    double m = -std::numeric_limits<double>::infinity();
    if (subset) {
        for (Index j : *subset) m = std::max(m, scaled(j));
    } else {
        m = scaled.maxCoeff();
    }
    double sum = 0.0;
    if (subset) {
        for (Index j : *subset) sum += std::exp(scaled(j) - m);
    } else {
        for (Index j = 0; j < scaled.size(); ++j) sum += std::exp(scaled(j) - m);
    }
    return m + std::log(sum);
}

}  // namespace

double info_nce_multi_pos(const Matd& s, const std::vector<std::vector<Index>>& positives,
                          double tau) {
    require(tau > 0.0, "info_nce: tau must be positive");
    require(static_cast<Index>(positives.size()) == s.rows(), "info_nce: one positive set per row");
    require_finite(s, "info_nce logits");
    double total = 0.0;
    for (Index i = 0; i < s.rows(); ++i) {
        const auto& pos = positives[static_cast<std::size_t>(i)];
        require(!pos.empty(), "info_nce: empty positive set for row " + std::to_string(i));
        for (Index j : pos) require(j >= 0 && j < s.cols(), "info_nce: positive index out of range");
        const Eigen::RowVectorXd scaled = s.row(i) / tau;
        total += row_lse(scaled, nullptr) - row_lse(scaled, &pos);
    }
    return total / static_cast<double>(s.rows());
}

Matd info_nce_multi_pos_backward(const Matd& s, const std::vector<std::vector<Index>>& positives,
                                 double tau) {
    const double inv_n = 1.0 / static_cast<double>(s.rows());
    Matd ds = Matd::Zero(s.rows(), s.cols());
    for (Index i = 0; i < s.rows(); ++i) {
        const auto& pos = positives[static_cast<std::size_t>(i)];
        const Eigen::RowVectorXd scaled = s.row(i) / tau;
        const double lse_all = row_lse(scaled, nullptr);
        const double lse_pos = row_lse(scaled, &pos);
        for (Index j = 0; j < s.cols(); ++j) ds(i, j) = std::exp(scaled(j) - lse_all);
        for (Index j : pos) ds(i, j) -= std::exp(scaled(j) - lse_pos);
        ds.row(i) *= inv_n / tau;
    }
    return ds;
}

ProjectorParams ProjectorParams::init(Index in, Index hidden, Index out, Rng& rng, double scale) {
    ProjectorParams p;
    p.l1 = {rng.gaussian(in, hidden, scale / std::sqrt(static_cast<double>(in))), Vecd::Zero(hidden)};
    p.l2 = {rng.gaussian(hidden, out, scale / std::sqrt(static_cast<double>(hidden))), Vecd::Zero(out)};
    return p;
}

Matd projector_forward(const Matd& x, const ProjectorParams& p, ProjectorCache* cache) {
    ProjectorCache local;
    ProjectorCache& c = cache ? *cache : local;
    c.in = x;
    c.a1 = linear(x, p.l1).array().tanh();
    c.out = linear(c.a1, p.l2);
    return c.out;
}

Matd projector_backward(const ProjectorCache& c, const ProjectorParams& p, const Matd& dy,
                        ProjectorParams& grads) {
    LinearGrads lg;
    const Matd da1 = linear_backward(c.a1, p.l2, dy, lg);
    grads.l2.W += lg.W;
    grads.l2.b += lg.b;
    const Matd dz1 = da1.array() * (1.0 - c.a1.array().square());
    const Matd dx = linear_backward(c.in, p.l1, dz1, lg);
    grads.l1.W += lg.W;
    grads.l1.b += lg.b;
    return dx;
}

ContrastState::ContrastState(Index in, Index hidden, Index proj, Index queue_capacity, Rng& rng)
    : theta(ProjectorParams::init(in, hidden, proj, rng)),
      theta_m(theta),
      q_region(queue_capacity, proj, rng),
      q_text(queue_capacity, proj, rng) {}

double ContrastState::theta_lag_norm() {
    Vecd a = to_vector(theta);
    Vecd b = to_vector(theta_m);
    return (a - b).norm();
}

namespace {

struct Keys {
    Matd features;            // (N_batch + K) x D_proj, rows already unit norm
    std::vector<int> classes;
};

Keys build_keys(const Matd& batch_keys, const std::vector<int>& batch_classes,
                const FeatureQueue& queue) {
    Keys k;
    k.features.resize(batch_keys.rows() + queue.capacity(), batch_keys.cols());
    k.features << batch_keys, queue.storage();
    k.classes = batch_classes;
    k.classes.insert(k.classes.end(), queue.class_ids().begin(), queue.class_ids().end());
    return k;
}

std::vector<std::vector<Index>> class_positives(const std::vector<int>& query_classes,
                                                const std::vector<int>& key_classes) {
    std::vector<std::vector<Index>> pos(query_classes.size());
    for (std::size_t i = 0; i < query_classes.size(); ++i)
        for (std::size_t j = 0; j < key_classes.size(); ++j)
            if (key_classes[j] != FeatureQueue::kSentinelClass && key_classes[j] == query_classes[i])
                pos[i].push_back(static_cast<Index>(j));
    return pos;
}

}  // namespace

namespace {

ContrastStepResult contrastive_loss_impl(const ContrastBatch& batch, ContrastState& state,
                                         ProjectorParams* dtheta, double* dalpha, Matd* out_r_k,
                                         Matd* out_t_k) {
    ContrastStepResult res;
    res.n_regions = batch.region_feats.rows();
    if (batch.region_feats.rows() == 0 || batch.text_feats.rows() == 0) {
        res.skipped = true;
        res.theta_lag_norm = state.theta_lag_norm();
        return res;
    }
    require(static_cast<Index>(batch.region_classes.size()) == batch.region_feats.rows(),
            "contrastive_loss: one class per region row");
    require(static_cast<Index>(batch.text_classes.size()) == batch.text_feats.rows(),
            "contrastive_loss: one class per text row");

    // Online queries.
    ProjectorCache rc, tc;
    const Matd zr = projector_forward(batch.region_feats, state.theta, &rc);
    const Matd zt = projector_forward(batch.text_feats, state.theta, &tc);
    const Matd r_q = normalize_rows(zr);
    const Matd t_q = normalize_rows(zt);

    // Momentum keys; constants on the gradient path.
    const Matd r_k = normalize_rows(projector_forward(batch.region_feats, state.theta_m));
    const Matd t_k = normalize_rows(projector_forward(batch.text_feats, state.theta_m));
    if (out_r_k) *out_r_k = r_k;
    if (out_t_k) *out_t_k = t_k;
    const Keys text_keys = build_keys(t_k, batch.text_classes, state.q_text);
    const Keys region_keys = build_keys(r_k, batch.region_classes, state.q_region);

    const double scale = std::exp(state.alpha);
    const Matd s_i2t = r_q * text_keys.features.transpose() * scale;
    const Matd s_t2i = t_q * region_keys.features.transpose() * scale;

    const auto pos_i2t = class_positives(batch.region_classes, text_keys.classes);
    const auto pos_t2i = class_positives(batch.text_classes, region_keys.classes);

    res.loss_i2t = info_nce_multi_pos(s_i2t, pos_i2t, state.tau);
    res.loss_t2i = info_nce_multi_pos(s_t2i, pos_t2i, state.tau);
    res.loss = state.lambda_i2t * res.loss_i2t + state.lambda_t2i * res.loss_t2i;
    res.theta_lag_norm = state.theta_lag_norm();

    if (dtheta || dalpha) {
        const Matd ds_i2t = state.lambda_i2t * info_nce_multi_pos_backward(s_i2t, pos_i2t, state.tau);
        const Matd ds_t2i = state.lambda_t2i * info_nce_multi_pos_backward(s_t2i, pos_t2i, state.tau);
        if (dalpha)
            *dalpha += (ds_i2t.array() * s_i2t.array()).sum() + (ds_t2i.array() * s_t2i.array()).sum();
        if (dtheta) {
            const Matd dr_q = ds_i2t * text_keys.features * scale;
            const Matd dt_q = ds_t2i * region_keys.features * scale;
            projector_backward(rc, state.theta, normalize_rows_backward(zr, dr_q), *dtheta);
            projector_backward(tc, state.theta, normalize_rows_backward(zt, dt_q), *dtheta);
        }
    }
    return res;
}

}  // namespace

ContrastStepResult contrastive_loss(const ContrastBatch& batch, ContrastState& state,
                                    ProjectorParams* dtheta, double* dalpha) {
    return contrastive_loss_impl(batch, state, dtheta, dalpha, nullptr, nullptr);
}

ContrastStepResult contrastive_step(const ContrastBatch& batch, ContrastState& state,
                                    ProjectorParams* dtheta, double* dalpha) {
    Matd r_k, t_k;
    ContrastStepResult res = contrastive_loss_impl(batch, state, dtheta, dalpha, &r_k, &t_k);
    if (res.skipped) return res;

    // Order: loss -> momentum update -> enqueue of the keys the loss used.
    ema_mix(state.theta_m, state.theta, state.m);
    state.q_region.push(r_k, batch.region_classes);
    state.q_text.push(t_k, batch.text_classes);
    return res;
}

Vecd roi_mean_pool(const Tensor& map, const Box& box) {
    require(map.rank() == 3, "roi_mean_pool: [C, H, W] tensor required");
    const Index c = map.dim(0), h = map.dim(1), w = map.dim(2);
    Index y_lo = static_cast<Index>(std::floor(box.y1));
    Index y_hi = static_cast<Index>(std::ceil(box.y2));
    Index x_lo = static_cast<Index>(std::floor(box.x1));
    Index x_hi = static_cast<Index>(std::ceil(box.x2));
    y_lo = std::clamp<Index>(y_lo, 0, h - 1);
    x_lo = std::clamp<Index>(x_lo, 0, w - 1);
    y_hi = std::clamp<Index>(y_hi, y_lo + 1, h);
    x_hi = std::clamp<Index>(x_hi, x_lo + 1, w);
    Vecd out = Vecd::Zero(c);
    for (Index ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (Index y = y_lo; y < y_hi; ++y)
            for (Index x = x_lo; x < x_hi; ++x) sum += map({ch, y, x});
        out(ch) = sum / static_cast<double>((y_hi - y_lo) * (x_hi - x_lo));
    }
    return out;
}

}  // namespace c3owd
