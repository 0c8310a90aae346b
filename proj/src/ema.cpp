#include "c3owd/ema.hpp"

#include <cmath>
#include <limits>

#include "c3owd/contrast.hpp"
#include "c3owd/grad_check.hpp"

namespace c3owd {

EmaTrace ema_track(const std::vector<Vecd>& trajectory, double m) {
    require(!trajectory.empty(), "ema_track: empty trajectory");
    require(m > 0.0 && m <= 1.0, "ema_track: m must be in (0, 1]");
    EmaTrace trace;
    trace.m = m;
    trace.thetas = trajectory;
    trace.theta_ms.reserve(trajectory.size());
    trace.deltas = Vecd::Zero(static_cast<Index>(trajectory.size()));
    trace.theta_ms.push_back(trajectory.front());
    for (std::size_t t = 1; t < trajectory.size(); ++t) {
        trace.deltas(static_cast<Index>(t)) = (trajectory[t] - trajectory[t - 1]).norm();
        trace.theta_ms.push_back((1.0 - m) * trace.theta_ms.back() + m * trajectory[t]);
    }
    return trace;
}

double lag_bound_coefficient(double m) {
    if (m <= 0.0) return std::numeric_limits<double>::infinity();
    return (1.0 - m) / m;
}

LagReport lag_bound_check(const EmaTrace& trace) {
    LagReport rep;
    const double coef = lag_bound_coefficient(trace.m);
    double max_step = 0.0;
    for (std::size_t t = 1; t < trace.thetas.size(); ++t) {
        max_step = std::max(max_step, trace.deltas(static_cast<Index>(t)));
        const double lag = (trace.thetas[t] - trace.theta_ms[t]).norm();
        const double bound = coef * max_step;
        rep.max_lag = std::max(rep.max_lag, lag);
        rep.bound = bound;
        if (bound > 0.0) rep.ratio = std::max(rep.ratio, lag / bound);
        if (lag > bound + 1e-12) rep.pass = false;
    }
    return rep;
}

Matd LayerNet::forward(const Matd& x) const {
    require(!weights.empty(), "LayerNet: no layers");
    Matd h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        h = h * weights[l];
        if (l + 1 == weights.size()) break;
        switch (act) {
            case Activation::identity: break;
            case Activation::tanh_act: h = h.array().tanh(); break;
            case Activation::relu: h = h.array().max(0.0); break;
            case Activation::squared_relu: h = squared_relu<double>(h); break;
        }
    }
    return h;
}

Index LayerNet::param_count() const {
    Index n = 0;
    for (const auto& w : weights) n += w.size();
    return n;
}

Vecd LayerNet::get_params() const {
    Vecd v(param_count());
    Index at = 0;
    for (const auto& w : weights) {
        v.segment(at, w.size()) = Eigen::Map<const Vecd>(w.data(), w.size());
        at += w.size();
    }
    return v;
}

void LayerNet::set_params(const Vecd& v) {
    require(v.size() == param_count(), "LayerNet::set_params: size mismatch");
    Index at = 0;
    for (auto& w : weights) {
        Eigen::Map<Vecd>(w.data(), w.size()) = v.segment(at, w.size());
        at += w.size();
    }
}

double operator_norm(const Matd& w, int iters, double tol) {
    require(w.rows() >= 1 && w.cols() >= 1, "operator_norm: empty matrix");
    Vecd v(w.cols());
    for (Index i = 0; i < v.size(); ++i) v(i) = 1.0 + 0.01 * static_cast<double>(i);
    v.normalize();
    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        const Vecd u = w * v;
        const double s = u.norm();
        if (s == 0.0) return 0.0;
        Vecd v_next = w.transpose() * u;
        const double n = v_next.norm();
        if (n == 0.0) return 0.0;
        v = v_next / n;
        if (std::abs(s - sigma) <= tol * std::max(1.0, s)) {
            sigma = s;
            break;
        }
        sigma = s;
    }
    return (w * v).norm();
}

namespace {

double lipschitz_from_norms(const std::vector<double>& a, double input_norm, double normalize_floor) {
    double product = 1.0;
    for (double v : a) product *= v;
    // Cauchy-Schwarz constant for joint perturbation of all layers.
    double cs_sq = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        double c = 1.0;
        for (std::size_t j = 0; j < a.size(); ++j)
            if (j != l) c *= a[j];
        cs_sq += c * c;
    }
    double k = input_norm * std::max(product, std::sqrt(cs_sq));
    if (normalize_floor > 0.0) k *= 2.0 / normalize_floor;
    return k;
}

}  // namespace

double lipschitz_upper_bound(const std::vector<Matd>& layer_weights, Activation act,
                             double input_norm, double normalize_floor) {
    require(!layer_weights.empty(), "lipschitz_upper_bound: no layers");
    require(act != Activation::squared_relu,
            "lipschitz_upper_bound: activation is not 1-Lipschitz");
    std::vector<double> a;
    a.reserve(layer_weights.size());
    for (const auto& w : layer_weights) a.push_back(operator_norm(w));
    return lipschitz_from_norms(a, input_norm, normalize_floor);
}

BoundCheckReport function_consistency_check(const EmaTrace& trace, const LayerNet& shape,
                                            const Matd& eval_inputs) {
    require(eval_inputs.rows() >= 1, "function_consistency_check: need eval inputs");
    BoundCheckReport rep;
    const double coef = lag_bound_coefficient(trace.m);

    // Per-layer operator norms maxed over both branches of the whole trace.
    LayerNet net = shape;
    std::vector<double> a(net.weights.size(), 0.0);
    for (std::size_t t = 0; t < trace.thetas.size(); ++t) {
        for (int branch = 0; branch < 2; ++branch) {
            net.set_params(branch == 0 ? trace.thetas[t] : trace.theta_ms[t]);
            for (std::size_t l = 0; l < net.weights.size(); ++l)
                a[l] = std::max(a[l], operator_norm(net.weights[l]));
        }
    }
    double input_norm = 0.0;
    for (Index r = 0; r < eval_inputs.rows(); ++r)
        input_norm = std::max(input_norm, eval_inputs.row(r).norm());
    rep.k_constant = lipschitz_from_norms(a, input_norm, 0.0);

    LayerNet net_m = shape;
    double max_step = 0.0;
    for (std::size_t t = 1; t < trace.thetas.size(); ++t) {
        max_step = std::max(max_step, trace.deltas(static_cast<Index>(t)));
        net.set_params(trace.thetas[t]);
        net_m.set_params(trace.theta_ms[t]);
        const Matd diff = net.forward(eval_inputs) - net_m.forward(eval_inputs);
        const double measured = diff.rowwise().norm().mean();
        const double bound = rep.k_constant * coef * max_step;
        rep.max_measured = std::max(rep.max_measured, measured);
        rep.bound = bound;
        if (bound > 0.0) rep.ratio = std::max(rep.ratio, measured / bound);
        if (measured > bound + 1e-12) {
            rep.pass = false;
            ++rep.violations;
        }
    }
    return rep;
}

BoundCheckReport loss_gap_check(const EmaTrace& trace, const std::function<double(const Vecd&)>& loss,
                                double rho, double k_sum) {
    require(rho > 0.0, "loss_gap_check: rho must be positive");
    BoundCheckReport rep;
    rep.k_constant = k_sum;
    const double coef = lag_bound_coefficient(trace.m);
    double max_step = 0.0;
    for (std::size_t t = 1; t < trace.thetas.size(); ++t) {
        max_step = std::max(max_step, trace.deltas(static_cast<Index>(t)));
        const double gap = std::abs(loss(trace.theta_ms[t]) - loss(trace.thetas[t]));
        const double bound = rho * k_sum * coef * max_step;
        rep.max_measured = std::max(rep.max_measured, gap);
        rep.bound = bound;
        if (bound > 0.0) rep.ratio = std::max(rep.ratio, gap / bound);
        if (gap > bound + 1e-12) {
            rep.pass = false;
            ++rep.violations;
        }
    }
    return rep;
}

LagTrialReport run_lag_trials(const LagTrialConfig& cfg) {
    require(cfg.m >= 0.05, "run_lag_trials: m below 0.05 is outside the harness range");
    LagTrialReport rep;
    Rng root(cfg.seed);
    for (Index trial = 0; trial < cfg.trials; ++trial) {
        Rng rng = root.split(static_cast<std::uint64_t>(trial));
        std::vector<Vecd> traj;
        traj.reserve(static_cast<std::size_t>(cfg.steps) + 1);
        traj.push_back(rng.gaussian_vec(cfg.dim));
        for (Index t = 0; t < cfg.steps; ++t) {
            Vecd dir = rng.gaussian_vec(cfg.dim);
            dir.normalize();
            traj.push_back(traj.back() + dir * (cfg.max_step * rng.uniform()));
        }
        const LagReport lag = lag_bound_check(ema_track(traj, cfg.m));
        if (!lag.pass) ++rep.violations;
        rep.max_ratio = std::max(rep.max_ratio, lag.ratio);
        ++rep.trials;
    }
    return rep;
}

double constant_step_lag(double m, double delta, Index steps) {
    double theta = 0.0, theta_m = 0.0;
    for (Index t = 0; t < steps; ++t) {
        theta += delta;
        theta_m = (1.0 - m) * theta_m + m * theta;
    }
    return std::abs(theta - theta_m);
}

// ---------------------------------------------------------------------------
// Loss-gap experiment: 2-layer bias-free tanh projector with L2-normalized
// outputs feeding bidirectional multi-positive InfoNCE against fixed unit
// negatives, driven by clipped gradient descent.
// ---------------------------------------------------------------------------

namespace {

struct GapProblem {
    Matd x_regions, x_texts;
    Matd fixed_text_keys, fixed_region_keys;  // unit rows, never positive
    std::vector<std::vector<Index>> pos_i2t, pos_t2i;
    double tau;

    double loss_at(LayerNet& net, const Vecd& params, double* min_prenorm) const {
        net.set_params(params);
        const Matd zr = net.forward(x_regions);
        const Matd zt = net.forward(x_texts);
        if (min_prenorm) {
            for (Index r = 0; r < zr.rows(); ++r) *min_prenorm = std::min(*min_prenorm, zr.row(r).norm());
            for (Index r = 0; r < zt.rows(); ++r) *min_prenorm = std::min(*min_prenorm, zt.row(r).norm());
        }
        const Matd rq = normalize_rows(zr);
        const Matd tq = normalize_rows(zt);
        Matd text_keys(tq.rows() + fixed_text_keys.rows(), tq.cols());
        text_keys << tq, fixed_text_keys;
        Matd region_keys(rq.rows() + fixed_region_keys.rows(), rq.cols());
        region_keys << rq, fixed_region_keys;
        const double l_i2t = info_nce_multi_pos(rq * text_keys.transpose(), pos_i2t, tau);
        const double l_t2i = info_nce_multi_pos(tq * region_keys.transpose(), pos_t2i, tau);
        return l_i2t + l_t2i;
    }

    // Analytic gradient for the trajectory; the bound checks only use loss_at.
    Vecd grad_at(LayerNet& net, const Vecd& params) const {
        net.set_params(params);
        const Matd& w1 = net.weights[0];
        const Matd& w2 = net.weights[1];
        const Matd a1_r = (x_regions * w1).array().tanh();
        const Matd a1_t = (x_texts * w1).array().tanh();
        const Matd zr = a1_r * w2;
        const Matd zt = a1_t * w2;
        const Matd rq = normalize_rows(zr);
        const Matd tq = normalize_rows(zt);
        Matd text_keys(tq.rows() + fixed_text_keys.rows(), tq.cols());
        text_keys << tq, fixed_text_keys;
        Matd region_keys(rq.rows() + fixed_region_keys.rows(), rq.cols());
        region_keys << rq, fixed_region_keys;

        const Matd ds1 = info_nce_multi_pos_backward(rq * text_keys.transpose(), pos_i2t, tau);
        const Matd ds2 = info_nce_multi_pos_backward(tq * region_keys.transpose(), pos_t2i, tau);

        Matd drq = ds1 * text_keys;
        Matd dtq = ds2 * region_keys;
        dtq += (ds1.transpose() * rq).topRows(tq.rows());
        drq += (ds2.transpose() * tq).topRows(rq.rows());

        const Matd dzr = normalize_rows_backward(zr, drq);
        const Matd dzt = normalize_rows_backward(zt, dtq);

        Matd dw2 = a1_r.transpose() * dzr + a1_t.transpose() * dzt;
        const Matd da1_r = dzr * w2.transpose();
        const Matd da1_t = dzt * w2.transpose();
        const Matd dz1_r = da1_r.array() * (1.0 - a1_r.array().square());
        const Matd dz1_t = da1_t.array() * (1.0 - a1_t.array().square());
        Matd dw1 = x_regions.transpose() * dz1_r + x_texts.transpose() * dz1_t;

        Vecd g(w1.size() + w2.size());
        g << Eigen::Map<const Vecd>(dw1.data(), dw1.size()), Eigen::Map<const Vecd>(dw2.data(), dw2.size());
        return g;
    }
};

}  // namespace

LossGapTrialReport run_loss_gap_trials(const LossGapTrialConfig& cfg) {
    LossGapTrialReport rep;
    rep.rho = 1.0 / cfg.tau;
    Rng root(cfg.seed);
    for (Index trial = 0; trial < cfg.trials; ++trial) {
        Rng rng = root.split(0x10C0 + static_cast<std::uint64_t>(trial));

        GapProblem prob;
        prob.tau = cfg.tau;
        prob.x_regions = rng.gaussian(cfg.n_regions, cfg.dim_in);
        prob.x_texts = rng.gaussian(cfg.n_texts, cfg.dim_in);
        prob.fixed_text_keys = normalize_rows(rng.gaussian(cfg.queue_negatives, cfg.dim_out));
        prob.fixed_region_keys = normalize_rows(rng.gaussian(cfg.queue_negatives, cfg.dim_out));
        prob.pos_i2t.resize(static_cast<std::size_t>(cfg.n_regions));
        for (Index i = 0; i < cfg.n_regions; ++i)
            prob.pos_i2t[static_cast<std::size_t>(i)] = {i % cfg.n_texts};
        prob.pos_t2i.resize(static_cast<std::size_t>(cfg.n_texts));
        for (Index j = 0; j < cfg.n_texts; ++j)
            for (Index i = 0; i < cfg.n_regions; ++i)
                if (i % cfg.n_texts == j) prob.pos_t2i[static_cast<std::size_t>(j)].push_back(i);

        LayerNet net;
        net.act = Activation::tanh_act;
        net.weights = {rng.gaussian(cfg.dim_in, cfg.hidden, 1.0 / std::sqrt(double(cfg.dim_in))),
                       rng.gaussian(cfg.hidden, cfg.dim_out, 1.0 / std::sqrt(double(cfg.hidden)))};

        std::vector<Vecd> traj;
        traj.reserve(static_cast<std::size_t>(cfg.steps) + 1);
        traj.push_back(net.get_params());
        for (Index t = 0; t < cfg.steps; ++t) {
            Vecd g = prob.grad_at(net, traj.back());
            const double n = g.norm();
            if (n > 1.0) g /= n;  // unit ascent direction cap
            traj.push_back(traj.back() - cfg.step_size * g);
        }
        const EmaTrace trace = ema_track(traj, cfg.m);

        // Constants over the whole trace: per-layer operator norms, input
        // norms, and the pre-normalization floor, all measured.
        std::vector<double> a(2, 0.0);
        double min_prenorm = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < trace.thetas.size(); ++t) {
            for (int branch = 0; branch < 2; ++branch) {
                const Vecd& params = branch == 0 ? trace.thetas[t] : trace.theta_ms[t];
                net.set_params(params);
                a[0] = std::max(a[0], operator_norm(net.weights[0]));
                a[1] = std::max(a[1], operator_norm(net.weights[1]));
                prob.loss_at(net, params, &min_prenorm);
            }
        }
        double x_region_norm = 0.0, x_text_norm = 0.0;
        for (Index r = 0; r < prob.x_regions.rows(); ++r)
            x_region_norm = std::max(x_region_norm, prob.x_regions.row(r).norm());
        for (Index r = 0; r < prob.x_texts.rows(); ++r)
            x_text_norm = std::max(x_text_norm, prob.x_texts.row(r).norm());
        const double k_r = lipschitz_from_norms(a, x_region_norm, min_prenorm);
        const double k_t = lipschitz_from_norms(a, x_text_norm, min_prenorm);
        rep.k_sum_last = k_r + k_t;

        auto loss_fn = [&](const Vecd& params) { return prob.loss_at(net, params, nullptr); };
        const BoundCheckReport gap = loss_gap_check(trace, loss_fn, rep.rho, k_r + k_t);
        const LagReport lag = lag_bound_check(trace);
        rep.violations += gap.violations + (lag.pass ? 0 : 1);
        rep.max_ratio_gap = std::max(rep.max_ratio_gap, gap.ratio);
        rep.max_ratio_lag = std::max(rep.max_ratio_lag, lag.ratio);
        ++rep.trials;
    }
    return rep;
}

}  // namespace c3owd
