#ifndef C3OWD_EMA_HPP
#define C3OWD_EMA_HPP

#include <functional>
#include <vector>

#include "c3owd/ops.hpp"
#include "c3owd/rng.hpp"

namespace c3owd {

// ---------------------------------------------------------------------------
// EMA trace and the lag bound.
//
// Convention: m is the weight the averaged branch puts on the INCOMING online
// parameters each step,
//     theta_m[t] = (1 - m) * theta_m[t-1] + m * theta[t],  theta_m[0] = theta[0].
// Under this reading the lag recursion is x_t <= (1-m)(delta_t + x_{t-1}),
// giving the bound ||theta_t - theta_m_t|| <= (1-m)/m * max_j delta_j, which is
// tight for constant steps. A retention-style momentum coefficient mu (the
// update mu*theta_m + (1-mu)*theta, where mu = 1 freezes the branch) maps to
// m = 1 - mu here.
// ---------------------------------------------------------------------------

struct EmaTrace {
    std::vector<Vecd> thetas;
    std::vector<Vecd> theta_ms;
    Vecd deltas;  // deltas(t) = ||theta_t - theta_{t-1}||, deltas(0) = 0
    double m = 1.0;
};

EmaTrace ema_track(const std::vector<Vecd>& trajectory, double m);

/// (1-m)/m per unit step; +inf when m == 0.
double lag_bound_coefficient(double m);

struct LagReport {
    double max_lag = 0.0;
    double bound = 0.0;  // bound at the final step
    double ratio = 0.0;  // max over t of lag_t / bound_t, 0 where bound_t == 0
    bool pass = true;
};

LagReport lag_bound_check(const EmaTrace& trace);

// ---------------------------------------------------------------------------
// Lipschitz machinery for bias-free layer networks.
// ---------------------------------------------------------------------------

enum class Activation { identity, tanh_act, relu, squared_relu };

/// Bias-free multi-layer map x -> x W1 -> act -> x W2 -> ... (no activation
/// after the last layer). Parameters flatten layer by layer.
struct LayerNet {
    std::vector<Matd> weights;
    Activation act = Activation::tanh_act;

    Matd forward(const Matd& x) const;
    Index param_count() const;
    Vecd get_params() const;
    void set_params(const Vecd& v);
};

/// Largest singular value via power iteration on W^T W.
double operator_norm(const Matd& w, int iters = 200, double tol = 1e-10);

/// Parameter-perturbation Lipschitz constant for the bias-free family with
/// 1-Lipschitz activations fixing 0: the product of per-layer operator norms
/// times the input-norm factor, raised to the joint-perturbation
/// Cauchy-Schwarz constant when that is larger:
///   K = input_norm * max( prod_l a_l, sqrt(sum_l (prod_{j != l} a_j)^2) ).
/// An optional normalize floor r > 0 appends the factor 2/r for maps whose
/// output is L2-normalized with pre-normalization norms >= r.
/// Throws on activations that are not 1-Lipschitz.
double lipschitz_upper_bound(const std::vector<Matd>& layer_weights, Activation act,
                             double input_norm = 1.0, double normalize_floor = 0.0);

// ---------------------------------------------------------------------------
// Function-consistency and loss-preservation checks along a trace.
// ---------------------------------------------------------------------------

struct BoundCheckReport {
    double max_measured = 0.0;
    double bound = 0.0;  // bound at the final step
    double ratio = 0.0;
    double k_constant = 0.0;
    int violations = 0;
    bool pass = true;
};

/// Mean output discrepancy of net(theta_t) vs net(theta_m_t) over eval inputs,
/// against K * (1-m)/m * Delta_t with K from lipschitz_upper_bound computed
/// over the trace (per-layer operator norms maxed across both branches).
BoundCheckReport function_consistency_check(const EmaTrace& trace, const LayerNet& shape,
                                            const Matd& eval_inputs);

/// |loss(theta_m_t) - loss(theta_t)| against rho * k_sum * (1-m)/m * Delta_t.
BoundCheckReport loss_gap_check(const EmaTrace& trace, const std::function<double(const Vecd&)>& loss,
                                double rho, double k_sum);

// ---------------------------------------------------------------------------
// Packaged experiments used by the CLI and the acceptance suite.
// ---------------------------------------------------------------------------

struct LagTrialConfig {
    Index trials = 100;
    Index steps = 1000;
    Index dim = 50;
    double m = 0.9;
    double max_step = 1.0;
    std::uint64_t seed = 0;
};

struct LagTrialReport {
    Index trials = 0;
    int violations = 0;
    double max_ratio = 0.0;
};

/// Random bounded-step trajectories; every trace must satisfy the lag bound.
LagTrialReport run_lag_trials(const LagTrialConfig& cfg);

/// Constant-step 1-D lag after `steps` steps; converges to (1-m)/m * delta.
double constant_step_lag(double m, double delta, Index steps);

struct LossGapTrialConfig {
    Index trials = 5;
    Index steps = 200;
    Index dim_in = 6;
    Index hidden = 10;
    Index dim_out = 8;
    Index n_regions = 6;
    Index n_texts = 4;
    Index queue_negatives = 8;
    double m = 0.9;
    double step_size = 2e-3;
    double tau = 0.07;
    std::uint64_t seed = 0;
};

struct LossGapTrialReport {
    Index trials = 0;
    int violations = 0;
    double max_ratio_gap = 0.0;
    double max_ratio_lag = 0.0;
    double rho = 0.0;
    double k_sum_last = 0.0;
};

/// Gradient-descent trajectories of a 2-layer normalized projector under the
/// bidirectional multi-positive InfoNCE loss; the measured loss gap between
/// online and averaged branches is checked against
/// rho * (K_r + K_t) * (1-m)/m * Delta_t with every constant computed from
/// the run (operator norms maxed over the trace, measured input norms and
/// pre-normalization floors, rho = 1/tau).
LossGapTrialReport run_loss_gap_trials(const LossGapTrialConfig& cfg);

}  // namespace c3owd

#endif
