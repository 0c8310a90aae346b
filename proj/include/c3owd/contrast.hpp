#ifndef C3OWD_CONTRAST_HPP
#define C3OWD_CONTRAST_HPP

#include <utility>
#include <vector>

#include "c3owd/ops.hpp"
#include "c3owd/params.hpp"
#include "c3owd/rng.hpp"
#include "c3owd/tensor.hpp"

namespace c3owd {

/// Axis-aligned box with positive area.
struct Box {
    double x1, y1, x2, y2;
    int class_id = -1;
};

double iou(const Box& a, const Box& b);

/// Proposals whose best ground-truth IoU meets the threshold (inclusive),
/// paired with the argmax ground-truth index; ties break toward lower index.
std::vector<std::pair<Index, Index>> select_positives(const std::vector<Box>& proposals,
                                                      const std::vector<Box>& gt, double tau_iou);

/// theta_m' = m * theta_m + (1 - m) * theta, elementwise.
Vecd ema_update(const Vecd& theta_m, const Vecd& theta, double m);

/// FIFO ring of L2-normalized features with per-entry class ids. Slots start
/// as random unit vectors with a sentinel class id that never matches.
class FeatureQueue {
  public:
    static constexpr int kSentinelClass = -1;

    FeatureQueue(Index capacity, Index dim, Rng& rng);

    /// Overwrites the oldest rows; batch size must not exceed capacity.
    void push(const Matd& batch, const std::vector<int>& class_ids);

    const Matd& storage() const { return storage_; }
    const std::vector<int>& class_ids() const { return ids_; }
    Index capacity() const { return storage_.rows(); }
    Index fill() const { return fill_; }
    Index cursor() const { return cursor_; }

  private:
    Matd storage_;
    std::vector<int> ids_;
    Index cursor_ = 0;
    Index fill_ = 0;
};

/// s_ij = <q_i, k_j> * exp(alpha); rows are L2-normalized first and a
/// zero-norm row is an error.
Matd similarity_logits(const Matd& queries, const Matd& keys, double alpha);

/// Multi-positive InfoNCE:
///   L = -(1/N) sum_i log( sum_{j in P_i} e^{s_ij/tau} / sum_j e^{s_ij/tau} )
/// Always >= 0; zero iff every column of a row is positive. Every row needs
/// at least one positive.
double info_nce_multi_pos(const Matd& s, const std::vector<std::vector<Index>>& positives,
                          double tau);

/// dL/ds for the same loss.
Matd info_nce_multi_pos_backward(const Matd& s, const std::vector<std::vector<Index>>& positives,
                                 double tau);

/// Two-layer projection head with tanh hidden, applied to both region and
/// text features before normalization.
struct ProjectorParams {
    LinearParams l1, l2;

    static ProjectorParams init(Index in, Index hidden, Index out, Rng& rng, double scale = 0.5);
};

template <typename F>
void visit(ProjectorParams& p, F&& f) {
    f(p.l1.W);
    f(p.l1.b);
    f(p.l2.W);
    f(p.l2.b);
}

struct ProjectorCache {
    Matd in, a1, out;
};

Matd projector_forward(const Matd& x, const ProjectorParams& p, ProjectorCache* cache = nullptr);
Matd projector_backward(const ProjectorCache& cache, const ProjectorParams& p, const Matd& dy,
                        ProjectorParams& grads);

/// Online/momentum projectors, queues, and the loss hyperparameters.
struct ContrastState {
    ProjectorParams theta;
    ProjectorParams theta_m;
    double alpha = 0.0;
    double tau = 0.07;
    double m = 0.999;
    double lambda_i2t = 1.0;
    double lambda_t2i = 1.0;
    FeatureQueue q_region;
    FeatureQueue q_text;

    ContrastState(Index in, Index hidden, Index proj, Index queue_capacity, Rng& rng);

    double theta_lag_norm();
};

/// One region-text batch: raw (pre-projection) features with class labels.
struct ContrastBatch {
    Matd region_feats;  // N_r x D_in, one row per positive proposal
    std::vector<int> region_classes;
    Matd text_feats;  // N_t x D_in
    std::vector<int> text_classes;
};

struct ContrastStepResult {
    double loss = 0.0;
    double loss_i2t = 0.0;
    double loss_t2i = 0.0;
    Index n_regions = 0;
    bool skipped = false;  // no positives in the batch
    double theta_lag_norm = 0.0;
};

/// Loss and gradients only; no state mutation. Queues and theta_m are
/// constants on the gradient path.
ContrastStepResult contrastive_loss(const ContrastBatch& batch, ContrastState& state,
                                    ProjectorParams* dtheta = nullptr, double* dalpha = nullptr);

/// Full step in algorithmic order: loss (with optional gradients), then the
/// momentum update of theta_m, then both queue pushes. An empty batch leaves
/// queues and theta_m untouched.
ContrastStepResult contrastive_step(const ContrastBatch& batch, ContrastState& state,
                                    ProjectorParams* dtheta = nullptr, double* dalpha = nullptr);

/// Mean of the feature map over cells covered by the box, as a row vector.
Vecd roi_mean_pool(const Tensor& map, const Box& box);

}  // namespace c3owd

#endif
