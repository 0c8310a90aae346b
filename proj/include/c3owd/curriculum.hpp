#ifndef C3OWD_CURRICULUM_HPP
#define C3OWD_CURRICULUM_HPP

#include <optional>
#include <string>
#include <vector>

#include "c3owd/contrast.hpp"
#include "c3owd/crossmodal.hpp"
#include "c3owd/ema.hpp"
#include "c3owd/fusion.hpp"
#include "c3owd/sampling.hpp"

namespace c3owd {

struct CurriculumConfig {
    // Loss weights and thresholds.
    double lambda_c = 0.01;
    double lambda_aux = 0.1;
    double lambda_1 = 1.0;
    double tau = 0.07;
    double tau_iou = 0.3;
    double lambda_i2t = 1.0;
    double lambda_t2i = 1.0;
    // Queues and momentum. `momentum` is retention-style: 1 freezes the
    // averaged branch; the projector EMA inside the contrast state uses the
    // same coefficient.
    Index queue_k = 4096;
    double momentum = 0.999;
    // Auxiliary heads; exchange rounds double as decoder layers.
    Index k_heads = 2;
    Index l_dec = 2;
    // Optimization.
    double learning_rate = 0.08;
    double clip = 0.1;
    Index stage1_steps = 200;
    Index stage2_steps = 120;
    // Toy geometry.
    Index channels = 4;      // per-modality backbone channels
    Index grid = 16;         // level-2 spatial size
    Index feature_dim = 16;  // merged-map channels == embedding width D
    Index patch = 2;
    Index classes = 4;
    Index k_points = 4;
    Index proj_hidden = 16;
    Index proj_dim = 8;
    Index n_scenes = 12;
    Index n_eval_scenes = 6;
    double noise_sigma = 0.05;

    void validate() const;
};

CurriculumConfig config_from_json_file(const std::string& path);
std::string config_to_json(const CurriculumConfig& cfg);

/// Paired toy scene: per-modality [C, G, G] maps, ground truth boxes in grid
/// units, and per-object visibility (0 both, 1 rgb-only, 2 ir-only).
struct SyntheticScene {
    Tensor rgb;
    Tensor ir;
    std::vector<Box> gt;
    std::vector<int> visibility;
};

std::vector<SyntheticScene> gen_stage1_data(std::uint64_t seed, Index n_scenes, Index grid,
                                            Index channels = 4, Index class_lo = 0,
                                            Index class_hi = 1, double noise_sigma = 0.05);

/// Multi-scale features for one modality: the map itself plus 2x and 4x
/// average-pooled levels.
std::vector<Tensor> scene_levels(const Tensor& map);

// ---------------------------------------------------------------------------
// Stage-1 model: fusion trunk + linear detection head on the merged map.
// ---------------------------------------------------------------------------

struct Stage1Model {
    std::vector<BlockParams> blocks;
    FpnParams fpn;
    LinearParams obj_head;
    LinearParams box_head;

    static Stage1Model init(const CurriculumConfig& cfg, Rng& rng);
};

template <typename F>
void visit(Stage1Model& p, F&& f) {
    for (auto& b : p.blocks) visit(b, f);
    visit(p.fpn, f);
    f(p.obj_head.W);
    f(p.obj_head.b);
    f(p.box_head.W);
    f(p.box_head.b);
}

/// Dense cell targets: objectness per cell, box corner offsets from the cell
/// center for positive cells.
struct DetTargets {
    Vecd obj;                          // n_cells, in {0,1}
    Matd box;                          // n_cells x 4, meaningful on positives
    std::vector<Index> positive_cells;
};

DetTargets make_det_targets(const std::vector<Box>& gt, Index grid);

struct DetLoss {
    double total = 0.0;
    double bce = 0.0;
    double l1 = 0.0;
};

/// BCE objectness over all cells plus L1 box regression on positive cells.
DetLoss det_head_loss(const Matd& cell_feats, const LinearParams& obj_head,
                      const LinearParams& box_head, const DetTargets& targets,
                      Matd* d_cell_feats = nullptr, LinearParams* d_obj = nullptr,
                      LinearParams* d_box = nullptr);

struct Stage1Eval {
    double f1 = 0.0;
    double mean_bce = 0.0;
};

Stage1Eval evaluate_stage1_cells(const LinearParams& obj_head, const LinearParams& box_head,
                                 const std::vector<Matd>& scene_cells,
                                 const std::vector<DetTargets>& targets,
                                 const std::vector<std::vector<Box>>& gts, Index grid);

/// Forward the trunk and take one clipped gradient step on every stage-1
/// parameter; mix ratios are clamped back to [0,1]. Returns the loss.
DetLoss stage1_step(const SyntheticScene& scene, Stage1Model& model, const CurriculumConfig& cfg);

// ---------------------------------------------------------------------------
// Stage-2: frozen trunk, trainable heads + exchange + sampler + projector.
// ---------------------------------------------------------------------------

struct Stage2Trainables {
    LinearParams obj_head, box_head;  // carried over from stage 1
    LinearParams patch_proj;
    ExchangeParams exchange;
    ModulatedSampleParams sampler;
    std::vector<LinearParams> enc_heads;
    std::vector<LinearParams> dec_heads;
    ProjectorParams projector;
    Vecd alpha;  // learnable logit scale, size 1
};

template <typename F>
void visit(Stage2Trainables& p, F&& f) {
    f(p.obj_head.W);
    f(p.obj_head.b);
    f(p.box_head.W);
    f(p.box_head.b);
    f(p.patch_proj.W);
    f(p.patch_proj.b);
    visit(p.exchange, f);
    visit(p.sampler, f);
    for (auto& h : p.enc_heads) {
        f(h.W);
        f(h.b);
    }
    for (auto& h : p.dec_heads) {
        f(h.W);
        f(h.b);
    }
    visit(p.projector, f);
    f(p.alpha);
}

struct Stage2StepLog {
    Index step = 0;
    double total = 0.0;
    double det = 0.0;
    double contrast = 0.0, contrast_i2t = 0.0, contrast_t2i = 0.0;
    double aux_enc = 0.0, aux_dec = 0.0;
    double delta_t = 0.0;
    double lag = 0.0;
    double loss_gap = 0.0;
    double bound = 0.0;
    double online_f1 = 0.0, momentum_f1 = 0.0;
    bool gap_ok = true;
};

struct CurriculumReport {
    Index stage1_steps = 0;
    double stage1_initial_loss = 0.0;
    double stage1_final_loss = 0.0;
    double stage1_f1 = 0.0;
    std::vector<Stage2StepLog> stage2;
    double rho_k_coeff = 0.0;  // rho * K of the stage-1 head family
    bool additivity_ok = true;
    bool bounds_ok = true;
    bool pass = false;
};

CurriculumReport run_curriculum(const CurriculumConfig& cfg, std::uint64_t seed);

std::string curriculum_report_to_json(const CurriculumReport& rep);

}  // namespace c3owd

#endif
