#ifndef C3OWD_GRADCHECK_SUITE_HPP
#define C3OWD_GRADCHECK_SUITE_HPP

#include <string>
#include <vector>

#include "c3owd/grad_check.hpp"

namespace c3owd {

struct GradSuiteConfig {
    Index instances = 20;
    std::uint64_t seed = 0;
    double h = 1e-5;
    bool corrupt = false;  // test fixture: damages one analytic gradient
};

/// Finite-difference checks of every hand-written backward. Instances are
/// resampled when they land near a kink (ReLU pre-activations, L1 residuals,
/// bilinear grid lines) so the central-difference oracle stays valid.
/// Modules: biwkv | vrwkv | crossmodal | sampling | contrast | heads | all.
std::vector<GradReport> run_gradcheck(const std::string& module, const GradSuiteConfig& cfg);

double worst_rel_err(const std::vector<GradReport>& reports);

}  // namespace c3owd

#endif
