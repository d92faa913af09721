#pragma once

#include <functional>

#include "refgame/tensor.hpp"

namespace refgame::ad {

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
    int64_t worst_param = -1;
    int64_t worst_coord = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central-difference verification of reverse-mode gradients. fn must rebuild
// the graph from the current leaf values on every call; params are the leaves
// to perturb. All tensors involved must be F64 (build them under a
// CheckModeGuard). When max_coords > 0 and the parameter space is larger, a
// deterministic subsample of coordinates is checked instead of all of them.
GradCheckReport gradient_check(const std::function<TensorPtr()>& fn,
                               const std::vector<TensorPtr>& params, double eps = 1e-5,
                               int64_t max_coords = -1, uint64_t subsample_seed = 0);

}  // namespace refgame::ad
