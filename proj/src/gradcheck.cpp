#include "refgame/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "refgame/rng.hpp"

namespace refgame::ad {

GradCheckReport gradient_check(const std::function<TensorPtr()>& fn,
                               const std::vector<TensorPtr>& params, double eps,
                               int64_t max_coords, uint64_t subsample_seed) {
    for (const auto& p : params) {
        if (p->dtype != Dtype::F64)
            throw std::runtime_error("gradient_check: parameters must be F64");
        if (!p->requires_grad)
            throw std::runtime_error("gradient_check: parameter does not require grad");
    }

    // analytic pass
    for (const auto& p : params) p->zero_grad();
    auto loss = fn();
    if (loss->dtype != Dtype::F64) throw std::runtime_error("gradient_check: loss must be F64");
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        std::vector<double> g(static_cast<size_t>(p->numel()), 0.0);
        if (p->has_grad())
            for (int64_t i = 0; i < p->numel(); ++i) g[static_cast<size_t>(i)] = p->grad_read(i);
        analytic.push_back(std::move(g));
    }

    // coordinate list, optionally subsampled
    std::vector<std::pair<size_t, int64_t>> coords;
    for (size_t pi = 0; pi < params.size(); ++pi)
        for (int64_t i = 0; i < params[pi]->numel(); ++i) coords.emplace_back(pi, i);
    if (max_coords > 0 && static_cast<int64_t>(coords.size()) > max_coords) {
        Rng rng(subsample_seed);
        rng.shuffle(coords);
        coords.resize(static_cast<size_t>(max_coords));
    }

    GradCheckReport rep;
    NoGradGuard ng;  // finite differences need values only
    for (const auto& [pi, i] : coords) {
        auto& p = params[pi];
        const double saved = p->read(i);
        p->write(i, saved + eps);
        const double fp = fn()->item();
        p->write(i, saved - eps);
        const double fm = fn()->item();
        p->write(i, saved);
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[pi][static_cast<size_t>(i)];
        const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_param = static_cast<int64_t>(pi);
            rep.worst_coord = i;
            rep.worst_analytic = a;
            rep.worst_numeric = numeric;
        }
        ++rep.coords_checked;
    }
    return rep;
}

}  // namespace refgame::ad
