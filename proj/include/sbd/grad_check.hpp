#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sbd/tensor.hpp"

namespace sbd {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t entries = 0;
};

// Compares reverse-mode gradients of `loss_fn` against central differences
// with step `eps`. `loss_fn` must rebuild the loss from the current contents
// of `params` on every call. Runs in double precision only.
template <typename LossFn>
GradCheckResult grad_check_detailed(LossFn&& loss_fn, std::vector<Tensor<double>> params, double eps) {
    if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");
    for (auto& p : params) p.zero_grad();
    {
        const Tensor<double> loss = loss_fn();
        if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
        loss.backward();
    }
    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        std::vector<double> analytic(p.numel(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            double up = 0.0, down = 0.0;
            {
                NoGradGuard guard;
                values[i] = saved + eps;
                up = loss_fn().item();
                values[i] = saved - eps;
                down = loss_fn().item();
            }
            values[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
            const double numeric = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            const double err = std::abs(analytic[i] - numeric) / denom;
            ++res.entries;
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_param = pi;
                res.worst_index = i;
                res.worst_analytic = analytic[i];
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

template <typename LossFn>
double grad_check(LossFn&& loss_fn, std::vector<Tensor<double>> params, double eps) {
    return grad_check_detailed(std::forward<LossFn>(loss_fn), std::move(params), eps).max_rel_error;
}

}  // namespace sbd
