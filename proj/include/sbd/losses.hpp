#pragma once

// Training objectives. Every term is normalized by the number of real target
// positions in the batch, so term magnitudes do not depend on batch size.

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "sbd/common.hpp"
#include "sbd/tensor.hpp"

namespace sbd {

namespace detail {

inline std::size_t count_real(std::span<const std::uint8_t> mask) {
    std::size_t n = 0;
    for (const auto m : mask) n += m ? 1 : 0;
    return n;
}

template <typename T>
void require_rank3(const Tensor<T>& x, std::size_t positions, const char* what) {
    if (x.rank() != 3 || x.dim(0) * x.dim(1) != positions) {
        throw ShapeError(std::string(what) + ": tensor " + shape_str(x.shape()) + " does not match mask of " +
                         std::to_string(positions) + " positions");
    }
}

}  // namespace detail

// Mean over real positions of the cross-entropy against a smoothed one-hot
// target: 1 - eps on the gold token plus eps spread evenly over every non-PAD
// vocabulary entry.
template <typename T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, const IdMatrix& targets,
                                       std::span<const std::uint8_t> real, double eps_ls) {
    if (!(eps_ls >= 0.0 && eps_ls < 1.0)) throw ContractError("cross_entropy: label smoothing must lie in [0, 1)");
    detail::require_rank3(logits, real.size(), "cross_entropy");
    if (targets.ids.size() != real.size()) throw ShapeError("cross_entropy: targets do not match mask");
    const std::size_t count = detail::count_real(real);
    if (count == 0) throw ContractError("cross_entropy: batch has no real target positions");
    const std::size_t v = logits.dim(2);
    if (v < 2) throw ShapeError("cross_entropy: vocabulary must hold PAD and at least one token");

    const double spread = eps_ls / static_cast<double>(v - 1);
    auto w = std::make_shared<std::vector<T>>(logits.numel(), T(0));
    for (std::size_t p = 0; p < real.size(); ++p) {
        if (!real[p]) continue;
        const TokenId y = targets.ids[p];
        if (y < 0 || static_cast<std::size_t>(y) >= v) throw InputError("cross_entropy: target id out of range");
        T* row = w->data() + p * v;
        for (std::size_t j = 0; j < v; ++j) {
            if (static_cast<TokenId>(j) == special::kPad) continue;
            row[j] = static_cast<T>(-spread / static_cast<double>(count));
        }
        row[y] += static_cast<T>(-(1.0 - eps_ls) / static_cast<double>(count));
    }
    return weighted_sum(log_softmax_lastdim(logits), std::shared_ptr<const std::vector<T>>(w));
}

// Positional KL(P_bwd || P_fwd) over the full vocabulary, averaged over real
// positions.
template <typename T>
Tensor<T> logit_kd_loss(const Tensor<T>& logits_bwd, const Tensor<T>& logits_fwd, std::span<const std::uint8_t> real) {
    if (logits_bwd.shape() != logits_fwd.shape()) {
        throw ShapeError("logit_kd: shape mismatch " + shape_str(logits_bwd.shape()) + " vs " +
                         shape_str(logits_fwd.shape()));
    }
    detail::require_rank3(logits_bwd, real.size(), "logit_kd");
    const std::size_t count = detail::count_real(real);
    if (count == 0) throw ContractError("logit_kd: batch has no real target positions");
    const std::size_t v = logits_bwd.dim(2);
    auto w = std::make_shared<std::vector<T>>(logits_bwd.numel(), T(0));
    for (std::size_t p = 0; p < real.size(); ++p) {
        if (real[p]) std::fill_n(w->data() + p * v, v, static_cast<T>(1.0 / static_cast<double>(count)));
    }
    const auto lp_bwd = log_softmax_lastdim(logits_bwd);
    const auto lp_fwd = log_softmax_lastdim(logits_fwd);
    const auto p_bwd = softmax_lastdim(logits_bwd);
    return weighted_sum(mul(p_bwd, sub(lp_bwd, lp_fwd)), std::shared_ptr<const std::vector<T>>(w));
}

// Mean over real positions and channels of (H_fwd W_h - H_bwd)^2.
template <typename T>
Tensor<T> hidden_kd_loss(const Tensor<T>& h_fwd, const Tensor<T>& w_h, const Tensor<T>& h_bwd,
                         std::span<const std::uint8_t> real) {
    if (w_h.rank() != 2 || h_fwd.rank() == 0 || h_fwd.shape().back() != w_h.dim(0) || h_bwd.rank() == 0 ||
        h_bwd.shape().back() != w_h.dim(1)) {
        throw ShapeError("hidden_kd: H_fwd " + shape_str(h_fwd.shape()) + ", W_h " + shape_str(w_h.shape()) +
                         ", H_bwd " + shape_str(h_bwd.shape()) + " are incompatible");
    }
    const auto projected = matmul(h_fwd, w_h);
    if (projected.shape() != h_bwd.shape()) {
        throw ShapeError("hidden_kd: projected " + shape_str(projected.shape()) + " vs H_bwd " +
                         shape_str(h_bwd.shape()));
    }
    detail::require_rank3(h_bwd, real.size(), "hidden_kd");
    const std::size_t count = detail::count_real(real);
    if (count == 0) throw ContractError("hidden_kd: batch has no real target positions");
    const std::size_t d = h_bwd.dim(2);
    const T unit = static_cast<T>(1.0 / (static_cast<double>(count) * static_cast<double>(d)));
    auto w = std::make_shared<std::vector<T>>(h_bwd.numel(), T(0));
    for (std::size_t p = 0; p < real.size(); ++p) {
        if (real[p]) std::fill_n(w->data() + p * d, d, unit);
    }
    const auto diff = sub(projected, h_bwd);
    return weighted_sum(mul(diff, diff), std::shared_ptr<const std::vector<T>>(w));
}

// lambda = 1 while c <= w, then w / c.
inline double lambda_schedule(std::uint64_t c_step, std::uint64_t w_step) {
    if (w_step == 0) throw ConfigError("lambda_schedule: w_step must be at least 1");
    if (c_step == 0) throw ContractError("lambda_schedule: steps count from 1");
    return c_step <= w_step ? 1.0 : static_cast<double>(w_step) / static_cast<double>(c_step);
}

enum class DecoderSet { kBoth, kForwardOnly, kBackwardOnly };

struct AnnealSchedule {
    std::uint64_t w_step = 1000;
    bool use_logit_kd = true;
    bool use_hidden_kd = true;
    bool use_annealing = true;
    bool stop_teacher_grad = false;
    DecoderSet decoders = DecoderSet::kBoth;
};

struct LossCoefficients {
    double ce_fwd = 0.0;
    double ce_bwd = 0.0;
    double kd = 0.0;
};

inline LossCoefficients loss_coefficients(double lambda, const AnnealSchedule& s) {
    if (!(lambda > 0.0 && lambda <= 1.0)) throw ContractError("joint_loss: lambda must lie in (0, 1]");
    switch (s.decoders) {
        case DecoderSet::kForwardOnly:
            return {1.0, 0.0, 0.0};
        case DecoderSet::kBackwardOnly:
            return {0.0, 1.0, 0.0};
        case DecoderSet::kBoth:
            break;
    }
    if (!s.use_annealing) return {1.0, 1.0, 1.0};
    return {(1.0 - lambda) * (1.0 - lambda), lambda, (1.0 - lambda) * lambda};
}

// Per-term losses of one batch; absent terms are not computed for the
// configured variant.
template <typename T>
struct LossTerms {
    std::optional<Tensor<T>> ce_fwd, ce_bwd, kd_logit, kd_hidden;
};

struct LossParts {
    double ce_fwd = 0.0;
    double ce_bwd = 0.0;
    double kd_logit = 0.0;
    double kd_hidden = 0.0;
    double lambda = 1.0;
    double total = 0.0;
};

template <typename T>
struct JointLoss {
    Tensor<T> total;
    LossParts parts;
    LossCoefficients coefficients;
};

// Annealed: (1-l)^2 ce_fwd + l ce_bwd + (1-l) l (kd_logit + kd_hidden).
// Without annealing: ce_fwd + ce_bwd + kd. KD terms disabled by the schedule
// flags are left out; terms with a zero coefficient are not wired into the
// graph, so their parameters receive no gradient.
template <typename T>
JointLoss<T> joint_loss(const LossTerms<T>& terms, double lambda, const AnnealSchedule& schedule) {
    const LossCoefficients c = loss_coefficients(lambda, schedule);
    JointLoss<T> out;
    out.coefficients = c;
    out.parts.lambda = lambda;
    auto value = [](const std::optional<Tensor<T>>& t) { return t ? static_cast<double>(t->item()) : 0.0; };
    out.parts.ce_fwd = value(terms.ce_fwd);
    out.parts.ce_bwd = value(terms.ce_bwd);
    out.parts.kd_logit = value(terms.kd_logit);
    out.parts.kd_hidden = value(terms.kd_hidden);

    std::optional<Tensor<T>> total;
    auto accumulate = [&](const std::optional<Tensor<T>>& term, double coef, const char* name) {
        if (coef == 0.0) return;
        if (!term) throw ContractError(std::string("joint_loss: missing term ") + name);
        Tensor<T> weighted = coef == 1.0 ? *term : scale(*term, static_cast<T>(coef));
        total = total ? add(*total, weighted) : weighted;
    };
    accumulate(terms.ce_fwd, c.ce_fwd, "ce_fwd");
    accumulate(terms.ce_bwd, c.ce_bwd, "ce_bwd");
    if (schedule.decoders == DecoderSet::kBoth) {
        if (schedule.use_logit_kd) accumulate(terms.kd_logit, c.kd, "kd_logit");
        if (schedule.use_hidden_kd) accumulate(terms.kd_hidden, c.kd, "kd_hidden");
    }
    out.total = total ? *total : Tensor<T>::scalar(T(0));
    out.parts.total = static_cast<double>(out.total.item());
    return out;
}

}  // namespace sbd
