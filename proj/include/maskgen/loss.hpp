#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "maskgen/masking.hpp"
#include "maskgen/model.hpp"
#include "maskgen/numeric.hpp"
#include "maskgen/rng.hpp"
#include "maskgen/schedule.hpp"

namespace maskgen {

enum class MaskingKind { Independent, FixedCount };

/// Full recipe for the unified masked objective: schedule, weight mode,
/// time window, masking distribution, and evaluator resolution.
struct LossConfig {
    MaskSchedule schedule = MaskSchedule::linear();
    WeightMode weight = WeightMode::MdmRatio;
    TimeWindow window;
    MaskingKind masking = MaskingKind::Independent;
    int mc_samples = 1;
    int quadrature_points = 256;
    double weight_epsilon = 1e-8;

    void validate() const {
        window.validate();
        if (mc_samples < 1) {
            throw std::invalid_argument("LossConfig: mc_samples must be >= 1");
        }
        if (quadrature_points < 16) {
            throw std::invalid_argument("LossConfig: quadrature_points must be >= 16");
        }
    }
};

namespace detail {

/// Weight attached to one sampled (t, mask) pair. For independent masking
/// this is w(t) itself. For fixed-count masking the MdmRatio denominator
/// is the realized mask fraction ceil(N gamma)/N rather than gamma: the
/// count-based form keeps the objective finite at small t and is what
/// makes the fixed-count and independent losses agree under a linear
/// schedule.
inline double sample_weight(const LossConfig& cfg, double t, std::int32_t n) {
    if (cfg.weight == WeightMode::Constant) {
        return 1.0;
    }
    if (cfg.masking == MaskingKind::Independent) {
        return weight(WeightMode::MdmRatio, cfg.schedule, t, cfg.weight_epsilon);
    }
    const std::int32_t l = std::max(mask_count_for(n, gamma(cfg.schedule, t)), 1);
    return gamma_prime(cfg.schedule, t) * static_cast<double>(n) / static_cast<double>(l);
}

/// Cross-entropy of the true tokens at the masked positions.
inline double masked_cross_entropy(const ConditionalModel& model, const TokenSequence& xt,
                                   const Conditioning& cond, const TokenSequence& x0) {
    const auto positions = masked_positions(xt);
    if (positions.empty()) {
        return 0.0;
    }
    const auto pred = model.predict(xt, cond);
    pred.validate();
    double ce = 0.0;
    for (const std::int32_t pos : positions) {
        const auto row = pred.row_for(pos);
        ce -= std::log(std::max(row[static_cast<std::size_t>(x0.at(pos))], 1e-300));
    }
    return ce;
}

/// Per-state table A[l] = sum over all masks of size l of the masked
/// cross-entropy under that mask. Costs 2^N model evaluations.
inline std::vector<double> mask_ce_table(const ConditionalModel& model,
                                         const TokenSequence& x0, const Conditioning& cond) {
    const std::int32_t n = x0.length();
    if (n > 20) {
        throw std::invalid_argument(
            "mask enumeration: N = " + std::to_string(n) +
            " exceeds the exact-enumeration bound of 20 positions (2^20 masks)");
    }
    std::vector<double> table(static_cast<std::size_t>(n) + 1, 0.0);
    const std::uint32_t total = 1u << n;
    for (std::uint32_t mask = 1; mask < total; ++mask) {
        TokenSequence xt = x0;
        for (std::int32_t i = 0; i < n; ++i) {
            if (mask & (1u << i)) {
                xt.set(i, kMaskToken);
            }
        }
        table[static_cast<std::size_t>(std::popcount(mask))] +=
            masked_cross_entropy(model, xt, cond, x0);
    }
    return table;
}

inline Conditioning state_conditioning(const ToyDataset& data, const DatasetState& st) {
    return data.num_classes() > 0 ? Conditioning::cls(st.label) : Conditioning::mask();
}

/// Window split points where ceil(N gamma(t)) changes value.
inline std::vector<double> fixed_count_pieces(const MaskSchedule& sched,
                                              const TimeWindow& window, std::int32_t n) {
    std::vector<double> cuts{window.t_min};
    for (std::int32_t k = 1; k < n; ++k) {
        const double g = static_cast<double>(k) / n;
        if (gamma(sched, window.t_min) < g && g < gamma(sched, window.t_max)) {
            cuts.push_back(gamma_inverse(sched, g));
        }
    }
    cuts.push_back(window.t_max);
    std::sort(cuts.begin(), cuts.end());
    return cuts;
}

/// Exact t-integral of the unified objective for one data state, given its
/// mask cross-entropy table. The MdmRatio x independent-masking case is
/// integrated in the cancelled form gamma' * gamma^{l-1} (1-gamma)^{N-l},
/// which is finite at t = 0, so no epsilon guard enters the exact path.
inline double state_integral(const std::vector<double>& ce_table, const LossConfig& cfg,
                             std::int32_t n) {
    const auto& sched = cfg.schedule;
    if (cfg.masking == MaskingKind::Independent) {
        double loss = 0.0;
        for (std::int32_t l = 1; l <= n; ++l) {
            const double a = ce_table[static_cast<std::size_t>(l)];
            if (a == 0.0) {
                continue;
            }
            const double integral = integrate_gl(
                [&](double t) {
                    const double g = gamma(sched, t);
                    const double base =
                        std::pow(g, l - 1) * std::pow(1.0 - g, n - l);
                    return cfg.weight == WeightMode::Constant
                               ? base * g
                               : base * gamma_prime(sched, t);
                },
                cfg.window.t_min, cfg.window.t_max, cfg.quadrature_points);
            loss += a * integral;
        }
        return loss;
    }
    // Fixed count: the integrand jumps where ceil(N gamma) does, so the
    // window is integrated piecewise between those cuts.
    const auto cuts = fixed_count_pieces(sched, cfg.window, n);
    double loss = 0.0;
    for (std::size_t p = 0; p + 1 < cuts.size(); ++p) {
        const double lo = cuts[p];
        const double hi = cuts[p + 1];
        if (!(hi > lo)) {
            continue;
        }
        loss += integrate_gl(
            [&](double t) {
                const std::int32_t l =
                    std::max(mask_count_for(n, gamma(sched, t)), 1);
                const double avg_ce = ce_table[static_cast<std::size_t>(l)] /
                                      binomial_coeff(n, l);
                const double w = cfg.weight == WeightMode::Constant
                                     ? 1.0
                                     : gamma_prime(sched, t) * static_cast<double>(n) /
                                           static_cast<double>(l);
                return w * avg_ce;
            },
            lo, hi, cfg.quadrature_points);
    }
    return loss;
}

} // namespace detail

/// Monte-Carlo estimate of the unified objective for one data point:
/// sample t uniformly in the window, draw a mask, and weight the masked
/// cross-entropy. Unbiased for the windowed integral; deterministic for a
/// fixed rng state.
inline double loss_mc(const ConditionalModel& model, const TokenSequence& x0,
                      const Conditioning& cond, const LossConfig& cfg, Rng& rng) {
    cfg.validate();
    check_clean(x0, "loss_mc");
    double acc = 0.0;
    for (int k = 0; k < cfg.mc_samples; ++k) {
        const double t = sample_time(cfg.window, rng);
        const double g = gamma(cfg.schedule, t);
        const TokenSequence xt = cfg.masking == MaskingKind::Independent
                                     ? mask_independent(x0, g, rng)
                                     : mask_fixed_count(x0, g, rng);
        const double ce = detail::masked_cross_entropy(model, xt, cond, x0);
        if (ce != 0.0) {
            acc += detail::sample_weight(cfg, t, x0.length()) * ce;
        }
    }
    return acc / cfg.mc_samples * cfg.window.length();
}

/// Exact value of the unified objective over a fully enumerated dataset:
/// expectation over states, all 2^N masks, and Gauss-Legendre quadrature
/// over t. loss_mc converges to this value as mc_samples grows.
inline double loss_exact(const ConditionalModel& model, const ToyDataset& data,
                         const LossConfig& cfg) {
    cfg.validate();
    data.require_enumerable("loss_exact");
    double loss = 0.0;
    for (const auto& st : data.states()) {
        const auto cond = detail::state_conditioning(data, st);
        const auto ce_table = detail::mask_ce_table(model, st.tokens, cond);
        loss += st.prob * detail::state_integral(ce_table, cfg, data.seq_len());
    }
    return loss;
}

/// Exact MaskGIT objective: l uniform over {1..N}, uniform without-
/// replacement masks of size l, weight N/l. Averaging over l with weight
/// N/l and mask probability 1/C(N,l) collapses to
/// sum_l A_l / (l * C(N,l)) per state.
inline double maskgit_loss_exact(const ConditionalModel& model, const ToyDataset& data) {
    data.require_enumerable("maskgit_loss_exact");
    const std::int32_t n = data.seq_len();
    double loss = 0.0;
    for (const auto& st : data.states()) {
        const auto cond = detail::state_conditioning(data, st);
        const auto ce_table = detail::mask_ce_table(model, st.tokens, cond);
        double state_loss = 0.0;
        for (std::int32_t l = 1; l <= n; ++l) {
            state_loss += ce_table[static_cast<std::size_t>(l)] /
                          (static_cast<double>(l) * binomial_coeff(n, l));
        }
        loss += st.prob * state_loss;
    }
    return loss;
}

struct LossGrad {
    double value = 0.0;
    std::vector<double> grad;
};

/// Value and parameter gradient of the Monte-Carlo objective, averaged
/// over the batch. The gradient reuses the exact (t, mask) draws of the
/// value (common random numbers). Throws if the model is not learnable.
inline LossGrad loss_grad(ConditionalModel& model,
                          std::span<const std::pair<TokenSequence, Conditioning>> batch,
                          const LossConfig& cfg, Rng& rng) {
    cfg.validate();
    auto* learnable = dynamic_cast<LearnableModel*>(&model);
    if (learnable == nullptr) {
        throw std::runtime_error("loss_grad: model has no trainable parameters "
                                 "(unsupported operation)");
    }
    if (batch.empty()) {
        throw std::invalid_argument("loss_grad: empty batch");
    }
    LossGrad out;
    out.grad.assign(learnable->param_count(), 0.0);
    const double batch_scale = cfg.window.length() /
                               (static_cast<double>(cfg.mc_samples) *
                                static_cast<double>(batch.size()));
    for (const auto& [x0, cond] : batch) {
        check_clean(x0, "loss_grad");
        for (int k = 0; k < cfg.mc_samples; ++k) {
            const double t = sample_time(cfg.window, rng);
            const double g = gamma(cfg.schedule, t);
            const TokenSequence xt = cfg.masking == MaskingKind::Independent
                                         ? mask_independent(x0, g, rng)
                                         : mask_fixed_count(x0, g, rng);
            const auto positions = masked_positions(xt);
            if (positions.empty()) {
                continue;
            }
            const double w = detail::sample_weight(cfg, t, x0.length()) * batch_scale;
            out.value += w * learnable->masked_nll_backward(xt, cond, x0, positions, w,
                                                            out.grad);
        }
    }
    return out;
}

} // namespace maskgen
