#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "maskgen/numeric.hpp"
#include "maskgen/rng.hpp"

namespace maskgen {

/// Variance-preserving noise schedule with the cosine parameterization
/// alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2), so alpha^2 + sigma^2
/// = 1, lambda = log(alpha/sigma) is strictly decreasing, and the inverse
/// t(lambda) is closed-form.
struct VpSchedule {
    double alpha(double t) const { return std::cos(0.5 * std::numbers::pi * t); }
    double sigma(double t) const { return std::sin(0.5 * std::numbers::pi * t); }

    double log_snr(double t) const { return std::log(alpha(t) / sigma(t)); }

    double t_from_log_snr(double lambda) const {
        return 2.0 / std::numbers::pi * std::atan(std::exp(-lambda));
    }
};

/// Sampling integrates over log-SNR in [-kHeadLogSnrTrunc, +kHeadLogSnrTrunc].
/// Outside that range the dynamics are inert for unit-scale targets: below
/// it the marginal is indistinguishable from the N(0,1) prior, above it the
/// posterior mean has collapsed onto the data. Truncating spends the step
/// budget where the transport actually happens; the endpoints of [0, 1]
/// are additionally excluded because alpha (resp. sigma) vanishes there
/// and the noise-prediction parameterization degenerates.
inline constexpr double kHeadLogSnrTrunc = 2.25;

inline double head_time_max() { return VpSchedule{}.t_from_log_snr(-kHeadLogSnrTrunc); }
inline double head_time_min() { return VpSchedule{}.t_from_log_snr(kHeadLogSnrTrunc); }

struct GmComponent {
    double weight;
    std::vector<double> mean;
    std::vector<double> var; // diagonal
};

/// Diagonal Gaussian mixture over token values; the analytic target
/// distribution for the continuous per-token head.
class GaussianMixture {
public:
    explicit GaussianMixture(std::vector<GmComponent> components)
        : components_(std::move(components)) {
        if (components_.empty()) {
            throw std::invalid_argument("GaussianMixture: need at least one component");
        }
        dim_ = static_cast<std::int32_t>(components_.front().mean.size());
        if (dim_ < 1) {
            throw std::invalid_argument("GaussianMixture: dimension must be >= 1");
        }
        double total = 0.0;
        for (const auto& c : components_) {
            if (static_cast<std::int32_t>(c.mean.size()) != dim_ ||
                static_cast<std::int32_t>(c.var.size()) != dim_) {
                throw std::invalid_argument("GaussianMixture: component shape mismatch");
            }
            if (!(c.weight > 0.0)) {
                throw std::invalid_argument("GaussianMixture: weights must be positive");
            }
            for (const double v : c.var) {
                if (!(v >= 0.0)) {
                    throw std::invalid_argument("GaussianMixture: variances must be >= 0");
                }
            }
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-12) {
            throw std::invalid_argument("GaussianMixture: weights sum to " +
                                        std::to_string(total) + ", expected 1");
        }
    }

    std::int32_t dim() const { return dim_; }
    const std::vector<GmComponent>& components() const { return components_; }

    /// Overall mixture mean per dimension.
    std::vector<double> mixture_mean() const {
        std::vector<double> m(static_cast<std::size_t>(dim_), 0.0);
        for (const auto& c : components_) {
            for (std::int32_t d = 0; d < dim_; ++d) {
                m[static_cast<std::size_t>(d)] +=
                    c.weight * c.mean[static_cast<std::size_t>(d)];
            }
        }
        return m;
    }

    /// Overall mixture variance per dimension (law of total variance).
    std::vector<double> mixture_var() const {
        const auto m = mixture_mean();
        std::vector<double> v(static_cast<std::size_t>(dim_), 0.0);
        for (const auto& c : components_) {
            for (std::int32_t d = 0; d < dim_; ++d) {
                const double dm =
                    c.mean[static_cast<std::size_t>(d)] - m[static_cast<std::size_t>(d)];
                v[static_cast<std::size_t>(d)] +=
                    c.weight * (c.var[static_cast<std::size_t>(d)] + dm * dm);
            }
        }
        return v;
    }

    std::vector<double> sample(Rng& rng) const {
        double u = rng.uniform();
        std::size_t k = 0;
        for (; k + 1 < components_.size(); ++k) {
            if (u < components_[k].weight) {
                break;
            }
            u -= components_[k].weight;
        }
        const auto& c = components_[k];
        std::vector<double> x(static_cast<std::size_t>(dim_));
        for (std::int32_t d = 0; d < dim_; ++d) {
            x[static_cast<std::size_t>(d)] =
                c.mean[static_cast<std::size_t>(d)] +
                std::sqrt(c.var[static_cast<std::size_t>(d)]) * rng.normal();
        }
        return x;
    }

    /// CDF of the first coordinate (quantile metrics are 1-D).
    double cdf1d(double x) const {
        double acc = 0.0;
        for (const auto& c : components_) {
            const double sd = std::sqrt(std::max(c.var[0], 1e-300));
            acc += c.weight * normal_cdf((x - c.mean[0]) / sd);
        }
        return acc;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        auto& weights = j["weights"] = nlohmann::json::array();
        auto& means = j["means"] = nlohmann::json::array();
        auto& vars = j["vars"] = nlohmann::json::array();
        for (const auto& c : components_) {
            weights.push_back(c.weight);
            means.push_back(c.mean);
            vars.push_back(c.var);
        }
        return j;
    }

    static GaussianMixture from_json(const nlohmann::json& j) {
        const auto weights = j.at("weights").get<std::vector<double>>();
        const auto means = j.at("means").get<std::vector<std::vector<double>>>();
        const auto vars = j.at("vars").get<std::vector<std::vector<double>>>();
        if (weights.size() != means.size() || weights.size() != vars.size()) {
            throw std::invalid_argument("GaussianMixture: ragged JSON spec");
        }
        std::vector<GmComponent> components;
        for (std::size_t k = 0; k < weights.size(); ++k) {
            components.push_back({weights[k], means[k], vars[k]});
        }
        return GaussianMixture(std::move(components));
    }

    static GaussianMixture load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw std::runtime_error("GaussianMixture: cannot open " + path);
        }
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

private:
    std::vector<GmComponent> components_;
    std::int32_t dim_;
};

/// Exact posterior mean E[x0 | x_t] under x_t = alpha x0 + sigma eps with
/// x0 drawn from the mixture. Per component the posterior mean is the
/// conjugate-Gaussian form (alpha s^2 x_t + sigma^2 mu) / (alpha^2 s^2 +
/// sigma^2); components are combined with their responsibilities.
inline std::vector<double> gm_posterior_mean(const GaussianMixture& gm,
                                             std::span<const double> x_t, double t,
                                             const VpSchedule& vp = {}) {
    if (static_cast<std::int32_t>(x_t.size()) != gm.dim()) {
        throw std::invalid_argument("gm_posterior_mean: dimension mismatch");
    }
    if (!(t > 0.0 && t <= 1.0)) {
        throw std::domain_error("gm_posterior_mean: t must lie in (0,1]");
    }
    const double a = vp.alpha(t);
    const double s = vp.sigma(t);
    const std::size_t n_comp = gm.components().size();

    std::vector<double> log_resp(n_comp);
    double max_log = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n_comp; ++k) {
        const auto& c = gm.components()[k];
        double lp = std::log(c.weight);
        for (std::int32_t d = 0; d < gm.dim(); ++d) {
            const double marg_var =
                a * a * c.var[static_cast<std::size_t>(d)] + s * s;
            const double diff =
                x_t[static_cast<std::size_t>(d)] - a * c.mean[static_cast<std::size_t>(d)];
            lp += -0.5 * std::log(2.0 * std::numbers::pi * marg_var) -
                  0.5 * diff * diff / marg_var;
        }
        log_resp[k] = lp;
        max_log = std::max(max_log, lp);
    }
    double norm = 0.0;
    for (auto& lr : log_resp) {
        lr = std::exp(lr - max_log);
        norm += lr;
    }

    std::vector<double> mean(x_t.size(), 0.0);
    for (std::size_t k = 0; k < n_comp; ++k) {
        const auto& c = gm.components()[k];
        const double r = log_resp[k] / norm;
        for (std::int32_t d = 0; d < gm.dim(); ++d) {
            const double s2 = c.var[static_cast<std::size_t>(d)];
            const double comp_mean =
                (a * s2 * x_t[static_cast<std::size_t>(d)] +
                 s * s * c.mean[static_cast<std::size_t>(d)]) /
                (a * a * s2 + s * s);
            mean[static_cast<std::size_t>(d)] += r * comp_mean;
        }
    }
    return mean;
}

/// Exact noise prediction for the mixture target:
/// eps_hat = (x_t - alpha E[x0|x_t]) / sigma.
inline std::vector<double> gm_denoiser(const GaussianMixture& gm, std::span<const double> x_t,
                                       double t, const VpSchedule& vp = {}) {
    if (t <= 0.0) {
        throw std::domain_error("gm_denoiser: t = 0 has zero noise level (division guard)");
    }
    const auto mean = gm_posterior_mean(gm, x_t, t, vp);
    const double a = vp.alpha(t);
    const double s = vp.sigma(t);
    std::vector<double> eps(x_t.size());
    for (std::size_t d = 0; d < x_t.size(); ++d) {
        eps[d] = (x_t[d] - a * mean[d]) / s;
    }
    return eps;
}

/// One ancestral DDPM step t -> s. The posterior mean is computed through
/// the x0 prediction (x_t - sigma eps_hat)/alpha; tau scales the added
/// noise. The final step to s = 0 adds no noise, returning a clean sample.
inline std::vector<double> ddpm_step(std::span<const double> x_t,
                                     std::span<const double> eps_hat, double t, double s,
                                     double tau, Rng& rng, const VpSchedule& vp = {}) {
    if (!(s >= 0.0 && s < t && t <= 1.0)) {
        throw std::invalid_argument("ddpm_step: need 0 <= s < t <= 1");
    }
    if (x_t.size() != eps_hat.size()) {
        throw std::invalid_argument("ddpm_step: shape mismatch");
    }
    const double a_t = vp.alpha(t);
    const double s_t = vp.sigma(t);
    const double a_s = vp.alpha(s);
    const double s_s = vp.sigma(s);
    const double var_ts = s_t * s_t - (a_t / a_s) * (a_t / a_s) * s_s * s_s;
    const double coef_xt = (a_t / a_s) * (s_s * s_s) / (s_t * s_t);
    const double coef_x0 = a_s * var_ts / (s_t * s_t);
    const double post_sd = std::sqrt(std::max(var_ts * s_s * s_s / (s_t * s_t), 0.0));

    std::vector<double> x_s(x_t.size());
    for (std::size_t d = 0; d < x_t.size(); ++d) {
        const double x0_hat = (x_t[d] - s_t * eps_hat[d]) / a_t;
        double x = coef_xt * x_t[d] + coef_x0 * x0_hat;
        if (s > 0.0) {
            x += tau * post_sd * rng.normal();
        }
        x_s[d] = x;
    }
    return x_s;
}

using EpsEvaluator = std::function<std::vector<double>(std::span<const double>, double)>;

/// One DPM-Solver step t -> s in log-SNR time. Order 1 is the exponential-
/// integrator Euler step; order 2 is the midpoint variant with one extra
/// noise-prediction call at the log-SNR midpoint. `evals` counts denoiser
/// calls. Deterministic.
inline std::vector<double> dpms_step(std::span<const double> x_t, const EpsEvaluator& eps,
                                     double t, double s, int order,
                                     std::int64_t* evals = nullptr,
                                     const VpSchedule& vp = {}) {
    if (!(s >= 0.0 && s < t && t <= 1.0)) {
        throw std::invalid_argument("dpms_step: need 0 <= s < t <= 1");
    }
    if (order != 1 && order != 2) {
        throw std::invalid_argument("dpms_step: order must be 1 or 2");
    }
    const double lam_t = vp.log_snr(t);
    const double lam_s = vp.log_snr(s);
    const double h = lam_s - lam_t;
    const auto count = [&](std::int64_t k) {
        if (evals != nullptr) {
            *evals += k;
        }
    };

    if (order == 1) {
        const auto e = eps(x_t, t);
        count(1);
        std::vector<double> x_s(x_t.size());
        const double drift = vp.alpha(s) / vp.alpha(t);
        const double kick = vp.sigma(s) * std::expm1(h);
        for (std::size_t d = 0; d < x_t.size(); ++d) {
            x_s[d] = drift * x_t[d] - kick * e[d];
        }
        return x_s;
    }

    const double lam_mid = lam_t + 0.5 * h;
    const double t_mid = vp.t_from_log_snr(lam_mid);
    const auto e_t = eps(x_t, t);
    count(1);
    std::vector<double> u(x_t.size());
    {
        const double drift = vp.alpha(t_mid) / vp.alpha(t);
        const double kick = vp.sigma(t_mid) * std::expm1(0.5 * h);
        for (std::size_t d = 0; d < x_t.size(); ++d) {
            u[d] = drift * x_t[d] - kick * e_t[d];
        }
    }
    const auto e_mid = eps(u, t_mid);
    count(1);
    std::vector<double> x_s(x_t.size());
    const double drift = vp.alpha(s) / vp.alpha(t);
    const double kick = vp.sigma(s) * std::expm1(h);
    for (std::size_t d = 0; d < x_t.size(); ++d) {
        x_s[d] = drift * x_t[d] - kick * e_mid[d];
    }
    return x_s;
}

/// The latent that selects which mixture a revealed position samples from.
struct HeadContext {
    const GaussianMixture* mixture = nullptr;

    const GaussianMixture& gm() const {
        if (mixture == nullptr) {
            throw std::invalid_argument("HeadContext: no mixture bound");
        }
        return *mixture;
    }
};

struct DdpmTauSampler {
    double tau = 1.0;
    int steps = 100;
};

struct DpmSolverSampler {
    int order = 2;
    int steps = 15;
};

using HeadSampler = std::variant<DdpmTauSampler, DpmSolverSampler>;

struct HeadSample {
    std::vector<double> value;
    std::int64_t denoiser_evals = 0;
};

/// Draws one continuous token value and runs the chosen sampler down to a
/// clean sample. The start state is a Gaussian matched to the first two
/// moments of the true marginal at the top of the (truncated) schedule;
/// at high noise the marginal is Gaussian to an excellent approximation,
/// and exactly so for single-Gaussian targets. DDPM walks a uniform-in-t
/// grid to 0; DPM-Solver walks a uniform-in-log-SNR grid and finishes
/// with an exact x0 readout at the final noise level.
inline HeadSample sample_head(const HeadContext& ctx, const HeadSampler& sampler, Rng& rng,
                              const VpSchedule& vp = {}) {
    const GaussianMixture& gm = ctx.gm();
    HeadSample out;
    out.value.resize(static_cast<std::size_t>(gm.dim()));
    {
        const double a0 = vp.alpha(head_time_max());
        const double s0 = vp.sigma(head_time_max());
        const auto mean = gm.mixture_mean();
        const auto var = gm.mixture_var();
        for (std::size_t d = 0; d < out.value.size(); ++d) {
            out.value[d] = a0 * mean[d] + std::sqrt(a0 * a0 * var[d] + s0 * s0) * rng.normal();
        }
    }

    if (std::holds_alternative<DdpmTauSampler>(sampler)) {
        const auto& cfg = std::get<DdpmTauSampler>(sampler);
        if (cfg.steps < 1) {
            throw std::invalid_argument("sample_head: steps must be >= 1");
        }
        const double t_top = head_time_max();
        for (int k = 0; k < cfg.steps; ++k) {
            const double t = t_top * (cfg.steps - k) / cfg.steps;
            const double s = t_top * (cfg.steps - k - 1) / cfg.steps;
            const auto e = gm_denoiser(gm, out.value, t, vp);
            ++out.denoiser_evals;
            out.value = ddpm_step(out.value, e, t, s, cfg.tau, rng, vp);
        }
        return out;
    }

    const auto& cfg = std::get<DpmSolverSampler>(sampler);
    if (cfg.steps < 1) {
        throw std::invalid_argument("sample_head: steps must be >= 1");
    }
    const EpsEvaluator eps = [&gm, &vp](std::span<const double> x, double t) {
        return gm_denoiser(gm, x, t, vp);
    };
    double t = head_time_max();
    for (int k = 0; k < cfg.steps; ++k) {
        const double lam_next =
            -kHeadLogSnrTrunc + 2.0 * kHeadLogSnrTrunc * (k + 1) / cfg.steps;
        const double s =
            k + 1 == cfg.steps ? head_time_min() : vp.t_from_log_snr(lam_next);
        out.value = dpms_step(out.value, eps, t, s, cfg.order, &out.denoiser_evals, vp);
        t = s;
    }
    // Final x0 readout at the terminal noise level.
    const auto e = eps(out.value, t);
    ++out.denoiser_evals;
    const double a = vp.alpha(t);
    const double s = vp.sigma(t);
    for (std::size_t d = 0; d < out.value.size(); ++d) {
        out.value[d] = (out.value[d] - s * e[d]) / a;
    }
    return out;
}

} // namespace maskgen
