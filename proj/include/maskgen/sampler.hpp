#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskgen/diffusion_head.hpp"
#include "maskgen/masking.hpp"
#include "maskgen/model.hpp"
#include "maskgen/numeric.hpp"
#include "maskgen/rng.hpp"
#include "maskgen/schedule.hpp"

namespace maskgen {

enum class CfgMode { None, Standard, WithMask };
enum class CfgSchedule { Constant, LinearRamp };

/// Classifier-free guidance settings. `scale` is omega; guidance fires
/// only on steps whose endpoint s_i lies in the closed interval
/// [t_min, t_max].
struct CfgConfig {
    CfgMode mode = CfgMode::None;
    double scale = 0.0;
    CfgSchedule schedule = CfgSchedule::Constant;
    double t_min = 0.0;
    double t_max = 1.0;

    void validate() const {
        if (!(scale >= 0.0)) {
            throw std::invalid_argument("CfgConfig: scale must be >= 0");
        }
        if (!(t_min <= t_max) || t_min < 0.0 || t_max > 1.0) {
            throw std::invalid_argument("CfgConfig: need 0 <= t_min <= t_max <= 1");
        }
    }
};

enum class UnmaskRule { Stochastic, TopKConfidence, OneAtATime };

inline std::string unmask_rule_name(UnmaskRule rule) {
    switch (rule) {
        case UnmaskRule::Stochastic: return "stochastic";
        case UnmaskRule::TopKConfidence: return "top-k";
        case UnmaskRule::OneAtATime: return "one-at-a-time";
    }
    throw std::logic_error("unmask_rule_name: unknown rule");
}

inline UnmaskRule unmask_rule_from_name(const std::string& name) {
    if (name == "stochastic") return UnmaskRule::Stochastic;
    if (name == "top-k") return UnmaskRule::TopKConfidence;
    if (name == "one-at-a-time") return UnmaskRule::OneAtATime;
    throw std::invalid_argument("unknown unmask rule: \"" + name +
                                "\" (expected stochastic|top-k|one-at-a-time)");
}

inline std::string cfg_mode_name(CfgMode mode) {
    switch (mode) {
        case CfgMode::None: return "none";
        case CfgMode::Standard: return "standard";
        case CfgMode::WithMask: return "with-mask";
    }
    throw std::logic_error("cfg_mode_name: unknown mode");
}

inline CfgMode cfg_mode_from_name(const std::string& name) {
    if (name == "none") return CfgMode::None;
    if (name == "standard") return CfgMode::Standard;
    if (name == "with-mask") return CfgMode::WithMask;
    throw std::invalid_argument("unknown cfg mode: \"" + name +
                                "\" (expected none|standard|with-mask)");
}

/// Full sampling recipe. OneAtATime ignores the schedule and runs exactly
/// one reveal per step over N steps.
struct SamplerConfig {
    int steps = 16;
    MaskSchedule schedule = MaskSchedule::exponential();
    UnmaskRule unmask_rule = UnmaskRule::Stochastic;
    CfgConfig cfg;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 1) {
            throw std::invalid_argument("SamplerConfig: steps must be >= 1");
        }
        cfg.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["steps"] = steps;
        j["schedule"] = schedule_name(schedule.kind);
        j["rate"] = schedule.rate;
        j["unmask_rule"] = unmask_rule_name(unmask_rule);
        j["cfg"] = {{"mode", cfg_mode_name(cfg.mode)},
                    {"scale", cfg.scale},
                    {"schedule", cfg.schedule == CfgSchedule::Constant ? "constant"
                                                                       : "linear-ramp"},
                    {"t_min", cfg.t_min},
                    {"t_max", cfg.t_max}};
        j["seed"] = seed;
        return j;
    }

    static SamplerConfig from_json(const nlohmann::json& j) {
        SamplerConfig out;
        if (j.contains("steps")) out.steps = j.at("steps").get<int>();
        const double rate = j.value("rate", 5.0);
        if (j.contains("schedule")) {
            out.schedule = schedule_from_name(j.at("schedule").get<std::string>(), rate);
        } else {
            out.schedule = MaskSchedule::exponential(rate);
        }
        if (j.contains("unmask_rule")) {
            out.unmask_rule = unmask_rule_from_name(j.at("unmask_rule").get<std::string>());
        }
        if (j.contains("cfg")) {
            const auto& c = j.at("cfg");
            if (c.contains("mode")) {
                out.cfg.mode = cfg_mode_from_name(c.at("mode").get<std::string>());
            }
            out.cfg.scale = c.value("scale", out.cfg.scale);
            if (c.contains("schedule")) {
                const auto name = c.at("schedule").get<std::string>();
                if (name == "constant") {
                    out.cfg.schedule = CfgSchedule::Constant;
                } else if (name == "linear-ramp") {
                    out.cfg.schedule = CfgSchedule::LinearRamp;
                } else {
                    throw std::invalid_argument("unknown cfg schedule: \"" + name +
                                                "\" (expected constant|linear-ramp)");
                }
            }
            out.cfg.t_min = c.value("t_min", out.cfg.t_min);
            out.cfg.t_max = c.value("t_max", out.cfg.t_max);
        }
        if (j.contains("seed")) out.seed = j.at("seed").get<std::uint64_t>();
        out.validate();
        return out;
    }
};

struct StepRecord {
    int step;
    double t;
    double s;
    std::int32_t masked_before;
    std::int32_t revealed;
    bool cfg_applied;
    std::int64_t nfe_cumulative;
};

/// Audited record of one generated trajectory: per-step reveal counts and
/// the exact number of model evaluations.
struct GenerationTrace {
    std::vector<StepRecord> steps;
    std::int64_t nfe = 0;        // backbone (mask-prediction) evaluations
    std::int64_t head_evals = 0; // continuous-head denoiser evaluations

    void write_csv(std::ostream& out) const {
        out << "step,t,s,masked_before,revealed,cfg_applied,nfe_cumulative\n";
        for (const auto& r : steps) {
            out << r.step << ',' << format_csv_double(r.t) << ',' << format_csv_double(r.s)
                << ',' << r.masked_before << ',' << r.revealed << ','
                << (r.cfg_applied ? 1 : 0) << ',' << r.nfe_cumulative << '\n';
        }
    }
};

/// Eq.-style stochastic unmasking for one step t -> s: revealed tokens are
/// carried over untouched; each masked position independently stays masked
/// with probability gamma_s/gamma_t and otherwise reveals a token drawn
/// from the prediction.
inline TokenSequence reverse_step(const TokenSequence& xt, double gamma_t, double gamma_s,
                                  const PositionPrediction& pred, Rng& rng) {
    if (!(gamma_s >= 0.0 && gamma_s < gamma_t && gamma_t <= 1.0)) {
        throw std::invalid_argument("reverse_step: need 0 <= gamma_s < gamma_t <= 1");
    }
    const double keep_prob = gamma_s / gamma_t;
    TokenSequence out = xt;
    for (const std::int32_t pos : masked_positions(xt)) {
        if (rng.bernoulli(keep_prob)) {
            continue;
        }
        const auto row = pred.row_for(pos);
        double u = rng.uniform();
        std::int32_t tok = xt.vocab_size() - 1;
        for (std::int32_t w = 0; w < xt.vocab_size(); ++w) {
            u -= row[static_cast<std::size_t>(w)];
            if (u < 0.0) {
                tok = w;
                break;
            }
        }
        out.set(pos, tok);
    }
    return out;
}

/// Number of positions a confidence step reveals when walking t -> s:
/// ceil(N gamma_t) - ceil(N gamma_s), clamped to the masked count. A final
/// step (gamma_s = 0) always clears every remaining mask, which also
/// covers schedules whose gamma(1) falls just short of 1.
inline std::int32_t topk_reveal_count(std::int32_t n, double gamma_t, double gamma_s,
                                      std::int32_t masked_now) {
    if (gamma_s <= 0.0) {
        return masked_now;
    }
    const std::int32_t k = mask_count_for(n, gamma_t) - mask_count_for(n, gamma_s);
    return std::clamp(k, 0, masked_now);
}

/// MaskGIT-style unmasking: sample a candidate token per masked position,
/// then reveal the k candidates with the highest sampled-token
/// probability. Ties break toward the lower position index.
inline TokenSequence topk_unmask_step(const TokenSequence& xt, double gamma_t, double gamma_s,
                                      const PositionPrediction& pred, Rng& rng) {
    if (!(gamma_s >= 0.0 && gamma_s < gamma_t && gamma_t <= 1.0)) {
        throw std::invalid_argument("topk_unmask_step: need 0 <= gamma_s < gamma_t <= 1");
    }
    const auto positions = masked_positions(xt);
    const std::int32_t k = topk_reveal_count(
        xt.length(), gamma_t, gamma_s, static_cast<std::int32_t>(positions.size()));
    if (k == 0) {
        return xt;
    }

    struct Candidate {
        std::int32_t pos;
        std::int32_t tok;
        double confidence;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(positions.size());
    for (const std::int32_t pos : positions) {
        const auto row = pred.row_for(pos);
        double u = rng.uniform();
        std::int32_t tok = xt.vocab_size() - 1;
        for (std::int32_t w = 0; w < xt.vocab_size(); ++w) {
            u -= row[static_cast<std::size_t>(w)];
            if (u < 0.0) {
                tok = w;
                break;
            }
        }
        candidates.push_back({pos, tok, row[static_cast<std::size_t>(tok)]});
    }
    std::partial_sort(candidates.begin(), candidates.begin() + k, candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                          if (a.confidence != b.confidence) {
                              return a.confidence > b.confidence;
                          }
                          return a.pos < b.pos;
                      });
    TokenSequence out = xt;
    for (std::int32_t j = 0; j < k; ++j) {
        out.set(candidates[static_cast<std::size_t>(j)].pos,
                candidates[static_cast<std::size_t>(j)].tok);
    }
    return out;
}

/// Log-linear guidance combination per position:
/// g = log p_u + (1 + omega) (log p_c - log p_u), renormalized.
/// omega = 0 returns the conditional prediction unchanged.
inline PositionPrediction apply_cfg(const PositionPrediction& cond,
                                    const PositionPrediction& uncond, double omega) {
    if (cond.vocab() != uncond.vocab() || cond.positions() != uncond.positions()) {
        throw std::invalid_argument("apply_cfg: predictions cover different positions");
    }
    if (omega == 0.0) {
        return cond;
    }
    constexpr double kFloor = 1e-12;
    PositionPrediction out(cond.vocab());
    const std::int32_t v = cond.vocab();
    std::vector<double> g(static_cast<std::size_t>(v));
    for (std::size_t r = 0; r < cond.count(); ++r) {
        const auto pc = cond.row(r);
        const auto pu = uncond.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int32_t w = 0; w < v; ++w) {
            const double lc = std::log(std::max(pc[static_cast<std::size_t>(w)], kFloor));
            const double lu = std::log(std::max(pu[static_cast<std::size_t>(w)], kFloor));
            g[static_cast<std::size_t>(w)] = lu + (1.0 + omega) * (lc - lu);
            mx = std::max(mx, g[static_cast<std::size_t>(w)]);
        }
        double sum = 0.0;
        for (auto& x : g) {
            x = std::exp(x - mx);
            sum += x;
        }
        for (auto& x : g) {
            x /= sum;
        }
        out.add(cond.positions()[r], g);
    }
    return out;
}

struct CfgDecision {
    bool apply = false;
    double omega = 0.0;
};

/// Whether guidance fires on a step ending at s_i and with what strength.
/// The interval test is on the closed interval; LinearRamp scales omega by
/// the fraction of mask-prediction steps already completed.
inline CfgDecision cfg_scale_at(const CfgConfig& cfg, double s_i, double progress) {
    cfg.validate();
    CfgDecision d;
    d.apply = cfg.mode != CfgMode::None && s_i >= cfg.t_min && s_i <= cfg.t_max;
    if (!d.apply) {
        return d;
    }
    d.omega = cfg.schedule == CfgSchedule::Constant ? cfg.scale : cfg.scale * progress;
    return d;
}

inline Conditioning uncond_encoding_for(CfgMode mode) {
    switch (mode) {
        case CfgMode::Standard:
            return Conditioning::fake();
        case CfgMode::WithMask:
            return Conditioning::mask();
        case CfgMode::None:
            break;
    }
    throw std::logic_error("uncond_encoding_for: guidance disabled");
}

struct GenerationResult {
    std::vector<TokenSequence> samples;
    std::vector<GenerationTrace> traces;
};

namespace detail {

inline std::vector<TimeStep> sampling_grid(const SamplerConfig& cfg, std::int32_t n) {
    if (cfg.unmask_rule == UnmaskRule::OneAtATime) {
        // One reveal per step; the uniform grid is only trace bookkeeping.
        return discretize(n, MaskSchedule::linear());
    }
    return discretize(cfg.steps, cfg.schedule);
}

inline double ramp_progress(std::size_t step_index, std::size_t total_steps) {
    if (total_steps <= 1) {
        return 1.0;
    }
    return static_cast<double>(step_index) / static_cast<double>(total_steps - 1);
}

inline TokenSequence generate_one(const ConditionalModel& model, const Conditioning& cond,
                                  const SamplerConfig& cfg,
                                  const std::vector<TimeStep>& grid, Rng& rng,
                                  GenerationTrace& trace) {
    const std::int32_t n = model.seq_len();
    TokenSequence x = TokenSequence::fully_masked(n, model.vocab_size());
    trace.steps.reserve(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto& step = grid[i];
        const std::int32_t masked_before = x.mask_count();
        const CfgDecision guide =
            cfg_scale_at(cfg.cfg, step.s, ramp_progress(i, grid.size()));
        try {
            PositionPrediction pred = model.predict(x, cond);
            ++trace.nfe;
            if (guide.apply) {
                const PositionPrediction uncond =
                    model.predict(x, uncond_encoding_for(cfg.cfg.mode));
                ++trace.nfe;
                pred = apply_cfg(pred, uncond, guide.omega);
            }
            switch (cfg.unmask_rule) {
                case UnmaskRule::Stochastic:
                    x = reverse_step(x, step.gamma_t, step.gamma_s, pred, rng);
                    break;
                case UnmaskRule::TopKConfidence:
                    x = topk_unmask_step(x, step.gamma_t, step.gamma_s, pred, rng);
                    break;
                case UnmaskRule::OneAtATime: {
                    const auto positions = masked_positions(x);
                    const std::int32_t pos = positions[static_cast<std::size_t>(
                        rng.uniform_below(positions.size()))];
                    const auto row = pred.row_for(pos);
                    double u = rng.uniform();
                    std::int32_t tok = x.vocab_size() - 1;
                    for (std::int32_t w = 0; w < x.vocab_size(); ++w) {
                        u -= row[static_cast<std::size_t>(w)];
                        if (u < 0.0) {
                            tok = w;
                            break;
                        }
                    }
                    x.set(pos, tok);
                    break;
                }
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("generate: step " + std::to_string(i + 1) + " (t=" +
                                     std::to_string(step.t) + "): " + e.what());
        }
        trace.steps.push_back({static_cast<int>(i + 1), step.t, step.s, masked_before,
                               masked_before - x.mask_count(), guide.apply, trace.nfe});
    }
    if (!x.fully_unmasked()) {
        throw std::logic_error("generate: trajectory finished with masked positions");
    }
    return x;
}

} // namespace detail

/// Runs the reverse process from a fully masked sequence. One conditional
/// model evaluation per step plus one unconditional evaluation on steps
/// where guidance fires; the trace counts evaluations exactly. Samples are
/// independent lanes keyed by (seed, sample index), so results do not
/// depend on the thread count.
inline GenerationResult generate(const ConditionalModel& model, const Conditioning& cond,
                                 const SamplerConfig& cfg, int n_samples, int threads = 1) {
    cfg.validate();
    if (n_samples < 1) {
        throw std::invalid_argument("generate: n_samples must be >= 1");
    }
    const auto grid = detail::sampling_grid(cfg, model.seq_len());
    GenerationResult result;
    result.samples.reserve(static_cast<std::size_t>(n_samples));
    result.traces.assign(static_cast<std::size_t>(n_samples), {});
    for (int i = 0; i < n_samples; ++i) {
        result.samples.push_back(TokenSequence::fully_masked(model.seq_len(),
                                                             model.vocab_size()));
    }
    parallel_for(n_samples, threads, [&](std::int64_t i) {
        Rng rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(i));
        result.samples[static_cast<std::size_t>(i)] = detail::generate_one(
            model, cond, cfg, grid, rng, result.traces[static_cast<std::size_t>(i)]);
    });
    return result;
}

/// Continuous-token sequence under construction: a position is either
/// still masked or carries a sampled value vector.
struct ContinuousSequence {
    std::vector<std::vector<double>> values;
    std::vector<bool> revealed;

    explicit ContinuousSequence(std::int32_t n)
        : values(static_cast<std::size_t>(n)), revealed(static_cast<std::size_t>(n), false) {}

    std::int32_t length() const { return static_cast<std::int32_t>(values.size()); }
    std::int32_t mask_count() const {
        return static_cast<std::int32_t>(std::count(revealed.begin(), revealed.end(), false));
    }
};

/// Backbone stand-in for the continuous path: maps the visible context and
/// a position to the head latent (which mixture that position samples).
using HeadContextFn = std::function<HeadContext(const ContinuousSequence&, std::int32_t,
                                                const Conditioning&)>;

struct ContinuousResult {
    std::vector<ContinuousSequence> samples;
    std::vector<GenerationTrace> traces;
};

/// Reverse process over continuous token values: the unmasking logic is
/// identical to the discrete path, but revealed positions draw a value
/// from the per-token diffusion head. The backbone counts one evaluation
/// per step; head denoiser calls are tallied separately. This path is
/// guidance-free (guidance acts on categorical predictions only), so
/// cfg.mode must be None. With the confidence rule there is no categorical
/// confidence to rank, so the per-step reveal quota falls back to a
/// uniformly random choice of positions.
inline ContinuousResult generate_continuous(const HeadContextFn& backbone,
                                            const Conditioning& cond,
                                            const SamplerConfig& cfg,
                                            const HeadSampler& head_sampler,
                                            std::int32_t seq_len, int n_samples,
                                            int threads = 1) {
    cfg.validate();
    if (cfg.cfg.mode != CfgMode::None) {
        throw std::invalid_argument(
            "generate_continuous: the continuous head is guidance-free; set cfg.mode "
            "to none");
    }
    if (n_samples < 1 || seq_len < 1) {
        throw std::invalid_argument("generate_continuous: bad n_samples/seq_len");
    }
    const auto grid = cfg.unmask_rule == UnmaskRule::OneAtATime
                          ? discretize(seq_len, MaskSchedule::linear())
                          : discretize(cfg.steps, cfg.schedule);

    ContinuousResult result;
    result.samples.assign(static_cast<std::size_t>(n_samples), ContinuousSequence(seq_len));
    result.traces.assign(static_cast<std::size_t>(n_samples), {});

    parallel_for(n_samples, threads, [&](std::int64_t sample_idx) {
        Rng rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(sample_idx));
        auto& x = result.samples[static_cast<std::size_t>(sample_idx)];
        auto& trace = result.traces[static_cast<std::size_t>(sample_idx)];
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const auto& step = grid[i];
            const std::int32_t masked_before = x.mask_count();
            std::vector<std::int32_t> masked;
            for (std::int32_t p = 0; p < seq_len; ++p) {
                if (!x.revealed[static_cast<std::size_t>(p)]) {
                    masked.push_back(p);
                }
            }
            ++trace.nfe; // one backbone evaluation per step
            std::vector<std::int32_t> reveal;
            switch (cfg.unmask_rule) {
                case UnmaskRule::Stochastic: {
                    const double keep_prob = step.gamma_s / step.gamma_t;
                    for (const std::int32_t p : masked) {
                        if (!rng.bernoulli(keep_prob)) {
                            reveal.push_back(p);
                        }
                    }
                    break;
                }
                case UnmaskRule::TopKConfidence: {
                    const std::int32_t k = topk_reveal_count(
                        seq_len, step.gamma_t, step.gamma_s,
                        static_cast<std::int32_t>(masked.size()));
                    for (std::int32_t j = 0; j < k; ++j) {
                        const std::int32_t pick =
                            j + static_cast<std::int32_t>(
                                    rng.uniform_below(masked.size() - j));
                        std::swap(masked[static_cast<std::size_t>(j)],
                                  masked[static_cast<std::size_t>(pick)]);
                        reveal.push_back(masked[static_cast<std::size_t>(j)]);
                    }
                    break;
                }
                case UnmaskRule::OneAtATime:
                    reveal.push_back(masked[static_cast<std::size_t>(
                        rng.uniform_below(masked.size()))]);
                    break;
            }
            for (const std::int32_t p : reveal) {
                const HeadContext ctx = backbone(x, p, cond);
                const HeadSample sample = sample_head(ctx, head_sampler, rng);
                trace.head_evals += sample.denoiser_evals;
                x.values[static_cast<std::size_t>(p)] = sample.value;
                x.revealed[static_cast<std::size_t>(p)] = true;
            }
            trace.steps.push_back({static_cast<int>(i + 1), step.t, step.s, masked_before,
                                   masked_before - x.mask_count(), false, trace.nfe});
        }
        if (x.mask_count() != 0) {
            throw std::logic_error("generate_continuous: unfinished trajectory");
        }
    });
    return result;
}

} // namespace maskgen
