#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "maskgen/diffusion_head.hpp"
#include "maskgen/loss.hpp"
#include "maskgen/masking.hpp"
#include "maskgen/model.hpp"
#include "maskgen/numeric.hpp"
#include "maskgen/rng.hpp"
#include "maskgen/sampler.hpp"
#include "maskgen/schedule.hpp"

namespace maskgen {

/// Per-step reveal statistics of the pure masking dynamics (no model in
/// the loop).
struct StepCountProfile {
    MaskSchedule schedule;
    std::int32_t n_tokens = 0;
    int steps = 0;
    int trials = 0;
    std::vector<double> t;
    std::vector<double> s;
    std::vector<double> mean;
    std::vector<double> stddev;

    void write_csv(std::ostream& out) const {
        out << "step,t,s,mean,std\n";
        for (std::size_t i = 0; i < mean.size(); ++i) {
            out << (i + 1) << ',' << format_csv_double(t[i]) << ','
                << format_csv_double(s[i]) << ',' << format_csv_double(mean[i]) << ','
                << format_csv_double(stddev[i]) << '\n';
        }
    }
};

/// Monte-Carlo simulation of how many tokens each reverse step reveals
/// under the stochastic rule. Each trial starts from the forward marginal
/// at the top of the grid - every token masked with probability
/// gamma(t_1) - so the per-step mean reveal count is N (gamma_t - gamma_s)
/// for any schedule. For schedules with gamma(1) = 1 that start state is
/// simply all-masked.
inline StepCountProfile simulate_unmask_counts(const MaskSchedule& sched,
                                               std::int32_t n_tokens, int steps, int trials,
                                               std::uint64_t seed, int threads = 1) {
    if (steps < 1 || trials < 1 || n_tokens < 1) {
        throw std::invalid_argument("simulate_unmask_counts: bad N/steps/trials");
    }
    const auto grid = discretize(steps, sched);
    const double gamma_top = grid.front().gamma_t;

    std::vector<double> sum(static_cast<std::size_t>(steps), 0.0);
    std::vector<double> sum_sq(static_cast<std::size_t>(steps), 0.0);
    std::vector<std::vector<std::int32_t>> counts(
        static_cast<std::size_t>(trials),
        std::vector<std::int32_t>(static_cast<std::size_t>(steps), 0));

    parallel_for(trials, threads, [&](std::int64_t trial) {
        Rng rng = derive_rng(seed, static_cast<std::uint64_t>(trial));
        std::int32_t masked = 0;
        if (gamma_top >= 1.0) {
            masked = n_tokens;
        } else {
            for (std::int32_t i = 0; i < n_tokens; ++i) {
                if (rng.bernoulli(gamma_top)) {
                    ++masked;
                }
            }
        }
        for (int i = 0; i < steps; ++i) {
            const auto& step = grid[static_cast<std::size_t>(i)];
            const double reveal_prob = (step.gamma_t - step.gamma_s) / step.gamma_t;
            std::int32_t revealed = 0;
            for (std::int32_t j = 0; j < masked; ++j) {
                if (rng.bernoulli(reveal_prob)) {
                    ++revealed;
                }
            }
            masked -= revealed;
            counts[static_cast<std::size_t>(trial)][static_cast<std::size_t>(i)] = revealed;
        }
    });

    for (int trial = 0; trial < trials; ++trial) {
        for (int i = 0; i < steps; ++i) {
            const double c = counts[static_cast<std::size_t>(trial)][static_cast<std::size_t>(i)];
            sum[static_cast<std::size_t>(i)] += c;
            sum_sq[static_cast<std::size_t>(i)] += c * c;
        }
    }

    StepCountProfile profile;
    profile.schedule = sched;
    profile.n_tokens = n_tokens;
    profile.steps = steps;
    profile.trials = trials;
    for (int i = 0; i < steps; ++i) {
        const double m = sum[static_cast<std::size_t>(i)] / trials;
        const double var =
            trials > 1
                ? std::max(0.0, (sum_sq[static_cast<std::size_t>(i)] - trials * m * m) /
                                    (trials - 1))
                : 0.0;
        profile.t.push_back(grid[static_cast<std::size_t>(i)].t);
        profile.s.push_back(grid[static_cast<std::size_t>(i)].s);
        profile.mean.push_back(m);
        profile.stddev.push_back(std::sqrt(var));
    }
    return profile;
}

/// Total variation distance 0.5 sum |p - q| over a shared enumeration.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw std::invalid_argument("tv_distance: supports have different sizes");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += std::abs(p[i] - q[i]);
    }
    return 0.5 * acc;
}

/// Normalized counts over the V^N state space.
inline std::vector<double> empirical_joint(std::span<const TokenSequence> samples,
                                           std::int32_t n, std::int32_t v) {
    if (samples.empty()) {
        throw std::invalid_argument("empirical_joint: no samples");
    }
    const std::uint64_t space = state_space_size(n, v);
    if (space > kEnumerationBound) {
        throw std::invalid_argument("empirical_joint: state space V^N = " +
                                    std::to_string(space) + " exceeds 2^20");
    }
    std::vector<double> p(static_cast<std::size_t>(space), 0.0);
    for (const auto& x : samples) {
        if (!x.fully_unmasked()) {
            throw std::invalid_argument("empirical_joint: sample contains masked positions");
        }
        if (x.length() != n || x.vocab_size() != v) {
            throw std::invalid_argument("empirical_joint: sample shape mismatch");
        }
        p[static_cast<std::size_t>(sequence_index(x))] += 1.0;
    }
    for (auto& x : p) {
        x /= static_cast<double>(samples.size());
    }
    return p;
}

/// Delta-method upper bound on the standard error of a TV estimate from n
/// multinomial samples; reported alongside sampled TV values.
inline double tv_standard_error(std::span<const double> empirical, std::size_t n_samples) {
    double var = 0.0;
    for (const double p : empirical) {
        var += p * (1.0 - p);
    }
    return 0.5 * std::sqrt(var / static_cast<double>(n_samples));
}

/// Wasserstein-1 distance between 1-D samples and a mixture target, by
/// quantile integration at the given resolution: the empirical quantile
/// function against the target quantile (inverted by bisection).
inline double w1_empirical(std::vector<double> samples, const GaussianMixture& target,
                           int resolution = 512) {
    if (target.dim() != 1) {
        throw std::invalid_argument(
            "w1_empirical: only 1-D targets supported (use energy_distance for d > 1)");
    }
    if (samples.empty() || resolution < 2) {
        throw std::invalid_argument("w1_empirical: bad samples/resolution");
    }
    std::sort(samples.begin(), samples.end());

    double lo = target.components().front().mean[0];
    double hi = lo;
    for (const auto& c : target.components()) {
        const double sd = std::sqrt(c.var[0]);
        lo = std::min(lo, c.mean[0] - 12.0 * sd - 1.0);
        hi = std::max(hi, c.mean[0] + 12.0 * sd + 1.0);
    }
    lo = std::min(lo, samples.front());
    hi = std::max(hi, samples.back());

    double acc = 0.0;
    for (int j = 0; j < resolution; ++j) {
        const double u = (j + 0.5) / resolution;
        const double emp = samples[std::min(
            samples.size() - 1, static_cast<std::size_t>(u * samples.size()))];
        const double tgt =
            bisect_increasing([&](double x) { return target.cdf1d(x); }, lo, hi, u);
        acc += std::abs(emp - tgt);
    }
    return acc / resolution;
}

/// Energy distance between two sample sets (the d > 1 fallback metric):
/// 2 E|X-Y| - E|X-X'| - E|Y-Y'| with Euclidean norms.
inline double energy_distance(std::span<const std::vector<double>> xs,
                              std::span<const std::vector<double>> ys) {
    if (xs.empty() || ys.empty()) {
        throw std::invalid_argument("energy_distance: empty sample set");
    }
    const auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            d2 += (a[i] - b[i]) * (a[i] - b[i]);
        }
        return std::sqrt(d2);
    };
    double cross = 0.0;
    for (const auto& x : xs) {
        for (const auto& y : ys) {
            cross += dist(x, y);
        }
    }
    cross /= static_cast<double>(xs.size() * ys.size());
    const auto self_term = [&](std::span<const std::vector<double>> zs) {
        if (zs.size() < 2) {
            return 0.0;
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < zs.size(); ++i) {
            for (std::size_t j = i + 1; j < zs.size(); ++j) {
                acc += dist(zs[i], zs[j]);
            }
        }
        return 2.0 * acc / (static_cast<double>(zs.size()) * (zs.size() - 1));
    };
    return 2.0 * cross - self_term(xs) - self_term(ys);
}

struct SweepCell {
    double t_min;
    double t_max;
    double metric;
    std::int64_t nfe;
};

/// Grid of guidance intervals and the resulting sample quality / cost.
struct SweepResult {
    std::vector<SweepCell> cells;

    void write_csv(std::ostream& out) const {
        out << "t_min,t_max,metric,nfe\n";
        for (const auto& c : cells) {
            out << format_csv_double(c.t_min) << ',' << format_csv_double(c.t_max) << ','
                << format_csv_double(c.metric) << ',' << c.nfe << '\n';
        }
    }
};

/// Runs the generator once per (t_min, t_max) cell with t_min < t_max
/// drawn from grid_values, recording the TV distance to the dataset
/// (per class, macro-averaged; plain joint TV for unconditional data) and
/// the per-sample NFE. TV is the only quality axis here: perceptual
/// metrics over image features have no analogue on enumerable token
/// spaces. Cells use derived seeds and are independent.
inline SweepResult interval_sweep(const ConditionalModel& model, const ToyDataset& data,
                                  const SamplerConfig& base, std::span<const double> grid_values,
                                  int n_samples, std::uint64_t seed, int threads = 1) {
    if (base.cfg.mode == CfgMode::None) {
        throw std::invalid_argument("interval_sweep: base config must enable guidance");
    }
    if (n_samples < 1) {
        throw std::invalid_argument("interval_sweep: n_samples must be >= 1");
    }
    data.require_enumerable("interval_sweep");

    std::vector<std::pair<double, double>> cells;
    for (std::size_t i = 0; i < grid_values.size(); ++i) {
        for (std::size_t j = 0; j < grid_values.size(); ++j) {
            if (grid_values[i] < grid_values[j]) {
                cells.emplace_back(grid_values[i], grid_values[j]);
            }
        }
    }

    SweepResult result;
    result.cells.assign(cells.size(), {});
    parallel_for(static_cast<std::int64_t>(cells.size()), threads, [&](std::int64_t ci) {
        const auto [lo, hi] = cells[static_cast<std::size_t>(ci)];
        SamplerConfig cfg = base;
        cfg.cfg.t_min = lo;
        cfg.cfg.t_max = hi;
        cfg.seed = mix_seed(seed, static_cast<std::uint64_t>(ci));

        double metric = 0.0;
        std::int64_t nfe = 0;
        if (data.num_classes() > 0) {
            for (std::int32_t c = 0; c < data.num_classes(); ++c) {
                const auto gen = generate(model, Conditioning::cls(c), cfg, n_samples, 1);
                metric += tv_distance(empirical_joint(gen.samples, data.seq_len(),
                                                      data.vocab_size()),
                                      data.conditional_distribution(c));
                nfe = gen.traces.front().nfe;
            }
            metric /= data.num_classes();
        } else {
            const auto gen = generate(model, Conditioning::mask(), cfg, n_samples, 1);
            metric = tv_distance(empirical_joint(gen.samples, data.seq_len(),
                                                 data.vocab_size()),
                                 data.joint_distribution());
            nfe = gen.traces.front().nfe;
        }
        result.cells[static_cast<std::size_t>(ci)] = {lo, hi, metric, nfe};
    });
    return result;
}

struct EquivalenceRow {
    std::string model_id;
    double maskgit_loss;
    double mdm_loss;
    double rel_gap;
};

inline void write_equivalence_csv(std::ostream& out, std::span<const EquivalenceRow> rows) {
    out << "model_id,maskgit_loss,mdm_loss,rel_gap\n";
    for (const auto& r : rows) {
        out << r.model_id << ',' << format_csv_double(r.maskgit_loss) << ','
            << format_csv_double(r.mdm_loss) << ',' << format_csv_double(r.rel_gap) << '\n';
    }
}

/// Exact MaskGIT loss vs the unified loss at (linear schedule, MdmRatio
/// weight, independent masking, window [0,1]) for each (model, dataset)
/// pair. The two agree in expectation; rel_gap quantifies the numerical
/// residual.
inline std::vector<EquivalenceRow> equivalence_report(
    std::span<const std::pair<std::string, const ConditionalModel*>> models,
    std::span<const std::pair<std::string, const ToyDataset*>> datasets,
    int quadrature_points = 256) {
    LossConfig mdm;
    mdm.schedule = MaskSchedule::linear();
    mdm.weight = WeightMode::MdmRatio;
    mdm.window = {0.0, 1.0};
    mdm.masking = MaskingKind::Independent;
    mdm.quadrature_points = quadrature_points;

    std::vector<EquivalenceRow> rows;
    for (const auto& [dname, data] : datasets) {
        for (const auto& [mname, model] : models) {
            if (model->seq_len() != data->seq_len() ||
                model->vocab_size() != data->vocab_size()) {
                continue;
            }
            const double mg = maskgit_loss_exact(*model, *data);
            const double md = loss_exact(*model, *data, mdm);
            const double gap = std::abs(mg - md) / std::max(std::abs(md), 1e-300);
            rows.push_back({mname + "/" + dname, mg, md, gap});
        }
    }
    return rows;
}

} // namespace maskgen
