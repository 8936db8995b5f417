#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgen/rng.hpp"

namespace maskgen {

enum class ScheduleKind { Linear, Cosine, Exp, LogExp };

/// Monotone masking fraction gamma: [0,1] -> [0,1]. `rate` is the
/// steepness constant of the exp and log-exp families (default 5).
struct MaskSchedule {
    ScheduleKind kind = ScheduleKind::Linear;
    double rate = 5.0;

    static MaskSchedule linear() { return {ScheduleKind::Linear, 5.0}; }
    static MaskSchedule cosine() { return {ScheduleKind::Cosine, 5.0}; }
    static MaskSchedule exponential(double rate = 5.0) { return make(ScheduleKind::Exp, rate); }
    static MaskSchedule log_exp(double rate = 5.0) { return make(ScheduleKind::LogExp, rate); }

    static MaskSchedule make(ScheduleKind kind, double rate = 5.0) {
        if (!(rate > 0.0)) {
            throw std::invalid_argument("MaskSchedule: rate must be positive");
        }
        return {kind, rate};
    }
};

inline void check_time_domain(double t, const char* who) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::domain_error(std::string(who) + ": t must lie in [0,1], got " +
                                std::to_string(t));
    }
}

/// Masking fraction at time t.
/// linear: t; cosine: sin(pi t / 2) (same curve as cos(pi/2 (1-t)));
/// exp: 1 - e^{-rate t}; log-exp: log(1 + (e^rate - 1) t) / rate.
inline double gamma(const MaskSchedule& sched, double t) {
    check_time_domain(t, "gamma");
    switch (sched.kind) {
        case ScheduleKind::Linear:
            return t;
        case ScheduleKind::Cosine:
            return std::sin(0.5 * std::numbers::pi * t);
        case ScheduleKind::Exp:
            return 1.0 - std::exp(-sched.rate * t);
        case ScheduleKind::LogExp:
            return std::log1p(std::expm1(sched.rate) * t) / sched.rate;
    }
    throw std::logic_error("gamma: unknown schedule kind");
}

/// Analytic d gamma / dt.
inline double gamma_prime(const MaskSchedule& sched, double t) {
    check_time_domain(t, "gamma_prime");
    switch (sched.kind) {
        case ScheduleKind::Linear:
            return 1.0;
        case ScheduleKind::Cosine:
            return 0.5 * std::numbers::pi * std::cos(0.5 * std::numbers::pi * t);
        case ScheduleKind::Exp:
            return sched.rate * std::exp(-sched.rate * t);
        case ScheduleKind::LogExp: {
            const double em1 = std::expm1(sched.rate);
            return em1 / (sched.rate * (1.0 + em1 * t));
        }
    }
    throw std::logic_error("gamma_prime: unknown schedule kind");
}

/// Inverse of gamma on [0,1] by bisection (gamma is non-decreasing).
inline double gamma_inverse(const MaskSchedule& sched, double g) {
    if (!(g >= 0.0 && g <= 1.0)) {
        throw std::domain_error("gamma_inverse: value outside [0,1]");
    }
    double lo = 0.0;
    double hi = 1.0;
    for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (gamma(sched, mid) < g) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

enum class WeightMode { Constant, MdmRatio };

/// Per-time loss weight. Constant -> 1; MdmRatio -> gamma'/gamma with the
/// denominator floored at epsilon so the function stays total at t = 0,
/// where the ratio otherwise diverges.
inline double weight(WeightMode mode, const MaskSchedule& sched, double t,
                     double epsilon = 1e-8) {
    check_time_domain(t, "weight");
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("weight: epsilon must be positive");
    }
    if (mode == WeightMode::Constant) {
        return 1.0;
    }
    return gamma_prime(sched, t) / std::max(gamma(sched, t), epsilon);
}

/// Training-time integration window [t_min, t_max].
struct TimeWindow {
    double t_min = 0.0;
    double t_max = 1.0;

    void validate() const {
        if (!(t_min >= 0.0 && t_min < 1.0) || !(t_max > t_min && t_max <= 1.0)) {
            throw std::invalid_argument("TimeWindow: need 0 <= t_min < t_max <= 1");
        }
    }
    double length() const { return t_max - t_min; }
};

inline double sample_time(const TimeWindow& window, Rng& rng) {
    window.validate();
    return rng.uniform(window.t_min, window.t_max);
}

/// Masking-ratio draw from N(1.0, 0.25^2) truncated to [0.7, 1.0],
/// rejection-sampled.
inline double mar_ratio_sample(Rng& rng) {
    for (;;) {
        const double x = rng.normal(1.0, 0.25);
        if (x >= 0.7 && x <= 1.0) {
            return x;
        }
    }
}

/// One reverse-process segment: the model walks t -> s with t > s.
struct TimeStep {
    double t;
    double s;
    double gamma_t;
    double gamma_s;
};

/// Uniform sampling grid with T segments: t_i = (T-i+1)/T, s_i = (T-i)/T,
/// so t_1 = 1, s_T = 0 and adjacent steps share endpoints.
inline std::vector<TimeStep> discretize(int steps, const MaskSchedule& sched) {
    if (steps < 1) {
        throw std::invalid_argument("discretize: steps must be >= 1");
    }
    std::vector<TimeStep> grid;
    grid.reserve(static_cast<std::size_t>(steps));
    for (int i = 1; i <= steps; ++i) {
        const double t = static_cast<double>(steps - i + 1) / steps;
        const double s = static_cast<double>(steps - i) / steps;
        grid.push_back({t, s, gamma(sched, t), gamma(sched, s)});
    }
    return grid;
}

/// Config-file schedule names.
inline std::string schedule_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::Linear: return "linear";
        case ScheduleKind::Cosine: return "cosine";
        case ScheduleKind::Exp: return "exp";
        case ScheduleKind::LogExp: return "log-exp";
    }
    throw std::logic_error("schedule_name: unknown kind");
}

inline MaskSchedule schedule_from_name(const std::string& name, double rate = 5.0) {
    if (name == "linear") return MaskSchedule::make(ScheduleKind::Linear, rate);
    if (name == "cosine") return MaskSchedule::make(ScheduleKind::Cosine, rate);
    if (name == "exp") return MaskSchedule::make(ScheduleKind::Exp, rate);
    if (name == "log-exp") return MaskSchedule::make(ScheduleKind::LogExp, rate);
    throw std::invalid_argument("unknown schedule name: \"" + name +
                                "\" (expected linear|cosine|exp|log-exp)");
}

} // namespace maskgen
