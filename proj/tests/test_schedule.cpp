#include <doctest.h>

#include <cmath>
#include <vector>

#include "maskgen/numeric.hpp"
#include "maskgen/rng.hpp"
#include "maskgen/schedule.hpp"

using namespace maskgen;

namespace {

const std::vector<MaskSchedule> kAllSchedules = {
    MaskSchedule::linear(), MaskSchedule::cosine(), MaskSchedule::exponential(5.0),
    MaskSchedule::log_exp(5.0)};

} // namespace

TEST_CASE("gamma matches the closed forms") {
    CHECK(gamma(MaskSchedule::linear(), 0.5) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(gamma(MaskSchedule::exponential(5.0), 0.4) ==
          doctest::Approx(1.0 - std::exp(-2.0)).epsilon(1e-12));
    CHECK(gamma(MaskSchedule::exponential(5.0), 0.4) ==
          doctest::Approx(0.864665).epsilon(1e-5));
    CHECK(gamma(MaskSchedule::cosine(), 1.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(gamma(MaskSchedule::log_exp(5.0), 1.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gamma boundary behavior") {
    // gamma(0) is exactly zero for every family; exp has the approximate
    // upper boundary gamma(1) = 1 - e^{-rate}.
    for (const auto& sched : kAllSchedules) {
        CHECK(gamma(sched, 0.0) == 0.0);
    }
    CHECK(gamma(MaskSchedule::exponential(5.0), 1.0) ==
          doctest::Approx(1.0 - std::exp(-5.0)).epsilon(1e-15));
    CHECK(gamma(MaskSchedule::linear(), 1.0) == 1.0);
}

TEST_CASE("gamma rejects out-of-domain times") {
    CHECK_THROWS_AS(gamma(MaskSchedule::linear(), -0.01), std::domain_error);
    CHECK_THROWS_AS(gamma(MaskSchedule::linear(), 1.01), std::domain_error);
    CHECK_THROWS_AS(gamma_prime(MaskSchedule::cosine(), 2.0), std::domain_error);
}

TEST_CASE("rate must be positive") {
    CHECK_THROWS_AS(MaskSchedule::exponential(0.0), std::invalid_argument);
    CHECK_THROWS_AS(MaskSchedule::log_exp(-1.0), std::invalid_argument);
}

TEST_CASE("gamma_prime closed-form spot values") {
    CHECK(gamma_prime(MaskSchedule::linear(), 0.13) == 1.0);
    CHECK(gamma_prime(MaskSchedule::linear(), 0.99) == 1.0);
    CHECK(gamma_prime(MaskSchedule::exponential(5.0), 0.0) ==
          doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("gamma_prime agrees with central finite differences") {
    // Independent oracle: (gamma(t+h) - gamma(t-h)) / 2h.
    const double h = 1e-6;
    for (const auto& sched : kAllSchedules) {
        const double t = 0.37;
        const double fd = (gamma(sched, t + h) - gamma(sched, t - h)) / (2.0 * h);
        CHECK(std::abs(gamma_prime(sched, t) - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
    // Full 1000-point interior grid.
    for (const auto& sched : kAllSchedules) {
        for (int i = 1; i < 1000; ++i) {
            const double t = static_cast<double>(i) / 1000.0;
            const double fd = (gamma(sched, t + h) - gamma(sched, t - h)) / (2.0 * h);
            const double analytic = gamma_prime(sched, t);
            REQUIRE(std::abs(analytic - fd) <= 1e-6 * std::max(1.0, std::abs(analytic)));
        }
    }
}

TEST_CASE("gamma is non-decreasing and stays in [0,1]") {
    for (const auto& sched : kAllSchedules) {
        double prev = -1.0;
        for (int i = 0; i <= 500; ++i) {
            const double t = static_cast<double>(i) / 500.0;
            const double g = gamma(sched, t);
            REQUIRE(g >= prev);
            REQUIRE(g >= 0.0);
            REQUIRE(g <= 1.0);
            prev = g;
        }
    }
}

TEST_CASE("masking-ratio ordering of the schedule families") {
    // cosine dominates linear across the interior. exp (rate 5) dominates
    // cosine until they cross near t = 0.906, after which cosine finishes
    // at 1 while exp saturates at 1 - e^{-5}; assert dominance up to 0.9.
    for (int i = 1; i < 200; ++i) {
        const double t = 0.05 + (0.95 - 0.05) * i / 200.0;
        REQUIRE(gamma(MaskSchedule::cosine(), t) > t);
    }
    for (int i = 1; i < 200; ++i) {
        const double t = 0.05 + (0.9 - 0.05) * i / 200.0;
        REQUIRE(gamma(MaskSchedule::exponential(5.0), t) >
                gamma(MaskSchedule::cosine(), t));
    }
}

TEST_CASE("weight modes") {
    CHECK(weight(WeightMode::Constant, MaskSchedule::exponential(5.0), 0.9) == 1.0);
    CHECK(weight(WeightMode::MdmRatio, MaskSchedule::linear(), 0.5) ==
          doctest::Approx(2.0).epsilon(1e-15));
    // Divergence guard: gamma(0) = 0, so the ratio is floored at 1/epsilon.
    CHECK(weight(WeightMode::MdmRatio, MaskSchedule::linear(), 0.0, 1e-8) ==
          doctest::Approx(1e8).epsilon(1e-12));
    CHECK(weight(WeightMode::MdmRatio, MaskSchedule::cosine(), 0.25) > 0.0);
}

TEST_CASE("sample_time is uniform over the window") {
    TimeWindow window{0.0, 1.0};
    Rng rng(42);
    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        sum += sample_time(window, rng);
    }
    CHECK(std::abs(sum / n - 0.5) < 0.005);

    TimeWindow truncated{0.2, 1.0};
    Rng rng2(7);
    for (int i = 0; i < 10000; ++i) {
        const double t = sample_time(truncated, rng2);
        REQUIRE(t >= 0.2);
        REQUIRE(t <= 1.0);
    }

    TimeWindow degenerate{0.4, 0.4 + 1e-12};
    Rng rng3(1);
    for (int i = 0; i < 100; ++i) {
        CHECK(sample_time(degenerate, rng3) == doctest::Approx(0.4).epsilon(1e-11));
    }
}

TEST_CASE("sample_time is deterministic under a fixed seed") {
    TimeWindow window{0.1, 0.9};
    Rng a(123);
    Rng b(123);
    for (int i = 0; i < 1000; ++i) {
        REQUIRE(sample_time(window, a) == sample_time(window, b));
    }
}

TEST_CASE("invalid time windows are rejected") {
    CHECK_THROWS_AS((TimeWindow{0.5, 0.5}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((TimeWindow{0.7, 0.2}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((TimeWindow{-0.1, 0.5}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((TimeWindow{0.0, 1.1}).validate(), std::invalid_argument);
}

TEST_CASE("mar_ratio_sample stays in bounds and matches the truncated-normal mean") {
    Rng rng(99);
    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = mar_ratio_sample(rng);
        REQUIRE(x >= 0.7);
        REQUIRE(x <= 1.0);
        sum += x;
    }
    // Quadrature oracle over the truncated density on [0.7, 1.0].
    const auto density = [](double x) {
        return normal_pdf((x - 1.0) / 0.25) / 0.25;
    };
    const double mass = integrate_gl(density, 0.7, 1.0, 200);
    const double mean =
        integrate_gl([&](double x) { return x * density(x); }, 0.7, 1.0, 200) / mass;
    CHECK(std::abs(sum / n - mean) < 0.003);

    Rng a(5);
    Rng b(5);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(mar_ratio_sample(a) == mar_ratio_sample(b));
    }
}

TEST_CASE("discretize produces the shared-endpoint grid") {
    const auto grid16 = discretize(16, MaskSchedule::linear());
    REQUIRE(grid16.size() == 16);
    CHECK(grid16.front().t == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(grid16.front().s == doctest::Approx(0.9375).epsilon(1e-15));
    CHECK(grid16.back().s == 0.0);
    for (std::size_t i = 0; i + 1 < grid16.size(); ++i) {
        REQUIRE(grid16[i].s == grid16[i + 1].t);
    }

    const auto grid1 = discretize(1, MaskSchedule::cosine());
    REQUIRE(grid1.size() == 1);
    CHECK(grid1[0].t == 1.0);
    CHECK(grid1[0].s == 0.0);

    CHECK_THROWS_AS(discretize(0, MaskSchedule::linear()), std::invalid_argument);
}

TEST_CASE("discretize telescopes exactly") {
    for (const auto& sched : kAllSchedules) {
        for (const int steps : {1, 2, 7, 16, 64}) {
            const auto grid = discretize(steps, sched);
            double total = 0.0;
            for (const auto& step : grid) {
                total += step.gamma_t - step.gamma_s;
            }
            REQUIRE(std::abs(total - (gamma(sched, 1.0) - gamma(sched, 0.0))) <= 1e-12);
        }
    }
}

TEST_CASE("schedule names round-trip") {
    for (const auto& sched : kAllSchedules) {
        const auto parsed = schedule_from_name(schedule_name(sched.kind), sched.rate);
        CHECK(parsed.kind == sched.kind);
        CHECK(parsed.rate == sched.rate);
    }
    CHECK_THROWS_AS(schedule_from_name("quadratic"), std::invalid_argument);
}
