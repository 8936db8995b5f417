#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <cstdint>
#include <utility>
#include <vector>

#include "maskgen/diffusion_head.hpp"
#include "maskgen/masking.hpp"
#include "maskgen/rng.hpp"

namespace testsupport {

/// The pinned three-component benchmark mixture used by every
/// continuous-head comparison: three distinct modes at three scales,
/// zero overall mean.
inline maskgen::GaussianMixture benchmark_mixture() {
    std::vector<maskgen::GmComponent> components;
    components.push_back({0.35, {-1.5}, {0.16}});
    components.push_back({0.40, {0.1}, {0.25}});
    components.push_back({0.25, {1.94}, {0.09}});
    return maskgen::GaussianMixture(std::move(components));
}

inline maskgen::ToyDataset random_dataset(std::int32_t n, std::int32_t v,
                                          std::int32_t classes, std::uint64_t seed) {
    maskgen::Rng rng(seed);
    const auto space = maskgen::state_space_size(n, v);
    std::vector<double> probs(space);
    double total = 0.0;
    for (auto& p : probs) {
        p = 0.05 + rng.uniform();
        total += p;
    }
    double acc = 0.0;
    std::vector<maskgen::DatasetState> states;
    for (std::uint64_t idx = 0; idx < space; ++idx) {
        double p = probs[idx] / total;
        acc += p;
        if (idx + 1 == space) {
            p += 1.0 - acc;
        }
        const std::int32_t label =
            classes > 0 ? static_cast<std::int32_t>(idx % classes) : -1;
        states.push_back({maskgen::sequence_from_index(idx, n, v), p, label});
    }
    return maskgen::ToyDataset(std::move(states), classes);
}

/// Correlated N=3, V=2 distribution with full support: most of the mass
/// on the two constant sequences, the remaining states thinly covered so
/// every visible context stays consistent under parallel unmasking.
inline maskgen::ToyDataset correlated_n3v2() {
    using maskgen::TokenSequence;
    using maskgen::sequence_from_index;
    std::vector<maskgen::DatasetState> states;
    for (std::uint64_t idx = 0; idx < 8; ++idx) {
        double p = 0.05;
        if (idx == 0 || idx == 7) { // 000 and 111
            p = 0.35;
        }
        states.push_back({sequence_from_index(idx, 3, 2), p, -1});
    }
    return maskgen::ToyDataset(std::move(states), 0);
}

/// Strongly correlated N=4, V=3 distribution with full support: 75% of
/// the mass on the three constant sequences, so parallel unmasking at
/// very few steps visibly cross-mixes the modes.
inline maskgen::ToyDataset correlated_n4v3() {
    using maskgen::TokenSequence;
    using maskgen::sequence_from_index;
    std::vector<maskgen::DatasetState> states;
    const double rest = 0.25 / 78.0;
    double acc = 0.0;
    for (std::uint64_t idx = 0; idx < 81; ++idx) {
        double p = rest;
        if (idx == 0 || idx == 40 || idx == 80) { // 0000, 1111, 2222
            p = 0.25;
        }
        acc += p;
        if (idx == 80) {
            p += 1.0 - acc; // absorb float residue so the sum is exactly 1
        }
        states.push_back({sequence_from_index(idx, 4, 3), p, -1});
    }
    return maskgen::ToyDataset(std::move(states), 0);
}

} // namespace testsupport
