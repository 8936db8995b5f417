#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskgen/rng.hpp"

namespace maskgen {

/// Sentinel for an absorbed (masked) position. Deliberately outside the
/// vocabulary range 0..V-1, so categorical distributions stay V-way.
inline constexpr std::int32_t kMaskToken = -1;

/// Fixed-length token array over a vocabulary of size V, where each entry
/// is either a token id in [0, V) or the mask sentinel.
class TokenSequence {
public:
    TokenSequence(std::vector<std::int32_t> tokens, std::int32_t vocab_size)
        : tokens_(std::move(tokens)), vocab_(vocab_size) {
        if (vocab_ < 2) {
            throw std::invalid_argument("TokenSequence: vocab_size must be >= 2");
        }
        if (tokens_.empty()) {
            throw std::invalid_argument("TokenSequence: length must be >= 1");
        }
        for (const std::int32_t v : tokens_) {
            check_token(v);
        }
    }

    static TokenSequence fully_masked(std::int32_t length, std::int32_t vocab_size) {
        return TokenSequence(std::vector<std::int32_t>(static_cast<std::size_t>(length),
                                                       kMaskToken),
                             vocab_size);
    }

    std::int32_t length() const { return static_cast<std::int32_t>(tokens_.size()); }
    std::int32_t vocab_size() const { return vocab_; }
    std::span<const std::int32_t> tokens() const { return tokens_; }

    std::int32_t at(std::int32_t i) const { return tokens_.at(static_cast<std::size_t>(i)); }
    bool is_masked(std::int32_t i) const { return at(i) == kMaskToken; }

    void set(std::int32_t i, std::int32_t value) {
        check_token(value);
        tokens_.at(static_cast<std::size_t>(i)) = value;
    }

    std::int32_t mask_count() const {
        return static_cast<std::int32_t>(
            std::count(tokens_.begin(), tokens_.end(), kMaskToken));
    }

    bool fully_unmasked() const { return mask_count() == 0; }

    bool operator==(const TokenSequence& other) const {
        return vocab_ == other.vocab_ && tokens_ == other.tokens_;
    }

private:
    void check_token(std::int32_t v) const {
        if (v != kMaskToken && (v < 0 || v >= vocab_)) {
            throw std::invalid_argument("TokenSequence: token id " + std::to_string(v) +
                                        " outside vocabulary of size " +
                                        std::to_string(vocab_));
        }
    }

    std::vector<std::int32_t> tokens_;
    std::int32_t vocab_;
};

inline void check_mask_fraction(double gamma_t, const char* who) {
    if (!(gamma_t >= 0.0 && gamma_t <= 1.0)) {
        throw std::domain_error(std::string(who) + ": masking fraction must lie in [0,1]");
    }
}

inline void check_clean(const TokenSequence& x0, const char* who) {
    if (!x0.fully_unmasked()) {
        throw std::invalid_argument(std::string(who) + ": input is already masked");
    }
}

/// Forward process: each position independently becomes MASK with
/// probability gamma_t.
inline TokenSequence mask_independent(const TokenSequence& x0, double gamma_t, Rng& rng) {
    check_clean(x0, "mask_independent");
    check_mask_fraction(gamma_t, "mask_independent");
    TokenSequence out = x0;
    for (std::int32_t i = 0; i < x0.length(); ++i) {
        if (rng.bernoulli(gamma_t)) {
            out.set(i, kMaskToken);
        }
    }
    return out;
}

/// ceil(N * gamma) clamped to [0, N].
inline std::int32_t mask_count_for(std::int32_t n, double gamma_t) {
    check_mask_fraction(gamma_t, "mask_count_for");
    const double raw = std::ceil(static_cast<double>(n) * gamma_t);
    return static_cast<std::int32_t>(std::clamp(raw, 0.0, static_cast<double>(n)));
}

/// Forward process: exactly ceil(N * gamma_t) distinct positions chosen
/// uniformly without replacement become MASK.
inline TokenSequence mask_fixed_count(const TokenSequence& x0, double gamma_t, Rng& rng) {
    check_clean(x0, "mask_fixed_count");
    check_mask_fraction(gamma_t, "mask_fixed_count");
    const std::int32_t n = x0.length();
    const std::int32_t k = mask_count_for(n, gamma_t);
    std::vector<std::int32_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    TokenSequence out = x0;
    for (std::int32_t j = 0; j < k; ++j) {
        const std::int32_t pick =
            j + static_cast<std::int32_t>(rng.uniform_below(static_cast<std::uint64_t>(n - j)));
        std::swap(idx[static_cast<std::size_t>(j)], idx[static_cast<std::size_t>(pick)]);
        out.set(idx[static_cast<std::size_t>(j)], kMaskToken);
    }
    return out;
}

/// Ascending indices of masked positions.
inline std::vector<std::int32_t> masked_positions(const TokenSequence& x) {
    std::vector<std::int32_t> out;
    for (std::int32_t i = 0; i < x.length(); ++i) {
        if (x.is_masked(i)) {
            out.push_back(i);
        }
    }
    return out;
}

/// Number of joint states V^N, guarded against overflow.
inline std::uint64_t state_space_size(std::int32_t n, std::int32_t v) {
    std::uint64_t size = 1;
    for (std::int32_t i = 0; i < n; ++i) {
        if (size > (1ULL << 40)) {
            return size;
        }
        size *= static_cast<std::uint64_t>(v);
    }
    return size;
}

inline constexpr std::uint64_t kEnumerationBound = 1ULL << 20;

/// Mixed-radix index of a fully unmasked sequence in the V^N state space.
/// Position 0 is the most significant digit.
inline std::uint64_t sequence_index(const TokenSequence& x) {
    if (!x.fully_unmasked()) {
        throw std::invalid_argument("sequence_index: sequence contains masked positions");
    }
    std::uint64_t idx = 0;
    for (std::int32_t i = 0; i < x.length(); ++i) {
        idx = idx * static_cast<std::uint64_t>(x.vocab_size()) +
              static_cast<std::uint64_t>(x.at(i));
    }
    return idx;
}

inline TokenSequence sequence_from_index(std::uint64_t idx, std::int32_t n, std::int32_t v) {
    std::vector<std::int32_t> tokens(static_cast<std::size_t>(n), 0);
    for (std::int32_t i = n - 1; i >= 0; --i) {
        tokens[static_cast<std::size_t>(i)] =
            static_cast<std::int32_t>(idx % static_cast<std::uint64_t>(v));
        idx /= static_cast<std::uint64_t>(v);
    }
    return TokenSequence(std::move(tokens), v);
}

struct DatasetState {
    TokenSequence tokens;
    double prob;
    std::int32_t label; // -1 when the dataset is unconditional
};

/// Fully enumerated joint distribution over sequences, optionally
/// class-conditional. Ground truth for posterior oracles and for
/// distribution-distance evaluation.
class ToyDataset {
public:
    ToyDataset(std::vector<DatasetState> states, std::int32_t num_classes)
        : states_(std::move(states)), num_classes_(num_classes) {
        if (states_.empty()) {
            throw std::invalid_argument("ToyDataset: need at least one state");
        }
        if (num_classes_ < 0) {
            throw std::invalid_argument("ToyDataset: num_classes must be >= 0");
        }
        const auto& first = states_.front().tokens;
        double total = 0.0;
        for (const auto& st : states_) {
            if (st.tokens.length() != first.length() ||
                st.tokens.vocab_size() != first.vocab_size()) {
                throw std::invalid_argument("ToyDataset: states must share N and V");
            }
            if (!st.tokens.fully_unmasked()) {
                throw std::invalid_argument("ToyDataset: states must be fully unmasked");
            }
            if (!(st.prob > 0.0)) {
                throw std::invalid_argument("ToyDataset: state probabilities must be positive");
            }
            if (num_classes_ == 0) {
                if (st.label != -1) {
                    throw std::invalid_argument(
                        "ToyDataset: labels present but num_classes is 0");
                }
            } else if (st.label < 0 || st.label >= num_classes_) {
                throw std::invalid_argument("ToyDataset: label outside [0, num_classes)");
            }
            total += st.prob;
        }
        if (std::abs(total - 1.0) > 1e-12) {
            throw std::invalid_argument("ToyDataset: probabilities sum to " +
                                        std::to_string(total) + ", expected 1");
        }
    }

    std::int32_t seq_len() const { return states_.front().tokens.length(); }
    std::int32_t vocab_size() const { return states_.front().tokens.vocab_size(); }
    std::int32_t num_classes() const { return num_classes_; }
    const std::vector<DatasetState>& states() const { return states_; }

    void require_enumerable(const char* who) const {
        const std::uint64_t size = state_space_size(seq_len(), vocab_size());
        if (size > kEnumerationBound) {
            throw std::invalid_argument(
                std::string(who) + ": state space V^N = " + std::to_string(size) +
                " exceeds the exact-enumeration bound 2^20 = " +
                std::to_string(kEnumerationBound));
        }
    }

    /// Joint distribution over the V^N state space (marginalized over class).
    std::vector<double> joint_distribution() const {
        require_enumerable("joint_distribution");
        std::vector<double> p(static_cast<std::size_t>(state_space_size(seq_len(), vocab_size())),
                              0.0);
        for (const auto& st : states_) {
            p[static_cast<std::size_t>(sequence_index(st.tokens))] += st.prob;
        }
        return p;
    }

    double class_prob(std::int32_t label) const {
        double p = 0.0;
        for (const auto& st : states_) {
            if (st.label == label) {
                p += st.prob;
            }
        }
        return p;
    }

    /// P(x | class = label) over the V^N state space.
    std::vector<double> conditional_distribution(std::int32_t label) const {
        require_enumerable("conditional_distribution");
        const double pc = class_prob(label);
        if (!(pc > 0.0)) {
            throw std::invalid_argument("conditional_distribution: class has zero probability");
        }
        std::vector<double> p(static_cast<std::size_t>(state_space_size(seq_len(), vocab_size())),
                              0.0);
        for (const auto& st : states_) {
            if (st.label == label) {
                p[static_cast<std::size_t>(sequence_index(st.tokens))] += st.prob / pc;
            }
        }
        return p;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["N"] = seq_len();
        j["V"] = vocab_size();
        j["num_classes"] = num_classes_;
        nlohmann::json states = nlohmann::json::array();
        for (const auto& st : states_) {
            nlohmann::json s;
            s["tokens"] = std::vector<std::int32_t>(st.tokens.tokens().begin(),
                                                    st.tokens.tokens().end());
            s["prob"] = st.prob;
            if (num_classes_ > 0) {
                s["class"] = st.label;
            }
            states.push_back(std::move(s));
        }
        j["states"] = std::move(states);
        return j;
    }

    static ToyDataset from_json(const nlohmann::json& j) {
        const auto n = j.at("N").get<std::int32_t>();
        const auto v = j.at("V").get<std::int32_t>();
        const auto num_classes = j.at("num_classes").get<std::int32_t>();
        std::vector<DatasetState> states;
        for (const auto& s : j.at("states")) {
            auto tokens = s.at("tokens").get<std::vector<std::int32_t>>();
            if (static_cast<std::int32_t>(tokens.size()) != n) {
                throw std::invalid_argument("ToyDataset: state length differs from N");
            }
            const double prob = s.at("prob").get<double>();
            std::int32_t label = -1;
            if (s.contains("class") && !s.at("class").is_null()) {
                label = s.at("class").get<std::int32_t>();
            }
            states.push_back({TokenSequence(std::move(tokens), v), prob, label});
        }
        return ToyDataset(std::move(states), num_classes);
    }

    static ToyDataset load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw std::runtime_error("ToyDataset: cannot open " + path);
        }
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

    void save_file(const std::string& path) const {
        std::ofstream out(path);
        if (!out) {
            throw std::runtime_error("ToyDataset: cannot write " + path);
        }
        out << to_json().dump(2) << "\n";
    }

private:
    std::vector<DatasetState> states_;
    std::int32_t num_classes_;
};

} // namespace maskgen
