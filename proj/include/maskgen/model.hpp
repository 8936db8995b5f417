#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskgen/masking.hpp"
#include "maskgen/rng.hpp"

namespace maskgen {

enum class CondKind { Class, UncondFake, UncondMask };

/// Model conditioning: a class id, or one of the two unconditional
/// encodings used by guidance (a learnable fake-class slot, or the mask
/// slot itself).
struct Conditioning {
    CondKind kind = CondKind::UncondMask;
    std::int32_t class_id = -1;

    static Conditioning cls(std::int32_t c) {
        if (c < 0) {
            throw std::invalid_argument("Conditioning: class id must be >= 0");
        }
        return {CondKind::Class, c};
    }
    static Conditioning fake() { return {CondKind::UncondFake, -1}; }
    static Conditioning mask() { return {CondKind::UncondMask, -1}; }

    bool operator==(const Conditioning& o) const {
        return kind == o.kind && class_id == o.class_id;
    }
};

/// Per-position categorical predictions for the masked positions of a
/// sequence: one V-way probability vector per masked index.
class PositionPrediction {
public:
    explicit PositionPrediction(std::int32_t vocab) : vocab_(vocab) {
        if (vocab_ < 2) {
            throw std::invalid_argument("PositionPrediction: vocab must be >= 2");
        }
    }

    void add(std::int32_t position, std::span<const double> probs) {
        if (static_cast<std::int32_t>(probs.size()) != vocab_) {
            throw std::invalid_argument("PositionPrediction: row size mismatch");
        }
        if (!positions_.empty() && position <= positions_.back()) {
            throw std::invalid_argument("PositionPrediction: positions must be added ascending");
        }
        positions_.push_back(position);
        probs_.insert(probs_.end(), probs.begin(), probs.end());
    }

    std::int32_t vocab() const { return vocab_; }
    const std::vector<std::int32_t>& positions() const { return positions_; }
    std::size_t count() const { return positions_.size(); }

    std::span<const double> row(std::size_t idx) const {
        return {probs_.data() + idx * static_cast<std::size_t>(vocab_),
                static_cast<std::size_t>(vocab_)};
    }

    /// Row for a given sequence position; throws if the model skipped it.
    std::span<const double> row_for(std::int32_t position) const {
        const auto it = std::lower_bound(positions_.begin(), positions_.end(), position);
        if (it == positions_.end() || *it != position) {
            throw std::runtime_error("PositionPrediction: no prediction for position " +
                                     std::to_string(position));
        }
        return row(static_cast<std::size_t>(it - positions_.begin()));
    }

    bool has(std::int32_t position) const {
        return std::binary_search(positions_.begin(), positions_.end(), position);
    }

    /// Contract check: every row is a probability vector (sum within tol).
    void validate(double tol = 1e-9) const {
        for (std::size_t r = 0; r < count(); ++r) {
            double sum = 0.0;
            for (const double p : row(r)) {
                if (!(p >= 0.0) || !std::isfinite(p)) {
                    throw std::runtime_error(
                        "PositionPrediction: negative or non-finite probability");
                }
                sum += p;
            }
            if (std::abs(sum - 1.0) > tol) {
                throw std::runtime_error(
                    "PositionPrediction: row does not sum to 1 (got " + std::to_string(sum) +
                    ") - model violated the normalization contract");
            }
        }
    }

private:
    std::int32_t vocab_;
    std::vector<std::int32_t> positions_;
    std::vector<double> probs_;
};

/// Anything that can fill in masked positions: p(x0^i | x_t, cond).
class ConditionalModel {
public:
    virtual ~ConditionalModel() = default;
    virtual std::int32_t seq_len() const = 0;
    virtual std::int32_t vocab_size() const = 0;
    virtual PositionPrediction predict(const TokenSequence& xt,
                                       const Conditioning& cond) const = 0;
};

/// Exact Bayes posterior over a ToyDataset: p(x0^i = v | x0 agrees with xt
/// on unmasked positions, conditioning). Both unconditional encodings
/// marginalize over classes; they only differ for learned models.
inline PositionPrediction oracle_predict(const ToyDataset& data, const TokenSequence& xt,
                                         const Conditioning& cond) {
    data.require_enumerable("oracle_predict");
    if (xt.length() != data.seq_len() || xt.vocab_size() != data.vocab_size()) {
        throw std::invalid_argument("oracle_predict: sequence shape mismatch");
    }
    if (cond.kind == CondKind::Class && cond.class_id >= data.num_classes()) {
        throw std::invalid_argument("oracle_predict: class id outside dataset classes");
    }
    const std::int32_t n = xt.length();
    const std::int32_t v = xt.vocab_size();
    const auto masked = masked_positions(xt);

    std::vector<double> counts(masked.size() * static_cast<std::size_t>(v), 0.0);
    double total = 0.0;
    for (const auto& st : data.states()) {
        if (cond.kind == CondKind::Class && st.label != cond.class_id) {
            continue;
        }
        bool match = true;
        for (std::int32_t i = 0; i < n; ++i) {
            if (!xt.is_masked(i) && st.tokens.at(i) != xt.at(i)) {
                match = false;
                break;
            }
        }
        if (!match) {
            continue;
        }
        total += st.prob;
        for (std::size_t m = 0; m < masked.size(); ++m) {
            counts[m * static_cast<std::size_t>(v) +
                   static_cast<std::size_t>(st.tokens.at(masked[m]))] += st.prob;
        }
    }
    if (!(total > 0.0)) {
        throw std::runtime_error(
            "oracle_predict: inconsistent context - the visible tokens have zero "
            "probability under the dataset");
    }
    PositionPrediction pred(v);
    std::vector<double> row(static_cast<std::size_t>(v));
    for (std::size_t m = 0; m < masked.size(); ++m) {
        for (std::int32_t w = 0; w < v; ++w) {
            row[static_cast<std::size_t>(w)] =
                counts[m * static_cast<std::size_t>(v) + static_cast<std::size_t>(w)] / total;
        }
        pred.add(masked[m], row);
    }
    return pred;
}

class OracleModel final : public ConditionalModel {
public:
    explicit OracleModel(ToyDataset data) : data_(std::move(data)) {}

    std::int32_t seq_len() const override { return data_.seq_len(); }
    std::int32_t vocab_size() const override { return data_.vocab_size(); }
    const ToyDataset& dataset() const { return data_; }

    PositionPrediction predict(const TokenSequence& xt,
                               const Conditioning& cond) const override {
        return oracle_predict(data_, xt, cond);
    }

private:
    ToyDataset data_;
};

/// Deterministic pseudo-random categorical model: the distribution at a
/// masked position is a fixed Dirichlet(1) draw keyed by a hash of
/// (visible context, position, conditioning). Stands in for "an arbitrary
/// model" in exactness and equivalence checks; it has no parameters and
/// always returns the same prediction for the same input.
class TabularModel final : public ConditionalModel {
public:
    TabularModel(std::uint64_t seed, std::int32_t seq_len, std::int32_t vocab)
        : seed_(seed), n_(seq_len), v_(vocab) {
        if (seq_len < 1 || vocab < 2) {
            throw std::invalid_argument("TabularModel: bad shape");
        }
    }

    std::int32_t seq_len() const override { return n_; }
    std::int32_t vocab_size() const override { return v_; }

    PositionPrediction predict(const TokenSequence& xt,
                               const Conditioning& cond) const override {
        if (xt.length() != n_ || xt.vocab_size() != v_) {
            throw std::invalid_argument("TabularModel: sequence shape mismatch");
        }
        PositionPrediction pred(v_);
        std::vector<double> row(static_cast<std::size_t>(v_));
        for (const std::int32_t pos : masked_positions(xt)) {
            Rng rng(context_hash(xt, pos, cond));
            double sum = 0.0;
            for (auto& p : row) {
                p = -std::log(1.0 - rng.uniform());
                sum += p;
            }
            for (auto& p : row) {
                p /= sum;
            }
            pred.add(pos, row);
        }
        return pred;
    }

private:
    std::uint64_t context_hash(const TokenSequence& xt, std::int32_t pos,
                               const Conditioning& cond) const {
        std::uint64_t h = seed_;
        h = mix_seed(h, 0x517cc1b727220a95ULL);
        for (std::int32_t i = 0; i < xt.length(); ++i) {
            h = mix_seed(h, static_cast<std::uint64_t>(xt.at(i) + 2));
        }
        h = mix_seed(h, static_cast<std::uint64_t>(pos) + 11);
        h = mix_seed(h, static_cast<std::uint64_t>(cond.kind) * 131 +
                            static_cast<std::uint64_t>(cond.class_id + 1));
        return h;
    }

    std::uint64_t seed_;
    std::int32_t n_;
    std::int32_t v_;
};

/// A ConditionalModel with a flat parameter vector and analytic gradients
/// of the masked cross-entropy.
class LearnableModel : public ConditionalModel {
public:
    virtual std::size_t param_count() const = 0;
    virtual std::span<double> params() = 0;
    virtual std::span<const double> params() const = 0;

    /// Sum over `positions` of -log p(x0^i | xt, cond).
    virtual double masked_nll(const TokenSequence& xt, const Conditioning& cond,
                              const TokenSequence& x0,
                              std::span<const std::int32_t> positions) const = 0;

    /// Same value; additionally accumulates scale * d nll / d params into grad.
    virtual double masked_nll_backward(const TokenSequence& xt, const Conditioning& cond,
                                       const TokenSequence& x0,
                                       std::span<const std::int32_t> positions, double scale,
                                       std::span<double> grad) const = 0;
};

/// Small learnable categorical model. Features: a one-hot conditioning
/// block with C class slots plus a fake slot and a mask slot, then one
/// (V+1)-way one-hot per position (V tokens plus a masked indicator).
/// A single tanh hidden layer feeds per-position V-way logits.
class LearnedCatModel final : public LearnableModel {
public:
    LearnedCatModel(std::int32_t seq_len, std::int32_t vocab, std::int32_t num_classes,
                    std::int32_t hidden = 32)
        : n_(seq_len), v_(vocab), c_(num_classes), h_(hidden) {
        if (n_ < 1 || v_ < 2 || c_ < 0 || h_ < 1) {
            throw std::invalid_argument("LearnedCatModel: bad shape");
        }
        params_.assign(param_count(), 0.0);
    }

    std::int32_t seq_len() const override { return n_; }
    std::int32_t vocab_size() const override { return v_; }
    std::int32_t num_classes() const { return c_; }
    std::int32_t hidden() const { return h_; }

    std::size_t param_count() const override {
        return static_cast<std::size_t>(feature_dim()) * h_ + h_ +
               static_cast<std::size_t>(h_) * out_dim() + out_dim();
    }
    std::span<double> params() override { return params_; }
    std::span<const double> params() const override { return params_; }

    void randomize(Rng& rng, double scale = 0.1) {
        for (auto& p : params_) {
            p = rng.uniform(-scale, scale);
        }
    }

    PositionPrediction predict(const TokenSequence& xt,
                               const Conditioning& cond) const override {
        check_shapes(xt, cond);
        const auto logits = forward_logits(xt, cond);
        PositionPrediction pred(v_);
        std::vector<double> row(static_cast<std::size_t>(v_));
        for (const std::int32_t pos : masked_positions(xt)) {
            softmax_row(logits, pos, row);
            pred.add(pos, row);
        }
        return pred;
    }

    double masked_nll(const TokenSequence& xt, const Conditioning& cond,
                      const TokenSequence& x0,
                      std::span<const std::int32_t> positions) const override {
        check_shapes(xt, cond);
        const auto logits = forward_logits(xt, cond);
        double nll = 0.0;
        std::vector<double> row(static_cast<std::size_t>(v_));
        for (const std::int32_t pos : positions) {
            softmax_row(logits, pos, row);
            nll -= std::log(std::max(row[static_cast<std::size_t>(x0.at(pos))], 1e-300));
        }
        return nll;
    }

    double masked_nll_backward(const TokenSequence& xt, const Conditioning& cond,
                               const TokenSequence& x0,
                               std::span<const std::int32_t> positions, double scale,
                               std::span<double> grad) const override {
        check_shapes(xt, cond);
        if (grad.size() != param_count()) {
            throw std::invalid_argument("masked_nll_backward: gradient buffer size mismatch");
        }
        const std::size_t f_dim = feature_dim();
        const std::size_t o_dim = out_dim();

        const auto active = active_features(xt, cond);
        std::vector<double> hidden_pre(static_cast<std::size_t>(h_), 0.0);
        forward_hidden(active, hidden_pre);
        std::vector<double> hidden_act(static_cast<std::size_t>(h_));
        for (std::int32_t j = 0; j < h_; ++j) {
            hidden_act[static_cast<std::size_t>(j)] =
                std::tanh(hidden_pre[static_cast<std::size_t>(j)]);
        }
        std::vector<double> logits(o_dim);
        output_layer(hidden_act, logits);

        // d nll / d logits: softmax - onehot on the scored positions.
        std::vector<double> dlogits(o_dim, 0.0);
        double nll = 0.0;
        std::vector<double> row(static_cast<std::size_t>(v_));
        for (const std::int32_t pos : positions) {
            softmax_row(logits, pos, row);
            const auto target = static_cast<std::size_t>(x0.at(pos));
            nll -= std::log(std::max(row[target], 1e-300));
            const std::size_t base = static_cast<std::size_t>(pos) * v_;
            for (std::int32_t w = 0; w < v_; ++w) {
                dlogits[base + static_cast<std::size_t>(w)] +=
                    row[static_cast<std::size_t>(w)];
            }
            dlogits[base + target] -= 1.0;
        }

        double* g_w1 = grad.data();
        double* g_b1 = g_w1 + f_dim * h_;
        double* g_w2 = g_b1 + h_;
        double* g_b2 = g_w2 + static_cast<std::size_t>(h_) * o_dim;
        const double* w2 = params_.data() + f_dim * h_ + h_;

        std::vector<double> dhidden(static_cast<std::size_t>(h_), 0.0);
        for (std::size_t o = 0; o < o_dim; ++o) {
            const double d = dlogits[o];
            if (d == 0.0) {
                continue;
            }
            g_b2[o] += scale * d;
            for (std::int32_t j = 0; j < h_; ++j) {
                g_w2[static_cast<std::size_t>(j) * o_dim + o] +=
                    scale * d * hidden_act[static_cast<std::size_t>(j)];
                dhidden[static_cast<std::size_t>(j)] +=
                    d * w2[static_cast<std::size_t>(j) * o_dim + o];
            }
        }
        for (std::int32_t j = 0; j < h_; ++j) {
            const double a = hidden_act[static_cast<std::size_t>(j)];
            const double dpre = dhidden[static_cast<std::size_t>(j)] * (1.0 - a * a);
            g_b1[j] += scale * dpre;
            for (const std::size_t fi : active) {
                g_w1[fi * h_ + static_cast<std::size_t>(j)] += scale * dpre;
            }
        }
        return nll;
    }

    nlohmann::json checkpoint_to_json() const {
        nlohmann::json j;
        j["params"] = params_;
        j["meta"] = {{"N", n_}, {"V", v_}, {"C", c_}, {"hidden", h_}};
        return j;
    }

    static LearnedCatModel checkpoint_from_json(const nlohmann::json& j) {
        const auto& meta = j.at("meta");
        LearnedCatModel model(meta.at("N").get<std::int32_t>(),
                              meta.at("V").get<std::int32_t>(),
                              meta.at("C").get<std::int32_t>(),
                              meta.at("hidden").get<std::int32_t>());
        const auto params = j.at("params").get<std::vector<double>>();
        if (params.size() != model.param_count()) {
            throw std::invalid_argument("checkpoint: parameter count mismatch");
        }
        for (const double p : params) {
            if (!std::isfinite(p)) {
                throw std::invalid_argument("checkpoint: non-finite parameter");
            }
        }
        model.params_ = params;
        return model;
    }

    void save_file(const std::string& path) const {
        std::ofstream out(path);
        if (!out) {
            throw std::runtime_error("LearnedCatModel: cannot write " + path);
        }
        out << checkpoint_to_json().dump() << "\n";
    }

    static LearnedCatModel load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw std::runtime_error("LearnedCatModel: cannot open " + path);
        }
        nlohmann::json j;
        in >> j;
        return checkpoint_from_json(j);
    }

private:
    std::size_t feature_dim() const {
        return static_cast<std::size_t>(c_) + 2 +
               static_cast<std::size_t>(n_) * (static_cast<std::size_t>(v_) + 1);
    }
    std::size_t out_dim() const {
        return static_cast<std::size_t>(n_) * static_cast<std::size_t>(v_);
    }

    void check_shapes(const TokenSequence& xt, const Conditioning& cond) const {
        if (xt.length() != n_ || xt.vocab_size() != v_) {
            throw std::invalid_argument("LearnedCatModel: sequence shape mismatch");
        }
        if (cond.kind == CondKind::Class && cond.class_id >= c_) {
            throw std::invalid_argument("LearnedCatModel: class id outside range");
        }
    }

    /// Indices of the features that are 1 for this input (one in the
    /// conditioning block, one per position).
    std::vector<std::size_t> active_features(const TokenSequence& xt,
                                             const Conditioning& cond) const {
        std::vector<std::size_t> active;
        active.reserve(static_cast<std::size_t>(n_) + 1);
        switch (cond.kind) {
            case CondKind::Class:
                active.push_back(static_cast<std::size_t>(cond.class_id));
                break;
            case CondKind::UncondFake:
                active.push_back(static_cast<std::size_t>(c_));
                break;
            case CondKind::UncondMask:
                active.push_back(static_cast<std::size_t>(c_) + 1);
                break;
        }
        const std::size_t base = static_cast<std::size_t>(c_) + 2;
        for (std::int32_t i = 0; i < n_; ++i) {
            const std::size_t block =
                base + static_cast<std::size_t>(i) * (static_cast<std::size_t>(v_) + 1);
            const std::int32_t tok = xt.at(i);
            active.push_back(block + (tok == kMaskToken ? static_cast<std::size_t>(v_)
                                                        : static_cast<std::size_t>(tok)));
        }
        return active;
    }

    void forward_hidden(const std::vector<std::size_t>& active,
                        std::vector<double>& hidden_pre) const {
        const std::size_t f_dim = feature_dim();
        const double* w1 = params_.data();
        const double* b1 = w1 + f_dim * h_;
        for (std::int32_t j = 0; j < h_; ++j) {
            hidden_pre[static_cast<std::size_t>(j)] = b1[j];
        }
        for (const std::size_t fi : active) {
            const double* col = w1 + fi * h_;
            for (std::int32_t j = 0; j < h_; ++j) {
                hidden_pre[static_cast<std::size_t>(j)] += col[j];
            }
        }
    }

    void output_layer(const std::vector<double>& hidden_act,
                      std::vector<double>& logits) const {
        const std::size_t f_dim = feature_dim();
        const std::size_t o_dim = out_dim();
        const double* w2 = params_.data() + f_dim * h_ + h_;
        const double* b2 = w2 + static_cast<std::size_t>(h_) * o_dim;
        for (std::size_t o = 0; o < o_dim; ++o) {
            logits[o] = b2[o];
        }
        for (std::int32_t j = 0; j < h_; ++j) {
            const double a = hidden_act[static_cast<std::size_t>(j)];
            if (a == 0.0) {
                continue;
            }
            const double* row = w2 + static_cast<std::size_t>(j) * o_dim;
            for (std::size_t o = 0; o < o_dim; ++o) {
                logits[o] += a * row[o];
            }
        }
    }

    std::vector<double> forward_logits(const TokenSequence& xt,
                                       const Conditioning& cond) const {
        const auto active = active_features(xt, cond);
        std::vector<double> hidden_pre(static_cast<std::size_t>(h_), 0.0);
        forward_hidden(active, hidden_pre);
        std::vector<double> hidden_act(static_cast<std::size_t>(h_));
        for (std::int32_t j = 0; j < h_; ++j) {
            hidden_act[static_cast<std::size_t>(j)] =
                std::tanh(hidden_pre[static_cast<std::size_t>(j)]);
        }
        std::vector<double> logits(out_dim());
        output_layer(hidden_act, logits);
        return logits;
    }

    void softmax_row(const std::vector<double>& logits, std::int32_t pos,
                     std::vector<double>& row) const {
        const std::size_t base = static_cast<std::size_t>(pos) * v_;
        double mx = logits[base];
        for (std::int32_t w = 1; w < v_; ++w) {
            mx = std::max(mx, logits[base + static_cast<std::size_t>(w)]);
        }
        double sum = 0.0;
        for (std::int32_t w = 0; w < v_; ++w) {
            row[static_cast<std::size_t>(w)] =
                std::exp(logits[base + static_cast<std::size_t>(w)] - mx);
            sum += row[static_cast<std::size_t>(w)];
        }
        for (std::int32_t w = 0; w < v_; ++w) {
            row[static_cast<std::size_t>(w)] /= sum;
        }
    }

    std::int32_t n_;
    std::int32_t v_;
    std::int32_t c_;
    std::int32_t h_;
    std::vector<double> params_;
};

} // namespace maskgen
