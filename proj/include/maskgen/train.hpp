#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "maskgen/loss.hpp"
#include "maskgen/masking.hpp"
#include "maskgen/model.hpp"
#include "maskgen/rng.hpp"

namespace maskgen {

struct TrainConfig {
    double learning_rate = 0.05;
    int steps = 2000;
    int batch_size = 32;
    std::uint64_t seed = 0;
    /// Probability of replacing the class conditioning with the
    /// unconditional encoding during training (the guidance dropout rate).
    double uncond_prob = 0.1;
    /// Which unconditional encoding the dropout uses: the mask slot or the
    /// learnable fake-class slot.
    CondKind uncond_encoding = CondKind::UncondMask;

    void validate() const {
        if (steps < 0 || batch_size < 1) {
            throw std::invalid_argument("TrainConfig: bad steps/batch_size");
        }
        if (!(learning_rate > 0.0)) {
            throw std::invalid_argument("TrainConfig: learning_rate must be positive");
        }
        if (!(uncond_prob >= 0.0 && uncond_prob <= 1.0)) {
            throw std::invalid_argument("TrainConfig: uncond_prob must lie in [0,1]");
        }
        if (uncond_encoding == CondKind::Class) {
            throw std::invalid_argument("TrainConfig: uncond_encoding must be fake or mask");
        }
    }
};

struct TrainResult {
    std::vector<double> loss_curve; // per-step Monte-Carlo batch loss
    double initial_exact_loss = 0.0;
    double final_exact_loss = 0.0;
};

/// Plain SGD on the Monte-Carlo unified objective. Batches are drawn from
/// the dataset proportionally to state probabilities; class conditioning
/// is dropped to the unconditional encoding at rate uncond_prob so both
/// guided paths stay trained. Aborts with a diagnostic if the loss
/// diverges to a non-finite value.
inline TrainResult train_model(LearnableModel& model, const ToyDataset& data,
                               const LossConfig& loss_cfg, const TrainConfig& train_cfg) {
    loss_cfg.validate();
    train_cfg.validate();
    Rng rng(train_cfg.seed);

    std::vector<double> cumulative;
    cumulative.reserve(data.states().size());
    double acc = 0.0;
    for (const auto& st : data.states()) {
        acc += st.prob;
        cumulative.push_back(acc);
    }

    TrainResult result;
    result.initial_exact_loss = loss_exact(model, data, loss_cfg);
    result.loss_curve.reserve(static_cast<std::size_t>(train_cfg.steps));

    std::vector<std::pair<TokenSequence, Conditioning>> batch;
    batch.reserve(static_cast<std::size_t>(train_cfg.batch_size));
    for (int step = 0; step < train_cfg.steps; ++step) {
        batch.clear();
        for (int b = 0; b < train_cfg.batch_size; ++b) {
            const double u = rng.uniform();
            std::size_t idx = 0;
            while (idx + 1 < cumulative.size() && u >= cumulative[idx]) {
                ++idx;
            }
            const auto& st = data.states()[idx];
            Conditioning cond = data.num_classes() > 0 ? Conditioning::cls(st.label)
                                                       : Conditioning::mask();
            if (data.num_classes() > 0 && rng.bernoulli(train_cfg.uncond_prob)) {
                cond = train_cfg.uncond_encoding == CondKind::UncondFake
                           ? Conditioning::fake()
                           : Conditioning::mask();
            }
            batch.emplace_back(st.tokens, cond);
        }
        const LossGrad lg = loss_grad(model, batch, loss_cfg, rng);
        if (!std::isfinite(lg.value)) {
            throw std::runtime_error("train_model: loss diverged (non-finite) at step " +
                                     std::to_string(step));
        }
        auto params = model.params();
        bool finite = true;
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i] -= train_cfg.learning_rate * lg.grad[i];
            finite = finite && std::isfinite(params[i]);
        }
        if (!finite) {
            throw std::runtime_error(
                "train_model: parameters diverged (non-finite) at step " +
                std::to_string(step));
        }
        result.loss_curve.push_back(lg.value);
    }
    result.final_exact_loss = loss_exact(model, data, loss_cfg);
    return result;
}

} // namespace maskgen
