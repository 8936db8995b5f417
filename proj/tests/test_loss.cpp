#include <doctest.h>

#include <cmath>
#include <utility>
#include <vector>

#include "maskgen/loss.hpp"
#include "maskgen/masking.hpp"
#include "maskgen/model.hpp"
#include "maskgen/rng.hpp"

using namespace maskgen;

namespace {

TokenSequence make_seq(std::vector<std::int32_t> tokens, std::int32_t v) {
    return TokenSequence(std::move(tokens), v);
}

ToyDataset single_state_dataset(std::vector<std::int32_t> tokens, std::int32_t v) {
    std::vector<DatasetState> states;
    states.push_back({make_seq(std::move(tokens), v), 1.0, -1});
    return ToyDataset(std::move(states), 0);
}

ToyDataset correlated_n2() {
    std::vector<DatasetState> states;
    states.push_back({make_seq({0, 0}, 2), 0.4, -1});
    states.push_back({make_seq({0, 1}, 2), 0.1, -1});
    states.push_back({make_seq({1, 0}, 2), 0.1, -1});
    states.push_back({make_seq({1, 1}, 2), 0.4, -1});
    return ToyDataset(std::move(states), 0);
}

ToyDataset random_dataset(std::int32_t n, std::int32_t v, std::uint64_t seed) {
    Rng rng(seed);
    const auto space = state_space_size(n, v);
    std::vector<double> probs(space);
    double total = 0.0;
    for (auto& p : probs) {
        p = 0.05 + rng.uniform();
        total += p;
    }
    double acc = 0.0;
    std::vector<DatasetState> states;
    for (std::uint64_t idx = 0; idx < space; ++idx) {
        double p = probs[idx] / total;
        acc += p;
        if (idx + 1 == space) {
            p += 1.0 - acc;
        }
        states.push_back({sequence_from_index(idx, n, v), p, -1});
    }
    return ToyDataset(std::move(states), 0);
}

/// Assigns probability `p_true` to position 0's true token for vocab 2,
/// regardless of context. For the N=1 closed-form checks.
class ConstantModel final : public ConditionalModel {
public:
    ConstantModel(std::int32_t n, std::int32_t v, std::vector<double> probs)
        : n_(n), v_(v), probs_(std::move(probs)) {}

    std::int32_t seq_len() const override { return n_; }
    std::int32_t vocab_size() const override { return v_; }

    PositionPrediction predict(const TokenSequence& xt,
                               const Conditioning&) const override {
        PositionPrediction pred(v_);
        for (const std::int32_t pos : masked_positions(xt)) {
            pred.add(pos, probs_);
        }
        return pred;
    }

private:
    std::int32_t n_;
    std::int32_t v_;
    std::vector<double> probs_;
};

/// Violates the normalization contract on purpose.
class BrokenModel final : public ConditionalModel {
public:
    std::int32_t seq_len() const override { return 2; }
    std::int32_t vocab_size() const override { return 2; }
    PositionPrediction predict(const TokenSequence& xt,
                               const Conditioning&) const override {
        PositionPrediction pred(2);
        const std::vector<double> bad{0.6, 0.3};
        for (const std::int32_t pos : masked_positions(xt)) {
            pred.add(pos, bad);
        }
        return pred;
    }
};

/// Learnable model with no parameters; predicts uniform.
class ZeroParamModel final : public LearnableModel {
public:
    std::int32_t seq_len() const override { return 2; }
    std::int32_t vocab_size() const override { return 2; }
    PositionPrediction predict(const TokenSequence& xt,
                               const Conditioning&) const override {
        PositionPrediction pred(2);
        const std::vector<double> uniform{0.5, 0.5};
        for (const std::int32_t pos : masked_positions(xt)) {
            pred.add(pos, uniform);
        }
        return pred;
    }
    std::size_t param_count() const override { return 0; }
    std::span<double> params() override { return {}; }
    std::span<const double> params() const override { return {}; }
    double masked_nll(const TokenSequence&, const Conditioning&, const TokenSequence&,
                      std::span<const std::int32_t> positions) const override {
        return static_cast<double>(positions.size()) * std::log(2.0);
    }
    double masked_nll_backward(const TokenSequence& xt, const Conditioning& cond,
                               const TokenSequence& x0,
                               std::span<const std::int32_t> positions, double,
                               std::span<double>) const override {
        return masked_nll(xt, cond, x0, positions);
    }
};

LossConfig linear_mdm_config() {
    LossConfig cfg;
    cfg.schedule = MaskSchedule::linear();
    cfg.weight = WeightMode::MdmRatio;
    cfg.window = {0.0, 1.0};
    cfg.masking = MaskingKind::Independent;
    cfg.quadrature_points = 256;
    return cfg;
}

} // namespace

TEST_CASE("a perfect model has zero loss") {
    const auto data = single_state_dataset({1, 0, 1}, 2);
    const OracleModel oracle(data); // point-mass dataset -> oracle predicts prob 1
    for (const auto masking : {MaskingKind::Independent, MaskingKind::FixedCount}) {
        for (const auto weight : {WeightMode::Constant, WeightMode::MdmRatio}) {
            LossConfig cfg = linear_mdm_config();
            cfg.masking = masking;
            cfg.weight = weight;
            CHECK(loss_exact(oracle, data, cfg) == doctest::Approx(0.0).epsilon(1e-12));
        }
    }
    Rng rng(1);
    LossConfig cfg = linear_mdm_config();
    cfg.mc_samples = 100;
    CHECK(loss_mc(oracle, data.states()[0].tokens, Conditioning::mask(), cfg, rng) ==
          doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("N=1 closed forms: MdmRatio integrates gamma' over the window") {
    // Constant model with p(true) = p: the t-integrand collapses to
    // gamma'(t) (-log p), so the loss is (t_max - t_min)(-log p) for the
    // linear schedule.
    const double p = 0.35;
    const ConstantModel model(1, 2, {p, 1.0 - p});
    const auto data = single_state_dataset({0}, 2);

    LossConfig cfg = linear_mdm_config();
    cfg.window = {1e-3, 1.0};
    const double expected = (1.0 - 1e-3) * (-std::log(p));
    CHECK(loss_exact(model, data, cfg) == doctest::Approx(expected).epsilon(1e-9));

    // Monte-Carlo route converges to the same value.
    Rng rng(11);
    cfg.mc_samples = 200000;
    const double mc = loss_mc(model, data.states()[0].tokens, Conditioning::mask(), cfg, rng);
    CHECK(mc == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("N=1 closed forms: constant weight halves the cross entropy") {
    const double p = 0.6;
    const ConstantModel model(1, 2, {p, 1.0 - p});
    const auto data = single_state_dataset({0}, 2);
    LossConfig cfg = linear_mdm_config();
    cfg.weight = WeightMode::Constant;
    const double expected = 0.5 * (-std::log(p));
    CHECK(loss_exact(model, data, cfg) == doctest::Approx(expected).epsilon(1e-9));

    Rng rng(13);
    cfg.mc_samples = 200000;
    const double mc = loss_mc(model, data.states()[0].tokens, Conditioning::mask(), cfg, rng);
    CHECK(mc == doctest::Approx(expected).epsilon(0.03));
}

TEST_CASE("loss_mc converges to loss_exact within Monte-Carlo error") {
    const auto data = single_state_dataset({0, 1, 0}, 2);
    const TabularModel model(404, 3, 2);
    LossConfig cfg;
    cfg.schedule = MaskSchedule::exponential(5.0);
    cfg.weight = WeightMode::Constant;
    cfg.window = {0.2, 1.0};
    cfg.masking = MaskingKind::Independent;
    cfg.quadrature_points = 256;
    const double exact = loss_exact(model, data, cfg);

    const int n = 100000;
    Rng rng(21);
    double sum = 0.0;
    double sum_sq = 0.0;
    LossConfig one = cfg;
    one.mc_samples = 1;
    for (int i = 0; i < n; ++i) {
        const double v =
            loss_mc(model, data.states()[0].tokens, Conditioning::mask(), one, rng);
        sum += v;
        sum_sq += v * v;
    }
    const double mean = sum / n;
    const double var = (sum_sq - n * mean * mean) / (n - 1);
    const double se = std::sqrt(var / n);
    CHECK(std::abs(mean - exact) <= 4.0 * se + 1e-12);
}

TEST_CASE("maskgit exact loss: N=1 reduces to plain cross entropy") {
    const double p = 0.45;
    const ConstantModel model(1, 2, {p, 1.0 - p});
    const auto data = single_state_dataset({0}, 2);
    CHECK(maskgit_loss_exact(model, data) == doctest::Approx(-std::log(p)).epsilon(1e-12));
}

TEST_CASE("maskgit exact loss matches the hand enumeration on correlated data") {
    // Spreadsheet oracle for P(00)=P(11)=0.4, P(01)=P(10)=0.1 with the
    // exact posterior model: per state, l=1 masks cost -log P(token|other)
    // each (weight 1/2 per subset), and the full mask costs 2 log 2
    // (weight 1/2). Collapsing the symmetric terms:
    //   L = 0.8 (-log 0.8) + 0.2 (-log 0.2) + log 2.
    const auto data = correlated_n2();
    const OracleModel oracle(data);
    const double expected =
        0.8 * (-std::log(0.8)) + 0.2 * (-std::log(0.2)) + std::log(2.0);
    CHECK(maskgit_loss_exact(oracle, data) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("maskgit loss equals the unified loss at (linear, MdmRatio)") {
    // The equivalence-in-expectation statement, run as an executable
    // property over random tabular models and dataset shapes.
    int checked = 0;
    for (const std::int32_t n : {1, 2, 3, 4}) {
        for (const std::int32_t v : {2, 3}) {
            const auto data = random_dataset(n, v, 900 + n * 7 + v);
            const TabularModel model(7000 + n * 13 + v, n, v);
            const double mg = maskgit_loss_exact(model, data);
            const double md = loss_exact(model, data, linear_mdm_config());
            REQUIRE(std::abs(mg - md) / std::abs(md) <= 1e-6);
            ++checked;
        }
    }
    CHECK(checked == 8);
}

TEST_CASE("independent and fixed-count masking agree under (linear, MdmRatio)") {
    const auto data = random_dataset(3, 2, 321);
    const TabularModel model(555, 3, 2);
    LossConfig indep = linear_mdm_config();
    LossConfig fixed = indep;
    fixed.masking = MaskingKind::FixedCount;
    const double a = loss_exact(model, data, indep);
    const double b = loss_exact(model, data, fixed);
    CHECK(std::abs(a - b) / std::abs(a) <= 1e-6);
}

TEST_CASE("the window integral is additive") {
    const auto data = random_dataset(3, 2, 77);
    const TabularModel model(88, 3, 2);
    for (const auto masking : {MaskingKind::Independent, MaskingKind::FixedCount}) {
        for (const auto weight : {WeightMode::Constant, WeightMode::MdmRatio}) {
            LossConfig cfg;
            cfg.schedule = MaskSchedule::exponential(5.0);
            cfg.weight = weight;
            cfg.masking = masking;
            cfg.quadrature_points = 256;
            cfg.window = {0.0, 0.3};
            const double left = loss_exact(model, data, cfg);
            cfg.window = {0.3, 1.0};
            const double right = loss_exact(model, data, cfg);
            cfg.window = {0.0, 1.0};
            const double whole = loss_exact(model, data, cfg);
            REQUIRE(std::abs(left + right - whole) <= 1e-9 * std::max(1.0, whole));
        }
    }
}

TEST_CASE("losses are non-negative and zero only for exact models") {
    const auto data = random_dataset(2, 3, 4242);
    for (int m = 0; m < 20; ++m) {
        const TabularModel model(6000 + m, 2, 3);
        const double v = loss_exact(model, data, linear_mdm_config());
        REQUIRE(v >= 0.0);
        REQUIRE(v > 0.0); // random tabular models never match the posterior
    }
}

TEST_CASE("the exact oracle minimizes the exact loss") {
    const auto data = random_dataset(2, 2, 31337);
    const OracleModel oracle(data);
    const double oracle_loss = loss_exact(oracle, data, linear_mdm_config());
    for (int m = 0; m < 100; ++m) {
        const TabularModel model(900000 + m, 2, 2);
        REQUIRE(oracle_loss <= loss_exact(model, data, linear_mdm_config()) + 1e-12);
    }
}

TEST_CASE("non-normalized predictions trip the contract check") {
    const BrokenModel model;
    const auto x0 = make_seq({0, 1}, 2);
    LossConfig cfg = linear_mdm_config();
    cfg.window = {0.9, 1.0}; // keep the mask non-empty so predict runs
    cfg.mc_samples = 50;
    Rng rng(3);
    CHECK_THROWS_WITH_AS(loss_mc(model, x0, Conditioning::mask(), cfg, rng),
                         doctest::Contains("normalization contract"), std::runtime_error);
}

TEST_CASE("loss_grad refuses models without parameters to learn") {
    TabularModel model(1, 2, 2);
    const std::vector<std::pair<TokenSequence, Conditioning>> batch{
        {make_seq({0, 1}, 2), Conditioning::mask()}};
    LossConfig cfg = linear_mdm_config();
    Rng rng(5);
    CHECK_THROWS_WITH_AS(loss_grad(model, batch, cfg, rng),
                         doctest::Contains("unsupported"), std::runtime_error);
}

TEST_CASE("loss_grad on a zero-parameter model returns an empty gradient") {
    ZeroParamModel model;
    const std::vector<std::pair<TokenSequence, Conditioning>> batch{
        {make_seq({0, 1}, 2), Conditioning::mask()}};
    LossConfig cfg = linear_mdm_config();
    cfg.mc_samples = 4;
    Rng rng(5);
    const auto lg = loss_grad(model, batch, cfg, rng);
    CHECK(lg.grad.empty());
    CHECK(lg.value > 0.0);
}

TEST_CASE("loss_grad matches central finite differences") {
    const auto data = random_dataset(2, 2, 606);
    const std::vector<std::pair<TokenSequence, Conditioning>> batch{
        {data.states()[0].tokens, Conditioning::mask()},
        {data.states()[3].tokens, Conditioning::mask()}};
    LossConfig cfg;
    cfg.schedule = MaskSchedule::cosine();
    cfg.weight = WeightMode::Constant;
    cfg.window = {0.1, 1.0};
    cfg.mc_samples = 8;

    LearnedCatModel model(2, 2, 0, 6);
    Rng init(77);
    model.randomize(init, 0.4);

    // The loss as a deterministic function of parameters: fresh rng with a
    // fixed seed on every evaluation (common random numbers).
    const auto value_at = [&](LearnedCatModel& m) {
        Rng rng(12345);
        return loss_grad(m, batch, cfg, rng).value;
    };

    Rng rng(12345);
    const auto lg = loss_grad(model, batch, cfg, rng);

    const double h = 1e-3;
    auto params = model.params();
    double diff2 = 0.0;
    double norm2 = 0.0;
    for (std::size_t i = 0; i < model.param_count(); ++i) {
        const double saved = params[i];
        params[i] = saved + h;
        const double up = value_at(model);
        params[i] = saved - h;
        const double down = value_at(model);
        params[i] = saved;
        const double fd = (up - down) / (2.0 * h);
        diff2 += (lg.grad[i] - fd) * (lg.grad[i] - fd);
        norm2 += fd * fd;
    }
    CHECK(std::sqrt(diff2) <= 1e-4 * std::max(1.0, std::sqrt(norm2)));
}

TEST_CASE("one SGD step along the gradient decreases the exact loss") {
    const auto data = random_dataset(2, 2, 13);
    std::vector<std::pair<TokenSequence, Conditioning>> batch;
    for (const auto& st : data.states()) {
        batch.emplace_back(st.tokens, Conditioning::mask());
    }
    LossConfig cfg = linear_mdm_config();
    cfg.mc_samples = 64;

    LearnedCatModel model(2, 2, 0, 8);
    Rng init(3);
    model.randomize(init, 0.2);
    const double before = loss_exact(model, data, cfg);

    Rng rng(999);
    const auto lg = loss_grad(model, batch, cfg, rng);
    auto params = model.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= 0.05 * lg.grad[i];
    }
    const double after = loss_exact(model, data, cfg);
    CHECK(after < before);
}
