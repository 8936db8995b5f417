// maskgen: reproducible experiment runner for the masked discrete
// generation engine. Every subcommand reads a JSON config, writes CSV/JSON
// artifacts plus a run manifest into --out, and is deterministic in
// (config, seed) at any --threads level.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskgen/analysis.hpp"
#include "maskgen/diffusion_head.hpp"
#include "maskgen/loss.hpp"
#include "maskgen/masking.hpp"
#include "maskgen/model.hpp"
#include "maskgen/numeric.hpp"
#include "maskgen/rng.hpp"
#include "maskgen/sampler.hpp"
#include "maskgen/schedule.hpp"
#include "maskgen/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskgen;

namespace {

constexpr int kSchemaVersion = 1;

struct CliError : std::runtime_error {
    explicit CliError(std::string message, json record)
        : std::runtime_error(std::move(message)), record(std::move(record)) {}
    json record;
};

// ---------------------------------------------------------------------------
// Config loading and schema validation
// ---------------------------------------------------------------------------

enum class KeyType { Int, Num, Str, Arr, Obj };

struct KeySpec {
    const char* key;
    KeyType type;
    bool required;
};

bool type_matches(const json& value, KeyType type) {
    switch (type) {
        case KeyType::Int: return value.is_number_integer();
        case KeyType::Num: return value.is_number();
        case KeyType::Str: return value.is_string();
        case KeyType::Arr: return value.is_array();
        case KeyType::Obj: return value.is_object();
    }
    return false;
}

const char* type_name(KeyType type) {
    switch (type) {
        case KeyType::Int: return "integer";
        case KeyType::Num: return "number";
        case KeyType::Str: return "string";
        case KeyType::Arr: return "array";
        case KeyType::Obj: return "object";
    }
    return "?";
}

/// Collects every violation instead of stopping at the first one.
void validate_object(const json& j, const std::vector<KeySpec>& spec,
                     const std::string& prefix, std::vector<std::string>& violations) {
    for (const auto& ks : spec) {
        if (!j.contains(ks.key)) {
            if (ks.required) {
                violations.push_back("missing required key: " + prefix + ks.key);
            }
            continue;
        }
        if (!type_matches(j.at(ks.key), ks.type)) {
            violations.push_back("key " + prefix + ks.key + " must be a " +
                                 type_name(ks.type));
        }
    }
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const auto& ks : spec) {
            if (key == ks.key) {
                known = true;
                break;
            }
        }
        if (!known) {
            violations.push_back("unknown key: " + prefix + key);
        }
    }
}

const std::vector<KeySpec> kSamplerSpec = {
    {"steps", KeyType::Int, false},   {"schedule", KeyType::Str, false},
    {"rate", KeyType::Num, false},    {"unmask_rule", KeyType::Str, false},
    {"cfg", KeyType::Obj, false},     {"seed", KeyType::Int, false},
};

const std::vector<KeySpec> kCfgSpec = {
    {"mode", KeyType::Str, false},    {"scale", KeyType::Num, false},
    {"schedule", KeyType::Str, false}, {"t_min", KeyType::Num, false},
    {"t_max", KeyType::Num, false},
};

const std::vector<KeySpec> kLossSpec = {
    {"schedule", KeyType::Str, false},         {"rate", KeyType::Num, false},
    {"weight", KeyType::Str, false},           {"t_min", KeyType::Num, false},
    {"t_max", KeyType::Num, false},            {"masking", KeyType::Str, false},
    {"mc_samples", KeyType::Int, false},       {"quadrature_points", KeyType::Int, false},
};

const std::vector<KeySpec> kOptimizerSpec = {
    {"learning_rate", KeyType::Num, false},
    {"steps", KeyType::Int, false},
    {"batch_size", KeyType::Int, false},
};

void validate_sampler(const json& j, const std::string& prefix,
                      std::vector<std::string>& violations) {
    validate_object(j, kSamplerSpec, prefix, violations);
    if (j.contains("cfg") && j.at("cfg").is_object()) {
        validate_object(j.at("cfg"), kCfgSpec, prefix + "cfg.", violations);
    }
}

json load_config(const std::string& path) {
    if (path.empty()) {
        return json{{"schema_version", kSchemaVersion}};
    }
    std::ifstream in(path);
    if (!in) {
        throw CliError("cannot open config file: " + path,
                       json{{"error", "config_unreadable"}, {"path", path}});
    }
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw CliError("config is not valid JSON: " + std::string(e.what()),
                       json{{"error", "config_parse"}, {"detail", e.what()}});
    }
    return j;
}

void check_config(const json& config, std::vector<KeySpec> spec,
                  const std::vector<std::pair<std::string, const std::vector<KeySpec>*>>&
                      nested = {}) {
    spec.push_back({"schema_version", KeyType::Int, true});
    std::vector<std::string> violations;
    validate_object(config, spec, "", violations);
    if (config.contains("schema_version") &&
        config.at("schema_version").is_number_integer() &&
        config.at("schema_version").get<int>() != kSchemaVersion) {
        violations.push_back("schema_version must be " + std::to_string(kSchemaVersion));
    }
    for (const auto& [key, nested_spec] : nested) {
        if (key == "sampler") {
            if (config.contains(key) && config.at(key).is_object()) {
                validate_sampler(config.at(key), key + ".", violations);
            }
            continue;
        }
        if (config.contains(key) && config.at(key).is_object()) {
            validate_object(config.at(key), *nested_spec, key + ".", violations);
        }
    }
    if (!violations.empty()) {
        json record{{"error", "config_invalid"}, {"violations", violations}};
        std::string summary = "invalid config:";
        for (const auto& v : violations) {
            summary += "\n  - " + v;
        }
        throw CliError(summary, std::move(record));
    }
}

LossConfig loss_from_config(const json& config) {
    LossConfig cfg;
    // Defaults follow the training recipe this engine centers on: exp
    // schedule, unit weight, truncated window.
    cfg.schedule = MaskSchedule::exponential(5.0);
    cfg.weight = WeightMode::Constant;
    cfg.window = {0.2, 1.0};
    cfg.masking = MaskingKind::Independent;
    if (!config.contains("loss")) {
        return cfg;
    }
    const auto& j = config.at("loss");
    const double rate = j.value("rate", 5.0);
    if (j.contains("schedule")) {
        cfg.schedule = schedule_from_name(j.at("schedule").get<std::string>(), rate);
    }
    if (j.contains("weight")) {
        const auto name = j.at("weight").get<std::string>();
        if (name == "constant") {
            cfg.weight = WeightMode::Constant;
        } else if (name == "mdm-ratio") {
            cfg.weight = WeightMode::MdmRatio;
        } else {
            throw CliError("unknown weight mode: " + name,
                           json{{"error", "config_invalid"},
                                {"violations", {"loss.weight must be constant|mdm-ratio"}}});
        }
    }
    cfg.window.t_min = j.value("t_min", cfg.window.t_min);
    cfg.window.t_max = j.value("t_max", cfg.window.t_max);
    if (j.contains("masking")) {
        const auto name = j.at("masking").get<std::string>();
        if (name == "independent") {
            cfg.masking = MaskingKind::Independent;
        } else if (name == "fixed-count") {
            cfg.masking = MaskingKind::FixedCount;
        } else {
            throw CliError(
                "unknown masking kind: " + name,
                json{{"error", "config_invalid"},
                     {"violations", {"loss.masking must be independent|fixed-count"}}});
        }
    }
    cfg.mc_samples = j.value("mc_samples", cfg.mc_samples);
    cfg.quadrature_points = j.value("quadrature_points", cfg.quadrature_points);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

std::string git_describe() {
    FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
    if (pipe == nullptr) {
        return "unknown";
    }
    char buf[256] = {0};
    std::string out;
    while (fgets(buf, sizeof(buf), pipe) != nullptr) {
        out += buf;
    }
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) {
        out.pop_back();
    }
    return out.empty() ? "unknown" : out;
}

class RunManifest {
public:
    RunManifest(const fs::path& out_dir, const std::string& subcommand, const json& config,
                std::uint64_t seed)
        : path_(out_dir / "manifest.json") {
        body_["schema_version"] = kSchemaVersion;
        body_["subcommand"] = subcommand;
        body_["status"] = "pending";
        body_["seed"] = seed;
        body_["git_describe"] = git_describe();
        body_["config"] = config;
        body_["outputs"] = json::array();
        start_ = std::chrono::steady_clock::now();
        write();
    }

    void add_output(const fs::path& p) { body_["outputs"].push_back(p.filename().string()); }

    void set(const std::string& key, const json& value) { body_[key] = value; }

    void finalize() {
        const auto elapsed = std::chrono::steady_clock::now() - start_;
        body_["wall_time_seconds"] =
            std::chrono::duration_cast<std::chrono::duration<double>>(elapsed).count();
        body_["status"] = "complete";
        write();
    }

private:
    void write() const {
        std::ofstream out(path_);
        if (!out) {
            throw std::runtime_error("cannot write manifest: " + path_.string());
        }
        out << body_.dump(2) << "\n";
    }

    fs::path path_;
    json body_;
    std::chrono::steady_clock::time_point start_;
};

std::ofstream open_artifact(const fs::path& out_dir, const std::string& name,
                            RunManifest& manifest) {
    const fs::path p = out_dir / name;
    std::ofstream out(p);
    if (!out) {
        throw std::runtime_error("cannot write artifact: " + p.string());
    }
    manifest.add_output(p);
    return out;
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::int64_t> seed;
    int threads = 1;
};

std::uint64_t effective_seed(const GlobalArgs& args, const json& config,
                             const char* key = "seed") {
    if (args.seed.has_value()) {
        return static_cast<std::uint64_t>(*args.seed);
    }
    if (config.contains(key)) {
        return config.at(key).get<std::uint64_t>();
    }
    return 0;
}

SamplerConfig sampler_from_config(const json& config, std::uint64_t seed) {
    SamplerConfig cfg;
    if (config.contains("sampler")) {
        cfg = SamplerConfig::from_json(config.at("sampler"));
    }
    cfg.seed = seed;
    return cfg;
}

ToyDataset dataset_from_config(const json& config) {
    if (!config.contains("dataset")) {
        throw CliError("config needs a \"dataset\" path",
                       json{{"error", "config_invalid"},
                            {"violations", {"missing required key: dataset"}}});
    }
    return ToyDataset::load_file(config.at("dataset").get<std::string>());
}

/// Builds the model a config asks for: the exact posterior oracle over the
/// dataset, or a learned checkpoint.
std::unique_ptr<ConditionalModel> model_from_config(const json& config,
                                                    const ToyDataset& data) {
    const auto kind = config.value("model", std::string("oracle"));
    if (kind == "oracle") {
        return std::make_unique<OracleModel>(data);
    }
    if (kind == "learned") {
        if (!config.contains("checkpoint")) {
            throw CliError("learned model needs a \"checkpoint\" path",
                           json{{"error", "config_invalid"},
                                {"violations", {"missing required key: checkpoint"}}});
        }
        auto model = std::make_unique<LearnedCatModel>(
            LearnedCatModel::load_file(config.at("checkpoint").get<std::string>()));
        if (model->seq_len() != data.seq_len() || model->vocab_size() != data.vocab_size()) {
            throw CliError("checkpoint shape does not match the dataset",
                           json{{"error", "shape_mismatch"}});
        }
        return model;
    }
    throw CliError("unknown model kind: " + kind,
                   json{{"error", "config_invalid"},
                        {"violations", {"model must be oracle|learned"}}});
}

Conditioning conditioning_from_config(const json& config, const ToyDataset& data) {
    if (config.contains("class") && !config.at("class").is_null()) {
        const auto c = config.at("class").get<std::int32_t>();
        if (c < 0 || c >= data.num_classes()) {
            throw CliError("class " + std::to_string(c) + " outside dataset classes",
                           json{{"error", "config_invalid"},
                                {"violations", {"class must be in [0, num_classes)"}}});
        }
        return Conditioning::cls(c);
    }
    return Conditioning::mask();
}

void write_samples_csv(std::ostream& out, std::span<const TokenSequence> samples) {
    if (samples.empty()) {
        return;
    }
    const std::int32_t n = samples.front().length();
    for (std::int32_t i = 0; i < n; ++i) {
        out << (i > 0 ? "," : "") << "token_" << i;
    }
    out << "\n";
    for (const auto& s : samples) {
        for (std::int32_t i = 0; i < n; ++i) {
            out << (i > 0 ? "," : "") << s.at(i);
        }
        out << "\n";
    }
}

std::vector<TokenSequence> read_samples_csv(const std::string& path, std::int32_t n,
                                            std::int32_t v) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open samples file: " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("samples file is empty: " + path);
    }
    std::vector<TokenSequence> samples;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::int32_t> tokens;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            tokens.push_back(static_cast<std::int32_t>(std::stol(cell)));
        }
        if (static_cast<std::int32_t>(tokens.size()) != n) {
            throw std::runtime_error("samples row width differs from dataset N");
        }
        samples.emplace_back(std::move(tokens), v);
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_schedules(const GlobalArgs& args, const json& config) {
    check_config(config, {{"resolution", KeyType::Int, false}, {"rate", KeyType::Num, false}});
    const int resolution = config.value("resolution", 101);
    if (resolution < 2) {
        throw CliError("resolution must be >= 2",
                       json{{"error", "config_invalid"},
                            {"violations", {"resolution must be >= 2"}}});
    }
    const double rate = config.value("rate", 5.0);
    RunManifest manifest(args.out_dir, "schedules", config, effective_seed(args, config));

    const std::vector<MaskSchedule> schedules = {
        MaskSchedule::linear(), MaskSchedule::cosine(), MaskSchedule::exponential(rate),
        MaskSchedule::log_exp(rate)};
    auto out = open_artifact(args.out_dir, "schedules.csv", manifest);
    out << "t";
    for (const auto& sched : schedules) {
        std::string name = schedule_name(sched.kind);
        for (auto& ch : name) {
            if (ch == '-') {
                ch = '_';
            }
        }
        out << ',' << name << "_gamma," << name << "_gamma_prime," << name << "_weight";
    }
    out << "\n";
    for (int i = 0; i < resolution; ++i) {
        const double t = static_cast<double>(i) / (resolution - 1);
        out << format_csv_double(t);
        for (const auto& sched : schedules) {
            out << ',' << format_csv_double(gamma(sched, t)) << ','
                << format_csv_double(gamma_prime(sched, t)) << ','
                << format_csv_double(weight(WeightMode::MdmRatio, sched, t));
        }
        out << "\n";
    }
    manifest.finalize();
    return 0;
}

int cmd_simulate(const GlobalArgs& args, const json& config,
                 std::optional<int> trials_override) {
    check_config(config, {{"schedule", KeyType::Str, false},
                          {"rate", KeyType::Num, false},
                          {"n_tokens", KeyType::Int, false},
                          {"steps", KeyType::Int, false},
                          {"trials", KeyType::Int, false},
                          {"seed", KeyType::Int, false}});
    const auto seed = effective_seed(args, config);
    const auto sched = schedule_from_name(config.value("schedule", std::string("exp")),
                                          config.value("rate", 5.0));
    const auto n_tokens = config.value("n_tokens", 256);
    const auto steps = config.value("steps", 16);
    const auto trials = trials_override.value_or(config.value("trials", 10000));

    RunManifest manifest(args.out_dir, "simulate", config, seed);
    const auto profile =
        simulate_unmask_counts(sched, n_tokens, steps, trials, seed, args.threads);
    auto out = open_artifact(args.out_dir, "simulate.csv", manifest);
    profile.write_csv(out);
    manifest.finalize();
    return 0;
}

int cmd_train(const GlobalArgs& args, const json& config) {
    check_config(config,
                 {{"dataset", KeyType::Str, true},
                  {"hidden", KeyType::Int, false},
                  {"init_scale", KeyType::Num, false},
                  {"loss", KeyType::Obj, false},
                  {"optimizer", KeyType::Obj, false},
                  {"uncond_prob", KeyType::Num, false},
                  {"uncond_encoding", KeyType::Str, false},
                  {"seed", KeyType::Int, false}},
                 {{"loss", &kLossSpec}, {"optimizer", &kOptimizerSpec}});
    const auto seed = effective_seed(args, config);
    const auto data = dataset_from_config(config);
    const auto loss_cfg = loss_from_config(config);

    TrainConfig train_cfg;
    train_cfg.seed = seed;
    if (config.contains("optimizer")) {
        const auto& opt = config.at("optimizer");
        train_cfg.learning_rate = opt.value("learning_rate", train_cfg.learning_rate);
        train_cfg.steps = opt.value("steps", train_cfg.steps);
        train_cfg.batch_size = opt.value("batch_size", train_cfg.batch_size);
    }
    train_cfg.uncond_prob = config.value("uncond_prob", train_cfg.uncond_prob);
    if (config.contains("uncond_encoding")) {
        const auto name = config.at("uncond_encoding").get<std::string>();
        if (name == "mask") {
            train_cfg.uncond_encoding = CondKind::UncondMask;
        } else if (name == "fake") {
            train_cfg.uncond_encoding = CondKind::UncondFake;
        } else {
            throw CliError("unknown uncond_encoding: " + name,
                           json{{"error", "config_invalid"},
                                {"violations", {"uncond_encoding must be mask|fake"}}});
        }
    }

    RunManifest manifest(args.out_dir, "train", config, seed);
    LearnedCatModel model(data.seq_len(), data.vocab_size(), data.num_classes(),
                          config.value("hidden", 32));
    Rng init(mix_seed(seed, 0x1017));
    model.randomize(init, config.value("init_scale", 0.1));

    const auto result = train_model(model, data, loss_cfg, train_cfg);

    {
        const fs::path ckpt = fs::path(args.out_dir) / "checkpoint.json";
        model.save_file(ckpt.string());
        manifest.add_output(ckpt);
    }
    {
        auto out = open_artifact(args.out_dir, "loss_curve.csv", manifest);
        out << "step,loss\n";
        for (std::size_t i = 0; i < result.loss_curve.size(); ++i) {
            out << i << ',' << format_csv_double(result.loss_curve[i]) << "\n";
        }
    }
    manifest.set("initial_exact_loss", result.initial_exact_loss);
    manifest.set("final_exact_loss", result.final_exact_loss);
    manifest.finalize();
    return 0;
}

int cmd_generate(const GlobalArgs& args, const json& config) {
    check_config(config,
                 {{"dataset", KeyType::Str, true},
                  {"model", KeyType::Str, false},
                  {"checkpoint", KeyType::Str, false},
                  {"class", KeyType::Int, false},
                  {"sampler", KeyType::Obj, false},
                  {"n_samples", KeyType::Int, false},
                  {"seed", KeyType::Int, false}},
                 {{"sampler", nullptr}});
    const auto data = dataset_from_config(config);
    const auto model = model_from_config(config, data);
    const auto cond = conditioning_from_config(config, data);
    const auto seed = args.seed.has_value()
                          ? static_cast<std::uint64_t>(*args.seed)
                          : (config.contains("sampler") && config.at("sampler").contains("seed")
                                 ? config.at("sampler").at("seed").get<std::uint64_t>()
                                 : effective_seed(args, config));
    const auto sampler = sampler_from_config(config, seed);
    const int n_samples = config.value("n_samples", 1000);

    RunManifest manifest(args.out_dir, "generate", config, seed);
    const auto result = generate(*model, cond, sampler, n_samples, args.threads);
    {
        auto out = open_artifact(args.out_dir, "samples.csv", manifest);
        write_samples_csv(out, result.samples);
    }
    {
        auto out = open_artifact(args.out_dir, "trace.csv", manifest);
        result.traces.front().write_csv(out);
    }
    manifest.set("nfe", result.traces.front().nfe);
    manifest.finalize();
    return 0;
}

int cmd_eval(const GlobalArgs& args, const json& config) {
    check_config(config, {{"dataset", KeyType::Str, true},
                          {"samples", KeyType::Str, false},
                          {"dataset_q", KeyType::Str, false},
                          {"class", KeyType::Int, false},
                          {"seed", KeyType::Int, false}});
    const auto data = dataset_from_config(config);
    const bool has_samples = config.contains("samples");
    const bool has_q = config.contains("dataset_q");
    if (has_samples == has_q) {
        throw CliError("eval needs exactly one of \"samples\" or \"dataset_q\"",
                       json{{"error", "config_invalid"},
                            {"violations", {"provide samples xor dataset_q"}}});
    }
    RunManifest manifest(args.out_dir, "eval", config, effective_seed(args, config));

    const auto reference = config.contains("class")
                               ? data.conditional_distribution(
                                     config.at("class").get<std::int32_t>())
                               : data.joint_distribution();
    double tv = 0.0;
    double se = 0.0;
    std::size_t n = 0;
    if (has_samples) {
        const auto samples = read_samples_csv(config.at("samples").get<std::string>(),
                                              data.seq_len(), data.vocab_size());
        const auto emp = empirical_joint(samples, data.seq_len(), data.vocab_size());
        tv = tv_distance(emp, reference);
        se = tv_standard_error(emp, samples.size());
        n = samples.size();
    } else {
        const auto other = ToyDataset::load_file(config.at("dataset_q").get<std::string>());
        tv = tv_distance(other.joint_distribution(), reference);
    }
    {
        auto out = open_artifact(args.out_dir, "eval.csv", manifest);
        out << "tv,se,n\n"
            << format_csv_double(tv) << ',' << format_csv_double(se) << ',' << n << "\n";
    }
    manifest.set("tv", tv);
    manifest.finalize();
    return 0;
}

int cmd_sweep(const GlobalArgs& args, const json& config) {
    check_config(config,
                 {{"dataset", KeyType::Str, true},
                  {"model", KeyType::Str, false},
                  {"checkpoint", KeyType::Str, false},
                  {"sampler", KeyType::Obj, false},
                  {"grid", KeyType::Arr, true},
                  {"n_samples", KeyType::Int, false},
                  {"seed", KeyType::Int, false}},
                 {{"sampler", nullptr}});
    const auto seed = effective_seed(args, config);
    const auto data = dataset_from_config(config);
    const auto model = model_from_config(config, data);
    auto sampler = sampler_from_config(config, seed);
    if (sampler.cfg.mode == CfgMode::None) {
        sampler.cfg.mode = CfgMode::WithMask;
        if (sampler.cfg.scale == 0.0) {
            sampler.cfg.scale = 1.5;
        }
    }
    const auto grid = config.at("grid").get<std::vector<double>>();
    const int n_samples = config.value("n_samples", 500);

    RunManifest manifest(args.out_dir, "sweep", config, seed);
    const auto result =
        interval_sweep(*model, data, sampler, grid, n_samples, seed, args.threads);
    auto out = open_artifact(args.out_dir, "sweep.csv", manifest);
    result.write_csv(out);
    manifest.set("cells", result.cells.size());
    manifest.finalize();
    return 0;
}

int cmd_equivalence(const GlobalArgs& args, const json& config) {
    check_config(config, {{"n_models", KeyType::Int, false},
                          {"quadrature_points", KeyType::Int, false},
                          {"seed", KeyType::Int, false}});
    const auto seed = effective_seed(args, config);
    const int n_models = config.value("n_models", 20);
    const int quad = config.value("quadrature_points", 256);

    RunManifest manifest(args.out_dir, "equivalence", config, seed);

    // Built-in suite: random full-support datasets over N in 1..4, V in 2..3.
    std::vector<std::pair<std::string, ToyDataset>> suite;
    for (std::int32_t n = 1; n <= 4; ++n) {
        for (std::int32_t v = 2; v <= 3; ++v) {
            Rng rng(mix_seed(seed, static_cast<std::uint64_t>(n * 16 + v)));
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
            suite.emplace_back("N" + std::to_string(n) + "V" + std::to_string(v),
                               ToyDataset(std::move(states), 0));
        }
    }

    std::vector<EquivalenceRow> rows;
    double worst_gap = 0.0;
    for (int m = 0; m < n_models; ++m) {
        const auto& [dname, data] = suite[static_cast<std::size_t>(m) % suite.size()];
        const TabularModel model(mix_seed(seed, 0xbeef + static_cast<std::uint64_t>(m)),
                                 data.seq_len(), data.vocab_size());
        const std::vector<std::pair<std::string, const ConditionalModel*>> models{
            {"tabular" + std::to_string(m), &model}};
        const std::vector<std::pair<std::string, const ToyDataset*>> datasets{
            {dname, &data}};
        const auto row = equivalence_report(models, datasets, quad);
        rows.insert(rows.end(), row.begin(), row.end());
        worst_gap = std::max(worst_gap, row.front().rel_gap);
    }
    auto out = open_artifact(args.out_dir, "equivalence.csv", manifest);
    write_equivalence_csv(out, rows);
    manifest.set("worst_rel_gap", worst_gap);
    manifest.finalize();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"maskgen: masked discrete generation engine"};
    app.require_subcommand(1);

    GlobalArgs args;
    app.add_option("--config", args.config_path, "JSON config file");
    app.add_option("--seed", args.seed, "seed override");
    app.add_option("--out", args.out_dir, "output directory");
    app.add_option("--threads", args.threads, "worker threads")->check(CLI::PositiveNumber);

    auto* sub_schedules = app.add_subcommand(
        "schedules", "tabulate gamma, gamma', and the MDM weight over a time grid");
    auto* sub_simulate = app.add_subcommand(
        "simulate", "Monte-Carlo per-step reveal counts of the reverse process");
    std::optional<int> trials_override;
    sub_simulate->add_option("--trials", trials_override, "trial count override");
    auto* sub_train = app.add_subcommand("train", "train a learned categorical model");
    auto* sub_generate =
        app.add_subcommand("generate", "sample sequences with the reverse process");
    auto* sub_eval =
        app.add_subcommand("eval", "total-variation distance of samples to a dataset");
    auto* sub_sweep =
        app.add_subcommand("sweep", "guidance-interval grid sweep (quality vs NFE)");
    auto* sub_equivalence = app.add_subcommand(
        "equivalence", "exact MaskGIT-vs-unified-loss residuals on random models");
    for (auto* sub : app.get_subcommands({})) {
        sub->fallthrough(); // global flags may follow the subcommand name
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() != 0) {
            std::cerr << json{{"error", "usage"}, {"detail", e.what()}}.dump() << "\n";
        }
        return app.exit(e);
    }

    try {
        fs::create_directories(args.out_dir);
        const json config = load_config(args.config_path);
        if (sub_schedules->parsed()) return cmd_schedules(args, config);
        if (sub_simulate->parsed()) return cmd_simulate(args, config, trials_override);
        if (sub_train->parsed()) return cmd_train(args, config);
        if (sub_generate->parsed()) return cmd_generate(args, config);
        if (sub_eval->parsed()) return cmd_eval(args, config);
        if (sub_sweep->parsed()) return cmd_sweep(args, config);
        if (sub_equivalence->parsed()) return cmd_equivalence(args, config);
        std::cerr << json{{"error", "usage"}, {"detail", "no subcommand"}}.dump() << "\n";
        return 2;
    } catch (const CliError& e) {
        std::cerr << e.record.dump() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "runtime"}, {"detail", e.what()}}.dump() << "\n";
        return 1;
    }
}
