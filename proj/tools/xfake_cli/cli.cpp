#include "xfake_cli/cli.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "xfake/counterfactual.hpp"
#include "xfake/dataset_builder.hpp"
#include "xfake/errors.hpp"
#include "xfake/evaluator.hpp"
#include "xfake/harness.hpp"
#include "xfake/introvae.hpp"
#include "xfake/manifest.hpp"
#include "xfake/rng.hpp"
#include "xfake/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace xfake::cli {

namespace {

// Per-command sub-stream tags off the global seed.
constexpr uint64_t kSeedTemplates = 0x7e;
constexpr uint64_t kSeedReal = 0xd1;
constexpr uint64_t kSeedSim = 0xd2;
constexpr uint64_t kSeedEva = 0xe1;
constexpr uint64_t kSeedVae = 0xe2;
constexpr uint64_t kSeedScore = 0x5c;
constexpr uint64_t kSeedExplain = 0xcf;

// Config or dependency problems: printed with the offending key or path and
// mapped to exit code 1.
struct ValidationFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LockHeld : std::runtime_error {
    using std::runtime_error::runtime_error;
};

uint64_t fnv1a_bytes(const char* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    for (size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

std::string hash_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (f.read(buf, sizeof buf) || f.gcount() > 0)
        h = fnv1a_bytes(buf, static_cast<size_t>(f.gcount()), h);
    return hex64(h);
}

// Resolved configuration, one field per config key.
struct RunConfig {
    uint64_t seed = 0;
    fs::path root;

    int num_classes = 4;
    int image_size = 96;
    int speckle_looks = 4;
    double background_level = 0.05;
    int train_per_class = 200, val_per_class = 50, test_per_class = 50;
    int sim_per_class = 100;
    std::vector<CorruptionSpec> corruptions;
    PreprocessConfig pre;

    EvaluatorVariant variant = EvaluatorVariant::BBB;
    double prior_sigma = 0.1;
    double dropout_rate = 0.3;
    EvaluatorTrainConfig eva_train;

    IntroVAETrainConfig vae_train;
    CFConfig cf;

    Scorer scorer = Scorer::eva_bbb_total_u;
    int score_T = 25;
    std::vector<uint64_t> harness_seeds;
    EvaluatorTrainConfig classifier;
};

json defaults_json() {
    const PreprocessConfig pre;
    const EvaluatorModelConfig em;
    const EvaluatorTrainConfig et;
    const IntroVAETrainConfig vt;
    const CFConfig cf;
    return {
        {"seed", 0},
        {"io", {{"root", ""}}},  // empty -> $XFAKE_OUT or "out"
        {"data",
         {{"num_classes", 4},
          {"image_size", 96},
          {"speckle_looks", 4},
          {"background_level", 0.05},
          {"train_per_class", 200},
          {"val_per_class", 50},
          {"test_per_class", 50},
          {"sim_per_class", 100},
          {"corruptions", json::array({{{"kind", "clutter_swap"}, {"magnitude", 0.6}}})},
          {"crop_size", pre.crop_size},
          {"log_transform", pre.log_transform},
          {"stretch_lo", pre.stretch_range.first},
          {"stretch_hi", pre.stretch_range.second},
          {"augment", pre.augment}}},
        {"evaluator",
         {{"variant", "bbb"},
          {"prior_sigma", em.prior_sigma},
          {"dropout_rate", em.dropout_rate},
          {"epochs", et.epochs},
          {"batch", et.batch},
          {"lr", et.lr},
          {"n_draws", et.n_draws},
          {"lambda_a", et.lambda_a},
          {"T", et.T},
          {"stop_at_val_acc", et.stop_at_val_acc},
          {"stop_at_val_angle", et.stop_at_val_angle}}},
        {"introvae",
         {{"beta", vt.beta},
          {"alpha_R", vt.alpha_R},
          {"alpha_E", vt.alpha_E},
          {"alpha_G", vt.alpha_G},
          {"margin", vt.margin},
          {"latent_dim", vt.latent_dim},
          {"lr", vt.lr},
          {"epochs", vt.epochs},
          {"batch", vt.batch},
          {"plain_vae", vt.plain_vae},
          {"base_channels", vt.base_channels},
          {"grid_every", vt.grid_every}}},
        {"counterfactual",
         {{"lambda_d", cf.lambda_d},
          {"lambda_y", cf.lambda_y},
          {"lambda_v", cf.lambda_v},
          {"lr", cf.lr},
          {"steps", cf.steps},
          {"T", cf.T},
          {"use_class_guidance", cf.use_class_guidance},
          {"use_angle_guidance", cf.use_angle_guidance}}},
        {"harness",
         {{"scorer", "eva_bbb_total_u"},
          {"score_T", 25},
          {"seeds", json::array({1, 2, 3})},
          {"classifier_epochs", 60},
          {"classifier_batch", 25},
          {"classifier_lr", 2e-3},
          {"classifier_lambda_a", 5.0}}},
    };
}

// Every user key must exist in the schema; nested objects and object-array
// elements are checked recursively so typos surface with their dotted path.
void check_unknown_keys(const json& user, const json& schema, const std::string& prefix) {
    if (!user.is_object()) return;
    for (const auto& [key, value] : user.items()) {
        const std::string dotted = prefix.empty() ? key : prefix + "." + key;
        if (!schema.contains(key)) throw ValidationFailure("unknown config key: " + dotted);
        const json& expect = schema.at(key);
        if (expect.is_object()) {
            if (!value.is_object())
                throw ValidationFailure(dotted + ": expected an object");
            check_unknown_keys(value, expect, dotted);
        } else if (expect.is_array() && !expect.empty() && expect.front().is_object()) {
            if (!value.is_array())
                throw ValidationFailure(dotted + ": expected an array");
            for (const auto& item : value) check_unknown_keys(item, expect.front(), dotted + "[]");
        }
    }
}

void merge_into(json& base, const json& over) {
    for (const auto& [key, value] : over.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object())
            merge_into(base[key], value);
        else
            base[key] = value;
    }
}

const json& node(const json& root, const std::string& dotted) {
    const json* cur = &root;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (!cur->is_object() || !cur->contains(part))
            throw ValidationFailure("unknown config key: " + dotted);
        cur = &cur->at(part);
    }
    return *cur;
}

template <typename T>
T typed(const json& root, const std::string& dotted, const char* type_name) {
    try {
        return node(root, dotted).get<T>();
    } catch (const json::exception&) {
        throw ValidationFailure(dotted + ": expected " + type_name);
    }
}

int geti(const json& j, const std::string& k) { return typed<int>(j, k, "an integer"); }
double getd(const json& j, const std::string& k) { return typed<double>(j, k, "a number"); }
bool getb(const json& j, const std::string& k) { return typed<bool>(j, k, "a boolean"); }
std::string gets(const json& j, const std::string& k) { return typed<std::string>(j, k, "a string"); }

RunConfig parse_config(const json& j) {
    RunConfig cfg;
    cfg.seed = typed<uint64_t>(j, "seed", "an unsigned integer");

    cfg.num_classes = geti(j, "data.num_classes");
    if (cfg.num_classes < 2) throw ValidationFailure("data.num_classes: need at least 2");
    cfg.image_size = geti(j, "data.image_size");
    cfg.speckle_looks = geti(j, "data.speckle_looks");
    if (cfg.speckle_looks < 1) throw ValidationFailure("data.speckle_looks: need at least 1");
    cfg.background_level = getd(j, "data.background_level");
    cfg.train_per_class = geti(j, "data.train_per_class");
    cfg.val_per_class = geti(j, "data.val_per_class");
    cfg.test_per_class = geti(j, "data.test_per_class");
    cfg.sim_per_class = geti(j, "data.sim_per_class");
    if (cfg.train_per_class < 1 || cfg.sim_per_class < 1)
        throw ValidationFailure("data.train_per_class/data.sim_per_class: need at least 1");

    const json& corr = node(j, "data.corruptions");
    if (!corr.is_array() || corr.empty())
        throw ValidationFailure("data.corruptions: expected a non-empty array");
    for (size_t i = 0; i < corr.size(); ++i) {
        CorruptionSpec spec;
        try {
            spec.kind = corruption_kind_from_string(corr[i].at("kind").get<std::string>());
            spec.magnitude = corr[i].at("magnitude").get<double>();
        } catch (const std::exception& e) {
            throw ValidationFailure("data.corruptions[" + std::to_string(i) + "]: " + e.what());
        }
        cfg.corruptions.push_back(spec);
    }

    cfg.pre.crop_size = geti(j, "data.crop_size");
    if (cfg.pre.crop_size < 8 || cfg.pre.crop_size > cfg.image_size)
        throw ValidationFailure("data.crop_size: must be in [8, data.image_size]");
    cfg.pre.log_transform = getb(j, "data.log_transform");
    cfg.pre.stretch_range = {getd(j, "data.stretch_lo"), getd(j, "data.stretch_hi")};
    if (cfg.pre.stretch_range.first <= 0.0 ||
        cfg.pre.stretch_range.second < cfg.pre.stretch_range.first)
        throw ValidationFailure("data.stretch_lo/data.stretch_hi: need 0 < lo <= hi");
    cfg.pre.augment = getb(j, "data.augment");

    try {
        cfg.variant = variant_from_string(gets(j, "evaluator.variant"));
    } catch (const InvalidArgument& e) {
        throw ValidationFailure(std::string("evaluator.variant: ") + e.what());
    }
    cfg.prior_sigma = getd(j, "evaluator.prior_sigma");
    cfg.dropout_rate = getd(j, "evaluator.dropout_rate");
    cfg.eva_train.epochs = geti(j, "evaluator.epochs");
    cfg.eva_train.batch = geti(j, "evaluator.batch");
    cfg.eva_train.lr = getd(j, "evaluator.lr");
    cfg.eva_train.n_draws = geti(j, "evaluator.n_draws");
    cfg.eva_train.lambda_a = getd(j, "evaluator.lambda_a");
    cfg.eva_train.T = geti(j, "evaluator.T");
    cfg.eva_train.stop_at_val_acc = getd(j, "evaluator.stop_at_val_acc");
    cfg.eva_train.stop_at_val_angle = getd(j, "evaluator.stop_at_val_angle");

    cfg.vae_train.beta = getd(j, "introvae.beta");
    cfg.vae_train.alpha_R = getd(j, "introvae.alpha_R");
    cfg.vae_train.alpha_E = getd(j, "introvae.alpha_E");
    cfg.vae_train.alpha_G = getd(j, "introvae.alpha_G");
    cfg.vae_train.margin = getd(j, "introvae.margin");
    cfg.vae_train.latent_dim = geti(j, "introvae.latent_dim");
    cfg.vae_train.lr = getd(j, "introvae.lr");
    cfg.vae_train.epochs = geti(j, "introvae.epochs");
    cfg.vae_train.batch = geti(j, "introvae.batch");
    cfg.vae_train.plain_vae = getb(j, "introvae.plain_vae");
    cfg.vae_train.base_channels = geti(j, "introvae.base_channels");
    cfg.vae_train.grid_every = geti(j, "introvae.grid_every");
    cfg.vae_train.image_size = cfg.pre.crop_size;  // the VAE sees preprocessed crops

    cfg.cf.lambda_d = getd(j, "counterfactual.lambda_d");
    cfg.cf.lambda_y = getd(j, "counterfactual.lambda_y");
    cfg.cf.lambda_v = getd(j, "counterfactual.lambda_v");
    cfg.cf.lr = getd(j, "counterfactual.lr");
    cfg.cf.steps = geti(j, "counterfactual.steps");
    cfg.cf.T = geti(j, "counterfactual.T");
    cfg.cf.use_class_guidance = getb(j, "counterfactual.use_class_guidance");
    cfg.cf.use_angle_guidance = getb(j, "counterfactual.use_angle_guidance");

    try {
        cfg.scorer = scorer_from_string(gets(j, "harness.scorer"));
    } catch (const InvalidArgument& e) {
        throw ValidationFailure(std::string("harness.scorer: ") + e.what());
    }
    cfg.score_T = geti(j, "harness.score_T");
    cfg.harness_seeds = typed<std::vector<uint64_t>>(j, "harness.seeds", "an array of seeds");
    if (cfg.harness_seeds.empty()) throw ValidationFailure("harness.seeds: need at least one");
    cfg.classifier.epochs = geti(j, "harness.classifier_epochs");
    cfg.classifier.batch = geti(j, "harness.classifier_batch");
    cfg.classifier.lr = getd(j, "harness.classifier_lr");
    cfg.classifier.lambda_a = getd(j, "harness.classifier_lambda_a");
    return cfg;
}

struct ParsedArgs {
    std::string command;
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<uint64_t> seed;
    std::string out;
    std::string ids;
};

json resolve_config_json(const ParsedArgs& args) {
    json merged = defaults_json();
    if (!args.config_path.empty()) {
        std::ifstream f(args.config_path);
        if (!f) throw ValidationFailure("cannot read config file: " + args.config_path);
        json user = json::parse(f, nullptr, false);
        if (user.is_discarded())
            throw ValidationFailure("config file is not valid JSON: " + args.config_path);
        check_unknown_keys(user, merged, "");
        merge_into(merged, user);
    }
    for (const auto& kv : args.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ValidationFailure("--set expects KEY=VALUE, got: " + kv);
        const std::string key = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;  // bare words are strings

        json* cur = &merged;
        std::stringstream ss(key);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) parts.push_back(part);
        if (parts.empty()) throw ValidationFailure("--set expects KEY=VALUE, got: " + kv);
        for (size_t i = 0; i + 1 < parts.size(); ++i) {
            if (!cur->is_object() || !cur->contains(parts[i]))
                throw ValidationFailure("unknown config key: " + key);
            cur = &(*cur)[parts[i]];
        }
        if (!cur->is_object() || !cur->contains(parts.back()))
            throw ValidationFailure("unknown config key: " + key);
        (*cur)[parts.back()] = value;
    }
    if (args.seed) merged["seed"] = *args.seed;
    if (!args.out.empty()) merged["io"]["root"] = args.out;
    if (merged["io"]["root"].get<std::string>().empty()) {
        const char* env = std::getenv("XFAKE_OUT");
        merged["io"]["root"] = env && *env ? env : "out";
    }
    return merged;
}

// O_EXCL lock file; concurrent commands on one io root are refused.
class RootLock {
  public:
    explicit RootLock(const fs::path& path) : path_(path) {
        fd_ = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw LockHeld("io root is locked by another command: " + path.string() +
                           " (remove the file if it is stale)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
    }
    ~RootLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }
    RootLock(const RootLock&) = delete;
    RootLock& operator=(const RootLock&) = delete;

  private:
    fs::path path_;
    int fd_ = -1;
};

struct CommandIo {
    std::map<std::string, std::string> inputs;  // relative path -> content hash
    std::vector<std::string> outputs;           // relative paths
};

std::string rel(const fs::path& root, const fs::path& p) {
    return fs::relative(p, root).string();
}

void note_input(CommandIo& io, const fs::path& root, const fs::path& p) {
    io.inputs[rel(root, p)] = hash_file(p);
}

void note_output(CommandIo& io, const fs::path& root, const fs::path& p) {
    io.outputs.push_back(rel(root, p));
}

DatasetManifest require_manifest(const fs::path& root, const std::string& relpath,
                                 const std::string& hint, CommandIo& io) {
    const fs::path path = root / relpath;
    if (!fs::exists(path))
        throw ValidationFailure("dataset manifest not found: " + path.string() + "; run " + hint +
                                " first");
    note_input(io, root, path);
    return load_manifest(path);
}

EvaluatorModel require_evaluator(const fs::path& root, const std::string& prefix, CommandIo& io) {
    try {
        EvaluatorModel model = load_evaluator(root / prefix);
        note_input(io, root, root / (prefix + ".json"));
        note_input(io, root, root / (prefix + ".bin"));
        return model;
    } catch (const IoError& e) {
        throw ValidationFailure(std::string(e.what()) + "; run train-eva first");
    }
}

IntroVAEModel require_introvae(const fs::path& root, CommandIo& io) {
    try {
        IntroVAEModel model = load_introvae(root / "models/vae");
        note_input(io, root, root / "models/vae.json");
        note_input(io, root, root / "models/vae.bin");
        return model;
    } catch (const IoError& e) {
        throw ValidationFailure(std::string(e.what()) + "; run train-vae first");
    }
}

SynthGenerator make_generator(const RunConfig& cfg) {
    return SynthGenerator(make_default_spec(cfg.num_classes, cfg.image_size, cfg.speckle_looks,
                                            cfg.background_level,
                                            Rng::derive(cfg.seed, kSeedTemplates)));
}

std::string eva_prefix(EvaluatorVariant v) { return "models/eva-" + variant_to_string(v); }

void cmd_synth_data(const RunConfig& cfg, CommandIo& io) {
    const SynthGenerator gen = make_generator(cfg);

    DatasetPlan plan;
    plan.train_per_class = cfg.train_per_class;
    plan.val_per_class = cfg.val_per_class;
    plan.test_per_class = cfg.test_per_class;
    plan.seed = Rng::derive(cfg.seed, kSeedReal);
    plan.source = Source::real;
    build_dataset(gen, plan, cfg.root / "data/real");
    note_output(io, cfg.root, cfg.root / "data/real/manifest.json");

    SimPoolPlan sim_plan;
    sim_plan.per_class = cfg.sim_per_class;
    sim_plan.seed = Rng::derive(cfg.seed, kSeedSim);
    sim_plan.corruptions = cfg.corruptions;
    build_sim_pool(gen, sim_plan, cfg.root / "data/sim");
    note_output(io, cfg.root, cfg.root / "data/sim/manifest.json");
    note_output(io, cfg.root, cfg.root / "data/sim/ref/manifest.json");
    note_output(io, cfg.root, cfg.root / "data/sim/truth.json");
}

void cmd_train_eva(const RunConfig& cfg, CommandIo& io) {
    const DatasetManifest manifest =
        require_manifest(cfg.root, "data/real/manifest.json", "synth-data", io);
    EvaluatorModelConfig mc;
    mc.variant = cfg.variant;
    mc.input_size = cfg.pre.crop_size;
    mc.class_names = manifest.class_names;
    mc.prior_sigma = cfg.prior_sigma;
    mc.dropout_rate = cfg.dropout_rate;
    EvaluatorTrainConfig tc = cfg.eva_train;
    tc.seed = Rng::derive(cfg.seed, kSeedEva);

    fs::create_directories(cfg.root / "models");
    const std::string prefix = eva_prefix(cfg.variant);
    const fs::path csv = cfg.root / (prefix + "-train.csv");
    TrainedEvaluator trained = train_evaluator(manifest, cfg.pre, mc, tc, csv);
    save_evaluator(trained, cfg.root / prefix);
    note_output(io, cfg.root, cfg.root / (prefix + ".bin"));
    note_output(io, cfg.root, cfg.root / (prefix + ".json"));
    note_output(io, cfg.root, csv);
}

void cmd_train_vae(const RunConfig& cfg, CommandIo& io) {
    const DatasetManifest manifest =
        require_manifest(cfg.root, "data/real/manifest.json", "synth-data", io);
    IntroVAETrainConfig tc = cfg.vae_train;
    tc.seed = Rng::derive(cfg.seed, kSeedVae);

    fs::create_directories(cfg.root / "models");
    TrainedIntroVAE trained = train_introvae(manifest, cfg.pre, tc, cfg.root / "models/vae-train");
    save_introvae(trained, cfg.root / "models/vae");
    note_output(io, cfg.root, cfg.root / "models/vae.bin");
    note_output(io, cfg.root, cfg.root / "models/vae.json");
    note_output(io, cfg.root, cfg.root / "models/vae-train/introvae_log.csv");
}

void cmd_evaluate(const RunConfig& cfg, CommandIo& io) {
    if (cfg.variant == EvaluatorVariant::DeterministicCNN)
        throw ValidationFailure(
            "evaluator.variant: deterministic has no predictive spread to score with; use bbb "
            "or mcd");
    const EvaluatorModel model = require_evaluator(cfg.root, eva_prefix(cfg.variant), io);
    const DatasetManifest sim =
        require_manifest(cfg.root, "data/sim/manifest.json", "synth-data", io);

    ScoreContext ctx;
    ctx.evaluator = &model;
    ctx.pre = cfg.pre;
    ctx.T = cfg.score_T;
    ctx.seed = Rng::derive(cfg.seed, kSeedScore);
    const Scorer scorer = cfg.variant == EvaluatorVariant::BBB ? Scorer::eva_bbb_total_u
                                                               : Scorer::eva_mcd_total_u;
    const auto records = score_dataset(sim, scorer, ctx);

    fs::create_directories(cfg.root / "reports");
    const fs::path csv = cfg.root / ("reports/scores-" + scorer_to_string(scorer) + ".csv");
    write_score_csv(records, csv);
    note_output(io, cfg.root, csv);
}

void cmd_explain(const RunConfig& cfg, const std::string& ids_csv, CommandIo& io) {
    EvaluatorModel model = require_evaluator(cfg.root, eva_prefix(cfg.variant), io);
    IntroVAEModel vae = require_introvae(cfg.root, io);
    const DatasetManifest sim =
        require_manifest(cfg.root, "data/sim/manifest.json", "synth-data", io);

    std::vector<std::string> ids;
    std::stringstream ss(ids_csv);
    std::string id;
    while (std::getline(ss, id, ','))
        if (!id.empty()) ids.push_back(id);

    CFConfig cf = cfg.cf;
    cf.seed = Rng::derive(cfg.seed, kSeedExplain);
    const fs::path index =
        explain_entries(sim, cfg.pre, model, vae, cf, ids, cfg.root / "explanations");
    note_output(io, cfg.root, index);
}

ScoreContext make_score_context(const RunConfig& cfg) {
    ScoreContext ctx;
    ctx.pre = cfg.pre;
    ctx.T = cfg.score_T;
    ctx.seed = Rng::derive(cfg.seed, kSeedScore);
    return ctx;
}

void cmd_experiment_gap(const RunConfig& cfg, CommandIo& io) {
    const DatasetManifest sim =
        require_manifest(cfg.root, "data/sim/manifest.json", "synth-data", io);
    const DatasetManifest real =
        require_manifest(cfg.root, "data/real/manifest.json", "synth-data", io);

    ScoreContext ctx = make_score_context(cfg);
    std::optional<DatasetManifest> reference;
    std::optional<EvaluatorModel> model;
    if (cfg.scorer == Scorer::psnr || cfg.scorer == Scorer::ssim) {
        reference = require_manifest(cfg.root, "data/sim/ref/manifest.json", "synth-data", io);
        ctx.reference = &*reference;
    } else if (cfg.scorer == Scorer::eva_bbb_total_u) {
        model = require_evaluator(cfg.root, eva_prefix(EvaluatorVariant::BBB), io);
        ctx.evaluator = &*model;
    } else if (cfg.scorer == Scorer::eva_mcd_total_u) {
        model = require_evaluator(cfg.root, eva_prefix(EvaluatorVariant::MCD), io);
        ctx.evaluator = &*model;
    }

    const ClassifierConfig ccfg{cfg.classifier, cfg.pre};
    UtilityReport report =
        utility_gap_experiment(sim, real, cfg.scorer, ctx, ccfg, cfg.harness_seeds);
    report.runtime_seconds = 0.0;  // wall time lives in the ledger; outputs stay byte-stable
    const ReportFiles files = write_utility_report(report, cfg.root / "reports");
    for (const auto& p : files.runs) note_output(io, cfg.root, p);
    note_output(io, cfg.root, files.summary);
    note_output(io, cfg.root, files.csv);
    note_output(io, cfg.root, files.index);
}

void cmd_experiment_retrain(const RunConfig& cfg, CommandIo& io) {
    const DatasetManifest sim =
        require_manifest(cfg.root, "data/sim/manifest.json", "synth-data", io);
    const DatasetManifest real =
        require_manifest(cfg.root, "data/real/manifest.json", "synth-data", io);
    const fs::path index = cfg.root / "explanations/index.json";
    if (!fs::exists(index))
        throw ValidationFailure("counterfactual bundles not found: " + index.string() +
                                "; run explain first");
    note_input(io, cfg.root, index);

    const ClassifierConfig ccfg{cfg.classifier, cfg.pre};
    RetrainReport report = before_after_experiment(sim, index, real, ccfg, cfg.harness_seeds);
    report.runtime_seconds = 0.0;
    const ReportFiles files = write_retrain_report(report, cfg.root / "reports");
    for (const auto& p : files.runs) note_output(io, cfg.root, p);
    note_output(io, cfg.root, files.summary);
    note_output(io, cfg.root, files.csv);
    note_output(io, cfg.root, files.index);
}

void cmd_report(const RunConfig& cfg, CommandIo& io) {
    const fs::path index = cfg.root / "reports/index.json";
    if (!fs::exists(index))
        throw ValidationFailure("no reports found under " + (cfg.root / "reports").string() +
                                "; run experiment-gap or experiment-retrain first");
    note_input(io, cfg.root, index);
    std::ifstream f(index);
    const json idx = json::parse(f);
    std::cout << "runs:\n";
    for (const auto& row : idx.at("runs"))
        std::cout << "  " << row.at("experiment").get<std::string>() << " "
                  << row.at("metric").get<std::string>() << " seed "
                  << row.at("seed").get<uint64_t>() << " -> "
                  << row.at("file").get<std::string>() << "\n";

    std::vector<fs::path> summaries;
    for (const auto& entry : fs::directory_iterator(cfg.root / "reports"))
        if (entry.path().filename().string().ends_with("-summary.json"))
            summaries.push_back(entry.path());
    std::sort(summaries.begin(), summaries.end());
    for (const auto& path : summaries) {
        std::ifstream sf(path);
        const json summary = json::parse(sf);
        if (summary.at("experiment") == "gap") {
            std::cout << "gap " << summary.at("metric").get<std::string>() << ": top="
                      << summary.at("top_acc_mean").get<double>()
                      << " last=" << summary.at("last_acc_mean").get<double>()
                      << " gap=" << summary.at("gap").get<double>() << "\n";
        } else {
            std::cout << "retrain (n/class " << summary.at("train_per_class").get<int>() << "):";
            for (const auto& cond : summary.at("conditions"))
                std::cout << " " << cond.at("name").get<std::string>() << "="
                          << cond.at("acc_mean").get<double>() << "±"
                          << cond.at("acc_std").get<double>();
            std::cout << "\n";
        }
    }
}

void append_ledger(const fs::path& root, const std::string& command,
                   const std::string& config_hash, const CommandIo& io, double wall_seconds,
                   int exit_status, const std::string& error) {
    json entry{{"command", command},
               {"config_hash", config_hash},
               {"inputs", io.inputs},
               {"outputs", io.outputs},
               {"wall_time_seconds", wall_seconds},
               {"exit_status", exit_status},
               {"error", error}};
    std::ofstream f(root / "ledger.jsonl", std::ios::app);
    if (!f) throw IoError("cannot append to " + (root / "ledger.jsonl").string());
    f << entry.dump() << "\n";  // one line per command
}

}  // namespace

json default_config_json() { return defaults_json(); }

int run_command(const std::vector<std::string>& args) {
    CLI::App app{"distribution-gap scoring and counterfactual explanation toolkit", "xfake"};
    app.require_subcommand(1);

    ParsedArgs parsed;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"synth-data", "render the real corpus and the corrupted simulated pool"},
        {"train-eva", "train the uncertainty evaluator on the real corpus"},
        {"train-vae", "train the introspective autoencoder on the real corpus"},
        {"evaluate", "score the simulated pool with the trained evaluator"},
        {"explain", "optimize counterfactuals and write difference-map bundles"},
        {"experiment-gap", "TOP/LAST split, retrain, and report the accuracy gap"},
        {"experiment-retrain", "before/after/upper-bound retraining comparison"},
        {"report", "print every recorded run and report summary"},
    };
    for (const auto& [name, desc] : commands) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", parsed.config_path, "JSON config file");
        sub->add_option("--set", parsed.sets, "dotted KEY=VALUE override (repeatable)");
        sub->add_option("--seed", parsed.seed, "global seed override");
        sub->add_option("--out", parsed.out, "output root override");
        if (name == "explain")
            sub->add_option("--ids", parsed.ids, "comma-separated manifest ids (default: all)");
    }

    std::vector<const char*> argv;
    argv.push_back("xfake");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help() << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    }
    parsed.command = app.get_subcommands().front()->get_name();

    json merged;
    RunConfig cfg;
    try {
        merged = resolve_config_json(parsed);
        cfg = parse_config(merged);
        cfg.root = merged["io"]["root"].get<std::string>();
    } catch (const ValidationFailure& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    const std::string config_hash = hex64(fnv1a_bytes(merged.dump().data(), merged.dump().size()));

    std::error_code ec;
    fs::create_directories(cfg.root, ec);
    if (ec) {
        std::cerr << "cannot create output root " << cfg.root << ": " << ec.message() << "\n";
        return 2;
    }

    const auto t0 = std::chrono::steady_clock::now();
    int status = 0;
    std::string error;
    CommandIo io;
    try {
        RootLock lock(cfg.root / ".lock");
        {
            std::ofstream echo(cfg.root / "config.json");
            if (!echo) throw IoError("cannot write resolved config");
            echo << merged.dump(2) << "\n";
        }
        if (parsed.command == "synth-data")
            cmd_synth_data(cfg, io);
        else if (parsed.command == "train-eva")
            cmd_train_eva(cfg, io);
        else if (parsed.command == "train-vae")
            cmd_train_vae(cfg, io);
        else if (parsed.command == "evaluate")
            cmd_evaluate(cfg, io);
        else if (parsed.command == "explain")
            cmd_explain(cfg, parsed.ids, io);
        else if (parsed.command == "experiment-gap")
            cmd_experiment_gap(cfg, io);
        else if (parsed.command == "experiment-retrain")
            cmd_experiment_retrain(cfg, io);
        else
            cmd_report(cfg, io);
    } catch (const ValidationFailure& e) {
        status = 1;
        error = e.what();
    } catch (const InvalidArgument& e) {
        status = 1;
        error = e.what();
    } catch (const std::exception& e) {
        status = 2;
        error = e.what();
    }

    if (status != 0) std::cerr << error << "\n";
    if (status == 2) {
        const fs::path diag_dir = cfg.root / "diagnostics";
        fs::create_directories(diag_dir, ec);
        const fs::path diag = diag_dir / (parsed.command + ".txt");
        std::ofstream f(diag);
        f << "command: " << parsed.command << "\nconfig_hash: " << config_hash
          << "\nerror: " << error << "\n";
        std::cerr << "diagnostics: " << diag.string() << "\n";
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    try {
        append_ledger(cfg.root, parsed.command, config_hash, io, wall, status, error);
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        if (status == 0) status = 2;
    }
    return status;
}

}  // namespace xfake::cli
