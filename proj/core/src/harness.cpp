#include "xfake/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "xfake/autodiff.hpp"
#include "xfake/errors.hpp"
#include "xfake/rng.hpp"

namespace xfake {

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::array<double, kSsimWindow> gaussian_window() {
    std::array<double, kSsimWindow> g{};
    const int half = kSsimWindow / 2;
    double total = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - half;
        g[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        total += g[static_cast<size_t>(i)];
    }
    for (auto& v : g) v /= total;
    return g;
}

// Valid-mode separable Gaussian filter: [H, W] -> [H-10, W-10].
Tensor blur_valid(const Tensor& img, const std::array<double, kSsimWindow>& g) {
    const int h = img.dim(0), w = img.dim(1);
    const int wo = w - kSsimWindow + 1, ho = h - kSsimWindow + 1;
    Tensor rows({h, wo});
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < wo; ++c) {
            double acc = 0.0;
            for (int k = 0; k < kSsimWindow; ++k) acc += g[static_cast<size_t>(k)] * img.at(r, c + k);
            rows.at(r, c) = acc;
        }
    Tensor out({ho, wo});
    for (int r = 0; r < ho; ++r)
        for (int c = 0; c < wo; ++c) {
            double acc = 0.0;
            for (int k = 0; k < kSsimWindow; ++k) acc += g[static_cast<size_t>(k)] * rows.at(r + k, c);
            out.at(r, c) = acc;
        }
    return out;
}

double mean_over(const std::vector<ClassifierEval>& runs, double ClassifierEval::* field) {
    double total = 0.0;
    for (const auto& r : runs) total += r.*field;
    return runs.empty() ? 0.0 : total / static_cast<double>(runs.size());
}

double sample_std(const std::vector<ClassifierEval>& runs, double mean) {
    if (runs.size() < 2) return 0.0;
    double ss = 0.0;
    for (const auto& r : runs) ss += (r.overall_acc - mean) * (r.overall_acc - mean);
    return std::sqrt(ss / static_cast<double>(runs.size() - 1));
}

std::vector<double> per_class_acc_mean(const std::vector<ClassifierEval>& runs, int num_classes) {
    std::vector<double> acc(static_cast<size_t>(num_classes), 0.0);
    if (runs.empty()) return acc;
    for (int c = 0; c < num_classes; ++c) {
        double total = 0.0;
        for (const auto& r : runs) {
            const auto tot = r.per_class_total[static_cast<size_t>(c)];
            total += tot > 0 ? static_cast<double>(r.per_class_correct[static_cast<size_t>(c)]) /
                                   static_cast<double>(tot)
                             : 0.0;
        }
        acc[static_cast<size_t>(c)] = total / static_cast<double>(runs.size());
    }
    return acc;
}

double overall_from_table(const ClassifierEval& run) {
    int64_t correct = 0, total = 0;
    for (size_t c = 0; c < run.per_class_total.size(); ++c) {
        correct += run.per_class_correct[c];
        total += run.per_class_total[c];
    }
    if (total == 0) throw InvalidArgument("classifier run has an empty per-class table");
    return static_cast<double>(correct) / static_cast<double>(total);
}

nlohmann::json eval_to_json(const ClassifierEval& run) {
    return {{"seed", run.seed},
            {"per_class_correct", run.per_class_correct},
            {"per_class_total", run.per_class_total},
            {"overall_acc", run.overall_acc},
            {"angle_loss", run.angle_loss}};
}

ClassifierEval eval_from_json(const nlohmann::json& j) {
    ClassifierEval run;
    run.seed = j.at("seed").get<uint64_t>();
    run.per_class_correct = j.at("per_class_correct").get<std::vector<int64_t>>();
    run.per_class_total = j.at("per_class_total").get<std::vector<int64_t>>();
    run.overall_acc = j.at("overall_acc").get<double>();
    run.angle_loss = j.at("angle_loss").get<double>();
    return run;
}

std::vector<nlohmann::json> evals_to_json(const std::vector<ClassifierEval>& runs) {
    std::vector<nlohmann::json> out;
    out.reserve(runs.size());
    for (const auto& r : runs) out.push_back(eval_to_json(r));
    return out;
}

std::vector<ClassifierEval> evals_from_json(const nlohmann::json& j) {
    std::vector<ClassifierEval> out;
    for (const auto& e : j) out.push_back(eval_from_json(e));
    return out;
}

nlohmann::json utility_to_json(const UtilityReport& r) {
    return {{"experiment", "gap"},
            {"metric", r.metric},
            {"class_names", r.class_names},
            {"top_ids", r.top_ids},
            {"last_ids", r.last_ids},
            {"seeds", r.seeds},
            {"top_runs", evals_to_json(r.top_runs)},
            {"last_runs", evals_to_json(r.last_runs)},
            {"top_acc_mean", r.top_acc_mean},
            {"last_acc_mean", r.last_acc_mean},
            {"gap", r.gap},
            {"top_angle_mean", r.top_angle_mean},
            {"last_angle_mean", r.last_angle_mean},
            {"runtime_seconds", r.runtime_seconds}};
}

UtilityReport utility_from_json(const nlohmann::json& j) {
    if (j.at("experiment").get<std::string>() != "gap")
        throw InvalidArgument("not a utility gap report");
    UtilityReport r;
    r.metric = j.at("metric").get<std::string>();
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.top_ids = j.at("top_ids").get<std::vector<std::string>>();
    r.last_ids = j.at("last_ids").get<std::vector<std::string>>();
    r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    r.top_runs = evals_from_json(j.at("top_runs"));
    r.last_runs = evals_from_json(j.at("last_runs"));
    r.top_acc_mean = j.at("top_acc_mean").get<double>();
    r.last_acc_mean = j.at("last_acc_mean").get<double>();
    r.gap = j.at("gap").get<double>();
    r.top_angle_mean = j.at("top_angle_mean").get<double>();
    r.last_angle_mean = j.at("last_angle_mean").get<double>();
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
    return r;
}

nlohmann::json condition_to_json(const RetrainCondition& c) {
    return {{"name", c.name},
            {"runs", evals_to_json(c.runs)},
            {"acc_mean", c.acc_mean},
            {"acc_std", c.acc_std},
            {"angle_mean", c.angle_mean},
            {"per_class_acc_mean", c.per_class_acc_mean}};
}

RetrainCondition condition_from_json(const nlohmann::json& j) {
    RetrainCondition c;
    c.name = j.at("name").get<std::string>();
    c.runs = evals_from_json(j.at("runs"));
    c.acc_mean = j.at("acc_mean").get<double>();
    c.acc_std = j.at("acc_std").get<double>();
    c.angle_mean = j.at("angle_mean").get<double>();
    c.per_class_acc_mean = j.at("per_class_acc_mean").get<std::vector<double>>();
    return c;
}

nlohmann::json retrain_to_json(const RetrainReport& r) {
    nlohmann::json conditions = nlohmann::json::array();
    for (const auto& c : r.conditions) conditions.push_back(condition_to_json(c));
    return {{"experiment", "retrain"},
            {"class_names", r.class_names},
            {"seeds", r.seeds},
            {"train_per_class", r.train_per_class},
            {"conditions", conditions},
            {"runtime_seconds", r.runtime_seconds}};
}

RetrainReport retrain_from_json(const nlohmann::json& j) {
    if (j.at("experiment").get<std::string>() != "retrain")
        throw InvalidArgument("not a retrain report");
    RetrainReport r;
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    r.train_per_class = j.at("train_per_class").get<int>();
    for (const auto& c : j.at("conditions")) r.conditions.push_back(condition_from_json(c));
    r.runtime_seconds = j.at("runtime_seconds").get<double>();
    return r;
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw IoError("not valid JSON: " + path.string());
    return j;
}

// index.json accumulates one row per run file ever written to the directory.
std::filesystem::path merge_index(const std::filesystem::path& dir, const std::string& experiment,
                                  const std::string& metric,
                                  const std::vector<std::pair<uint64_t, std::string>>& runs) {
    const std::filesystem::path path = dir / "index.json";
    nlohmann::json rows = nlohmann::json::array();
    if (std::filesystem::exists(path)) rows = read_json_file(path).at("runs");
    std::unordered_set<std::string> have;
    for (const auto& row : rows) have.insert(row.at("file").get<std::string>());
    for (const auto& [seed, file] : runs)
        if (!have.count(file))
            rows.push_back(
                {{"experiment", experiment}, {"metric", metric}, {"seed", seed}, {"file", file}});
    std::sort(rows.begin(), rows.end(), [](const nlohmann::json& a, const nlohmann::json& b) {
        return a.at("file").get<std::string>() < b.at("file").get<std::string>();
    });
    write_json_file({{"runs", rows}}, path);
    return path;
}

void write_csv_file(const std::string& body, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << body;
}

std::string format_acc(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double peak) {
    if (!a.same_shape(b)) throw InvalidArgument("psnr: shape mismatch");
    if (a.empty()) throw InvalidArgument("psnr: empty image");
    if (peak <= 0.0) throw InvalidArgument("psnr: peak must be positive");
    double mse = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw InvalidArgument("ssim: shape mismatch");
    if (a.ndim() != 2) throw InvalidArgument("ssim: expected [H, W] images");
    if (a.dim(0) < kSsimWindow || a.dim(1) < kSsimWindow)
        throw InvalidArgument("ssim: image smaller than the 11x11 window");
    const auto g = gaussian_window();
    Tensor a2({a.dim(0), a.dim(1)}), b2({a.dim(0), a.dim(1)}), ab({a.dim(0), a.dim(1)});
    for (int64_t i = 0; i < a.size(); ++i) {
        a2[i] = a[i] * a[i];
        b2[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const Tensor mu_a = blur_valid(a, g), mu_b = blur_valid(b, g);
    const Tensor raw_a2 = blur_valid(a2, g), raw_b2 = blur_valid(b2, g), raw_ab = blur_valid(ab, g);
    double total = 0.0;
    for (int64_t i = 0; i < mu_a.size(); ++i) {
        const double la = mu_a[i], lb = mu_b[i];
        const double va = raw_a2[i] - la * la;
        const double vb = raw_b2[i] - lb * lb;
        const double cov = raw_ab[i] - la * lb;
        total += ((2.0 * la * lb + kSsimC1) * (2.0 * cov + kSsimC2)) /
                 ((la * la + lb * lb + kSsimC1) * (va + vb + kSsimC2));
    }
    return total / static_cast<double>(mu_a.size());
}

std::string scorer_to_string(Scorer s) {
    switch (s) {
        case Scorer::psnr: return "psnr";
        case Scorer::ssim: return "ssim";
        case Scorer::eva_bbb_total_u: return "eva_bbb_total_u";
        case Scorer::eva_mcd_total_u: return "eva_mcd_total_u";
        case Scorer::random_control: return "random_control";
    }
    throw InvalidArgument("unknown scorer");
}

Scorer scorer_from_string(const std::string& s) {
    if (s == "psnr") return Scorer::psnr;
    if (s == "ssim") return Scorer::ssim;
    if (s == "eva_bbb_total_u") return Scorer::eva_bbb_total_u;
    if (s == "eva_mcd_total_u") return Scorer::eva_mcd_total_u;
    if (s == "random_control") return Scorer::random_control;
    throw InvalidArgument("unknown scorer: " + s);
}

std::vector<ScoreRecord> score_dataset(const DatasetManifest& manifest, Scorer scorer,
                                       const ScoreContext& ctx) {
    if (manifest.entries.empty()) throw InvalidArgument("score_dataset: empty manifest");
    std::unordered_set<std::string> seen;
    for (const auto& e : manifest.entries)
        if (!seen.insert(e.id).second) throw InvalidArgument("duplicate manifest id: " + e.id);

    const std::string metric = scorer_to_string(scorer);
    std::vector<ScoreRecord> out;
    out.reserve(manifest.entries.size());

    if (scorer == Scorer::psnr || scorer == Scorer::ssim) {
        if (!ctx.reference)
            throw InvalidArgument(metric + " needs a paired reference manifest");
        std::unordered_map<std::string, const ManifestEntry*> ref;
        for (const auto& e : ctx.reference->entries) ref[e.id] = &e;
        for (const auto& e : manifest.entries) {
            auto it = ref.find(e.id);
            if (it == ref.end())
                throw InvalidArgument("no paired reference image for id: " + e.id);
            const Tensor a = load_image(manifest, e).pixels;
            const Tensor b = load_image(*ctx.reference, *it->second).pixels;
            out.push_back({e.id, metric, scorer == Scorer::psnr ? psnr(a, b) : ssim(a, b), true});
        }
        return out;
    }

    if (scorer == Scorer::random_control) {
        for (const auto& e : manifest.entries) {
            Rng rng(Rng::derive(ctx.seed, fnv1a(e.id)));
            out.push_back({e.id, metric, rng.uniform(), true});
        }
        return out;
    }

    if (!ctx.evaluator) throw InvalidArgument(metric + " needs a trained evaluator");
    if (ctx.T < 1) throw InvalidArgument("score_dataset: T must be at least 1");
    const EvaluatorVariant want =
        scorer == Scorer::eva_bbb_total_u ? EvaluatorVariant::BBB : EvaluatorVariant::MCD;
    if (ctx.evaluator->variant() != want)
        throw InvalidArgument(metric + " needs a " + variant_to_string(want) + " evaluator, got " +
                              variant_to_string(ctx.evaluator->variant()));
    PreprocessConfig pre = ctx.pre;
    pre.augment = false;
    for (const auto& e : manifest.entries) {
        const Tensor x = preprocess(load_image(manifest, e), pre);
        Rng rng(Rng::derive(ctx.seed, fnv1a(e.id)));
        const CriteriaVector cv = predict_criteria(*ctx.evaluator, x, ctx.T, rng);
        out.push_back({e.id, metric, cv.total_u, false});
    }
    return out;
}

SplitIds rank_and_split(const std::vector<ScoreRecord>& records, const DatasetManifest& manifest,
                        bool per_class, int top_n_per_class) {
    if (records.empty()) throw InvalidArgument("rank_and_split: no records");
    if (top_n_per_class < 1) throw InvalidArgument("rank_and_split: quota must be positive");

    std::unordered_map<std::string, std::pair<int, int>> where;  // id -> (position, class)
    for (size_t i = 0; i < manifest.entries.size(); ++i)
        where[manifest.entries[i].id] = {static_cast<int>(i), manifest.entries[i].class_id};

    struct Row {
        const ScoreRecord* rec;
        int pos, cls;
    };
    std::vector<Row> rows;
    rows.reserve(records.size());
    std::unordered_set<std::string> seen;
    for (const auto& r : records) {
        if (std::isnan(r.score)) throw InvalidArgument("rank_and_split: NaN score for id: " + r.id);
        if (r.metric != records.front().metric ||
            r.higher_is_better != records.front().higher_is_better)
            throw InvalidArgument("rank_and_split: records mix metrics");
        if (!seen.insert(r.id).second)
            throw InvalidArgument("rank_and_split: duplicate score for id: " + r.id);
        auto it = where.find(r.id);
        if (it == where.end()) throw InvalidArgument("unknown manifest id: " + r.id);
        rows.push_back({&r, it->second.first, it->second.second});
    }

    const bool hib = records.front().higher_is_better;
    std::sort(rows.begin(), rows.end(), [hib](const Row& a, const Row& b) {
        if (a.rec->score != b.rec->score)
            return hib ? a.rec->score > b.rec->score : a.rec->score < b.rec->score;
        return a.pos < b.pos;
    });

    SplitIds split;
    if (!per_class) {
        if (static_cast<size_t>(top_n_per_class) > rows.size())
            throw InvalidArgument("rank_and_split: quota exceeds pool size");
        for (size_t i = 0; i < rows.size(); ++i)
            (i < static_cast<size_t>(top_n_per_class) ? split.top : split.last)
                .push_back(rows[i].rec->id);
        return split;
    }

    std::unordered_map<int, int> class_count;
    for (const auto& r : rows) ++class_count[r.cls];
    for (const auto& [cls, count] : class_count) {
        if (count < 2)
            throw InvalidArgument("rank_and_split: need at least two records for class " +
                                  std::to_string(cls));
        if (top_n_per_class > count)
            throw InvalidArgument("rank_and_split: quota exceeds class size for class " +
                                  std::to_string(cls));
    }
    std::unordered_map<int, int> taken;
    for (const auto& r : rows) {
        int& k = taken[r.cls];
        (k < top_n_per_class ? split.top : split.last).push_back(r.rec->id);
        ++k;
    }
    return split;
}

DatasetManifest manifest_subset(const DatasetManifest& src, const std::vector<std::string>& ids,
                                const std::string& split) {
    std::unordered_set<std::string> want(ids.begin(), ids.end());
    if (want.size() != ids.size()) throw InvalidArgument("manifest_subset: duplicate id");
    DatasetManifest out;
    out.root = src.root;
    out.class_names = src.class_names;
    out.image_size = src.image_size;
    for (const auto& e : src.entries) {
        if (!want.count(e.id)) continue;
        out.entries.push_back(e);
        out.entries.back().split = split;
        want.erase(e.id);
    }
    if (!want.empty())
        for (const auto& id : ids)
            if (want.count(id)) throw InvalidArgument("unknown manifest id: " + id);
    return out;
}

DatasetManifest take_per_class(const DatasetManifest& src, const std::string& split, int per_class,
                               const std::string& out_split) {
    if (per_class < 1) throw InvalidArgument("take_per_class: per_class must be positive");
    DatasetManifest out;
    out.root = src.root;
    out.class_names = src.class_names;
    out.image_size = src.image_size;
    std::unordered_map<int, int> taken;
    for (const auto& e : src.entries) {
        if (e.split != split) continue;
        if (taken[e.class_id] >= per_class) continue;
        out.entries.push_back(e);
        out.entries.back().split = out_split;
        ++taken[e.class_id];
    }
    for (int c = 0; c < src.num_classes(); ++c)
        if (taken[c] < per_class)
            throw InvalidArgument("take_per_class: class " + std::to_string(c) + " has only " +
                                  std::to_string(taken[c]) + " entries in split '" + split +
                                  "', need " + std::to_string(per_class));
    return out;
}

DatasetManifest counterfactual_manifest(const DatasetManifest& sim,
                                        const std::filesystem::path& bundle_index) {
    if (sim.entries.empty()) throw InvalidArgument("counterfactual_manifest: empty sim manifest");
    const nlohmann::json index = read_json_file(bundle_index);
    std::unordered_map<std::string, std::string> bundles;
    for (const auto& row : index.at("entries"))
        bundles[row.at("id").get<std::string>()] = row.at("bundle").get<std::string>();

    DatasetManifest out;
    out.root = bundle_index.parent_path();
    out.class_names = sim.class_names;
    for (const auto& e : sim.entries) {
        auto it = bundles.find(e.id);
        if (it == bundles.end())
            throw InvalidArgument("no counterfactual bundle for manifest id: " + e.id);
        ManifestEntry ce = e;
        ce.file = it->second + "/x_opt.png";
        ce.source = Source::counterfactual;
        ce.split = "train";
        if (!std::filesystem::exists(out.resolve(ce)))
            throw IoError("counterfactual bundle missing image: " + out.resolve(ce).string());
        out.entries.push_back(std::move(ce));
    }
    out.image_size = read_png16(out.resolve(out.entries.front())).dim(0);
    return out;
}

EvaluatorModel train_classifier(const DatasetManifest& train_manifest, const ClassifierConfig& cfg,
                                uint64_t seed) {
    EvaluatorModelConfig mc;
    mc.variant = EvaluatorVariant::DeterministicCNN;
    mc.input_size = cfg.pre.crop_size;
    mc.class_names = train_manifest.class_names;
    EvaluatorTrainConfig tc = cfg.train;
    tc.seed = seed;
    return train_evaluator(train_manifest, cfg.pre, mc, tc).model;
}

ClassifierEval evaluate_classifier(const EvaluatorModel& model, const DatasetManifest& manifest,
                                   const std::string& split, const PreprocessConfig& pre) {
    const PreparedSplit s = prepare_split(manifest, split, pre);
    const int n = static_cast<int>(s.inputs.size());
    if (n == 0) throw InvalidArgument("evaluate_classifier: empty split '" + split + "'");
    const int num_classes = model.num_classes();
    ClassifierEval ev;
    ev.per_class_correct.assign(static_cast<size_t>(num_classes), 0);
    ev.per_class_total.assign(static_cast<size_t>(num_classes), 0);

    ad::NoGradGuard guard;
    Rng rng(0);
    int64_t correct = 0;
    double angle_total = 0.0;
    const int batch = 32;
    for (int start = 0; start < n; start += batch) {
        const int bs = std::min(batch, n - start);
        Tensor x({bs, 1, s.input_size, s.input_size});
        for (int i = 0; i < bs; ++i) {
            const Tensor& src = s.inputs[static_cast<size_t>(start + i)];
            std::copy(src.data(), src.data() + src.size(),
                      x.data() + static_cast<int64_t>(i) * src.size());
        }
        const auto out = model.forward(ad::Var::leaf(x), rng, false);
        const Tensor& logits = out.logits.value();
        const Tensor& angle = out.angle.value();
        for (int i = 0; i < bs; ++i) {
            const int label = s.labels[static_cast<size_t>(start + i)];
            if (label < 0 || label >= num_classes)
                throw InvalidArgument("evaluate_classifier: class id out of range");
            int best = 0;
            for (int c = 1; c < num_classes; ++c)
                if (logits.at(i, c) > logits.at(i, best)) best = c;
            ++ev.per_class_total[static_cast<size_t>(label)];
            if (best == label) {
                ++ev.per_class_correct[static_cast<size_t>(label)];
                ++correct;
            }
            const auto& tv = s.targets[static_cast<size_t>(start + i)];
            const double dx = angle.at(i, 0) - tv[0];
            const double dy = angle.at(i, 1) - tv[1];
            angle_total += dx * dx + dy * dy;
        }
    }
    ev.overall_acc = static_cast<double>(correct) / n;
    ev.angle_loss = angle_total / n;
    return ev;
}

double recompute_gap(const UtilityReport& report) {
    if (report.top_runs.empty() || report.top_runs.size() != report.last_runs.size())
        throw InvalidArgument("recompute_gap: report is missing runs");
    double top = 0.0, last = 0.0;
    for (const auto& r : report.top_runs) top += overall_from_table(r);
    for (const auto& r : report.last_runs) last += overall_from_table(r);
    const auto n = static_cast<double>(report.top_runs.size());
    return top / n - last / n;
}

UtilityReport utility_gap_experiment(const DatasetManifest& sim, const DatasetManifest& real,
                                     Scorer scorer, const ScoreContext& ctx,
                                     const ClassifierConfig& ccfg,
                                     const std::vector<uint64_t>& seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    if (seeds.empty()) throw InvalidArgument("utility_gap_experiment: need at least one seed");
    if (sim.class_names != real.class_names)
        throw InvalidArgument("utility_gap_experiment: sim and real class sets differ");
    if (real.split_entries("test").empty())
        throw InvalidArgument("utility_gap_experiment: empty real test split");

    const std::vector<ScoreRecord> records = score_dataset(sim, scorer, ctx);
    std::unordered_map<int, int> class_count;
    for (const auto& e : sim.entries) ++class_count[e.class_id];
    int min_count = std::numeric_limits<int>::max();
    for (const auto& [cls, count] : class_count) min_count = std::min(min_count, count);
    const int quota = min_count / 2;
    if (quota < 1)
        throw InvalidArgument("utility_gap_experiment: need at least two images per class");
    const SplitIds split = rank_and_split(records, sim, true, quota);

    UtilityReport report;
    report.metric = scorer_to_string(scorer);
    report.class_names = sim.class_names;
    report.top_ids = split.top;
    report.last_ids = split.last;
    report.seeds = seeds;

    const DatasetManifest top_m = manifest_subset(sim, split.top, "train");
    const DatasetManifest last_m = manifest_subset(sim, split.last, "train");
    for (uint64_t seed : seeds) {
        const EvaluatorModel top_model = train_classifier(top_m, ccfg, seed);
        ClassifierEval run = evaluate_classifier(top_model, real, "test", ccfg.pre);
        run.seed = seed;
        report.top_runs.push_back(std::move(run));

        const EvaluatorModel last_model = train_classifier(last_m, ccfg, seed);
        run = evaluate_classifier(last_model, real, "test", ccfg.pre);
        run.seed = seed;
        report.last_runs.push_back(std::move(run));
    }

    report.top_acc_mean = mean_over(report.top_runs, &ClassifierEval::overall_acc);
    report.last_acc_mean = mean_over(report.last_runs, &ClassifierEval::overall_acc);
    report.gap = report.top_acc_mean - report.last_acc_mean;
    report.top_angle_mean = mean_over(report.top_runs, &ClassifierEval::angle_loss);
    report.last_angle_mean = mean_over(report.last_runs, &ClassifierEval::angle_loss);
    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

RetrainReport before_after_experiment(const DatasetManifest& sim,
                                      const std::filesystem::path& bundle_index,
                                      const DatasetManifest& real, const ClassifierConfig& ccfg,
                                      const std::vector<uint64_t>& seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    if (seeds.size() < 3)
        throw InvalidArgument("before_after_experiment: need at least three seeds");
    if (sim.class_names != real.class_names)
        throw InvalidArgument("before_after_experiment: sim and real class sets differ");
    if (real.split_entries("test").empty())
        throw InvalidArgument("before_after_experiment: empty real test split");
    if (sim.entries.empty()) throw InvalidArgument("before_after_experiment: empty sim manifest");

    const DatasetManifest cf = counterfactual_manifest(sim, bundle_index);
    if (cf.image_size != ccfg.pre.crop_size)
        throw InvalidArgument("counterfactual image size " + std::to_string(cf.image_size) +
                              " does not match classifier input " +
                              std::to_string(ccfg.pre.crop_size));

    std::vector<std::string> sim_ids;
    sim_ids.reserve(sim.entries.size());
    for (const auto& e : sim.entries) sim_ids.push_back(e.id);
    const DatasetManifest sim_train = manifest_subset(sim, sim_ids, "train");

    auto min_per_class = [](const DatasetManifest& m, const std::string& split) {
        std::unordered_map<int, int> count;
        for (const auto* e : m.split_entries(split)) ++count[e->class_id];
        int lo = std::numeric_limits<int>::max();
        for (int c = 0; c < m.num_classes(); ++c) lo = std::min(lo, count[c]);
        return lo;
    };
    const int n = std::min({min_per_class(real, "train"), min_per_class(sim_train, "train"),
                            min_per_class(cf, "train")});
    if (n < 1)
        throw InvalidArgument("before_after_experiment: a class has no training images");

    PreprocessConfig cf_pre = ccfg.pre;
    cf_pre.log_transform = false;  // counterfactual decodes are already log-compressed

    struct Condition {
        std::string name;
        DatasetManifest manifest;
        PreprocessConfig pre;
    };
    const std::vector<Condition> plan = {
        {"upper_bound", take_per_class(real, "train", n, "train"), ccfg.pre},
        {"before", take_per_class(sim_train, "train", n, "train"), ccfg.pre},
        {"after", take_per_class(cf, "train", n, "train"), cf_pre},
    };

    RetrainReport report;
    report.class_names = sim.class_names;
    report.seeds = seeds;
    report.train_per_class = n;
    for (const auto& cond : plan) {
        RetrainCondition rc;
        rc.name = cond.name;
        ClassifierConfig cfg = ccfg;
        cfg.pre = cond.pre;
        for (uint64_t seed : seeds) {
            const EvaluatorModel model = train_classifier(cond.manifest, cfg, seed);
            ClassifierEval run = evaluate_classifier(model, real, "test", ccfg.pre);
            run.seed = seed;
            rc.runs.push_back(std::move(run));
        }
        rc.acc_mean = mean_over(rc.runs, &ClassifierEval::overall_acc);
        rc.acc_std = sample_std(rc.runs, rc.acc_mean);
        rc.angle_mean = mean_over(rc.runs, &ClassifierEval::angle_loss);
        rc.per_class_acc_mean = per_class_acc_mean(rc.runs, sim.num_classes());
        report.conditions.push_back(std::move(rc));
    }
    report.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

ReportFiles write_utility_report(const UtilityReport& report, const std::filesystem::path& dir) {
    if (report.seeds.size() != report.top_runs.size() ||
        report.seeds.size() != report.last_runs.size())
        throw InvalidArgument("write_utility_report: runs do not match seeds");
    std::filesystem::create_directories(dir);
    ReportFiles out;
    std::vector<std::pair<uint64_t, std::string>> run_rows;
    for (size_t i = 0; i < report.seeds.size(); ++i) {
        const std::string name =
            "gap-" + report.metric + "-" + std::to_string(report.seeds[i]) + ".json";
        write_json_file({{"experiment", "gap"},
                         {"metric", report.metric},
                         {"seed", report.seeds[i]},
                         {"top", eval_to_json(report.top_runs[i])},
                         {"last", eval_to_json(report.last_runs[i])}},
                        dir / name);
        out.runs.push_back(dir / name);
        run_rows.emplace_back(report.seeds[i], name);
    }

    out.summary = dir / ("gap-" + report.metric + "-summary.json");
    write_json_file(utility_to_json(report), out.summary);

    const int num_classes = static_cast<int>(report.class_names.size());
    const auto top_acc = per_class_acc_mean(report.top_runs, num_classes);
    const auto last_acc = per_class_acc_mean(report.last_runs, num_classes);
    std::string csv = "class,top_acc,last_acc,gap\n";
    for (int c = 0; c < num_classes; ++c) {
        const size_t ci = static_cast<size_t>(c);
        csv += report.class_names[ci] + "," + format_acc(top_acc[ci]) + "," +
               format_acc(last_acc[ci]) + "," + format_acc(top_acc[ci] - last_acc[ci]) + "\n";
    }
    csv += "overall," + format_acc(report.top_acc_mean) + "," + format_acc(report.last_acc_mean) +
           "," + format_acc(report.gap) + "\n";
    out.csv = dir / ("gap-" + report.metric + ".csv");
    write_csv_file(csv, out.csv);

    out.index = merge_index(dir, "gap", report.metric, run_rows);
    return out;
}

ReportFiles write_retrain_report(const RetrainReport& report, const std::filesystem::path& dir) {
    for (const auto& cond : report.conditions)
        if (cond.runs.size() != report.seeds.size())
            throw InvalidArgument("write_retrain_report: runs do not match seeds");
    std::filesystem::create_directories(dir);
    ReportFiles out;
    std::vector<std::pair<uint64_t, std::string>> run_rows;
    for (size_t i = 0; i < report.seeds.size(); ++i) {
        nlohmann::json j{{"experiment", "retrain"},
                         {"metric", "accuracy"},
                         {"seed", report.seeds[i]}};
        for (const auto& cond : report.conditions) j[cond.name] = eval_to_json(cond.runs[i]);
        const std::string name = "retrain-accuracy-" + std::to_string(report.seeds[i]) + ".json";
        write_json_file(j, dir / name);
        out.runs.push_back(dir / name);
        run_rows.emplace_back(report.seeds[i], name);
    }

    out.summary = dir / "retrain-accuracy-summary.json";
    write_json_file(retrain_to_json(report), out.summary);

    std::string csv = "class";
    for (const auto& cond : report.conditions) csv += "," + cond.name;
    csv += "\n";
    for (size_t c = 0; c < report.class_names.size(); ++c) {
        csv += report.class_names[c];
        for (const auto& cond : report.conditions)
            csv += "," + format_acc(cond.per_class_acc_mean[c]);
        csv += "\n";
    }
    csv += "overall";
    for (const auto& cond : report.conditions) csv += "," + format_acc(cond.acc_mean);
    csv += "\n";
    out.csv = dir / "retrain-accuracy.csv";
    write_csv_file(csv, out.csv);

    out.index = merge_index(dir, "retrain", "accuracy", run_rows);
    return out;
}

UtilityReport load_utility_report(const std::filesystem::path& summary_json) {
    return utility_from_json(read_json_file(summary_json));
}

RetrainReport load_retrain_report(const std::filesystem::path& summary_json) {
    return retrain_from_json(read_json_file(summary_json));
}

std::string report_fingerprint(const UtilityReport& report) {
    nlohmann::json j = utility_to_json(report);
    j.erase("runtime_seconds");
    return j.dump();
}

std::string report_fingerprint(const RetrainReport& report) {
    nlohmann::json j = retrain_to_json(report);
    j.erase("runtime_seconds");
    return j.dump();
}

void write_score_csv(const std::vector<ScoreRecord>& records, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "id,metric,score,higher_is_better\n";
    for (const auto& r : records) {
        if (std::isnan(r.score)) throw InvalidArgument("write_score_csv: NaN score for " + r.id);
        f << r.id << "," << r.metric << ",";
        if (std::isinf(r.score)) {
            f << (r.score > 0 ? "inf" : "-inf");
        } else {
            std::ostringstream os;
            os << std::setprecision(17) << r.score;
            f << os.str();
        }
        f << "," << (r.higher_is_better ? 1 : 0) << "\n";
    }
}

std::vector<ScoreRecord> read_score_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != "id,metric,score,higher_is_better")
        throw IoError("score csv has an unexpected header: " + path.string());
    std::vector<ScoreRecord> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 4)
            throw IoError("score csv row has " + std::to_string(fields.size()) +
                          " fields, expected 4");
        ScoreRecord r;
        r.id = fields[0];
        r.metric = fields[1];
        r.score = std::stod(fields[2]);  // parses "inf"/"-inf"
        if (fields[3] == "1")
            r.higher_is_better = true;
        else if (fields[3] == "0")
            r.higher_is_better = false;
        else
            throw IoError("score csv direction flag must be 0 or 1");
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace xfake
