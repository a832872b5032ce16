#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xfake/evaluator.hpp"
#include "xfake/manifest.hpp"
#include "xfake/preprocess.hpp"
#include "xfake/tensor.hpp"

namespace xfake {

// Peak signal-to-noise ratio in dB; identical images return +infinity
// (serialized as "inf").
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
// C2 = 0.03^2, dynamic range 1, mean over valid window positions.
double ssim(const Tensor& a, const Tensor& b);

// Scorers rank a simulated set either against paired references (psnr/ssim)
// or by a trained evaluator's total predictive uncertainty. random_control
// assigns seeded uniform scores; it is the null baseline for the gap
// experiment, not a quality metric.
enum class Scorer { psnr, ssim, eva_bbb_total_u, eva_mcd_total_u, random_control };

std::string scorer_to_string(Scorer s);
Scorer scorer_from_string(const std::string& s);

struct ScoreRecord {
    std::string id;
    std::string metric;
    double score = 0.0;
    bool higher_is_better = true;
};

struct ScoreContext {
    const DatasetManifest* reference = nullptr;  // paired set for psnr/ssim
    const EvaluatorModel* evaluator = nullptr;   // trained model for eva_* scorers
    PreprocessConfig pre;                        // evaluator input pipeline
    int T = 25;                                  // stochastic passes per image
    uint64_t seed = 0;
};

// One record per manifest entry, in manifest order. FR metrics pair images by
// id and fail naming any id without a reference; evaluator scores are total_u
// with higher-is-worse direction.
std::vector<ScoreRecord> score_dataset(const DatasetManifest& manifest, Scorer scorer,
                                       const ScoreContext& ctx);

struct SplitIds {
    std::vector<std::string> top, last;
};

// Ranks by score in the metric's quality direction (ties broken by manifest
// order) and partitions the ids: the best top_n per pool (or per class) go to
// TOP, everything else to LAST, both listed best first.
SplitIds rank_and_split(const std::vector<ScoreRecord>& records, const DatasetManifest& manifest,
                        bool per_class, int top_n_per_class);

// Entries with the given ids, kept in src order, relabeled to one split.
DatasetManifest manifest_subset(const DatasetManifest& src, const std::vector<std::string>& ids,
                                const std::string& split);

// First per_class entries of each class from one split of src.
DatasetManifest take_per_class(const DatasetManifest& src, const std::string& split,
                               int per_class, const std::string& out_split);

// Manifest over the x_opt.png images of a counterfactual bundle index, one per
// sim entry with the sim labels; fails on any sim id without a bundle.
DatasetManifest counterfactual_manifest(const DatasetManifest& sim,
                                        const std::filesystem::path& bundle_index);

// The compact probe classifier is the deterministic evaluator trunk trained
// with the joint class+angle loss.
struct ClassifierConfig {
    EvaluatorTrainConfig train;
    PreprocessConfig pre;
};

EvaluatorModel train_classifier(const DatasetManifest& train_manifest, const ClassifierConfig& cfg,
                                uint64_t seed);

// Test-split evaluation of one trained classifier. Per-class counts are kept
// so overall accuracy is recomputable exactly.
struct ClassifierEval {
    uint64_t seed = 0;
    std::vector<int64_t> per_class_correct, per_class_total;
    double overall_acc = 0.0;
    double angle_loss = 0.0;  // mean |v - v_hat|^2 on the unit-vector encoding
};

ClassifierEval evaluate_classifier(const EvaluatorModel& model, const DatasetManifest& manifest,
                                   const std::string& split, const PreprocessConfig& pre);

struct UtilityReport {
    std::string metric;
    std::vector<std::string> class_names;
    std::vector<std::string> top_ids, last_ids;
    std::vector<uint64_t> seeds;
    std::vector<ClassifierEval> top_runs, last_runs;  // parallel to seeds
    double top_acc_mean = 0.0, last_acc_mean = 0.0;
    double gap = 0.0;  // top_acc_mean - last_acc_mean
    double top_angle_mean = 0.0, last_angle_mean = 0.0;
    double runtime_seconds = 0.0;
};

// acc(TOP) - acc(LAST) rebuilt from the stored per-class tables.
double recompute_gap(const UtilityReport& report);

// Scores sim, halves each class into TOP/LAST, trains one classifier per
// split per seed, and tests every classifier on the real manifest's test
// split.
UtilityReport utility_gap_experiment(const DatasetManifest& sim, const DatasetManifest& real,
                                     Scorer scorer, const ScoreContext& ctx,
                                     const ClassifierConfig& ccfg,
                                     const std::vector<uint64_t>& seeds);

struct RetrainCondition {
    std::string name;  // upper_bound | before | after
    std::vector<ClassifierEval> runs;
    double acc_mean = 0.0, acc_std = 0.0;
    double angle_mean = 0.0;
    std::vector<double> per_class_acc_mean;
};

struct RetrainReport {
    std::vector<std::string> class_names;
    std::vector<uint64_t> seeds;
    int train_per_class = 0;  // enforced across all three conditions
    std::vector<RetrainCondition> conditions;
    double runtime_seconds = 0.0;
};

// Trains {real (upper_bound), simulated (before), counterfactual (after)}
// classifiers at identical per-class training-set sizes over >= 3 seeds and
// tests all of them on the real manifest's test split. Counterfactual images
// are already cropped and log-compressed, so that condition skips the log
// transform.
RetrainReport before_after_experiment(const DatasetManifest& sim,
                                      const std::filesystem::path& bundle_index,
                                      const DatasetManifest& real, const ClassifierConfig& ccfg,
                                      const std::vector<uint64_t>& seeds);

// Report bundle on disk: one {experiment}-{metric}-{seed}.json per seed, a
// summary JSON, a per-class CSV (one row per class, columns per condition),
// and a merged index.json listing every run written to the directory.
struct ReportFiles {
    std::vector<std::filesystem::path> runs;
    std::filesystem::path summary, csv, index;
};

ReportFiles write_utility_report(const UtilityReport& report, const std::filesystem::path& dir);
ReportFiles write_retrain_report(const RetrainReport& report, const std::filesystem::path& dir);

UtilityReport load_utility_report(const std::filesystem::path& summary_json);
RetrainReport load_retrain_report(const std::filesystem::path& summary_json);

// Canonical JSON dump of the result payload with wall time stripped; equal
// fingerprints mean bit-identical experiment outcomes.
std::string report_fingerprint(const UtilityReport& report);
std::string report_fingerprint(const RetrainReport& report);

// Score table round-trip; non-finite scores are written as "inf".
void write_score_csv(const std::vector<ScoreRecord>& records, const std::filesystem::path& path);
std::vector<ScoreRecord> read_score_csv(const std::filesystem::path& path);

}  // namespace xfake
