#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xfake/manifest.hpp"
#include "xfake/nn.hpp"
#include "xfake/preprocess.hpp"

namespace xfake {

using ad::Var;

enum class EvaluatorVariant { BBB, MCD, DeterministicCNN };

std::string variant_to_string(EvaluatorVariant v);
EvaluatorVariant variant_from_string(const std::string& s);

// Evaluator output m: Bayesian-averaged class posterior + scalarized class
// uncertainty, averaged angle vector + angle variance.
struct CriteriaVector {
    std::vector<double> class_probs;
    double u_c = 0.0;
    std::array<double, 2> angle_vec{1.0, 0.0};
    double u_a = 0.0;
    double total_u = 0.0;
    int pred_label = 0;
    double pred_azimuth_deg = 0.0;
    int T = 0;
};

struct EvaluatorModelConfig {
    EvaluatorVariant variant = EvaluatorVariant::BBB;
    int input_size = 88;
    std::vector<std::string> class_names;
    double prior_sigma = 0.1;   // BBB only
    double dropout_rate = 0.3;  // MCD only
};

struct EvaluatorTrainConfig {
    int epochs = 300;
    int batch = 25;
    double lr = 1e-3;
    int n_draws = 1;
    double lambda_a = 20.0;
    int T = 25;
    uint64_t seed = 0;
    // Desk-scale stopping rule: once the per-epoch validation proxy meets both
    // targets the loop ends early. Zero disables and keeps the full budget.
    double stop_at_val_acc = 0.0;
    double stop_at_val_angle = 0.0;
};

// Four stride-2 convolution stages (16/32/64/128 channels, 5x5 first, then
// 3x3), global average pooling, and two affine heads (C logits, 2-vector).
class EvaluatorModel {
  public:
    EvaluatorModel() = default;
    static EvaluatorModel create(const EvaluatorModelConfig& cfg, uint64_t seed);

    const EvaluatorModelConfig& config() const { return cfg_; }
    EvaluatorVariant variant() const { return cfg_.variant; }
    int num_classes() const { return static_cast<int>(cfg_.class_names.size()); }
    nn::ParamList params();

    // One forward pass to (logits, angle_vec), both [N, .]. Stochastic passes
    // draw weight noise (BBB) or dropout masks (MCD); the deterministic
    // variant and stochastic=false run the noise-free mean path.
    struct Output {
        Var logits, angle;
    };
    Output forward(const Var& x, Rng& rng, bool stochastic = true) const;

    const std::vector<nn::BayesConv2d>& bayes_layers() const { return bayes_; }
    std::vector<nn::BayesConv2d>& bayes_layers() { return bayes_; }

  private:
    EvaluatorModelConfig cfg_;
    std::vector<nn::BayesConv2d> bayes_;  // BBB trunk
    std::vector<nn::Conv2d> convs_;       // MCD / deterministic trunk
    nn::Linear class_head_, angle_head_;
};

// Eq.-8-style sampled pre-activation: mean path x*mu plus unit noise scaled by
// sqrt(x^2 * (alpha mu^2)).
Var bbb_conv_forward(const Var& x, const nn::BayesConv2d& layer, Rng& rng);

// Closed-form KL(N(mu, alpha mu^2) || N(0, prior_sigma^2)) summed over the
// layer's weights, with a 1e-8 variance floor.
Var layer_kl(const nn::BayesConv2d& layer, double prior_sigma);
constexpr double kKlVarFloor = 1e-8;

// Mean over the batch of CE(softmax(logits), label) + lambda_a * |v - v_hat|^2.
Var joint_likelihood_loss(const Var& logits, const Var& angle, const std::vector<int>& labels,
                          const Tensor& angle_targets, double lambda_a);

struct ElboParts {
    Var total, nll, kl;
};

// nll averaged over cfg.n_draws stochastic passes; kl = sum of layer KLs
// scaled by 1/minibatches_per_epoch.
ElboParts elbo_loss(EvaluatorModel& model, const Var& x, const std::vector<int>& labels,
                    const Tensor& angle_targets, const EvaluatorTrainConfig& cfg,
                    int minibatches_per_epoch, Rng& rng);

struct UncertaintyDecomposition {
    Tensor aleatoric;  // [C, C]
    Tensor epistemic;  // [C, C]
    double u_c = 0.0;  // trace(aleatoric) + trace(epistemic)
};

UncertaintyDecomposition class_uncertainty(const std::vector<std::vector<double>>& samples);
double angle_uncertainty(const std::vector<std::array<double, 2>>& samples);

// T stochastic passes assembled into the criteria vector. The deterministic
// variant runs once and reports predictive entropy as u_c with u_a = 0.
CriteriaVector predict_criteria(const EvaluatorModel& model, const Tensor& input, int T, Rng& rng);

// Split loaded into preprocessed tensors; augmentation stretch is separate so
// epochs can redraw it cheaply.
struct PreparedSplit {
    std::vector<Tensor> inputs;  // [H, W] after crop+log
    std::vector<int> labels;
    std::vector<std::array<double, 2>> targets;
    int input_size = 0;
};

PreparedSplit prepare_split(const DatasetManifest& manifest, const std::string& split,
                            const PreprocessConfig& pre);

struct EpochStats {
    int epoch = 0;
    double loss = 0.0, nll = 0.0, kl = 0.0;
    double val_acc = 0.0, val_angle_loss = 0.0;
};

struct TrainedEvaluator {
    EvaluatorModel model;
    std::vector<EpochStats> log;
    EvaluatorTrainConfig train_cfg;
    PreprocessConfig pre_cfg;
};

// Full training loop; writes the per-epoch CSV when log_csv is given.
// Deterministic given (configs, seed) on a single thread.
TrainedEvaluator train_evaluator(const DatasetManifest& manifest, const PreprocessConfig& pre,
                                 const EvaluatorModelConfig& model_cfg,
                                 const EvaluatorTrainConfig& cfg,
                                 const std::optional<std::filesystem::path>& log_csv = {});

// Checkpoint = raw little-endian double blob ({prefix}.bin) + JSON sidecar
// ({prefix}.json). The sidecar records variant, classes, sizes, configs, seed,
// final metrics, and an FNV-1a hash of the blob.
void save_evaluator(TrainedEvaluator& trained, const std::filesystem::path& prefix);
EvaluatorModel load_evaluator(const std::filesystem::path& prefix);

}  // namespace xfake
