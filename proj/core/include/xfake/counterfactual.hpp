#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "xfake/autodiff.hpp"
#include "xfake/evaluator.hpp"
#include "xfake/introvae.hpp"
#include "xfake/manifest.hpp"
#include "xfake/preprocess.hpp"
#include "xfake/rng.hpp"
#include "xfake/tensor.hpp"

namespace xfake {

// Weights and schedule for the latent counterfactual search.
struct CFConfig {
    double lambda_d = 1.0;   // pixel-distance weight
    double lambda_y = 1.0;   // class-guidance weight
    double lambda_v = 30.0;  // azimuth-guidance weight
    double lr = 5e-4;
    int steps = 200;
    int T = 10;  // stochastic evaluator passes inside the loss
    uint64_t seed = 0;
    bool use_class_guidance = true;
    bool use_angle_guidance = true;
};

// Signed per-pixel evidence: positive marks detail the original lacks,
// negative marks redundant detail.
struct SignedMap {
    Tensor values;  // [H, W]
};

struct CFLossParts {
    double entropy = 0.0;   // u_c + u_a over the T-draw evaluation
    double ce = 0.0;        // unweighted cross-entropy of the mean posterior vs the prior label
    double angle_d2 = 0.0;  // unweighted L2 distance between prior and mean azimuth vectors
    double dist = 0.0;      // mean absolute pixel difference to x0
    double total = 0.0;
};

struct CFLossResult {
    ad::Var total;
    CFLossParts parts;
};

// Recomposes the weighted total from recorded parts, honoring ablation flags.
double cf_total(const CFLossParts& parts, const CFConfig& cfg);

// Differentiable objective at latent z (shape [1, latent]). decode(z) is
// scored with T stochastic evaluator passes driven by rng; callers re-seed
// rng to hold the noise fixed across repeated evaluations of one step.
CFLossResult cf_loss(const ad::Var& z, const Tensor& x0, int prior_label,
                     const std::array<double, 2>& prior_angle_vec, EvaluatorModel& evaluator,
                     const IntroVAEModel& generator, const CFConfig& cfg, Rng& rng);

struct CFTraceEntry {
    double total = 0.0;
    double entropy = 0.0;
    double prior = 0.0;  // weighted guidance contribution
    double dist = 0.0;
};

// Adaptive-moment descent on a latent code against an arbitrary objective.
// Records one trace entry per step and keeps the best-by-total iterate.
struct CodeOptimum {
    Tensor z_best;
    double best_total = 0.0;
    int best_step = 0;
    std::vector<CFTraceEntry> trace;
};
CodeOptimum optimize_code(const Tensor& z0,
                          const std::function<CFLossResult(const ad::Var&, int)>& objective,
                          const CFConfig& cfg);

struct CounterfactualResult {
    Tensor x0;     // [H, W] preprocessed original
    Tensor x_opt;  // [H, W] decoded counterfactual
    Tensor z_opt;  // [latent]
    CriteriaVector m_before, m_after;
    SignedMap diff;
    std::vector<CFTraceEntry> trace;
    double best_total = 0.0;
    int best_step = 0;
};

// Full pipeline for one image: init z at encode(x0).mu, descend cf_loss,
// decode the best iterate, and score before/after criteria with 25 passes at
// fixed seeds. The evaluator and autoencoder are left bit-identical.
CounterfactualResult optimize_latent(const Tensor& x0, int prior_label, double prior_azimuth_deg,
                                     EvaluatorModel& evaluator, IntroVAEModel& introvae,
                                     const CFConfig& cfg);

// Per pixel: sign-preserving square of x_opt - x0.
SignedMap difference_map(const Tensor& x_opt, const Tensor& x0);

// Diverging red(+)/blue(-) PNG, symmetric scale anchored at max |value|.
void render_difference(const SignedMap& map, const std::filesystem::path& out);

// Writes dir/<id>/{x_opt.png, diff.png, diff.pfm, record.json}; returns the
// bundle directory.
std::filesystem::path write_bundle(const CounterfactualResult& result, const std::string& id,
                                   const CFConfig& cfg, const std::filesystem::path& dir);

// Optimizes every listed manifest entry (all entries when ids is empty) and
// writes one bundle each plus an index JSON; returns the index path.
std::filesystem::path explain_entries(const DatasetManifest& manifest,
                                      const PreprocessConfig& pre, EvaluatorModel& evaluator,
                                      IntroVAEModel& introvae, const CFConfig& cfg,
                                      const std::vector<std::string>& ids,
                                      const std::filesystem::path& out_dir);

}  // namespace xfake
