#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xfake/manifest.hpp"
#include "xfake/nn.hpp"
#include "xfake/preprocess.hpp"

namespace xfake {

using ad::Var;

struct IntroVAETrainConfig {
    double beta = 10.0;
    double alpha_R = 5e-4;
    double alpha_E = 5e-4;
    double alpha_G = 5e-4;
    double margin = 100.0;
    int latent_dim = 100;
    double lr = 5e-4;
    int epochs = 500;
    int batch = 25;
    uint64_t seed = 0;
    bool plain_vae = false;  // ablation: drops the adversarial terms
    int image_size = 64;
    int base_channels = 64;
    int grid_every = 50;  // reconstruction grid PNG cadence (epochs)
};

// Mirrored 4-stage convolutional autoencoder. The encoder halves the spatial
// size per stage and emits (mu, log_var); the generator upsamples back and
// ends in a sigmoid, so decoded pixels stay in [0,1]. The encoder doubles as
// the discriminator during adversarial training.
class IntroVAEModel {
  public:
    IntroVAEModel() = default;
    static IntroVAEModel create(int latent_dim, int image_size, int base_channels,
                                uint64_t seed);

    int latent_dim() const { return latent_dim_; }
    int image_size() const { return image_size_; }
    int base_channels() const { return base_channels_; }

    nn::ParamList encoder_params();
    nn::ParamList generator_params();
    nn::ParamList params();

    // Differentiable paths used by training and counterfactual optimization.
    std::pair<Var, Var> encode_var(const Var& x) const;  // ([N,L] mu, [N,L] log_var)
    Var decode_var(const Var& z) const;                  // [N,1,H,W]

    // Tensor conveniences; a [H,W] image or [L] code is treated as a batch of
    // one and squeezed back on return.
    struct EncodeResult {
        Tensor mu, log_var;
    };
    EncodeResult encode(const Tensor& x) const;
    Tensor decode(const Tensor& z) const;

  private:
    int latent_dim_ = 0, image_size_ = 0, base_channels_ = 0;
    std::vector<int> sizes_;  // spatial chain, sizes_[0] = image_size
    std::vector<nn::Conv2d> enc_convs_;
    nn::Linear enc_mu_, enc_log_var_;
    nn::Linear gen_fc_;
    std::vector<nn::Conv2d> gen_convs_;
};

// Per-sample KL(N(mu, sigma^2) || N(0, I)) in the standard non-negative form,
// -1/2 sum_j (1 + log sigma_j^2 - mu_j^2 - sigma_j^2). Input [N,L], output [N].
Var kl_to_prior(const Var& mu, const Var& log_var);

// Sum of squared pixel differences per sample, averaged over the batch.
// Inputs with fewer than three dimensions count as one sample.
Var reconstruction_loss(const Var& x, const Var& x_r);

// Scalar forms of the two training objectives (pure arithmetic on step means).
double encoder_loss(double kl_real, double kl_recon, double kl_sampled, double recon,
                    const IntroVAETrainConfig& cfg);
double generator_loss(double kl_recon, double kl_sampled, double recon,
                      const IntroVAETrainConfig& cfg);

// One training step's encoder objective: adversarial hinge terms are computed
// on stop-gradient decodings. eps and z_p are the step's frozen noise draws,
// both [N, latent_dim].
struct EncoderPhase {
    Var loss, kl_real, hinge_recon, hinge_sampled, recon;
};
EncoderPhase encoder_phase(const IntroVAEModel& model, const Var& x, const Tensor& eps,
                           const Tensor& z_p, const IntroVAETrainConfig& cfg);

// The generator objective re-encodes with gradients flowing.
struct GeneratorPhase {
    Var loss, kl_recon, kl_sampled, recon;
};
GeneratorPhase generator_phase(const IntroVAEModel& model, const Var& x, const Tensor& eps,
                               const Tensor& z_p, const IntroVAETrainConfig& cfg);

struct IntroVAEEpochStats {
    int epoch = 0;
    double encoder_loss = 0.0, generator_loss = 0.0;
    double kl_real = 0.0, kl_recon = 0.0, kl_sampled = 0.0, recon = 0.0;
};

struct TrainedIntroVAE {
    IntroVAEModel model;
    std::vector<IntroVAEEpochStats> log;
    IntroVAETrainConfig cfg;
    PreprocessConfig pre_cfg;
};

// Alternating encoder/generator updates per batch. When out_dir is given,
// writes introvae_log.csv plus reconstruction grids under grids/ every
// cfg.grid_every epochs (and at the final epoch). Deterministic given
// (configs, seed) on a single thread.
TrainedIntroVAE train_introvae(const DatasetManifest& manifest, const PreprocessConfig& pre,
                               const IntroVAETrainConfig& cfg,
                               const std::optional<std::filesystem::path>& out_dir = {});

// Checkpoint blob + JSON sidecar, mirroring the evaluator format.
void save_introvae(TrainedIntroVAE& trained, const std::filesystem::path& prefix);
IntroVAEModel load_introvae(const std::filesystem::path& prefix);

}  // namespace xfake
