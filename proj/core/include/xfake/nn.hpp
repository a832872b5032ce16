#pragma once

#include <string>
#include <vector>

#include "xfake/autodiff.hpp"
#include "xfake/rng.hpp"

namespace xfake::nn {

using ad::Var;

// Named view of a module's trainable tensors, in a stable declaration order
// (checkpoints and the optimizer both key off that order).
struct ParamRef {
    std::string name;
    Var var;
};
using ParamList = std::vector<ParamRef>;

int64_t param_count(const ParamList& params);
std::vector<double> flatten_params(const ParamList& params);
void load_params(ParamList& params, const std::vector<double>& flat);
void zero_grads(ParamList& params);

// FNV-1a over the raw bytes of the flattened parameters; frozen-model
// contracts compare these before and after an optimization that must not
// touch the model.
uint64_t param_hash(const ParamList& params);

// Deterministic affine layer, y = x·Wᵀ + b.
struct Linear {
    Var w, b;

    Linear() = default;
    Linear(int out_features, int in_features, Rng& rng);
    Var forward(const Var& x) const { return ad::linear(x, w, b); }
    void collect(const std::string& prefix, ParamList& out) const;
};

// Deterministic convolution with per-channel bias.
struct Conv2d {
    Var w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng);
    Var forward(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Variational convolution with factorized Gaussian posterior N(mu, alpha*mu^2),
// alpha = softplus(raw_alpha). Forward samples pre-activations: the mean path
// convolves x with mu, the variance path convolves x^2 with alpha*mu^2, and
// per-activation unit Gaussians scale the square root of the variance. No bias.
struct BayesConv2d {
    Var mu, raw_alpha;
    int stride = 1, pad = 0;

    static constexpr double kVarFloor = 1e-16;  // forward path, keeps sqrt gradient finite

    BayesConv2d() = default;
    BayesConv2d(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng,
                double alpha_init = 0.1);
    Var alpha() const { return ad::softplus(raw_alpha); }
    std::pair<Var, Var> moments(const Var& x) const;  // (mean, stddev) pre-activations
    Var forward(const Var& x, Rng& rng) const;
    Var forward_mean(const Var& x) const;  // noise-free path, x * mu
    void collect(const std::string& prefix, ParamList& out) const;
};

// First-order adaptive-moment optimizer over a fixed parameter list.
class Adam {
  public:
    explicit Adam(ParamList params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);
    void step();
    void zero_grad() { zero_grads(params_); }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

  private:
    ParamList params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace xfake::nn
