#include "xfake/nn.hpp"

#include <cmath>

namespace xfake::nn {

namespace {

Tensor gaussian_init(const std::vector<int>& shape, double stddev, Rng& rng) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

}  // namespace

int64_t param_count(const ParamList& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.var.value().size();
    return n;
}

std::vector<double> flatten_params(const ParamList& params) {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(param_count(params)));
    for (const auto& p : params) {
        const Tensor& t = p.var.value();
        flat.insert(flat.end(), t.data(), t.data() + t.size());
    }
    return flat;
}

void load_params(ParamList& params, const std::vector<double>& flat) {
    if (static_cast<int64_t>(flat.size()) != param_count(params))
        throw InvalidArgument("load_params: size mismatch");
    size_t off = 0;
    for (auto& p : params) {
        Tensor& t = p.var.value();
        std::copy(flat.begin() + off, flat.begin() + off + t.size(), t.data());
        off += static_cast<size_t>(t.size());
    }
}

void zero_grads(ParamList& params) {
    for (auto& p : params) p.var.zero_grad();
}

uint64_t param_hash(const ParamList& params) {
    std::vector<double> flat = flatten_params(params);
    uint64_t h = 0xcbf29ce484222325ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(flat.data());
    for (size_t i = 0; i < flat.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

Linear::Linear(int out_features, int in_features, Rng& rng)
    : w(Var::leaf(gaussian_init({out_features, in_features},
                                1.0 / std::sqrt(static_cast<double>(in_features)), rng),
                  true)),
      b(Var::leaf(Tensor({out_features}), true)) {}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

Conv2d::Conv2d(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng)
    : w(Var::leaf(gaussian_init({out_ch, in_ch, k, k},
                                1.0 / std::sqrt(static_cast<double>(in_ch) * k * k), rng),
                  true)),
      b(Var::leaf(Tensor({out_ch}), true)),
      stride(stride),
      pad(pad) {}

Var Conv2d::forward(const Var& x) const {
    return ad::add_channel_bias(ad::conv2d(x, w, stride, pad), b);
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

BayesConv2d::BayesConv2d(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng,
                         double alpha_init)
    : mu(Var::leaf(gaussian_init({out_ch, in_ch, k, k},
                                 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k), rng),
                   true)),
      raw_alpha(Var::leaf(Tensor::full({out_ch, in_ch, k, k}, std::log(std::expm1(alpha_init))),
                          true)),
      stride(stride),
      pad(pad) {}

std::pair<Var, Var> BayesConv2d::moments(const Var& x) const {
    Var mean = ad::conv2d(x, mu, stride, pad);
    Var var = ad::conv2d(ad::square(x), ad::mul(alpha(), ad::square(mu)), stride, pad);
    return {mean, ad::sqrt_floor(var, kVarFloor)};
}

Var BayesConv2d::forward(const Var& x, Rng& rng) const {
    auto [mean, stddev] = moments(x);
    Var eps = ad::gaussian_like(mean.value().shape(), rng);
    return ad::add(mean, ad::mul(eps, stddev));
}

Var BayesConv2d::forward_mean(const Var& x) const { return ad::conv2d(x, mu, stride, pad); }

void BayesConv2d::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".mu", mu});
    out.push_back({prefix + ".raw_alpha", raw_alpha});
}

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.var.value().shape());
        v_.emplace_back(p.var.value().shape());
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Var& p = params_[i].var;
        if (!p.has_grad()) continue;
        const Tensor& g = p.grad();
        Tensor& th = p.value();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (int64_t j = 0; j < th.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            th[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
        }
    }
}

}  // namespace xfake::nn
