#include "xfake/counterfactual.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "xfake/azimuth.hpp"
#include "xfake/errors.hpp"
#include "xfake/nn.hpp"

namespace xfake {

using ad::Var;

namespace {

constexpr int kCriteriaPasses = 25;  // before/after scoring draws
constexpr uint64_t kBeforeTag = 0x6d5f626566ull;
constexpr uint64_t kAfterTag = 0x6d5f616674ull;
constexpr uint64_t kStepTagBase = 0x73746570ull;

void validate_config(const CFConfig& cfg) {
    if (cfg.lambda_d < 0 || cfg.lambda_y < 0 || cfg.lambda_v < 0)
        throw InvalidArgument("counterfactual weights must be non-negative");
    if (cfg.lr <= 0) throw InvalidArgument("counterfactual lr must be positive");
    if (cfg.steps < 1) throw InvalidArgument("counterfactual steps must be at least 1");
    if (cfg.T < 1) throw InvalidArgument("counterfactual T must be at least 1");
}

// Restores requires_grad flags on scope exit; the descent must not build
// gradient branches into the frozen models.
class FreezeGuard {
  public:
    explicit FreezeGuard(nn::ParamList params) : params_(std::move(params)) {
        for (auto& p : params_) {
            saved_.push_back(p.var.requires_grad());
            p.var.set_requires_grad(false);
        }
    }
    ~FreezeGuard() {
        for (size_t i = 0; i < params_.size(); ++i) params_[i].var.set_requires_grad(saved_[i]);
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

  private:
    nn::ParamList params_;
    std::vector<bool> saved_;
};

// [1, D] -> [T, D] through a matmul so gradients fold back onto the row.
Var tile_rows(const Var& row, int t) {
    return ad::matmul(Var::leaf(Tensor::full({t, 1}, 1.0)), row);
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

nlohmann::json criteria_json(const CriteriaVector& m) {
    return {{"class_probs", m.class_probs},
            {"u_c", m.u_c},
            {"angle_vec", m.angle_vec},
            {"u_a", m.u_a},
            {"total_u", m.total_u},
            {"pred_label", m.pred_label},
            {"pred_azimuth_deg", m.pred_azimuth_deg},
            {"passes", m.T}};
}

nlohmann::json config_json(const CFConfig& cfg) {
    return {{"lambda_d", cfg.lambda_d},
            {"lambda_y", cfg.lambda_y},
            {"lambda_v", cfg.lambda_v},
            {"lr", cfg.lr},
            {"steps", cfg.steps},
            {"T", cfg.T},
            {"seed", cfg.seed},
            {"use_class_guidance", cfg.use_class_guidance},
            {"use_angle_guidance", cfg.use_angle_guidance}};
}

}  // namespace

double cf_total(const CFLossParts& parts, const CFConfig& cfg) {
    double total = parts.entropy;
    if (cfg.use_class_guidance) total += cfg.lambda_y * parts.ce;
    if (cfg.use_angle_guidance) total += cfg.lambda_v * parts.angle_d2;
    return total + cfg.lambda_d * parts.dist;
}

CFLossResult cf_loss(const Var& z, const Tensor& x0, int prior_label,
                     const std::array<double, 2>& prior_angle_vec, EvaluatorModel& evaluator,
                     const IntroVAEModel& generator, const CFConfig& cfg, Rng& rng) {
    validate_config(cfg);
    if (std::abs(std::hypot(prior_angle_vec[0], prior_angle_vec[1]) - 1.0) > 1e-6)
        throw InvalidArgument("prior azimuth vector must have unit norm");
    if (prior_label < 0 || prior_label >= evaluator.num_classes())
        throw InvalidArgument("prior label out of range");
    const int side = generator.image_size();
    if (x0.ndim() != 2 || x0.dim(0) != side || x0.dim(1) != side)
        throw InvalidArgument("cf_loss expects the original as a [" + std::to_string(side) + ", " +
                              std::to_string(side) + "] image");
    if (evaluator.config().input_size != side)
        throw InvalidArgument("evaluator input size does not match the autoencoder");

    const bool stochastic = evaluator.variant() != EvaluatorVariant::DeterministicCNN;
    if (stochastic && cfg.T < 2)
        throw InvalidArgument("stochastic evaluators need at least 2 passes in the loss");
    const int t = stochastic ? cfg.T : 1;

    Var x = generator.decode_var(z);  // [1, 1, H, W]
    Var batch = ad::reshape(tile_rows(ad::reshape(x, {1, side * side}), t), {t, 1, side, side});
    auto out = evaluator.forward(batch, rng, stochastic);
    Var probs = ad::softmax_rows(out.logits);  // [t, C]

    const double inv_t = 1.0 / t;
    Var row_avg = Var::leaf(Tensor::full({1, t}, inv_t));
    Var mean_p = ad::matmul(row_avg, probs);      // [1, C]
    Var mean_v = ad::matmul(row_avg, out.angle);  // [1, 2]

    // u_c as mean Gini impurity of the draws plus the trace of their spread,
    // u_a as the spread of the azimuth vectors; the differentiable twins of
    // class_uncertainty and angle_uncertainty.
    Var u_al = ad::add_scalar(ad::mul_scalar(ad::sum(ad::square(probs)), -inv_t), 1.0);
    Var u_ep = ad::mul_scalar(ad::sum(ad::square(ad::sub(probs, tile_rows(mean_p, t)))), inv_t);
    Var u_a = ad::mul_scalar(ad::sum(ad::square(ad::sub(out.angle, tile_rows(mean_v, t)))), inv_t);
    Var entropy = ad::add(ad::add(u_al, u_ep), u_a);

    Tensor one_hot({1, evaluator.num_classes()});
    one_hot.at(0, prior_label) = 1.0;
    Var ce = ad::neg(ad::log_(ad::clamp_min(ad::sum(ad::mul(mean_p, Var::leaf(one_hot))), 1e-12)));

    Tensor prior({1, 2}, {prior_angle_vec[0], prior_angle_vec[1]});
    Var d2 = ad::sqrt_floor(ad::sum(ad::square(ad::sub(Var::leaf(prior), mean_v))), 1e-16);

    Tensor x0_batch({1, 1, side, side});
    std::copy(x0.data(), x0.data() + x0.size(), x0_batch.data());
    Var dist = ad::mean(ad::abs_(ad::sub(x, Var::leaf(x0_batch))));

    Var total = entropy;
    if (cfg.use_class_guidance) total = ad::add(total, ad::mul_scalar(ce, cfg.lambda_y));
    if (cfg.use_angle_guidance) total = ad::add(total, ad::mul_scalar(d2, cfg.lambda_v));
    total = ad::add(total, ad::mul_scalar(dist, cfg.lambda_d));

    CFLossResult res;
    res.total = total;
    res.parts = {entropy.item(), ce.item(), d2.item(), dist.item(), total.item()};
    return res;
}

CodeOptimum optimize_code(const Tensor& z0,
                          const std::function<CFLossResult(const Var&, int)>& objective,
                          const CFConfig& cfg) {
    validate_config(cfg);
    if (z0.empty()) throw InvalidArgument("optimize_code needs a non-empty start code");

    Var z = Var::leaf(z0, true);
    nn::ParamList params{{"z", z}};
    nn::Adam opt(params, cfg.lr);

    CodeOptimum best;
    best.z_best = z0;
    best.best_total = std::numeric_limits<double>::infinity();
    for (int step = 0; step < cfg.steps; ++step) {
        opt.zero_grad();
        CFLossResult r = objective(z, step);
        const CFLossParts& p = r.parts;
        if (!std::isfinite(p.total))
            throw NonFiniteLoss("non-finite counterfactual loss at step " + std::to_string(step) +
                                    "; " + std::to_string(best.trace.size()) +
                                    " finite steps recorded, best total so far " +
                                    std::to_string(best.best_total),
                                step);
        double prior = 0.0;
        if (cfg.use_class_guidance) prior += cfg.lambda_y * p.ce;
        if (cfg.use_angle_guidance) prior += cfg.lambda_v * p.angle_d2;
        best.trace.push_back({p.total, p.entropy, prior, p.dist});
        if (p.total < best.best_total) {
            best.best_total = p.total;
            best.best_step = step;
            best.z_best = z.value();
        }
        ad::backward(r.total);
        opt.step();
    }
    return best;
}

CounterfactualResult optimize_latent(const Tensor& x0, int prior_label, double prior_azimuth_deg,
                                     EvaluatorModel& evaluator, IntroVAEModel& introvae,
                                     const CFConfig& cfg) {
    validate_config(cfg);
    const int side = introvae.image_size();
    if (x0.ndim() != 2 || x0.dim(0) != side || x0.dim(1) != side)
        throw InvalidArgument("optimize_latent expects a [" + std::to_string(side) + ", " +
                              std::to_string(side) + "] image");
    if (evaluator.config().input_size != side)
        throw InvalidArgument("evaluator input size does not match the autoencoder");
    if (prior_label < 0 || prior_label >= evaluator.num_classes())
        throw InvalidArgument("prior label out of range");

    const uint64_t eva_hash = nn::param_hash(evaluator.params());
    const uint64_t vae_hash = nn::param_hash(introvae.params());
    const std::array<double, 2> prior_vec = encode_azimuth(prior_azimuth_deg);

    CounterfactualResult res;
    res.x0 = x0;
    {
        Rng before_rng(Rng::derive(cfg.seed, kBeforeTag));
        res.m_before = predict_criteria(evaluator, x0, kCriteriaPasses, before_rng);
    }

    auto enc = introvae.encode(x0);
    Tensor z0({1, introvae.latent_dim()});
    std::copy(enc.mu.data(), enc.mu.data() + enc.mu.size(), z0.data());

    CodeOptimum opt;
    {
        FreezeGuard freeze_eva(evaluator.params());
        FreezeGuard freeze_vae(introvae.params());
        opt = optimize_code(
            z0,
            [&](const Var& zv, int step) {
                Rng step_rng(Rng::derive(cfg.seed, kStepTagBase + static_cast<uint64_t>(step)));
                return cf_loss(zv, x0, prior_label, prior_vec, evaluator, introvae, cfg, step_rng);
            },
            cfg);
    }

    res.trace = std::move(opt.trace);
    res.best_total = opt.best_total;
    res.best_step = opt.best_step;
    res.z_opt = Tensor({introvae.latent_dim()});
    std::copy(opt.z_best.data(), opt.z_best.data() + opt.z_best.size(), res.z_opt.data());
    res.x_opt = introvae.decode(res.z_opt);
    {
        Rng after_rng(Rng::derive(cfg.seed, kAfterTag));
        res.m_after = predict_criteria(evaluator, res.x_opt, kCriteriaPasses, after_rng);
    }
    res.diff = difference_map(res.x_opt, x0);

    for (const auto& e : res.trace)
        if (res.best_total > e.total) throw InvalidState("best-iterate bookkeeping lost the minimum");
    if (nn::param_hash(evaluator.params()) != eva_hash ||
        nn::param_hash(introvae.params()) != vae_hash)
        throw InvalidState("frozen model parameters changed during optimization");
    return res;
}

SignedMap difference_map(const Tensor& x_opt, const Tensor& x0) {
    if (x_opt.ndim() != 2 || !x_opt.same_shape(x0))
        throw InvalidArgument("difference_map expects two [H, W] images of equal shape");
    SignedMap m;
    m.values = Tensor(x_opt.shape());
    for (int64_t i = 0; i < x_opt.size(); ++i) {
        const double d = x_opt[i] - x0[i];
        m.values[i] = d * std::abs(d);
    }
    return m;
}

void render_difference(const SignedMap& map, const std::filesystem::path& out) {
    if (map.values.ndim() != 2) throw InvalidArgument("render_difference expects an [H, W] map");
    double peak = 0.0;
    for (int64_t i = 0; i < map.values.size(); ++i) {
        if (!std::isfinite(map.values[i]))
            throw InvalidArgument("render_difference: non-finite map value");
        peak = std::max(peak, std::abs(map.values[i]));
    }
    const int h = map.values.dim(0), w = map.values.dim(1);
    Tensor rgb({h, w, 3});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = peak > 0.0 ? map.values.at(y, x) / peak : 0.0;
            const int64_t base = (static_cast<int64_t>(y) * w + x) * 3;
            if (v >= 0.0) {
                rgb[base] = 1.0;
                rgb[base + 1] = 1.0 - v;
                rgb[base + 2] = 1.0 - v;
            } else {
                rgb[base] = 1.0 + v;
                rgb[base + 1] = 1.0 + v;
                rgb[base + 2] = 1.0;
            }
        }
    write_png_rgb(out, rgb);
}

std::filesystem::path write_bundle(const CounterfactualResult& result, const std::string& id,
                                   const CFConfig& cfg, const std::filesystem::path& dir) {
    if (id.empty()) throw InvalidArgument("bundle id must be non-empty");
    if (result.trace.empty()) throw InvalidArgument("result carries no trace");
    const auto bundle = dir / id;
    std::filesystem::create_directories(bundle);
    write_png16(bundle / "x_opt.png", result.x_opt);
    render_difference(result.diff, bundle / "diff.png");
    write_pfm(bundle / "diff.pfm", result.diff.values);

    nlohmann::json rec{{"id", id},
                       {"m_before", criteria_json(result.m_before)},
                       {"m_after", criteria_json(result.m_after)},
                       {"config", config_json(cfg)},
                       {"trace_summary",
                        {{"steps", result.trace.size()},
                         {"best_step", result.best_step},
                         {"best_total", result.best_total},
                         {"first_total", result.trace.front().total},
                         {"final_total", result.trace.back().total}}}};
    const auto rec_path = bundle / "record.json";
    std::ofstream f(rec_path);
    if (!f) throw IoError("cannot write: " + rec_path.string());
    f << rec.dump(2) << "\n";
    if (!f) throw IoError("short write: " + rec_path.string());
    return bundle;
}

std::filesystem::path explain_entries(const DatasetManifest& manifest,
                                      const PreprocessConfig& pre, EvaluatorModel& evaluator,
                                      IntroVAEModel& introvae, const CFConfig& cfg,
                                      const std::vector<std::string>& ids,
                                      const std::filesystem::path& out_dir) {
    std::vector<const ManifestEntry*> selected;
    if (ids.empty()) {
        for (const auto& e : manifest.entries) selected.push_back(&e);
    } else {
        for (const auto& want : ids) {
            const ManifestEntry* hit = nullptr;
            for (const auto& e : manifest.entries)
                if (e.id == want) {
                    hit = &e;
                    break;
                }
            if (!hit) throw InvalidArgument("unknown manifest id: " + want);
            selected.push_back(hit);
        }
    }
    if (selected.empty()) throw InvalidArgument("nothing to explain: manifest has no entries");

    std::filesystem::create_directories(out_dir);
    nlohmann::json index{{"count", selected.size()}, {"entries", nlohmann::json::array()}};
    for (const ManifestEntry* e : selected) {
        TargetImage img = load_image(manifest, *e);
        Tensor x = preprocess(img.pixels, pre);
        CFConfig entry_cfg = cfg;
        entry_cfg.seed = Rng::derive(cfg.seed, fnv1a(e->id));
        CounterfactualResult res =
            optimize_latent(x, e->class_id, e->azimuth_deg, evaluator, introvae, entry_cfg);
        const auto bundle = write_bundle(res, e->id, entry_cfg, out_dir);
        index["entries"].push_back({{"id", e->id},
                                    {"bundle", std::filesystem::relative(bundle, out_dir).string()},
                                    {"best_total", res.best_total},
                                    {"total_u_before", res.m_before.total_u},
                                    {"total_u_after", res.m_after.total_u}});
    }
    const auto index_path = out_dir / "index.json";
    std::ofstream f(index_path);
    if (!f) throw IoError("cannot write: " + index_path.string());
    f << index.dump(2) << "\n";
    return index_path;
}

}  // namespace xfake
