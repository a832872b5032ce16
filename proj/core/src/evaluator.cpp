#include "xfake/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "checkpoint_io.hpp"
#include "xfake/azimuth.hpp"

namespace xfake {

namespace {

using detail::hash_to_hex;
using detail::read_doubles;
using detail::write_doubles;
using nlohmann::json;

struct LayerSpec {
    int out_ch, k, pad;
};
constexpr LayerSpec kTrunk[] = {{16, 5, 2}, {32, 3, 1}, {64, 3, 1}, {128, 3, 1}};
constexpr int kStride = 2;
constexpr int kFeatureDim = 128;

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    Tensor t({static_cast<int>(labels.size()), num_classes});
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw InvalidArgument("label out of range: " + std::to_string(labels[i]));
        t[static_cast<int64_t>(i) * num_classes + labels[i]] = 1.0;
    }
    return t;
}

}  // namespace

std::string variant_to_string(EvaluatorVariant v) {
    switch (v) {
        case EvaluatorVariant::BBB: return "bbb";
        case EvaluatorVariant::MCD: return "mcd";
        case EvaluatorVariant::DeterministicCNN: return "deterministic";
    }
    throw InvalidArgument("unknown evaluator variant");
}

EvaluatorVariant variant_from_string(const std::string& s) {
    if (s == "bbb") return EvaluatorVariant::BBB;
    if (s == "mcd") return EvaluatorVariant::MCD;
    if (s == "deterministic") return EvaluatorVariant::DeterministicCNN;
    throw InvalidArgument("unknown evaluator variant: " + s);
}

EvaluatorModel EvaluatorModel::create(const EvaluatorModelConfig& cfg, uint64_t seed) {
    if (cfg.class_names.size() < 2)
        throw InvalidArgument("evaluator needs at least two classes");
    if (cfg.input_size < 16) throw InvalidArgument("evaluator input size too small");
    if (cfg.variant == EvaluatorVariant::MCD &&
        (cfg.dropout_rate <= 0.0 || cfg.dropout_rate >= 1.0))
        throw InvalidArgument("dropout rate must lie in (0, 1)");
    if (cfg.variant == EvaluatorVariant::BBB && cfg.prior_sigma <= 0.0)
        throw InvalidArgument("prior sigma must be positive");

    EvaluatorModel m;
    m.cfg_ = cfg;
    Rng rng(Rng::derive(seed, 0x45564131ull));
    int in_ch = 1;
    for (const auto& spec : kTrunk) {
        if (cfg.variant == EvaluatorVariant::BBB)
            m.bayes_.emplace_back(spec.out_ch, in_ch, spec.k, kStride, spec.pad, rng);
        else
            m.convs_.emplace_back(spec.out_ch, in_ch, spec.k, kStride, spec.pad, rng);
        in_ch = spec.out_ch;
    }
    m.class_head_ = nn::Linear(static_cast<int>(cfg.class_names.size()), kFeatureDim, rng);
    m.angle_head_ = nn::Linear(2, kFeatureDim, rng);
    return m;
}

nn::ParamList EvaluatorModel::params() {
    nn::ParamList out;
    for (size_t i = 0; i < bayes_.size(); ++i)
        bayes_[i].collect("trunk" + std::to_string(i), out);
    for (size_t i = 0; i < convs_.size(); ++i)
        convs_[i].collect("trunk" + std::to_string(i), out);
    class_head_.collect("class_head", out);
    angle_head_.collect("angle_head", out);
    return out;
}

EvaluatorModel::Output EvaluatorModel::forward(const Var& x, Rng& rng, bool stochastic) const {
    if (x.shape().size() != 4 || x.shape()[1] != 1)
        throw InvalidArgument("evaluator expects [N, 1, H, W] input");
    Var h = x;
    switch (cfg_.variant) {
        case EvaluatorVariant::BBB:
            for (const auto& layer : bayes_)
                h = ad::relu(stochastic ? layer.forward(h, rng) : layer.forward_mean(h));
            break;
        case EvaluatorVariant::MCD:
            for (const auto& layer : convs_) {
                if (stochastic) h = ad::dropout(h, cfg_.dropout_rate, rng);
                h = ad::relu(layer.forward(h));
            }
            break;
        case EvaluatorVariant::DeterministicCNN:
            for (const auto& layer : convs_) h = ad::relu(layer.forward(h));
            break;
    }
    Var feat = ad::global_avg_pool(h);
    return {class_head_.forward(feat), angle_head_.forward(feat)};
}

Var bbb_conv_forward(const Var& x, const nn::BayesConv2d& layer, Rng& rng) {
    return layer.forward(x, rng);
}

Var layer_kl(const nn::BayesConv2d& layer, double prior_sigma) {
    if (prior_sigma <= 0.0) throw InvalidArgument("prior sigma must be positive");
    const double sp2 = prior_sigma * prior_sigma;
    Var mu2 = ad::square(layer.mu);
    Var var = ad::clamp_min(ad::mul(layer.alpha(), mu2), kKlVarFloor);
    Var ratio = ad::mul_scalar(ad::add(var, mu2), 1.0 / sp2);
    Var terms = ad::add_scalar(ad::sub(ratio, ad::log_(var)), std::log(sp2) - 1.0);
    return ad::mul_scalar(ad::sum(terms), 0.5);
}

Var joint_likelihood_loss(const Var& logits, const Var& angle, const std::vector<int>& labels,
                          const Tensor& angle_targets, double lambda_a) {
    const auto& ls = logits.shape();
    if (ls.size() != 2) throw InvalidArgument("logits must be [N, C]");
    const int n = ls[0], c = ls[1];
    if (static_cast<int>(labels.size()) != n)
        throw InvalidArgument("label count does not match batch");
    if (angle.shape() != std::vector<int>{n, 2} || !angle_targets.same_shape(angle.value()))
        throw InvalidArgument("angle tensors must be [N, 2]");
    Var mask = Var::leaf(one_hot(labels, c));
    Var ce_total = ad::neg(ad::sum(ad::mul(ad::log_softmax_rows(logits), mask)));
    Var angle_total = ad::sum(ad::square(ad::sub(angle, Var::leaf(angle_targets))));
    return ad::mul_scalar(ad::add(ce_total, ad::mul_scalar(angle_total, lambda_a)), 1.0 / n);
}

ElboParts elbo_loss(EvaluatorModel& model, const Var& x, const std::vector<int>& labels,
                    const Tensor& angle_targets, const EvaluatorTrainConfig& cfg,
                    int minibatches_per_epoch, Rng& rng) {
    if (model.variant() != EvaluatorVariant::BBB)
        throw InvalidState("elbo_loss requires the variational evaluator");
    if (minibatches_per_epoch < 1) throw InvalidArgument("minibatches_per_epoch must be >= 1");
    if (cfg.n_draws < 1) throw InvalidArgument("n_draws must be >= 1");

    Var nll;
    for (int d = 0; d < cfg.n_draws; ++d) {
        auto out = model.forward(x, rng, true);
        Var draw = joint_likelihood_loss(out.logits, out.angle, labels, angle_targets,
                                         cfg.lambda_a);
        nll = d == 0 ? draw : ad::add(nll, draw);
    }
    if (cfg.n_draws > 1) nll = ad::mul_scalar(nll, 1.0 / cfg.n_draws);

    Var kl;
    bool first = true;
    for (const auto& layer : model.bayes_layers()) {
        Var k = layer_kl(layer, model.config().prior_sigma);
        kl = first ? k : ad::add(kl, k);
        first = false;
    }
    kl = ad::mul_scalar(kl, 1.0 / minibatches_per_epoch);
    return {ad::add(nll, kl), nll, kl};
}

UncertaintyDecomposition class_uncertainty(const std::vector<std::vector<double>>& samples) {
    if (samples.empty()) throw InvalidArgument("class_uncertainty needs at least one sample");
    const int c = static_cast<int>(samples[0].size());
    if (c < 2) throw InvalidArgument("class posterior needs at least two entries");
    const double t = static_cast<double>(samples.size());
    for (const auto& p : samples) {
        if (static_cast<int>(p.size()) != c)
            throw InvalidArgument("class posterior samples disagree on dimension");
        double sum = 0.0;
        for (double v : p) {
            if (v < -1e-5) throw InvalidArgument("class posterior has negative mass");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-5)
            throw InvalidArgument("class posterior does not sum to one");
    }

    std::vector<double> mean(c, 0.0);
    for (const auto& p : samples)
        for (int i = 0; i < c; ++i) mean[i] += p[i] / t;

    UncertaintyDecomposition out;
    out.aleatoric = Tensor({c, c});
    out.epistemic = Tensor({c, c});
    for (const auto& p : samples) {
        for (int i = 0; i < c; ++i) {
            for (int j = 0; j < c; ++j) {
                const double diag = i == j ? p[i] : 0.0;
                out.aleatoric.at(i, j) += (diag - p[i] * p[j]) / t;
                out.epistemic.at(i, j) += (p[i] - mean[i]) * (p[j] - mean[j]) / t;
            }
        }
    }
    for (int i = 0; i < c; ++i) out.u_c += out.aleatoric.at(i, i) + out.epistemic.at(i, i);
    return out;
}

double angle_uncertainty(const std::vector<std::array<double, 2>>& samples) {
    if (samples.empty()) throw InvalidArgument("angle_uncertainty needs at least one sample");
    const double t = static_cast<double>(samples.size());
    double mx = 0.0, my = 0.0;
    for (const auto& v : samples) {
        mx += v[0] / t;
        my += v[1] / t;
    }
    double u = 0.0;
    for (const auto& v : samples)
        u += ((v[0] - mx) * (v[0] - mx) + (v[1] - my) * (v[1] - my)) / t;
    return u;
}

CriteriaVector predict_criteria(const EvaluatorModel& model, const Tensor& input, int T,
                                Rng& rng) {
    if (input.ndim() != 2) throw InvalidArgument("predict_criteria expects a [H, W] image");
    const bool stochastic = model.variant() != EvaluatorVariant::DeterministicCNN;
    if (stochastic && T < 2)
        throw InvalidArgument("stochastic evaluators need at least 2 forward passes");

    const int passes = stochastic ? T : 1;
    const int h = input.dim(0), w = input.dim(1);
    Tensor batch({passes, 1, h, w});
    for (int p = 0; p < passes; ++p)
        std::copy(input.data(), input.data() + input.size(),
                  batch.data() + static_cast<int64_t>(p) * input.size());

    ad::NoGradGuard guard;
    auto out = const_cast<EvaluatorModel&>(model).forward(Var::leaf(batch), rng, stochastic);
    Tensor probs = ad::softmax_rows(out.logits).value();
    const Tensor& angles = out.angle.value();
    const int c = model.num_classes();

    CriteriaVector cv;
    cv.T = passes;
    if (stochastic) {
        std::vector<std::vector<double>> prob_samples(passes, std::vector<double>(c));
        std::vector<std::array<double, 2>> angle_samples(passes);
        for (int p = 0; p < passes; ++p) {
            for (int i = 0; i < c; ++i) prob_samples[p][i] = probs.at(p, i);
            angle_samples[p] = {angles.at(p, 0), angles.at(p, 1)};
        }
        auto dec = class_uncertainty(prob_samples);
        cv.u_c = dec.u_c;
        cv.u_a = angle_uncertainty(angle_samples);
        cv.class_probs.assign(c, 0.0);
        for (int p = 0; p < passes; ++p)
            for (int i = 0; i < c; ++i) cv.class_probs[i] += prob_samples[p][i] / passes;
        for (int p = 0; p < passes; ++p) {
            cv.angle_vec[0] += angle_samples[p][0] / passes;
            cv.angle_vec[1] += angle_samples[p][1] / passes;
        }
    } else {
        cv.class_probs.assign(c, 0.0);
        for (int i = 0; i < c; ++i) cv.class_probs[i] = probs.at(0, i);
        double entropy = 0.0;
        for (double p : cv.class_probs)
            if (p > 0.0) entropy -= p * std::log(p);
        cv.u_c = entropy;
        cv.u_a = 0.0;
        cv.angle_vec = {angles.at(0, 0), angles.at(0, 1)};
    }
    cv.total_u = cv.u_c + cv.u_a;
    cv.pred_label = static_cast<int>(
        std::max_element(cv.class_probs.begin(), cv.class_probs.end()) - cv.class_probs.begin());
    cv.pred_azimuth_deg = (cv.angle_vec[0] == 0.0 && cv.angle_vec[1] == 0.0)
                              ? 0.0
                              : decode_azimuth(cv.angle_vec[0], cv.angle_vec[1]);
    return cv;
}

PreparedSplit prepare_split(const DatasetManifest& manifest, const std::string& split,
                            const PreprocessConfig& pre) {
    PreprocessConfig base = pre;
    base.augment = false;
    PreparedSplit out;
    out.input_size = pre.crop_size;
    for (const auto* e : manifest.split_entries(split)) {
        TargetImage img = load_image(manifest, *e);
        out.inputs.push_back(preprocess(img, base));
        out.labels.push_back(e->class_id);
        out.targets.push_back(encode_azimuth(e->azimuth_deg));
    }
    return out;
}

namespace {

struct ValMetrics {
    double acc = 0.0, angle_loss = 0.0;
};

ValMetrics validate_epoch(EvaluatorModel& model, const PreparedSplit& val, int batch_size,
                          Rng& val_rng) {
    ValMetrics m;
    const int n = static_cast<int>(val.inputs.size());
    if (n == 0) return m;
    ad::NoGradGuard guard;
    const bool stochastic = model.variant() == EvaluatorVariant::MCD;
    int correct = 0;
    double angle_total = 0.0;
    for (int start = 0; start < n; start += batch_size) {
        const int bs = std::min(batch_size, n - start);
        const int h = val.input_size;
        Tensor x({bs, 1, h, h});
        for (int i = 0; i < bs; ++i) {
            const Tensor& src = val.inputs[static_cast<size_t>(start + i)];
            std::copy(src.data(), src.data() + src.size(),
                      x.data() + static_cast<int64_t>(i) * src.size());
        }
        auto out = model.forward(Var::leaf(x), val_rng, stochastic);
        const Tensor& logits = out.logits.value();
        const Tensor& angle = out.angle.value();
        for (int i = 0; i < bs; ++i) {
            int best = 0;
            for (int c = 1; c < model.num_classes(); ++c)
                if (logits.at(i, c) > logits.at(i, best)) best = c;
            if (best == val.labels[static_cast<size_t>(start + i)]) ++correct;
            const auto& tv = val.targets[static_cast<size_t>(start + i)];
            const double dx = angle.at(i, 0) - tv[0];
            const double dy = angle.at(i, 1) - tv[1];
            angle_total += dx * dx + dy * dy;
        }
    }
    m.acc = static_cast<double>(correct) / n;
    m.angle_loss = angle_total / n;
    return m;
}

}  // namespace

TrainedEvaluator train_evaluator(const DatasetManifest& manifest, const PreprocessConfig& pre,
                                 const EvaluatorModelConfig& model_cfg,
                                 const EvaluatorTrainConfig& cfg,
                                 const std::optional<std::filesystem::path>& log_csv) {
    if (manifest.num_classes() < 2)
        throw InvalidArgument("training needs at least two classes");
    if (cfg.epochs <= 0) throw InvalidArgument("epochs must be positive");
    if (cfg.batch <= 0) throw InvalidArgument("batch size must be positive");
    if (cfg.lr <= 0.0) throw InvalidArgument("learning rate must be positive");

    PreparedSplit train = prepare_split(manifest, "train", pre);
    PreparedSplit val = prepare_split(manifest, "val", pre);
    if (train.inputs.empty()) throw InvalidArgument("train split is empty");

    EvaluatorModelConfig mc = model_cfg;
    mc.class_names = manifest.class_names;
    mc.input_size = pre.crop_size;

    TrainedEvaluator trained;
    trained.model = EvaluatorModel::create(mc, Rng::derive(cfg.seed, 1));
    trained.train_cfg = cfg;
    trained.pre_cfg = pre;
    EvaluatorModel& model = trained.model;

    nn::Adam opt(model.params(), cfg.lr);
    Rng data_rng(Rng::derive(cfg.seed, 2));
    Rng noise_rng(Rng::derive(cfg.seed, 3));

    const int n = static_cast<int>(train.inputs.size());
    const int minibatches = (n + cfg.batch - 1) / cfg.batch;
    const int h = train.input_size;

    std::ofstream csv;
    if (log_csv) {
        std::filesystem::create_directories(log_csv->parent_path());
        csv.open(*log_csv);
        if (!csv) throw IoError("cannot write " + log_csv->string());
        csv << "epoch,loss,nll,kl,val_acc,val_angle_loss\n" << std::setprecision(17);
    }

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[data_rng.below(static_cast<uint64_t>(i) + 1)]);

        double loss_sum = 0.0, nll_sum = 0.0, kl_sum = 0.0;
        for (int start = 0; start < n; start += cfg.batch) {
            const int bs = std::min(cfg.batch, n - start);
            Tensor x({bs, 1, h, h});
            std::vector<int> labels(static_cast<size_t>(bs));
            Tensor targets({bs, 2});
            for (int i = 0; i < bs; ++i) {
                const int idx = order[static_cast<size_t>(start + i)];
                const Tensor& src = train.inputs[static_cast<size_t>(idx)];
                const double stretch =
                    pre.augment ? data_rng.uniform(pre.stretch_range.first,
                                                   pre.stretch_range.second)
                                : 1.0;
                double* dst = x.data() + static_cast<int64_t>(i) * src.size();
                for (int64_t j = 0; j < src.size(); ++j) dst[j] = src[j] * stretch;
                labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(idx)];
                targets.at(i, 0) = train.targets[static_cast<size_t>(idx)][0];
                targets.at(i, 1) = train.targets[static_cast<size_t>(idx)][1];
            }

            Var loss, nll, kl;
            if (model.variant() == EvaluatorVariant::BBB) {
                auto parts = elbo_loss(model, Var::leaf(x), labels, targets, cfg, minibatches,
                                       noise_rng);
                loss = parts.total;
                nll = parts.nll;
                kl = parts.kl;
            } else {
                auto out = model.forward(Var::leaf(x), noise_rng, true);
                loss = joint_likelihood_loss(out.logits, out.angle, labels, targets,
                                             cfg.lambda_a);
                nll = loss;
            }
            opt.zero_grad();
            ad::backward(loss);
            opt.step();

            const double w = static_cast<double>(bs) / n;
            loss_sum += loss.item() * w;
            nll_sum += nll.item() * w;
            if (kl.defined()) kl_sum += kl.item() * w;
        }

        Rng val_rng(Rng::derive(cfg.seed, 0x1000ull + static_cast<uint64_t>(epoch)));
        ValMetrics vm = validate_epoch(model, val, cfg.batch, val_rng);

        EpochStats stats{epoch, loss_sum, nll_sum, kl_sum, vm.acc, vm.angle_loss};
        trained.log.push_back(stats);
        if (csv.is_open()) {
            csv << stats.epoch << ',' << stats.loss << ',' << stats.nll << ',' << stats.kl << ','
                << stats.val_acc << ',' << stats.val_angle_loss << '\n';
            csv.flush();
        }

        if (cfg.stop_at_val_acc > 0.0 && vm.acc >= cfg.stop_at_val_acc &&
            (cfg.stop_at_val_angle <= 0.0 || vm.angle_loss <= cfg.stop_at_val_angle))
            break;
    }
    return trained;
}

void save_evaluator(TrainedEvaluator& trained, const std::filesystem::path& prefix) {
    auto dir = prefix.parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);

    nn::ParamList params = trained.model.params();
    std::vector<double> flat = nn::flatten_params(params);
    write_doubles(prefix.string() + ".bin", flat);

    const auto& mc = trained.model.config();
    const auto& tc = trained.train_cfg;
    const auto& pc = trained.pre_cfg;
    json sidecar = {
        {"kind", "evaluator"},
        {"variant", variant_to_string(mc.variant)},
        {"class_names", mc.class_names},
        {"input_size", mc.input_size},
        {"prior_sigma", mc.prior_sigma},
        {"dropout_rate", mc.dropout_rate},
        {"param_count", static_cast<int64_t>(flat.size())},
        {"param_hash", hash_to_hex(param_hash(params))},
        {"train",
         {{"epochs", tc.epochs},
          {"batch", tc.batch},
          {"lr", tc.lr},
          {"n_draws", tc.n_draws},
          {"lambda_a", tc.lambda_a},
          {"T", tc.T},
          {"seed", tc.seed},
          {"stop_at_val_acc", tc.stop_at_val_acc},
          {"stop_at_val_angle", tc.stop_at_val_angle}}},
        {"preprocess",
         {{"crop_size", pc.crop_size},
          {"log_transform", pc.log_transform},
          {"stretch_lo", pc.stretch_range.first},
          {"stretch_hi", pc.stretch_range.second},
          {"augment", pc.augment}}},
    };
    if (!trained.log.empty()) {
        const auto& last = trained.log.back();
        sidecar["final"] = {{"epoch", last.epoch},         {"loss", last.loss},
                            {"nll", last.nll},             {"kl", last.kl},
                            {"val_acc", last.val_acc},     {"val_angle_loss", last.val_angle_loss}};
    }
    std::ofstream f(prefix.string() + ".json");
    if (!f) throw IoError("cannot write " + prefix.string() + ".json");
    f << sidecar.dump(2) << '\n';
}

EvaluatorModel load_evaluator(const std::filesystem::path& prefix) {
    std::ifstream f(prefix.string() + ".json");
    if (!f) throw IoError("evaluator checkpoint not found: " + prefix.string() + ".json");
    json sidecar;
    try {
        sidecar = json::parse(f);
    } catch (const json::exception& e) {
        throw IoError("malformed evaluator sidecar: " + std::string(e.what()));
    }
    if (sidecar.value("kind", "") != "evaluator")
        throw IoError("not an evaluator checkpoint: " + prefix.string() + ".json");

    EvaluatorModelConfig mc;
    mc.variant = variant_from_string(sidecar.at("variant").get<std::string>());
    mc.class_names = sidecar.at("class_names").get<std::vector<std::string>>();
    mc.input_size = sidecar.at("input_size").get<int>();
    mc.prior_sigma = sidecar.at("prior_sigma").get<double>();
    mc.dropout_rate = sidecar.at("dropout_rate").get<double>();

    EvaluatorModel model = EvaluatorModel::create(mc, 0);
    nn::ParamList params = model.params();
    const auto count = sidecar.at("param_count").get<int64_t>();
    if (count != nn::param_count(params))
        throw IoError("checkpoint parameter count does not match architecture");
    std::vector<double> flat = read_doubles(prefix.string() + ".bin", count);
    nn::load_params(params, flat);
    if (hash_to_hex(param_hash(params)) != sidecar.at("param_hash").get<std::string>())
        throw IoError("checkpoint hash mismatch: " + prefix.string() + ".bin");
    return model;
}

}  // namespace xfake
