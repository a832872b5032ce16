#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "xfake/azimuth.hpp"
#include "xfake/dataset_builder.hpp"
#include "xfake/evaluator.hpp"
#include "xfake/synth.hpp"

using namespace xfake;
using ad::Var;

namespace {

double inv_softplus(double y) { return std::log(std::expm1(y)); }

// Single-weight variational conv for hand-computed cases.
nn::BayesConv2d unit_bayes(double mu, double alpha) {
    Rng rng(0);
    nn::BayesConv2d layer(1, 1, 1, 1, 0, rng);
    layer.mu.value()[0] = mu;
    layer.raw_alpha.value().fill(inv_softplus(alpha));
    return layer;
}

Tensor single_pixel(double v) {
    Tensor t({1, 1, 1, 1});
    t[0] = v;
    return t;
}

std::vector<std::vector<double>> random_simplex_samples(Rng& rng, int t, int c) {
    std::vector<std::vector<double>> out(t, std::vector<double>(c));
    for (auto& p : out) {
        double sum = 0.0;
        for (double& v : p) {
            v = -std::log(rng.uniform(1e-12, 1.0));
            sum += v;
        }
        for (double& v : p) v /= sum;
    }
    return out;
}

std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("xfake_eval_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Small two-class dataset rendered to disk for training tests.
DatasetManifest tiny_dataset(const std::filesystem::path& dir, uint64_t seed) {
    SynthGenerator gen(make_default_spec(2, 24, 8, 0.05, seed));
    DatasetPlan plan;
    plan.train_per_class = 16;
    plan.val_per_class = 8;
    plan.test_per_class = 2;
    plan.seed = seed;
    return build_dataset(gen, plan, dir);
}

PreprocessConfig tiny_pre() {
    PreprocessConfig pre;
    pre.crop_size = 16;
    return pre;
}

}  // namespace

TEST_CASE("sampled pre-activation decomposes into mean plus scaled unit noise") {
    auto layer = unit_bayes(3.0, 0.25);
    Var x = Var::leaf(single_pixel(2.0));

    auto [mean, stddev] = layer.moments(x);
    CHECK(mean.value()[0] == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(stddev.value()[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(mean.value()[0] + 1.0 * stddev.value()[0] == doctest::Approx(9.0).epsilon(1e-12));

    Rng rng(7);
    Var out = bbb_conv_forward(x, layer, rng);
    Rng probe(7);
    const double eps = probe.normal();
    CHECK(out.value()[0] == doctest::Approx(6.0 + eps * 3.0).epsilon(1e-12));
}

TEST_CASE("local reparameterization matches explicit weight sampling in moments") {
    Rng init(11);
    nn::BayesConv2d layer(1, 1, 3, 1, 0, init);
    Tensor x({1, 1, 3, 3});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = init.uniform(-1.0, 1.0);
    Var xv = Var::leaf(x);

    const int n = 20000;
    ad::NoGradGuard guard;
    Rng lr_rng(101);
    double lr_sum = 0.0, lr_sq = 0.0;
    for (int t = 0; t < n; ++t) {
        const double v = bbb_conv_forward(xv, layer, lr_rng).value()[0];
        lr_sum += v;
        lr_sq += v * v;
    }
    const double lr_mean = lr_sum / n;
    const double lr_var = lr_sq / n - lr_mean * lr_mean;

    Rng ws_rng(202);
    const Tensor& mu = layer.mu.value();
    const double alpha = std::log1p(std::exp(layer.raw_alpha.value()[0]));
    double ws_sum = 0.0, ws_sq = 0.0;
    for (int t = 0; t < n; ++t) {
        double v = 0.0;
        for (int64_t i = 0; i < mu.size(); ++i) {
            const double w = mu[i] + std::sqrt(alpha) * std::abs(mu[i]) * ws_rng.normal();
            v += x[i] * w;
        }
        ws_sum += v;
        ws_sq += v * v;
    }
    const double ws_mean = ws_sum / n;
    const double ws_var = ws_sq / n - ws_mean * ws_mean;

    const double sd = std::sqrt(lr_var);
    const double se_mean = sd * std::sqrt(2.0 / n);  // difference of two sample means
    const double se_var = lr_var * std::sqrt(2.0 / n) * std::sqrt(2.0);
    CHECK(std::abs(lr_mean - ws_mean) < 3.0 * se_mean);
    CHECK(std::abs(lr_var - ws_var) < 3.0 * se_var);

    double analytic_mean = 0.0, analytic_var = 0.0;
    for (int64_t i = 0; i < mu.size(); ++i) {
        analytic_mean += x[i] * mu[i];
        analytic_var += x[i] * x[i] * alpha * mu[i] * mu[i];
    }
    CHECK(std::abs(lr_mean - analytic_mean) < 3.0 * sd / std::sqrt(n));
    CHECK(std::abs(lr_var - analytic_var) < 3.0 * analytic_var * std::sqrt(2.0 / n));
}

TEST_CASE("layer KL against hand-computed values") {
    SUBCASE("unit weight, unit alpha, unit prior") {
        auto layer = unit_bayes(1.0, 1.0);
        CHECK(layer_kl(layer, 1.0).item() == doctest::Approx(0.5).epsilon(1e-9));
    }
    SUBCASE("zero mean hits the variance floor") {
        auto layer = unit_bayes(0.0, 1.0);
        const double expected = 0.5 * (1e-8 - 1.0 - std::log(1e-8));
        CHECK(layer_kl(layer, 1.0).item() == doctest::Approx(expected).epsilon(1e-9));
        CHECK(layer_kl(layer, 1.0).item() == doctest::Approx(8.710340377).epsilon(1e-6));
    }
    SUBCASE("floored variance equal to prior variance gives zero") {
        auto layer = unit_bayes(0.0, 1.0);
        CHECK(std::abs(layer_kl(layer, 1e-4).item()) < 1e-9);
    }
    SUBCASE("sums over weights") {
        Rng rng(0);
        nn::BayesConv2d layer(2, 1, 1, 1, 0, rng);
        layer.mu.value().fill(1.0);
        layer.raw_alpha.value().fill(inv_softplus(1.0));
        CHECK(layer_kl(layer, 1.0).item() == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("rejects non-positive prior") {
        auto layer = unit_bayes(1.0, 1.0);
        CHECK_THROWS_AS(layer_kl(layer, 0.0), InvalidArgument);
    }
}

TEST_CASE("joint likelihood loss against hand-computed values") {
    auto logits_for = [](std::vector<std::vector<double>> rows) {
        Tensor t({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t j = 0; j < rows[i].size(); ++j)
                t.at(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
        return Var::leaf(t);
    };
    auto angles_for = [](std::vector<std::array<double, 2>> rows) {
        Tensor t({static_cast<int>(rows.size()), 2});
        for (size_t i = 0; i < rows.size(); ++i) {
            t.at(static_cast<int>(i), 0) = rows[i][0];
            t.at(static_cast<int>(i), 1) = rows[i][1];
        }
        return t;
    };

    SUBCASE("perfect prediction scores zero") {
        Var logits = logits_for({{60.0, 0.0, 0.0}});
        Tensor target = angles_for({{1.0, 0.0}});
        Var loss = joint_likelihood_loss(logits, Var::leaf(target), {0}, target, 20.0);
        CHECK(std::abs(loss.item()) < 1e-9);
    }
    SUBCASE("uniform posterior over ten classes scores ln 10") {
        Var logits = logits_for({std::vector<double>(10, 0.0)});
        Tensor target = angles_for({{0.0, 1.0}});
        Var loss = joint_likelihood_loss(logits, Var::leaf(target), {3}, target, 20.0);
        CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    }
    SUBCASE("angle error of 0.1 in one component at weight 20 scores 0.2") {
        Var logits = logits_for({{60.0, 0.0}});
        Tensor target = angles_for({{1.0, 0.0}});
        Var pred = Var::leaf(angles_for({{1.1, 0.0}}));
        Var loss = joint_likelihood_loss(logits, pred, {0}, target, 20.0);
        CHECK(loss.item() == doctest::Approx(0.2).epsilon(1e-9));
    }
    SUBCASE("batch averages per-sample terms") {
        Var logits = logits_for({{60.0, 0.0}, {0.0, 0.0}});
        Tensor target = angles_for({{1.0, 0.0}, {0.0, 1.0}});
        Var loss = joint_likelihood_loss(logits, Var::leaf(target), {0, 1}, target, 20.0);
        CHECK(loss.item() == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-9));
    }
    SUBCASE("rejects mismatched label count and out-of-range labels") {
        Var logits = logits_for({{0.0, 0.0}});
        Tensor target = angles_for({{1.0, 0.0}});
        CHECK_THROWS_AS(
            joint_likelihood_loss(logits, Var::leaf(target), {0, 1}, target, 20.0),
            InvalidArgument);
        CHECK_THROWS_AS(joint_likelihood_loss(logits, Var::leaf(target), {2}, target, 20.0),
                        InvalidArgument);
    }
}

namespace {

EvaluatorModelConfig small_cfg(EvaluatorVariant variant) {
    EvaluatorModelConfig cfg;
    cfg.variant = variant;
    cfg.input_size = 16;
    cfg.class_names = {"a", "b", "c"};
    return cfg;
}

struct ElboFixture {
    EvaluatorModel model;
    Tensor x;
    std::vector<int> labels;
    Tensor targets;
    EvaluatorTrainConfig cfg;

    explicit ElboFixture(EvaluatorVariant variant = EvaluatorVariant::BBB) {
        model = EvaluatorModel::create(small_cfg(variant), 5);
        Rng rng(17);
        x = Tensor({2, 1, 16, 16});
        for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.1, 1.0);
        labels = {0, 2};
        targets = Tensor({2, 2});
        auto a0 = encode_azimuth(30.0), a1 = encode_azimuth(200.0);
        targets.at(0, 0) = a0[0];
        targets.at(0, 1) = a0[1];
        targets.at(1, 0) = a1[0];
        targets.at(1, 1) = a1[1];
        cfg.n_draws = 1;
    }
};

}  // namespace

TEST_CASE("elbo structure") {
    ElboFixture fx;

    SUBCASE("total equals nll plus kl") {
        Rng rng(3);
        auto parts = elbo_loss(fx.model, Var::leaf(fx.x), fx.labels, fx.targets, fx.cfg, 4, rng);
        CHECK(parts.total.item() ==
              doctest::Approx(parts.nll.item() + parts.kl.item()).epsilon(1e-12));
        CHECK(std::isfinite(parts.total.item()));
    }

    SUBCASE("kl term is the layer sum scaled by minibatch count") {
        Rng rng(3);
        auto parts = elbo_loss(fx.model, Var::leaf(fx.x), fx.labels, fx.targets, fx.cfg, 8, rng);
        double manual = 0.0;
        for (const auto& layer : fx.model.bayes_layers())
            manual += layer_kl(layer, fx.model.config().prior_sigma).item();
        CHECK(parts.kl.item() == doctest::Approx(manual / 8.0).epsilon(1e-12));
    }

    SUBCASE("kl term ignores batch content") {
        Rng r1(3), r2(4);
        auto a = elbo_loss(fx.model, Var::leaf(fx.x), fx.labels, fx.targets, fx.cfg, 4, r1);
        Tensor other = fx.x;
        for (int64_t i = 0; i < other.size(); ++i) other[i] *= 0.5;
        auto b = elbo_loss(fx.model, Var::leaf(other), fx.labels, fx.targets, fx.cfg, 4, r2);
        CHECK(a.kl.item() == doctest::Approx(b.kl.item()).epsilon(1e-15));
    }

    SUBCASE("rejects non-variational evaluators") {
        ElboFixture mcd(EvaluatorVariant::MCD);
        Rng rng(3);
        CHECK_THROWS_AS(
            elbo_loss(mcd.model, Var::leaf(mcd.x), mcd.labels, mcd.targets, mcd.cfg, 4, rng),
            InvalidState);
        ElboFixture det(EvaluatorVariant::DeterministicCNN);
        CHECK_THROWS_AS(
            elbo_loss(det.model, Var::leaf(det.x), det.labels, det.targets, det.cfg, 4, rng),
            InvalidState);
    }

    SUBCASE("shrinking alpha recovers the deterministic loss") {
        EvaluatorModel det = EvaluatorModel::create(small_cfg(EvaluatorVariant::DeterministicCNN), 5);
        ElboFixture bbb;
        for (auto& layer : bbb.model.bayes_layers()) layer.raw_alpha.value().fill(-40.0);

        Rng rng(3);
        bbb.cfg.n_draws = 2;
        auto parts =
            elbo_loss(bbb.model, Var::leaf(bbb.x), bbb.labels, bbb.targets, bbb.cfg, 4, rng);
        Rng det_rng(3);
        auto out = det.forward(Var::leaf(bbb.x), det_rng, false);
        Var det_loss = joint_likelihood_loss(out.logits, out.angle, bbb.labels, bbb.targets,
                                             bbb.cfg.lambda_a);
        CHECK(parts.nll.item() == doctest::Approx(det_loss.item()).epsilon(1e-4));
    }
}

TEST_CASE("elbo gradients agree with central differences") {
    ElboFixture fx;
    EvaluatorTrainConfig cfg = fx.cfg;
    auto loss_fn = [&]() {
        Rng rng(42);
        return elbo_loss(fx.model, Var::leaf(fx.x), fx.labels, fx.targets, cfg, 4, rng).total;
    };

    auto& layers = fx.model.bayes_layers();
    struct Coord {
        size_t layer;
        bool on_mu;
        int64_t idx;
    };
    std::vector<Coord> coords;
    Rng pick(99);
    for (int k = 0; k < 20; ++k) {
        const size_t li = static_cast<size_t>(pick.below(layers.size()));
        const bool on_mu = k % 2 == 0;
        Tensor& value = on_mu ? layers[li].mu.value() : layers[li].raw_alpha.value();
        const int64_t idx = static_cast<int64_t>(pick.below(static_cast<uint64_t>(value.size())));
        // keep mu coordinates away from the KL variance-floor kink
        if (on_mu && std::abs(value[idx]) < 1e-2) value[idx] = value[idx] < 0 ? -0.05 : 0.05;
        coords.push_back({li, on_mu, idx});
    }

    Var loss = loss_fn();
    ad::backward(loss);

    for (size_t k = 0; k < coords.size(); ++k) {
        const auto& c = coords[k];
        Tensor& value = c.on_mu ? layers[c.layer].mu.value() : layers[c.layer].raw_alpha.value();
        const double analytic =
            (c.on_mu ? layers[c.layer].mu.grad() : layers[c.layer].raw_alpha.grad())[c.idx];

        const double h = 1e-5;
        const double orig = value[c.idx];
        ad::NoGradGuard guard;
        value[c.idx] = orig + h;
        const double up = loss_fn().item();
        value[c.idx] = orig - h;
        const double down = loss_fn().item();
        value[c.idx] = orig;
        const double fd = (up - down) / (2.0 * h);
        const double rel =
            std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-2});
        CAPTURE(k);
        CAPTURE(analytic);
        CAPTURE(fd);
        CHECK(rel < 1e-3);
    }
}

TEST_CASE("class uncertainty decomposition") {
    SUBCASE("identical one-hot samples carry no uncertainty") {
        auto dec = class_uncertainty({{1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}});
        CHECK(dec.u_c == doctest::Approx(0.0).epsilon(1e-15));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                CHECK(dec.aleatoric.at(i, j) == doctest::Approx(0.0).epsilon(1e-15));
                CHECK(dec.epistemic.at(i, j) == doctest::Approx(0.0).epsilon(1e-15));
            }
    }
    SUBCASE("disagreeing one-hot samples are purely epistemic") {
        auto dec = class_uncertainty({{1.0, 0.0}, {0.0, 1.0}});
        CHECK(dec.aleatoric.at(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(dec.epistemic.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(dec.epistemic.at(0, 1) == doctest::Approx(-0.25).epsilon(1e-12));
        CHECK(dec.u_c == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("agreeing uniform samples are purely aleatoric") {
        auto dec = class_uncertainty({{0.5, 0.5}, {0.5, 0.5}});
        CHECK(dec.epistemic.at(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(dec.aleatoric.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(dec.aleatoric.at(0, 1) == doctest::Approx(-0.25).epsilon(1e-12));
        CHECK(dec.u_c == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("matches a brute-force oracle on random draws") {
        Rng rng(31);
        for (int trial = 0; trial < 100; ++trial) {
            const int t = 1 + static_cast<int>(rng.below(8));
            const int c = 2 + static_cast<int>(rng.below(4));
            auto samples = random_simplex_samples(rng, t, c);
            auto dec = class_uncertainty(samples);

            // Independent formulation: E[diag(p)] - E[p p^T] and E[p p^T] - mean mean^T.
            std::vector<double> mean(c, 0.0);
            for (const auto& p : samples)
                for (int i = 0; i < c; ++i) mean[i] += p[i] / t;
            for (int i = 0; i < c; ++i) {
                for (int j = 0; j < c; ++j) {
                    double e_diag = 0.0, e_outer = 0.0;
                    for (const auto& p : samples) {
                        if (i == j) e_diag += p[i] / t;
                        e_outer += p[i] * p[j] / t;
                    }
                    const double al = (i == j ? e_diag : 0.0) - e_outer;
                    const double ep = e_outer - mean[i] * mean[j];
                    CHECK(dec.aleatoric.at(i, j) == doctest::Approx(al).epsilon(1e-10));
                    CHECK(dec.epistemic.at(i, j) == doctest::Approx(ep).epsilon(1e-10));
                }
            }
            double trace = 0.0;
            for (int i = 0; i < c; ++i) trace += dec.aleatoric.at(i, i) + dec.epistemic.at(i, i);
            CHECK(dec.u_c == doctest::Approx(trace).epsilon(1e-12));
        }
    }
    SUBCASE("matrices are symmetric and positive semi-definite") {
        Rng rng(47);
        for (int trial = 0; trial < 20; ++trial) {
            const int t = 2 + static_cast<int>(rng.below(6));
            const int c = 2 + static_cast<int>(rng.below(4));
            auto dec = class_uncertainty(random_simplex_samples(rng, t, c));
            Eigen::MatrixXd al(c, c), ep(c, c);
            for (int i = 0; i < c; ++i)
                for (int j = 0; j < c; ++j) {
                    al(i, j) = dec.aleatoric.at(i, j);
                    ep(i, j) = dec.epistemic.at(i, j);
                    CHECK(dec.aleatoric.at(i, j) ==
                          doctest::Approx(dec.aleatoric.at(j, i)).epsilon(1e-14));
                    CHECK(dec.epistemic.at(i, j) ==
                          doctest::Approx(dec.epistemic.at(j, i)).epsilon(1e-14));
                }
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sal(al), sep(ep);
            CHECK(sal.eigenvalues().minCoeff() > -1e-10);
            CHECK(sep.eigenvalues().minCoeff() > -1e-10);
        }
    }
    SUBCASE("scalarized uncertainty is invariant to class permutation") {
        Rng rng(53);
        auto samples = random_simplex_samples(rng, 5, 4);
        auto permuted = samples;
        const int perm[4] = {2, 0, 3, 1};
        for (size_t s = 0; s < samples.size(); ++s)
            for (int i = 0; i < 4; ++i) permuted[s][static_cast<size_t>(perm[i])] = samples[s][static_cast<size_t>(i)];
        CHECK(class_uncertainty(samples).u_c ==
              doctest::Approx(class_uncertainty(permuted).u_c).epsilon(1e-12));
    }
    SUBCASE("rejects malformed posteriors") {
        CHECK_THROWS_AS(class_uncertainty({}), InvalidArgument);
        CHECK_THROWS_AS(class_uncertainty({{0.6, 0.3}}), InvalidArgument);
        CHECK_THROWS_AS(class_uncertainty({{1.1, -0.1}}), InvalidArgument);
        CHECK_THROWS_AS(class_uncertainty({{0.5, 0.5}, {0.5, 0.5, 0.0}}), InvalidArgument);
    }
}

TEST_CASE("angle uncertainty") {
    CHECK(angle_uncertainty({{0.3, 0.7}, {0.3, 0.7}}) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(angle_uncertainty({{1.0, 0.0}, {0.0, 1.0}}) == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(61);
    std::vector<std::array<double, 2>> vs(7);
    for (auto& v : vs) v = {rng.normal(), rng.normal()};
    const double base = angle_uncertainty(vs);
    auto scaled = vs;
    for (auto& v : scaled) {
        v[0] *= 2.0;
        v[1] *= 2.0;
    }
    CHECK(angle_uncertainty(scaled) == doctest::Approx(4.0 * base).epsilon(1e-12));

    double mx = 0.0, my = 0.0;
    for (const auto& v : vs) {
        mx += v[0] / vs.size();
        my += v[1] / vs.size();
    }
    double oracle = 0.0;
    for (const auto& v : vs)
        oracle += ((v[0] - mx) * (v[0] - mx) + (v[1] - my) * (v[1] - my)) / vs.size();
    CHECK(base == doctest::Approx(oracle).epsilon(1e-12));

    CHECK_THROWS_AS(angle_uncertainty({}), InvalidArgument);
}

TEST_CASE("predict_criteria contracts") {
    Tensor img({16, 16});
    Rng fill(23);
    for (int64_t i = 0; i < img.size(); ++i) img[i] = fill.uniform(0.0, 1.0);

    SUBCASE("stochastic draws assemble a consistent criteria vector") {
        for (auto variant : {EvaluatorVariant::BBB, EvaluatorVariant::MCD}) {
            EvaluatorModel model = EvaluatorModel::create(small_cfg(variant), 5);
            Rng rng(9);
            CriteriaVector cv = predict_criteria(model, img, 8, rng);
            CHECK(cv.T == 8);
            double sum = 0.0;
            for (double p : cv.class_probs) sum += p;
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            CHECK(cv.total_u == cv.u_c + cv.u_a);
            CHECK(cv.u_c >= 0.0);
            CHECK(cv.u_a >= 0.0);
            const int argmax = static_cast<int>(std::max_element(cv.class_probs.begin(),
                                                                 cv.class_probs.end()) -
                                                cv.class_probs.begin());
            CHECK(cv.pred_label == argmax);
            CHECK(cv.pred_azimuth_deg ==
                  doctest::Approx(decode_azimuth(cv.angle_vec[0], cv.angle_vec[1]))
                      .epsilon(1e-12));
        }
    }

    SUBCASE("stochastic variants need at least two passes") {
        EvaluatorModel bbb = EvaluatorModel::create(small_cfg(EvaluatorVariant::BBB), 5);
        Rng rng(9);
        CHECK_THROWS_AS(predict_criteria(bbb, img, 1, rng), InvalidArgument);
        EvaluatorModel mcd = EvaluatorModel::create(small_cfg(EvaluatorVariant::MCD), 5);
        CHECK_THROWS_AS(predict_criteria(mcd, img, 0, rng), InvalidArgument);
    }

    SUBCASE("deterministic variant reports entropy and zero angle variance") {
        EvaluatorModel det =
            EvaluatorModel::create(small_cfg(EvaluatorVariant::DeterministicCNN), 5);
        Rng rng(9);
        CriteriaVector cv = predict_criteria(det, img, 25, rng);
        CHECK(cv.T == 1);
        CHECK(cv.u_a == 0.0);
        double entropy = 0.0;
        for (double p : cv.class_probs)
            if (p > 0.0) entropy -= p * std::log(p);
        CHECK(cv.u_c == doctest::Approx(entropy).epsilon(1e-12));
        CHECK(cv.total_u == cv.u_c);
    }

    SUBCASE("same seed reproduces the prediction bit for bit") {
        EvaluatorModel model = EvaluatorModel::create(small_cfg(EvaluatorVariant::BBB), 5);
        Rng r1(77), r2(77);
        CriteriaVector a = predict_criteria(model, img, 6, r1);
        CriteriaVector b = predict_criteria(model, img, 6, r2);
        CHECK(a.u_c == b.u_c);
        CHECK(a.u_a == b.u_a);
        CHECK(a.class_probs == b.class_probs);
        CHECK(a.angle_vec == b.angle_vec);
    }

    SUBCASE("vanishing alpha collapses the posterior spread") {
        EvaluatorModel model = EvaluatorModel::create(small_cfg(EvaluatorVariant::BBB), 5);
        for (auto& layer : model.bayes_layers()) layer.raw_alpha.value().fill(-40.0);
        Rng rng(9);
        CriteriaVector cv = predict_criteria(model, img, 8, rng);
        Rng det_rng(1);
        Tensor batch({1, 1, 16, 16});
        std::copy(img.data(), img.data() + img.size(), batch.data());
        auto out = model.forward(Var::leaf(batch), det_rng, false);
        Tensor probs = ad::softmax_rows(out.logits).value();
        double gini = 1.0;
        for (size_t i = 0; i < cv.class_probs.size(); ++i) {
            CHECK(cv.class_probs[i] ==
                  doctest::Approx(probs[static_cast<int64_t>(i)]).epsilon(1e-8));
            gini -= cv.class_probs[i] * cv.class_probs[i];
        }
        CHECK(cv.u_a < 1e-12);
        // all draws coincide, so only the aleatoric trace 1 - sum p^2 remains
        CHECK(cv.u_c == doctest::Approx(gini).epsilon(1e-8));
    }
}

TEST_CASE("training loop on a tiny dataset") {
    auto dir = temp_dir("train");
    DatasetManifest manifest = tiny_dataset(dir, 3);
    PreprocessConfig pre = tiny_pre();

    SUBCASE("deterministic variant learns and logs") {
        EvaluatorModelConfig mc;
        mc.variant = EvaluatorVariant::DeterministicCNN;
        EvaluatorTrainConfig tc;
        tc.epochs = 8;
        tc.batch = 8;
        tc.seed = 1;
        auto csv_path = dir / "log.csv";
        TrainedEvaluator trained = train_evaluator(manifest, pre, mc, tc, csv_path);
        REQUIRE(trained.log.size() == 8);
        CHECK(trained.log.back().loss < trained.log.front().loss);
        CHECK(trained.log.back().kl == 0.0);

        std::ifstream csv(csv_path);
        REQUIRE(csv.good());
        std::string header;
        std::getline(csv, header);
        CHECK(header == "epoch,loss,nll,kl,val_acc,val_angle_loss");
        int rows = 0;
        std::string line;
        while (std::getline(csv, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 8);
    }

    SUBCASE("variational variant accumulates a positive kl") {
        EvaluatorModelConfig mc;
        mc.variant = EvaluatorVariant::BBB;
        EvaluatorTrainConfig tc;
        tc.epochs = 2;
        tc.batch = 8;
        tc.seed = 1;
        TrainedEvaluator trained = train_evaluator(manifest, pre, mc, tc);
        REQUIRE(trained.log.size() == 2);
        CHECK(trained.log.back().kl > 0.0);
        CHECK(trained.log.back().loss ==
              doctest::Approx(trained.log.back().nll + trained.log.back().kl).epsilon(1e-9));
        CHECK(std::isfinite(trained.log.back().loss));
    }

    SUBCASE("same seed trains to identical parameters") {
        EvaluatorModelConfig mc;
        mc.variant = EvaluatorVariant::MCD;
        EvaluatorTrainConfig tc;
        tc.epochs = 3;
        tc.batch = 8;
        tc.seed = 7;
        TrainedEvaluator a = train_evaluator(manifest, pre, mc, tc);
        TrainedEvaluator b = train_evaluator(manifest, pre, mc, tc);
        CHECK(param_hash(a.model.params()) == param_hash(b.model.params()));
        CHECK(nn::flatten_params(a.model.params()) == nn::flatten_params(b.model.params()));
    }

    SUBCASE("stopping rule caps the epoch budget") {
        EvaluatorModelConfig mc;
        mc.variant = EvaluatorVariant::DeterministicCNN;
        EvaluatorTrainConfig tc;
        tc.epochs = 50;
        tc.batch = 8;
        tc.seed = 1;
        tc.stop_at_val_acc = 0.25;
        TrainedEvaluator trained = train_evaluator(manifest, pre, mc, tc);
        CHECK(trained.log.size() < 50);
        CHECK(trained.log.back().val_acc >= 0.25);
    }

    SUBCASE("rejects degenerate configurations") {
        EvaluatorModelConfig mc;
        EvaluatorTrainConfig tc;
        tc.epochs = 0;
        CHECK_THROWS_AS(train_evaluator(manifest, pre, mc, tc), InvalidArgument);
        tc.epochs = 1;
        tc.batch = 0;
        CHECK_THROWS_AS(train_evaluator(manifest, pre, mc, tc), InvalidArgument);
    }

    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint round trip") {
    auto dir = temp_dir("ckpt");
    DatasetManifest manifest = tiny_dataset(dir, 5);
    EvaluatorModelConfig mc;
    mc.variant = EvaluatorVariant::BBB;
    EvaluatorTrainConfig tc;
    tc.epochs = 1;
    tc.batch = 8;
    tc.seed = 2;
    TrainedEvaluator trained = train_evaluator(manifest, tiny_pre(), mc, tc);
    auto prefix = dir / "model" / "eva";
    save_evaluator(trained, prefix);

    CHECK(std::filesystem::exists(prefix.string() + ".bin"));
    CHECK(std::filesystem::exists(prefix.string() + ".json"));

    EvaluatorModel loaded = load_evaluator(prefix);
    CHECK(nn::flatten_params(loaded.params()) == nn::flatten_params(trained.model.params()));
    CHECK(loaded.variant() == EvaluatorVariant::BBB);
    CHECK(loaded.num_classes() == 2);
    CHECK(loaded.config().input_size == 16);

    Tensor img({16, 16});
    Rng fill(4);
    for (int64_t i = 0; i < img.size(); ++i) img[i] = fill.uniform(0.0, 1.0);
    Rng r1(11), r2(11);
    CriteriaVector a = predict_criteria(trained.model, img, 4, r1);
    CriteriaVector b = predict_criteria(loaded, img, 4, r2);
    CHECK(a.class_probs == b.class_probs);
    CHECK(a.u_c == b.u_c);
    CHECK(a.u_a == b.u_a);

    SUBCASE("missing checkpoint names the problem") {
        try {
            load_evaluator(dir / "nope" / "eva");
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("not found") != std::string::npos);
        }
    }

    SUBCASE("tampered blob fails the hash check") {
        std::fstream f(prefix.string() + ".bin",
                       std::ios::binary | std::ios::in | std::ios::out);
        REQUIRE(f.good());
        f.seekp(16);
        const double poison = 1234.5;
        f.write(reinterpret_cast<const char*>(&poison), sizeof(poison));
        f.close();
        CHECK_THROWS_AS(load_evaluator(prefix), IoError);
    }

    std::filesystem::remove_all(dir);
}
