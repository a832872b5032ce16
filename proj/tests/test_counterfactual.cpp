#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "xfake/azimuth.hpp"
#include "xfake/counterfactual.hpp"
#include "xfake/dataset_builder.hpp"
#include "xfake/nn.hpp"
#include "xfake/synth.hpp"

using namespace xfake;
using ad::Var;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("xfake_cf_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

EvaluatorModelConfig eva16(EvaluatorVariant variant = EvaluatorVariant::BBB) {
    EvaluatorModelConfig cfg;
    cfg.variant = variant;
    cfg.input_size = 16;
    cfg.class_names = {"a", "b", "c"};
    return cfg;
}

struct CFFixture {
    EvaluatorModel eva;
    IntroVAEModel vae;
    Tensor x0;
    std::array<double, 2> prior;

    CFFixture()
        : eva(EvaluatorModel::create(eva16(), 3)),
          vae(IntroVAEModel::create(10, 16, 2, 21)),
          x0({16, 16}),
          prior(encode_azimuth(73.0)) {
        Rng rng(8);
        for (int64_t i = 0; i < x0.size(); ++i) x0[i] = rng.uniform(0.0, 1.0);
    }

    CFConfig small_cfg() const {
        CFConfig cfg;
        cfg.T = 4;
        cfg.steps = 8;
        cfg.seed = 9;
        return cfg;
    }
};

Var leaf_row(const Tensor& t) { return Var::leaf(t); }

}  // namespace

TEST_CASE("weighted total composition") {
    CFLossParts parts{0.5, 0.2, 0.01, 0.1, 0.0};
    CFConfig cfg;
    SUBCASE("defaults") { CHECK(cf_total(parts, cfg) == doctest::Approx(1.1).epsilon(1e-12)); }
    SUBCASE("class guidance off") {
        cfg.use_class_guidance = false;
        CHECK(cf_total(parts, cfg) == doctest::Approx(0.9).epsilon(1e-12));
    }
    SUBCASE("angle guidance off") {
        cfg.use_angle_guidance = false;
        CHECK(cf_total(parts, cfg) == doctest::Approx(0.8).epsilon(1e-12));
    }
    SUBCASE("both off") {
        cfg.use_class_guidance = false;
        cfg.use_angle_guidance = false;
        CHECK(cf_total(parts, cfg) == doctest::Approx(0.6).epsilon(1e-12));
    }
    SUBCASE("weights scale their terms") {
        cfg.lambda_y = 2.0;
        cfg.lambda_v = 0.0;
        cfg.lambda_d = 10.0;
        CHECK(cf_total(parts, cfg) == doctest::Approx(0.5 + 0.4 + 1.0).epsilon(1e-12));
    }
}

TEST_CASE("cf_loss contracts") {
    CFFixture fx;
    CFConfig cfg = fx.small_cfg();

    SUBCASE("parts recompose into the total under every flag combination") {
        CFLossParts base;
        bool first = true;
        for (bool cc : {true, false})
            for (bool aa : {true, false}) {
                CFConfig c = cfg;
                c.use_class_guidance = cc;
                c.use_angle_guidance = aa;
                Rng rng(99);
                auto z = fx.vae.encode(fx.x0);
                Tensor z0({1, fx.vae.latent_dim()});
                std::copy(z.mu.data(), z.mu.data() + z.mu.size(), z0.data());
                CFLossResult r = cf_loss(leaf_row(z0), fx.x0, 1, fx.prior, fx.eva, fx.vae, c, rng);
                CHECK(r.parts.total == doctest::Approx(cf_total(r.parts, c)).epsilon(1e-9));
                CHECK(r.parts.total == doctest::Approx(r.total.item()).epsilon(1e-12));
                // component values must not depend on the flags
                if (first) {
                    base = r.parts;
                    first = false;
                } else {
                    CHECK(r.parts.entropy == base.entropy);
                    CHECK(r.parts.ce == base.ce);
                    CHECK(r.parts.angle_d2 == base.angle_d2);
                    CHECK(r.parts.dist == base.dist);
                }
            }
    }

    SUBCASE("decoding the code of the original zeroes the distance term") {
        Tensor z({1, fx.vae.latent_dim()});
        Rng rng(3);
        for (int64_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
        Tensor zrow(std::vector<int>{fx.vae.latent_dim()});
        std::copy(z.data(), z.data() + z.size(), zrow.data());
        Tensor x_from_z = fx.vae.decode(zrow);
        Rng noise(17);
        CFLossResult r = cf_loss(leaf_row(z), x_from_z, 0, fx.prior, fx.eva, fx.vae, cfg, noise);
        CHECK(r.parts.dist == 0.0);
    }

    SUBCASE("same seed reproduces, different seed varies") {
        Tensor z0({1, fx.vae.latent_dim()});
        Rng zr(5);
        for (int64_t i = 0; i < z0.size(); ++i) z0[i] = 0.5 * zr.normal();
        Rng a(1234), b(1234), c(77);
        const double ta =
            cf_loss(leaf_row(z0), fx.x0, 1, fx.prior, fx.eva, fx.vae, cfg, a).parts.total;
        const double tb =
            cf_loss(leaf_row(z0), fx.x0, 1, fx.prior, fx.eva, fx.vae, cfg, b).parts.total;
        const double tc =
            cf_loss(leaf_row(z0), fx.x0, 1, fx.prior, fx.eva, fx.vae, cfg, c).parts.total;
        CHECK(ta == tb);
        CHECK(ta != tc);
    }

    SUBCASE("deterministic evaluator collapses the entropy to the Gini impurity") {
        EvaluatorModel det = EvaluatorModel::create(eva16(EvaluatorVariant::DeterministicCNN), 3);
        Tensor z0({1, fx.vae.latent_dim()});
        Rng zr(6);
        for (int64_t i = 0; i < z0.size(); ++i) z0[i] = zr.normal();
        Rng noise(11);
        CFLossResult r = cf_loss(leaf_row(z0), fx.x0, 2, fx.prior, det, fx.vae, cfg, noise);

        ad::NoGradGuard guard;
        Var x = fx.vae.decode_var(leaf_row(z0));
        Rng unused(0);
        auto out = det.forward(x, unused, false);
        Tensor probs = ad::softmax_rows(out.logits).value();
        double gini = 1.0;
        for (int64_t i = 0; i < probs.size(); ++i) gini -= probs[i] * probs[i];
        CHECK(r.parts.entropy == doctest::Approx(gini).epsilon(1e-12));
    }

    SUBCASE("input validation") {
        Tensor z0({1, fx.vae.latent_dim()});
        Rng rng(1);
        CHECK_THROWS_AS(
            cf_loss(leaf_row(z0), fx.x0, 1, {1.0, 0.1}, fx.eva, fx.vae, cfg, rng),
            InvalidArgument);
        CHECK_THROWS_AS(cf_loss(leaf_row(z0), fx.x0, 7, fx.prior, fx.eva, fx.vae, cfg, rng),
                        InvalidArgument);
        CFConfig one = cfg;
        one.T = 1;
        CHECK_THROWS_AS(cf_loss(leaf_row(z0), fx.x0, 1, fx.prior, fx.eva, fx.vae, one, rng),
                        InvalidArgument);
        CFConfig neg = cfg;
        neg.lambda_v = -1.0;
        CHECK_THROWS_AS(cf_loss(leaf_row(z0), fx.x0, 1, fx.prior, fx.eva, fx.vae, neg, rng),
                        InvalidArgument);
        Tensor small({8, 8});
        CHECK_THROWS_AS(cf_loss(leaf_row(z0), small, 1, fx.prior, fx.eva, fx.vae, cfg, rng),
                        InvalidArgument);
    }
}

TEST_CASE("cf_loss gradient matches central differences") {
    CFFixture fx;
    CFConfig cfg = fx.small_cfg();
    const int latent = fx.vae.latent_dim();

    Tensor z0({1, latent});
    Rng zr(5);
    for (int64_t i = 0; i < z0.size(); ++i) z0[i] = 0.5 * zr.normal();

    auto loss_at = [&](const Tensor& zt) {
        Rng rng(4242);
        ad::NoGradGuard guard;
        return cf_loss(Var::leaf(zt), fx.x0, 1, fx.prior, fx.eva, fx.vae, cfg, rng).parts.total;
    };

    Var z = Var::leaf(z0, true);
    Rng rng(4242);
    CFLossResult r = cf_loss(z, fx.x0, 1, fx.prior, fx.eva, fx.vae, cfg, rng);
    ad::backward(r.total);
    REQUIRE(z.has_grad());

    const double h = 1e-5;
    for (int i = 0; i < latent; ++i) {
        Tensor zp = z0, zm = z0;
        zp[i] += h;
        zm[i] -= h;
        const double fd = (loss_at(zp) - loss_at(zm)) / (2.0 * h);
        const double analytic = z.grad()[i];
        const double rel =
            std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-2});
        CAPTURE(i);
        CHECK(rel < 1e-3);
    }
}

TEST_CASE("latent descent") {
    SUBCASE("quadratic surrogate converges to the minimizer") {
        Tensor c({1, 4}, {0.3, -0.2, 0.8, -0.5});
        Tensor z0({1, 4});
        for (int64_t i = 0; i < 4; ++i) z0[i] = c[i] + 1.0;
        CFConfig cfg;
        cfg.lr = 0.1;
        cfg.steps = 200;
        auto objective = [&](const Var& z, int) {
            CFLossResult r;
            r.total = ad::sum(ad::square(ad::sub(z, Var::leaf(c))));
            r.parts.total = r.total.item();
            return r;
        };
        CodeOptimum opt = optimize_code(z0, objective, cfg);
        REQUIRE(opt.trace.size() == 200);
        for (int64_t i = 0; i < 4; ++i) CHECK(std::abs(opt.z_best[i] - c[i]) < 1e-3);

        double best = std::numeric_limits<double>::infinity();
        int arg = -1;
        double running = std::numeric_limits<double>::infinity();
        for (size_t s = 0; s < opt.trace.size(); ++s) {
            CHECK(opt.best_total <= opt.trace[s].total);
            const double prev = running;
            running = std::min(running, opt.trace[s].total);
            CHECK(running <= prev);
            if (opt.trace[s].total < best) {
                best = opt.trace[s].total;
                arg = static_cast<int>(s);
            }
        }
        CHECK(opt.best_total == best);
        CHECK(opt.best_step == arg);
    }

    SUBCASE("non-finite loss aborts with the offending step") {
        Tensor z0({1, 2}, {1.0, -1.0});
        CFConfig cfg;
        cfg.steps = 10;
        auto objective = [&](const Var& z, int step) {
            CFLossResult r;
            if (step == 3) {
                r.total = Var::leaf(Tensor::scalar(std::numeric_limits<double>::infinity()));
                r.parts.total = std::numeric_limits<double>::infinity();
            } else {
                r.total = ad::sum(ad::square(z));
                r.parts.total = r.total.item();
            }
            return r;
        };
        try {
            optimize_code(z0, objective, cfg);
            FAIL("expected NonFiniteLoss");
        } catch (const NonFiniteLoss& e) {
            CHECK(e.step() == 3);
            CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
        }
    }

    SUBCASE("rejects a bad schedule") {
        Tensor z0({1, 2}, {1.0, -1.0});
        auto objective = [&](const Var& z, int) {
            CFLossResult r;
            r.total = ad::sum(ad::square(z));
            r.parts.total = r.total.item();
            return r;
        };
        CFConfig zero_steps;
        zero_steps.steps = 0;
        CHECK_THROWS_AS(optimize_code(z0, objective, zero_steps), InvalidArgument);
        CFConfig bad_lr;
        bad_lr.lr = 0.0;
        CHECK_THROWS_AS(optimize_code(z0, objective, bad_lr), InvalidArgument);
        CHECK_THROWS_AS(optimize_code(Tensor(), objective, CFConfig{}), InvalidArgument);
    }
}

TEST_CASE("optimize_latent end to end") {
    CFFixture fx;
    CFConfig cfg = fx.small_cfg();

    SUBCASE("result contracts hold") {
        const uint64_t eh = nn::param_hash(fx.eva.params());
        const uint64_t vh = nn::param_hash(fx.vae.params());
        CounterfactualResult res = optimize_latent(fx.x0, 1, 73.0, fx.eva, fx.vae, cfg);

        CHECK(res.trace.size() == static_cast<size_t>(cfg.steps));
        double best = std::numeric_limits<double>::infinity();
        for (const auto& e : res.trace) {
            CHECK(res.best_total <= e.total);
            best = std::min(best, e.total);
        }
        CHECK(res.best_total == best);
        CHECK(res.z_opt.ndim() == 1);
        CHECK(res.z_opt.dim(0) == fx.vae.latent_dim());
        for (int64_t i = 0; i < res.x_opt.size(); ++i) {
            CHECK(res.x_opt[i] >= 0.0);
            CHECK(res.x_opt[i] <= 1.0);
        }
        CHECK(res.m_before.T == 25);
        CHECK(res.m_after.T == 25);
        CHECK(res.m_before.total_u == doctest::Approx(res.m_before.u_c + res.m_before.u_a));

        SignedMap again = difference_map(res.x_opt, fx.x0);
        for (int64_t i = 0; i < again.values.size(); ++i)
            CHECK(res.diff.values[i] == again.values[i]);

        CHECK(nn::param_hash(fx.eva.params()) == eh);
        CHECK(nn::param_hash(fx.vae.params()) == vh);
    }

    SUBCASE("bit-for-bit reproducible") {
        CounterfactualResult a = optimize_latent(fx.x0, 1, 73.0, fx.eva, fx.vae, cfg);
        CounterfactualResult b = optimize_latent(fx.x0, 1, 73.0, fx.eva, fx.vae, cfg);
        REQUIRE(a.z_opt.size() == b.z_opt.size());
        CHECK(std::memcmp(a.z_opt.data(), b.z_opt.data(),
                          sizeof(double) * static_cast<size_t>(a.z_opt.size())) == 0);
        REQUIRE(a.trace.size() == b.trace.size());
        for (size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].total == b.trace[i].total);
        CHECK(a.m_after.total_u == b.m_after.total_u);
        CHECK(a.m_before.total_u == b.m_before.total_u);
        CHECK(a.best_step == b.best_step);
    }

    SUBCASE("pure distance pull stays near the reconstruction") {
        CFConfig pull = cfg;
        pull.lambda_y = 0.0;
        pull.lambda_v = 0.0;
        pull.use_class_guidance = false;
        pull.use_angle_guidance = false;
        pull.steps = 60;
        CounterfactualResult res = optimize_latent(fx.x0, 1, 73.0, fx.eva, fx.vae, pull);
        Tensor z0(std::vector<int>{fx.vae.latent_dim()});
        auto enc = fx.vae.encode(fx.x0);
        std::copy(enc.mu.data(), enc.mu.data() + enc.mu.size(), z0.data());
        Tensor recon0 = fx.vae.decode(z0);
        double drift = 0.0;
        for (int64_t i = 0; i < recon0.size(); ++i)
            drift += std::abs(res.x_opt[i] - recon0[i]) / static_cast<double>(recon0.size());
        CHECK(drift <= 0.05);
        CHECK(res.best_total <= res.trace.front().total);
    }

    SUBCASE("argument validation") {
        Tensor bad({8, 8});
        CHECK_THROWS_AS(optimize_latent(bad, 1, 73.0, fx.eva, fx.vae, cfg), InvalidArgument);
        CHECK_THROWS_AS(optimize_latent(fx.x0, 99, 73.0, fx.eva, fx.vae, cfg), InvalidArgument);
        EvaluatorModelConfig big = eva16();
        big.input_size = 24;
        EvaluatorModel wrong = EvaluatorModel::create(big, 3);
        CHECK_THROWS_AS(optimize_latent(fx.x0, 1, 73.0, wrong, fx.vae, cfg), InvalidArgument);
    }
}

TEST_CASE("difference map") {
    SUBCASE("identical images give zero everywhere") {
        Tensor a({3, 3});
        for (int64_t i = 0; i < a.size(); ++i) a[i] = 0.1 * static_cast<double>(i);
        SignedMap m = difference_map(a, a);
        for (int64_t i = 0; i < m.values.size(); ++i) CHECK(m.values[i] == 0.0);
    }
    SUBCASE("sign-preserving square") {
        Tensor a({1, 2}, {0.75, 0.0});
        Tensor b({1, 2}, {0.25, 0.5});
        SignedMap m = difference_map(a, b);
        CHECK(m.values[0] == doctest::Approx(0.25).epsilon(1e-15));
        CHECK(m.values[1] == doctest::Approx(-0.25).epsilon(1e-15));
    }
    SUBCASE("antisymmetric under swap") {
        Tensor a({4, 4}), b({4, 4});
        Rng rng(2);
        for (int64_t i = 0; i < a.size(); ++i) {
            a[i] = rng.uniform(0.0, 1.0);
            b[i] = rng.uniform(0.0, 1.0);
        }
        SignedMap ab = difference_map(a, b);
        SignedMap ba = difference_map(b, a);
        for (int64_t i = 0; i < ab.values.size(); ++i) CHECK(ab.values[i] == -ba.values[i]);
    }
    SUBCASE("shape mismatch") {
        Tensor a({2, 2}), b({2, 3});
        CHECK_THROWS_AS(difference_map(a, b), InvalidArgument);
        Tensor c({2, 2, 1});
        CHECK_THROWS_AS(difference_map(c, c), InvalidArgument);
    }
}

TEST_CASE("difference rendering") {
    auto dir = temp_dir("render");

    SUBCASE("endpoints and neutral") {
        SignedMap m;
        m.values = Tensor({1, 3}, {0.5, -0.5, 0.0});
        const auto path = dir / "d.png";
        render_difference(m, path);
        cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
        REQUIRE(!img.empty());
        REQUIRE(img.rows == 1);
        REQUIRE(img.cols == 3);
        // BGR order
        cv::Vec3b pos = img.at<cv::Vec3b>(0, 0);
        CHECK(pos[2] == 255);
        CHECK(pos[1] == 0);
        CHECK(pos[0] == 0);
        cv::Vec3b neg = img.at<cv::Vec3b>(0, 1);
        CHECK(neg[2] == 0);
        CHECK(neg[1] == 0);
        CHECK(neg[0] == 255);
        cv::Vec3b mid = img.at<cv::Vec3b>(0, 2);
        CHECK(mid[2] == 255);
        CHECK(mid[1] == 255);
        CHECK(mid[0] == 255);
    }

    SUBCASE("all-zero map renders a uniform neutral image") {
        SignedMap m;
        m.values = Tensor({2, 2});
        const auto path = dir / "zero.png";
        render_difference(m, path);
        cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
        REQUIRE(!img.empty());
        for (int y = 0; y < img.rows; ++y)
            for (int x = 0; x < img.cols; ++x) {
                cv::Vec3b p = img.at<cv::Vec3b>(y, x);
                CHECK(p[0] == 255);
                CHECK(p[1] == 255);
                CHECK(p[2] == 255);
            }
    }

    SUBCASE("doubling the map leaves the rendering unchanged") {
        SignedMap m;
        m.values = Tensor({3, 5});
        Rng rng(12);
        for (int64_t i = 0; i < m.values.size(); ++i) m.values[i] = rng.normal();
        SignedMap twice;
        twice.values = Tensor({3, 5});
        for (int64_t i = 0; i < m.values.size(); ++i) twice.values[i] = 2.0 * m.values[i];
        render_difference(m, dir / "one.png");
        render_difference(twice, dir / "two.png");
        auto bytes = [](const std::filesystem::path& p) {
            std::ifstream f(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(f), {});
        };
        const std::string one = bytes(dir / "one.png"), two = bytes(dir / "two.png");
        REQUIRE(!one.empty());
        CHECK(one == two);
    }

    SUBCASE("rejects bad input") {
        SignedMap m;
        m.values = Tensor({1, 2}, {0.1, std::numeric_limits<double>::quiet_NaN()});
        CHECK_THROWS_AS(render_difference(m, dir / "nan.png"), InvalidArgument);
        SignedMap ok;
        ok.values = Tensor({1, 1}, {0.5});
        CHECK_THROWS_AS(render_difference(ok, dir / "missing" / "x.png"), IoError);
    }
}

TEST_CASE("bundles and batch explanation") {
    auto dir = temp_dir("bundle");
    CFFixture fx;
    CFConfig cfg = fx.small_cfg();
    cfg.steps = 3;
    cfg.T = 2;

    SUBCASE("write_bundle lays out the files and the record") {
        CounterfactualResult res = optimize_latent(fx.x0, 1, 73.0, fx.eva, fx.vae, cfg);
        const auto bundle = write_bundle(res, "img_007", cfg, dir);
        CHECK(std::filesystem::exists(bundle / "x_opt.png"));
        CHECK(std::filesystem::exists(bundle / "diff.png"));
        CHECK(std::filesystem::exists(bundle / "diff.pfm"));
        CHECK(std::filesystem::exists(bundle / "record.json"));

        Tensor back = read_pfm(bundle / "diff.pfm");
        REQUIRE(back.size() == res.diff.values.size());
        for (int64_t i = 0; i < back.size(); ++i)
            CHECK(static_cast<float>(back[i]) == static_cast<float>(res.diff.values[i]));

        std::ifstream f(bundle / "record.json");
        nlohmann::json rec = nlohmann::json::parse(f);
        CHECK(rec["id"] == "img_007");
        CHECK(rec["m_before"]["passes"] == 25);
        CHECK(rec["m_after"]["passes"] == 25);
        CHECK(rec["config"]["steps"] == 3);
        CHECK(rec["config"]["lambda_v"] == doctest::Approx(30.0));
        CHECK(rec["trace_summary"]["steps"] == 3);
        const double best = rec["trace_summary"]["best_total"].get<double>();
        const double first = rec["trace_summary"]["first_total"].get<double>();
        CHECK(best <= first);
    }

    SUBCASE("explain_entries writes one bundle per entry plus an index") {
        SynthGenerator gen(make_default_spec(2, 24, 8, 0.05, 5));
        DatasetPlan plan;
        plan.train_per_class = 1;
        plan.val_per_class = 1;
        plan.test_per_class = 0;
        plan.seed = 5;
        DatasetManifest manifest = build_dataset(gen, plan, dir / "data");
        PreprocessConfig pre;
        pre.crop_size = 16;

        const auto out = dir / "explained";
        const auto index_path =
            explain_entries(manifest, pre, fx.eva, fx.vae, cfg, {}, out);
        CHECK(index_path == out / "index.json");
        std::ifstream f(index_path);
        nlohmann::json index = nlohmann::json::parse(f);
        CHECK(index["count"].get<size_t>() == manifest.entries.size());
        REQUIRE(index["entries"].size() == manifest.entries.size());
        for (const auto& e : index["entries"]) {
            const auto bundle = out / e["bundle"].get<std::string>();
            CHECK(std::filesystem::exists(bundle / "record.json"));
            CHECK(std::filesystem::exists(bundle / "x_opt.png"));
            CHECK(e["total_u_before"].get<double>() > 0.0);
        }

        const std::string pick = manifest.entries[1].id;
        const auto sub_out = dir / "subset";
        explain_entries(manifest, pre, fx.eva, fx.vae, cfg, {pick}, sub_out);
        std::ifstream sf(sub_out / "index.json");
        nlohmann::json sub = nlohmann::json::parse(sf);
        CHECK(sub["count"].get<int>() == 1);
        CHECK(sub["entries"][0]["id"] == pick);

        CHECK_THROWS_AS(
            explain_entries(manifest, pre, fx.eva, fx.vae, cfg, {"nope"}, dir / "x"),
            InvalidArgument);
    }
}
