#include "xfake/introvae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include <json.hpp>

#include "checkpoint_io.hpp"
#include "xfake/image.hpp"

namespace xfake {

namespace {

using detail::hash_to_hex;
using detail::read_doubles;
using detail::write_doubles;
using nlohmann::json;

constexpr int kStages = 4;

void check_weights(const IntroVAETrainConfig& cfg) {
    if (cfg.margin <= 0.0) throw InvalidArgument("margin must be positive");
    if (cfg.beta < 0.0 || cfg.alpha_R < 0.0 || cfg.alpha_E < 0.0 || cfg.alpha_G < 0.0)
        throw InvalidArgument("loss weights must be non-negative");
}

Var mean_kl(const Var& mu, const Var& log_var) { return ad::mean(kl_to_prior(mu, log_var)); }

// mean over the batch of the per-sample hinge [margin - kl]+
Var mean_hinge(const Var& kl_per_sample, double margin) {
    return ad::mean(ad::relu(ad::add_scalar(ad::neg(kl_per_sample), margin)));
}

}  // namespace

IntroVAEModel IntroVAEModel::create(int latent_dim, int image_size, int base_channels,
                                    uint64_t seed) {
    if (latent_dim < 1) throw InvalidArgument("latent_dim must be positive");
    if (image_size < 16) throw InvalidArgument("image size too small for four stages");
    if (base_channels < 1) throw InvalidArgument("base_channels must be positive");

    IntroVAEModel m;
    m.latent_dim_ = latent_dim;
    m.image_size_ = image_size;
    m.base_channels_ = base_channels;
    m.sizes_.push_back(image_size);
    for (int i = 0; i < kStages; ++i) m.sizes_.push_back((m.sizes_.back() + 1) / 2);

    Rng rng(Rng::derive(seed, 0x564145ull));
    const int b = base_channels;
    const int chans[kStages + 1] = {1, b, 2 * b, 4 * b, 8 * b};
    for (int i = 0; i < kStages; ++i)
        m.enc_convs_.emplace_back(chans[i + 1], chans[i], 3, 2, 1, rng);
    const int flat = 8 * b * m.sizes_[kStages] * m.sizes_[kStages];
    m.enc_mu_ = nn::Linear(latent_dim, flat, rng);
    m.enc_log_var_ = nn::Linear(latent_dim, flat, rng);
    m.gen_fc_ = nn::Linear(flat, latent_dim, rng);
    for (int i = 0; i < kStages; ++i)
        m.gen_convs_.emplace_back(i + 1 < kStages ? chans[kStages - 1 - i] : 1,
                                  chans[kStages - i], 3, 1, 1, rng);
    return m;
}

nn::ParamList IntroVAEModel::encoder_params() {
    nn::ParamList out;
    for (size_t i = 0; i < enc_convs_.size(); ++i)
        enc_convs_[i].collect("enc" + std::to_string(i), out);
    enc_mu_.collect("enc_mu", out);
    enc_log_var_.collect("enc_log_var", out);
    return out;
}

nn::ParamList IntroVAEModel::generator_params() {
    nn::ParamList out;
    gen_fc_.collect("gen_fc", out);
    for (size_t i = 0; i < gen_convs_.size(); ++i)
        gen_convs_[i].collect("gen" + std::to_string(i), out);
    return out;
}

nn::ParamList IntroVAEModel::params() {
    nn::ParamList out = encoder_params();
    nn::ParamList gen = generator_params();
    out.insert(out.end(), gen.begin(), gen.end());
    return out;
}

std::pair<Var, Var> IntroVAEModel::encode_var(const Var& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != image_size_ || s[3] != image_size_)
        throw InvalidArgument("encoder expects [N, 1, " + std::to_string(image_size_) + ", " +
                              std::to_string(image_size_) + "] input");
    Var h = x;
    for (const auto& conv : enc_convs_) h = ad::relu(conv.forward(h));
    const int flat = 8 * base_channels_ * sizes_[kStages] * sizes_[kStages];
    h = ad::reshape(h, {s[0], flat});
    return {enc_mu_.forward(h), enc_log_var_.forward(h)};
}

Var IntroVAEModel::decode_var(const Var& z) const {
    const auto& s = z.shape();
    if (s.size() != 2 || s[1] != latent_dim_)
        throw InvalidArgument("generator expects [N, " + std::to_string(latent_dim_) +
                              "] codes");
    const int bottom = sizes_[kStages];
    Var h = ad::relu(gen_fc_.forward(z));
    h = ad::reshape(h, {s[0], 8 * base_channels_, bottom, bottom});
    for (int i = 0; i < kStages; ++i) {
        h = ad::upsample2(h);
        const int target = sizes_[kStages - 1 - i];
        if (h.shape()[2] != target) h = ad::crop2d(h, target, target);
        h = gen_convs_[static_cast<size_t>(i)].forward(h);
        h = i + 1 < kStages ? ad::relu(h) : ad::sigmoid(h);
    }
    return h;
}

IntroVAEModel::EncodeResult IntroVAEModel::encode(const Tensor& x) const {
    ad::NoGradGuard guard;
    Tensor batch = x;
    if (x.ndim() == 2) {
        batch = Tensor({1, 1, x.dim(0), x.dim(1)});
        std::copy(x.data(), x.data() + x.size(), batch.data());
    }
    auto [mu, lv] = encode_var(Var::leaf(batch));
    return {mu.value(), lv.value()};
}

Tensor IntroVAEModel::decode(const Tensor& z) const {
    ad::NoGradGuard guard;
    Tensor codes = z;
    const bool single = z.ndim() == 1;
    if (single) {
        codes = Tensor({1, static_cast<int>(z.size())});
        std::copy(z.data(), z.data() + z.size(), codes.data());
    }
    Tensor out = decode_var(Var::leaf(codes)).value();
    if (!single) return out;
    Tensor img({image_size_, image_size_});
    std::copy(out.data(), out.data() + img.size(), img.data());
    return img;
}

Var kl_to_prior(const Var& mu, const Var& log_var) {
    if (mu.shape() != log_var.shape())
        throw InvalidArgument("kl_to_prior: mu and log_var shapes differ");
    if (mu.shape().size() != 2) throw InvalidArgument("kl_to_prior expects [N, L] inputs");
    Var terms = ad::sub(ad::add(ad::square(mu), ad::exp_(log_var)),
                        ad::add_scalar(log_var, 1.0));
    return ad::mul_scalar(ad::sum_rows(terms), 0.5);
}

Var reconstruction_loss(const Var& x, const Var& x_r) {
    if (x.shape() != x_r.shape())
        throw InvalidArgument("reconstruction_loss: shape mismatch");
    const int n = x.shape().size() >= 3 ? x.shape()[0] : 1;
    return ad::mul_scalar(ad::sum(ad::square(ad::sub(x, x_r))), 1.0 / n);
}

double encoder_loss(double kl_real, double kl_recon, double kl_sampled, double recon,
                    const IntroVAETrainConfig& cfg) {
    check_weights(cfg);
    if (cfg.plain_vae) return cfg.alpha_R * kl_real + cfg.beta * recon;
    const double hinge_recon = std::max(0.0, cfg.margin - kl_recon);
    const double hinge_sampled = std::max(0.0, cfg.margin - kl_sampled);
    return cfg.alpha_R * kl_real + cfg.alpha_E * (hinge_recon + hinge_sampled) +
           cfg.beta * recon;
}

double generator_loss(double kl_recon, double kl_sampled, double recon,
                      const IntroVAETrainConfig& cfg) {
    check_weights(cfg);
    if (cfg.plain_vae) return cfg.beta * recon;
    return cfg.alpha_G * (kl_recon + kl_sampled) + cfg.beta * recon;
}

EncoderPhase encoder_phase(const IntroVAEModel& model, const Var& x, const Tensor& eps,
                           const Tensor& z_p, const IntroVAETrainConfig& cfg) {
    check_weights(cfg);
    auto [mu, lv] = model.encode_var(x);
    Var z = ad::add(mu, ad::mul(Var::leaf(eps), ad::exp_(ad::mul_scalar(lv, 0.5))));
    Var x_r = model.decode_var(z);

    EncoderPhase out;
    out.kl_real = mean_kl(mu, lv);
    out.recon = reconstruction_loss(x, x_r);
    if (cfg.plain_vae) {
        out.hinge_recon = Var::leaf(Tensor::scalar(0.0));
        out.hinge_sampled = Var::leaf(Tensor::scalar(0.0));
        out.loss = ad::add(ad::mul_scalar(out.kl_real, cfg.alpha_R),
                           ad::mul_scalar(out.recon, cfg.beta));
        return out;
    }

    Var x_p = model.decode_var(Var::leaf(z_p));
    auto [mu_r, lv_r] = model.encode_var(ad::detach(x_r));
    auto [mu_p, lv_p] = model.encode_var(ad::detach(x_p));
    out.hinge_recon = mean_hinge(kl_to_prior(mu_r, lv_r), cfg.margin);
    out.hinge_sampled = mean_hinge(kl_to_prior(mu_p, lv_p), cfg.margin);
    out.loss = ad::add(
        ad::add(ad::mul_scalar(out.kl_real, cfg.alpha_R),
                ad::mul_scalar(ad::add(out.hinge_recon, out.hinge_sampled), cfg.alpha_E)),
        ad::mul_scalar(out.recon, cfg.beta));
    return out;
}

GeneratorPhase generator_phase(const IntroVAEModel& model, const Var& x, const Tensor& eps,
                               const Tensor& z_p, const IntroVAETrainConfig& cfg) {
    check_weights(cfg);
    auto [mu, lv] = model.encode_var(x);
    Var z = ad::add(mu, ad::mul(Var::leaf(eps), ad::exp_(ad::mul_scalar(lv, 0.5))));
    Var x_r = model.decode_var(z);

    GeneratorPhase out;
    out.recon = reconstruction_loss(x, x_r);
    if (cfg.plain_vae) {
        out.kl_recon = Var::leaf(Tensor::scalar(0.0));
        out.kl_sampled = Var::leaf(Tensor::scalar(0.0));
        out.loss = ad::mul_scalar(out.recon, cfg.beta);
        return out;
    }

    Var x_p = model.decode_var(Var::leaf(z_p));
    auto [mu_r, lv_r] = model.encode_var(x_r);
    auto [mu_p, lv_p] = model.encode_var(x_p);
    out.kl_recon = mean_kl(mu_r, lv_r);
    out.kl_sampled = mean_kl(mu_p, lv_p);
    out.loss = ad::add(
        ad::mul_scalar(ad::add(out.kl_recon, out.kl_sampled), cfg.alpha_G),
        ad::mul_scalar(out.recon, cfg.beta));
    return out;
}

namespace {

std::vector<Tensor> load_split_images(const DatasetManifest& manifest, const std::string& split,
                                      const PreprocessConfig& pre) {
    PreprocessConfig base = pre;
    base.augment = false;
    std::vector<Tensor> out;
    for (const auto* e : manifest.split_entries(split))
        out.push_back(preprocess(load_image(manifest, *e), base));
    return out;
}

void write_grid(const std::filesystem::path& path, const IntroVAEModel& model,
                const std::vector<Tensor>& images) {
    const int cols = static_cast<int>(std::min<size_t>(images.size(), 8));
    if (cols == 0) return;
    const int h = model.image_size();
    Tensor grid({2 * h, cols * h});
    for (int c = 0; c < cols; ++c) {
        const Tensor& orig = images[static_cast<size_t>(c)];
        Tensor recon = model.decode(model.encode(orig).mu);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < h; ++x) {
                grid.at(y, c * h + x) = std::clamp(orig.at(y, x), 0.0, 1.0);
                grid.at(h + y, c * h + x) = recon.at(y, x);
            }
    }
    write_png16(path, grid);
}

}  // namespace

TrainedIntroVAE train_introvae(const DatasetManifest& manifest, const PreprocessConfig& pre,
                               const IntroVAETrainConfig& cfg,
                               const std::optional<std::filesystem::path>& out_dir) {
    check_weights(cfg);
    if (cfg.epochs <= 0) throw InvalidArgument("epochs must be positive");
    if (cfg.batch <= 0) throw InvalidArgument("batch size must be positive");
    if (cfg.lr <= 0.0) throw InvalidArgument("learning rate must be positive");
    if (pre.crop_size != cfg.image_size)
        throw InvalidArgument("preprocess crop size must match the autoencoder image size");

    std::vector<Tensor> images = load_split_images(manifest, "train", pre);
    if (images.empty()) throw InvalidArgument("train split is empty");

    TrainedIntroVAE trained;
    trained.cfg = cfg;
    trained.pre_cfg = pre;
    trained.model =
        IntroVAEModel::create(cfg.latent_dim, cfg.image_size, cfg.base_channels,
                              Rng::derive(cfg.seed, 1));
    IntroVAEModel& model = trained.model;

    nn::Adam opt_enc(model.encoder_params(), cfg.lr);
    nn::Adam opt_gen(model.generator_params(), cfg.lr);
    Rng data_rng(Rng::derive(cfg.seed, 2));
    Rng noise_rng(Rng::derive(cfg.seed, 3));

    const int n = static_cast<int>(images.size());
    const int h = cfg.image_size;
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    std::ofstream csv;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir / "grids");
        csv.open(*out_dir / "introvae_log.csv");
        if (!csv) throw IoError("cannot write " + (*out_dir / "introvae_log.csv").string());
        csv << "epoch,encoder_loss,generator_loss,kl_real,kl_recon,kl_sampled,recon\n"
            << std::setprecision(17);
    }

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[data_rng.below(static_cast<uint64_t>(i) + 1)]);

        IntroVAEEpochStats stats;
        stats.epoch = epoch;
        for (int start = 0; start < n; start += cfg.batch) {
            const int bs = std::min(cfg.batch, n - start);
            Tensor x({bs, 1, h, h});
            for (int i = 0; i < bs; ++i) {
                const Tensor& src = images[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
                std::copy(src.data(), src.data() + src.size(),
                          x.data() + static_cast<int64_t>(i) * src.size());
            }
            Tensor eps({bs, cfg.latent_dim});
            for (int64_t i = 0; i < eps.size(); ++i) eps[i] = noise_rng.normal();
            Tensor z_p({bs, cfg.latent_dim});
            if (!cfg.plain_vae)
                for (int64_t i = 0; i < z_p.size(); ++i) z_p[i] = noise_rng.normal();

            Var xv = Var::leaf(x);
            EncoderPhase ep = encoder_phase(model, xv, eps, z_p, cfg);
            opt_enc.zero_grad();
            opt_gen.zero_grad();
            ad::backward(ep.loss);
            opt_enc.step();

            GeneratorPhase gp = generator_phase(model, xv, eps, z_p, cfg);
            opt_enc.zero_grad();
            opt_gen.zero_grad();
            ad::backward(gp.loss);
            opt_gen.step();

            const double w = static_cast<double>(bs) / n;
            stats.encoder_loss += ep.loss.item() * w;
            stats.generator_loss += gp.loss.item() * w;
            stats.kl_real += ep.kl_real.item() * w;
            stats.kl_recon += gp.kl_recon.item() * w;
            stats.kl_sampled += gp.kl_sampled.item() * w;
            stats.recon += ep.recon.item() * w;
        }
        trained.log.push_back(stats);

        if (csv.is_open()) {
            csv << stats.epoch << ',' << stats.encoder_loss << ',' << stats.generator_loss << ','
                << stats.kl_real << ',' << stats.kl_recon << ',' << stats.kl_sampled << ','
                << stats.recon << '\n';
            csv.flush();
        }
        if (out_dir && cfg.grid_every > 0 &&
            (epoch % cfg.grid_every == 0 || epoch == cfg.epochs)) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%04d.png", epoch);
            write_grid(*out_dir / "grids" / name, model, images);
        }
    }
    return trained;
}

void save_introvae(TrainedIntroVAE& trained, const std::filesystem::path& prefix) {
    auto dir = prefix.parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);

    nn::ParamList params = trained.model.params();
    std::vector<double> flat = nn::flatten_params(params);
    write_doubles(prefix.string() + ".bin", flat);

    const auto& cfg = trained.cfg;
    json sidecar = {
        {"kind", "introvae"},
        {"latent_dim", trained.model.latent_dim()},
        {"image_size", trained.model.image_size()},
        {"base_channels", trained.model.base_channels()},
        {"param_count", static_cast<int64_t>(flat.size())},
        {"param_hash", hash_to_hex(nn::param_hash(params))},
        {"train",
         {{"beta", cfg.beta},
          {"alpha_R", cfg.alpha_R},
          {"alpha_E", cfg.alpha_E},
          {"alpha_G", cfg.alpha_G},
          {"margin", cfg.margin},
          {"lr", cfg.lr},
          {"epochs", cfg.epochs},
          {"batch", cfg.batch},
          {"seed", cfg.seed},
          {"plain_vae", cfg.plain_vae},
          {"grid_every", cfg.grid_every}}},
        {"preprocess",
         {{"crop_size", trained.pre_cfg.crop_size},
          {"log_transform", trained.pre_cfg.log_transform}}},
    };
    if (!trained.log.empty()) {
        const auto& last = trained.log.back();
        sidecar["final"] = {{"epoch", last.epoch},
                            {"encoder_loss", last.encoder_loss},
                            {"generator_loss", last.generator_loss},
                            {"kl_real", last.kl_real},
                            {"recon", last.recon}};
    }
    std::ofstream f(prefix.string() + ".json");
    if (!f) throw IoError("cannot write " + prefix.string() + ".json");
    f << sidecar.dump(2) << '\n';
}

IntroVAEModel load_introvae(const std::filesystem::path& prefix) {
    std::ifstream f(prefix.string() + ".json");
    if (!f) throw IoError("autoencoder checkpoint not found: " + prefix.string() + ".json");
    json sidecar;
    try {
        sidecar = json::parse(f);
    } catch (const json::exception& e) {
        throw IoError("malformed autoencoder sidecar: " + std::string(e.what()));
    }
    if (sidecar.value("kind", "") != "introvae")
        throw IoError("not an autoencoder checkpoint: " + prefix.string() + ".json");

    IntroVAEModel model = IntroVAEModel::create(sidecar.at("latent_dim").get<int>(),
                                                sidecar.at("image_size").get<int>(),
                                                sidecar.at("base_channels").get<int>(), 0);
    nn::ParamList params = model.params();
    const auto count = sidecar.at("param_count").get<int64_t>();
    if (count != nn::param_count(params))
        throw IoError("checkpoint parameter count does not match architecture");
    std::vector<double> flat = read_doubles(prefix.string() + ".bin", count);
    nn::load_params(params, flat);
    if (hash_to_hex(nn::param_hash(params)) != sidecar.at("param_hash").get<std::string>())
        throw IoError("checkpoint hash mismatch: " + prefix.string() + ".bin");
    return model;
}

}  // namespace xfake
