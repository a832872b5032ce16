#include "xfake/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xfake/errors.hpp"

namespace xfake {

namespace {

bool same_template(const ClassTemplate& a, const ClassTemplate& b) {
    if (a.scatterers.size() != b.scatterers.size()) return false;
    for (size_t i = 0; i < a.scatterers.size(); ++i) {
        const auto& p = a.scatterers[i];
        const auto& q = b.scatterers[i];
        if (p.x != q.x || p.y != q.y || p.amplitude != q.amplitude || p.sigma != q.sigma)
            return false;
    }
    return true;
}

}  // namespace

SynthSpec make_default_spec(int num_classes, int image_size, int speckle_looks,
                            double background_level, uint64_t seed) {
    if (num_classes < 1) throw InvalidArgument("make_default_spec: need at least one class");
    SynthSpec spec;
    spec.image_size = image_size;
    spec.speckle_looks = speckle_looks;
    spec.background_level = background_level;
    spec.seed = seed;
    const double r = 0.30 * image_size;
    for (int c = 0; c < num_classes; ++c) {
        ClassTemplate t;
        t.name = "class" + std::to_string(c);
        auto amp = [&](int i) { return 0.55 + 0.35 * ((i * 2654435761u + c) % 5) / 4.0; };
        switch (c % 4) {
            case 0:  // line along the canonical x axis
                for (int i = 0; i < 5; ++i)
                    t.scatterers.push_back({r * (i - 2) / 2.0, 0.0, amp(i), 1.6});
                break;
            case 1:  // ring
                for (int i = 0; i < 8; ++i) {
                    const double a = 2.0 * M_PI * i / 8.0;
                    t.scatterers.push_back(
                        {0.75 * r * std::cos(a), 0.75 * r * std::sin(a), amp(i), 1.5});
                }
                break;
            case 2:  // cross
                for (int i = -2; i <= 2; ++i) {
                    t.scatterers.push_back({r * i / 2.0, 0.0, amp(i + 2), 1.4});
                    if (i != 0) t.scatterers.push_back({0.0, r * i / 2.0, amp(i + 7), 1.4});
                }
                break;
            default:  // two parallel bars
                for (int i = -2; i <= 2; ++i) {
                    t.scatterers.push_back({r * i / 2.5, -0.4 * r, amp(i + 2), 1.5});
                    t.scatterers.push_back({r * i / 2.5, 0.4 * r, amp(i + 8), 1.5});
                }
                break;
        }
        if (c >= 4) {  // shuffle higher classes into distinct seeded variants
            Rng rng(Rng::derive(seed, 1000 + static_cast<uint64_t>(c)));
            for (auto& s : t.scatterers) {
                s.x += rng.uniform(-0.25 * r, 0.25 * r);
                s.y += rng.uniform(-0.25 * r, 0.25 * r);
                s.amplitude = rng.uniform(0.45, 0.9);
            }
        }
        spec.templates.push_back(std::move(t));
    }
    return spec;
}

std::string corruption_kind_to_string(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::clutter_swap: return "clutter_swap";
        case CorruptionKind::scatterer_dropout: return "scatterer_dropout";
        case CorruptionKind::scatterer_shift: return "scatterer_shift";
        case CorruptionKind::angle_jitter: return "angle_jitter";
    }
    throw InvalidArgument("corruption_kind_to_string: bad enum value");
}

CorruptionKind corruption_kind_from_string(const std::string& s) {
    if (s == "clutter_swap") return CorruptionKind::clutter_swap;
    if (s == "scatterer_dropout") return CorruptionKind::scatterer_dropout;
    if (s == "scatterer_shift") return CorruptionKind::scatterer_shift;
    if (s == "angle_jitter") return CorruptionKind::angle_jitter;
    throw InvalidArgument("unknown corruption kind: " + s);
}

SynthGenerator::SynthGenerator(SynthSpec spec) : spec_(std::move(spec)) {
    if (spec_.templates.empty()) throw InvalidArgument("synth spec has no class templates");
    if (spec_.speckle_looks < 1) throw InvalidArgument("speckle_looks must be >= 1");
    if (spec_.image_size < 8) throw InvalidArgument("image_size too small");
    if (spec_.background_level < 0.0) throw InvalidArgument("background_level must be >= 0");
    for (size_t i = 0; i < spec_.templates.size(); ++i)
        for (size_t j = i + 1; j < spec_.templates.size(); ++j)
            if (same_template(spec_.templates[i], spec_.templates[j]))
                throw InvalidArgument("class templates must be distinct (" + std::to_string(i) +
                                      " vs " + std::to_string(j) + ")");
}

Tensor SynthGenerator::render_scatterers(const std::vector<Scatterer>& scatterers,
                                         double azimuth_deg) const {
    const int n = spec_.image_size;
    const double c = (n - 1) / 2.0;
    const double rad = azimuth_deg * M_PI / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    Tensor img = Tensor::full({n, n}, spec_.background_level);
    for (const auto& s : scatterers) {
        const double px = c + s.x * cs - s.y * sn;
        const double py = c + s.x * sn + s.y * cs;
        const double reach = 4.0 * s.sigma;
        const int x0 = std::max(0, static_cast<int>(std::floor(px - reach)));
        const int x1 = std::min(n - 1, static_cast<int>(std::ceil(px + reach)));
        const int y0 = std::max(0, static_cast<int>(std::floor(py - reach)));
        const int y1 = std::min(n - 1, static_cast<int>(std::ceil(py + reach)));
        const double inv2s2 = 1.0 / (2.0 * s.sigma * s.sigma);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
                img.at(y, x) += s.amplitude * std::exp(-d2 * inv2s2);
            }
    }
    for (int64_t i = 0; i < img.size(); ++i) img[i] = std::min(img[i], 1.0);
    return img;
}

Tensor SynthGenerator::apply_speckle(const Tensor& clean, Rng& rng) const {
    Tensor out(clean.shape());
    const double looks = static_cast<double>(spec_.speckle_looks);
    for (int64_t i = 0; i < clean.size(); ++i)
        out[i] = std::clamp(clean[i] * rng.speckle(looks), 0.0, 1.0);
    return out;
}

Tensor SynthGenerator::render_clean(int class_id, double azimuth_deg) const {
    if (class_id < 0 || class_id >= num_classes())
        throw InvalidArgument("render_clean: unknown class_id " + std::to_string(class_id));
    return render_scatterers(spec_.templates[static_cast<size_t>(class_id)].scatterers,
                             azimuth_deg);
}

TargetImage SynthGenerator::synth(int class_id, double azimuth_deg, uint64_t seed) const {
    if (class_id < 0 || class_id >= num_classes())
        throw InvalidArgument("synth: unknown class_id " + std::to_string(class_id));
    double az = std::fmod(azimuth_deg, 360.0);
    if (az < 0.0) az += 360.0;
    Rng rng(seed);
    TargetImage img;
    img.pixels = apply_speckle(render_clean(class_id, az), rng);
    img.class_id = class_id;
    img.azimuth_deg = az;
    img.source = Source::simulated;
    return img;
}

TargetImage SynthGenerator::corrupt(const TargetImage& img, const CorruptionSpec& cspec,
                                    uint64_t seed) const {
    if (img.class_id < 0 || img.class_id >= num_classes())
        throw InvalidArgument("corrupt: image class_id unknown to this generator");
    if (cspec.magnitude < 0.0) throw InvalidArgument("corruption magnitude must be >= 0");
    const double max_mag = [&] {
        switch (cspec.kind) {
            case CorruptionKind::clutter_swap: return 1.0;
            case CorruptionKind::scatterer_dropout: return 1.0;
            case CorruptionKind::scatterer_shift: return spec_.image_size / 4.0;
            case CorruptionKind::angle_jitter: return 180.0;
        }
        return 0.0;
    }();
    if (cspec.magnitude > max_mag)
        throw InvalidArgument("corruption magnitude " + std::to_string(cspec.magnitude) +
                              " exceeds maximum " + std::to_string(max_mag) + " for kind " +
                              corruption_kind_to_string(cspec.kind));

    TargetImage out = img;
    out.source = Source::simulated;
    if (cspec.magnitude == 0.0) return out;

    Rng rng(seed);
    const auto& tpl = spec_.templates[static_cast<size_t>(img.class_id)].scatterers;
    switch (cspec.kind) {
        case CorruptionKind::clutter_swap: {
            // blend toward an off-distribution clutter field of random blobs
            std::vector<Scatterer> blobs;
            for (int i = 0; i < 12; ++i) {
                Scatterer s;
                const double half = 0.45 * spec_.image_size;
                s.x = rng.uniform(-half, half);
                s.y = rng.uniform(-half, half);
                s.amplitude = rng.uniform(0.3, 0.9);
                s.sigma = rng.uniform(1.5, 4.5);
                blobs.push_back(s);
            }
            Tensor clutter = apply_speckle(render_scatterers(blobs, 0.0), rng);
            const double m = cspec.magnitude;
            for (int64_t i = 0; i < out.pixels.size(); ++i)
                out.pixels[i] = (1.0 - m) * img.pixels[i] + m * clutter[i];
            break;
        }
        case CorruptionKind::scatterer_dropout: {
            const auto k = static_cast<size_t>(
                std::ceil(cspec.magnitude * static_cast<double>(tpl.size()) - 1e-12));
            std::vector<size_t> order(tpl.size());
            std::iota(order.begin(), order.end(), size_t{0});
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.below(i)]);
            std::vector<Scatterer> kept;
            for (size_t i = k; i < order.size(); ++i) kept.push_back(tpl[order[i]]);
            out.pixels = apply_speckle(render_scatterers(kept, img.azimuth_deg), rng);
            break;
        }
        case CorruptionKind::scatterer_shift: {
            std::vector<Scatterer> moved = tpl;
            for (auto& s : moved) {
                s.x += rng.uniform(-cspec.magnitude, cspec.magnitude);
                s.y += rng.uniform(-cspec.magnitude, cspec.magnitude);
            }
            out.pixels = apply_speckle(render_scatterers(moved, img.azimuth_deg), rng);
            break;
        }
        case CorruptionKind::angle_jitter: {
            double az = std::fmod(img.azimuth_deg + cspec.magnitude, 360.0);
            if (az < 0.0) az += 360.0;
            out.pixels = apply_speckle(render_scatterers(tpl, az), rng);
            break;  // metadata azimuth stays img.azimuth_deg
        }
    }
    return out;
}

}  // namespace xfake
