#pragma once

#include <string>
#include <vector>

#include "xfake/image.hpp"
#include "xfake/rng.hpp"
#include "xfake/tensor.hpp"

namespace xfake {

// One point reflector: position in pixels relative to the image center
// (canonical 0 deg pose), peak amplitude, Gaussian footprint sigma in pixels.
struct Scatterer {
    double x = 0.0, y = 0.0;
    double amplitude = 1.0;
    double sigma = 1.5;
};

struct ClassTemplate {
    std::string name;
    std::vector<Scatterer> scatterers;
};

struct SynthSpec {
    std::vector<ClassTemplate> templates;
    int speckle_looks = 4;
    double background_level = 0.05;
    int image_size = 96;
    uint64_t seed = 0;
};

// Procedural per-class layouts (line / ring / cross / pair, then seeded
// scatter for higher class indices); deterministic in (seed, num_classes).
SynthSpec make_default_spec(int num_classes, int image_size = 96, int speckle_looks = 4,
                            double background_level = 0.05, uint64_t seed = 0);

enum class CorruptionKind { clutter_swap, scatterer_dropout, scatterer_shift, angle_jitter };

std::string corruption_kind_to_string(CorruptionKind k);
CorruptionKind corruption_kind_from_string(const std::string& s);

// Magnitude ranges: clutter_swap blend in [0,1]; scatterer_dropout fraction in
// [0,1]; scatterer_shift offset bound in pixels, [0, image_size/4];
// angle_jitter degrees added to the rendered pose, [0,180].
struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::clutter_swap;
    double magnitude = 0.0;
};

class SynthGenerator {
  public:
    explicit SynthGenerator(SynthSpec spec);

    const SynthSpec& spec() const { return spec_; }
    int num_classes() const { return static_cast<int>(spec_.templates.size()); }

    // Speckled render of a class template at the requested pose; pure in
    // (class_id, azimuth_deg, seed).
    TargetImage synth(int class_id, double azimuth_deg, uint64_t seed) const;

    // Defect injection. Pixel content is re-rendered with the defect applied;
    // metadata (azimuth in particular) is copied from the input unchanged, and
    // the result is tagged simulated. Magnitude 0 returns the input pixels
    // bit-identically.
    TargetImage corrupt(const TargetImage& img, const CorruptionSpec& cspec, uint64_t seed) const;

    // Noise-free template render; the oracle surface for rotation and dropout
    // probes as well as the speckle carrier.
    Tensor render_clean(int class_id, double azimuth_deg) const;

  private:
    Tensor render_scatterers(const std::vector<Scatterer>& scatterers, double azimuth_deg) const;
    Tensor apply_speckle(const Tensor& clean, Rng& rng) const;

    SynthSpec spec_;
};

}  // namespace xfake
