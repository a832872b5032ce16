#pragma once

#include <cstdint>
#include <utility>

#include "xfake/image.hpp"
#include "xfake/tensor.hpp"

namespace xfake {

struct PreprocessConfig {
    int crop_size = 88;
    bool log_transform = true;
    std::pair<double, double> stretch_range{0.8, 1.2};
    bool augment = false;
};

// Center crop, log compression p <- log(1 + 255 p)/log(256), and (when
// augmenting) a seeded uniform grayscale stretch. Monotone in pixel value.
Tensor preprocess(const Tensor& pixels, const PreprocessConfig& cfg, uint64_t seed = 0);

inline Tensor preprocess(const TargetImage& img, const PreprocessConfig& cfg, uint64_t seed = 0) {
    return preprocess(img.pixels, cfg, seed);
}

}  // namespace xfake
