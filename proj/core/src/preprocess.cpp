#include "xfake/preprocess.hpp"

#include <cmath>

#include "xfake/errors.hpp"
#include "xfake/rng.hpp"

namespace xfake {

Tensor preprocess(const Tensor& pixels, const PreprocessConfig& cfg, uint64_t seed) {
    if (pixels.ndim() != 2) throw InvalidArgument("preprocess: expects 2-D pixels");
    const int h = pixels.dim(0), w = pixels.dim(1);
    if (cfg.crop_size > h || cfg.crop_size > w)
        throw InvalidArgument("preprocess: crop_size exceeds image size");
    if (!(cfg.stretch_range.first > 0.0) || cfg.stretch_range.first > cfg.stretch_range.second)
        throw InvalidArgument("preprocess: invalid stretch_range");

    const int oy = (h - cfg.crop_size) / 2;
    const int ox = (w - cfg.crop_size) / 2;
    Tensor out({cfg.crop_size, cfg.crop_size});
    const double inv_log_k1 = 1.0 / std::log(256.0);
    double stretch = 1.0;
    if (cfg.augment) stretch = Rng(seed).uniform(cfg.stretch_range.first, cfg.stretch_range.second);
    for (int y = 0; y < cfg.crop_size; ++y)
        for (int x = 0; x < cfg.crop_size; ++x) {
            double p = pixels.at(oy + y, ox + x);
            if (cfg.log_transform) p = std::log(1.0 + 255.0 * p) * inv_log_k1;
            if (cfg.augment) p *= stretch;
            out.at(y, x) = p;
        }
    return out;
}

}  // namespace xfake
