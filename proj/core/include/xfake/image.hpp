#pragma once

#include <filesystem>
#include <string>

#include "xfake/tensor.hpp"

namespace xfake {

enum class Source { real, simulated, counterfactual };

std::string source_to_string(Source s);
Source source_from_string(const std::string& s);

// Single-channel amplitude image plus generation metadata.
struct TargetImage {
    Tensor pixels;  // [H, W], non-negative, nominal range [0,1]
    int class_id = 0;
    double azimuth_deg = 0.0;
    Source source = Source::simulated;
    std::string id;
};

// Throws InvalidArgument when a field violates its documented range.
void validate_target_image(const TargetImage& img, int num_classes);

// Lossless 16-bit grayscale PNG, amplitude scaled by 65535 (clamped to [0,1]).
void write_png16(const std::filesystem::path& path, const Tensor& pixels);
Tensor read_png16(const std::filesystem::path& path);

// 8-bit RGB PNG from an [H, W, 3] tensor in [0,1]; used for rendered maps and grids.
void write_png_rgb(const std::filesystem::path& path, const Tensor& rgb);

// Portable float map ("Pf" grayscale, little-endian), for signed real-valued grids.
void write_pfm(const std::filesystem::path& path, const Tensor& values);
Tensor read_pfm(const std::filesystem::path& path);

}  // namespace xfake
