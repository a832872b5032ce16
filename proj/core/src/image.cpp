#include "xfake/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>

#include "xfake/errors.hpp"

namespace xfake {

std::string source_to_string(Source s) {
    switch (s) {
        case Source::real: return "real";
        case Source::simulated: return "simulated";
        case Source::counterfactual: return "counterfactual";
    }
    throw InvalidArgument("source_to_string: bad enum value");
}

Source source_from_string(const std::string& s) {
    if (s == "real") return Source::real;
    if (s == "simulated") return Source::simulated;
    if (s == "counterfactual") return Source::counterfactual;
    throw InvalidArgument("unknown source tag: " + s);
}

void validate_target_image(const TargetImage& img, int num_classes) {
    if (img.pixels.ndim() != 2 || img.pixels.dim(0) != img.pixels.dim(1))
        throw InvalidArgument("target image must be square 2-D, id=" + img.id);
    for (int64_t i = 0; i < img.pixels.size(); ++i) {
        if (!(img.pixels[i] >= 0.0) || !std::isfinite(img.pixels[i]))
            throw InvalidArgument("target image has negative or non-finite pixel, id=" + img.id);
    }
    if (img.class_id < 0 || img.class_id >= num_classes)
        throw InvalidArgument("class_id out of range, id=" + img.id);
    if (!(img.azimuth_deg >= 0.0 && img.azimuth_deg < 360.0))
        throw InvalidArgument("azimuth_deg out of [0,360), id=" + img.id);
}

void write_png16(const std::filesystem::path& path, const Tensor& pixels) {
    if (pixels.ndim() != 2) throw InvalidArgument("write_png16: expects 2-D tensor");
    const int h = pixels.dim(0), w = pixels.dim(1);
    cv::Mat m(h, w, CV_16UC1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = std::clamp(pixels.at(y, x), 0.0, 1.0);
            m.at<uint16_t>(y, x) = static_cast<uint16_t>(std::lround(v * 65535.0));
        }
    if (!cv::imwrite(path.string(), m)) throw IoError("cannot write PNG: " + path.string());
}

Tensor read_png16(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
    if (m.empty()) throw IoError("cannot read PNG: " + path.string());
    if (m.channels() != 1) throw IoError("expected grayscale PNG: " + path.string());
    Tensor t({m.rows, m.cols});
    if (m.depth() == CV_16U) {
        for (int y = 0; y < m.rows; ++y)
            for (int x = 0; x < m.cols; ++x) t.at(y, x) = m.at<uint16_t>(y, x) / 65535.0;
    } else if (m.depth() == CV_8U) {
        for (int y = 0; y < m.rows; ++y)
            for (int x = 0; x < m.cols; ++x) t.at(y, x) = m.at<uint8_t>(y, x) / 255.0;
    } else {
        throw IoError("unsupported PNG depth: " + path.string());
    }
    return t;
}

void write_png_rgb(const std::filesystem::path& path, const Tensor& rgb) {
    if (rgb.ndim() != 3 || rgb.dim(2) != 3) throw InvalidArgument("write_png_rgb: expects [H,W,3]");
    const int h = rgb.dim(0), w = rgb.dim(1);
    cv::Mat m(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int64_t base = (static_cast<int64_t>(y) * w + x) * 3;
            // OpenCV stores BGR
            auto to8 = [](double v) {
                return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            };
            m.at<cv::Vec3b>(y, x) = {to8(rgb[base + 2]), to8(rgb[base + 1]), to8(rgb[base])};
        }
    if (!cv::imwrite(path.string(), m)) throw IoError("cannot write PNG: " + path.string());
}

void write_pfm(const std::filesystem::path& path, const Tensor& values) {
    if (values.ndim() != 2) throw InvalidArgument("write_pfm: expects 2-D tensor");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path.string());
    const int h = values.dim(0), w = values.dim(1);
    f << "Pf\n" << w << " " << h << "\n-1.0\n";
    // rows stored bottom-to-top per the format convention
    for (int y = h - 1; y >= 0; --y) {
        std::vector<float> row(static_cast<size_t>(w));
        for (int x = 0; x < w; ++x) row[static_cast<size_t>(x)] = static_cast<float>(values.at(y, x));
        f.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(sizeof(float) * row.size()));
    }
    if (!f) throw IoError("short write: " + path.string());
}

Tensor read_pfm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path.string());
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    f >> magic >> w >> h >> scale;
    if (magic != "Pf" || w <= 0 || h <= 0 || scale >= 0.0)
        throw IoError("unsupported PFM header: " + path.string());
    f.get();  // single whitespace after the header
    Tensor t({h, w});
    std::vector<float> row(static_cast<size_t>(w));
    for (int y = h - 1; y >= 0; --y) {
        f.read(reinterpret_cast<char*>(row.data()),
               static_cast<std::streamsize>(sizeof(float) * row.size()));
        if (!f) throw IoError("short read: " + path.string());
        for (int x = 0; x < w; ++x) t.at(y, x) = row[static_cast<size_t>(x)];
    }
    return t;
}

}  // namespace xfake
