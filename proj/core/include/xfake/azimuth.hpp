#pragma once

#include <array>
#include <cmath>

#include "xfake/errors.hpp"

namespace xfake {

// Angle regression target: unit vector [cos th, sin th].
inline std::array<double, 2> encode_azimuth(double theta_deg) {
    double t = std::fmod(theta_deg, 360.0);
    if (t < 0.0) t += 360.0;
    const double rad = t * M_PI / 180.0;
    return {std::cos(rad), std::sin(rad)};
}

// Inverse of encode_azimuth; accepts any nonzero vector (scale-invariant).
inline double decode_azimuth(double vx, double vy) {
    if (vx == 0.0 && vy == 0.0) throw InvalidArgument("decode_azimuth: zero vector");
    double deg = std::atan2(vy, vx) * 180.0 / M_PI;
    if (deg < 0.0) deg += 360.0;
    if (deg >= 360.0) deg -= 360.0;
    return deg;
}

inline double decode_azimuth(const std::array<double, 2>& v) { return decode_azimuth(v[0], v[1]); }

}  // namespace xfake
