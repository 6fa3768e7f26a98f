#pragma once

// Fog image formation I = J*t + A*(1-t) with t = exp(-beta*D), the dark
// channel prior estimator of t and A, and the min-max normaliser used by the
// transmission/depth consistency term.

#include <cstddef>
#include <span>
#include <vector>

#include "fogda/image.hpp"

namespace fogda {

inline constexpr double kTransmissionFloor = 0.1;

// Per-channel atmospheric light.
using Airlight = std::vector<double>;

struct FogParams {
    double beta = 0.06;
    Airlight airlight{0.9, 0.9, 0.9};
};

TransmissionMap transmission_from_depth(const Map2D& depth, double beta);

Image apply_fog(const Image& clear, const TransmissionMap& t, std::span<const double> airlight);

// Inverts apply_fog with t floored at t_min; output clamped to [0,1].
Image dehaze_exact(const Image& foggy, const TransmissionMap& t, std::span<const double> airlight,
                   double t_min = kTransmissionFloor);

// Minimum over channels and a patch x patch window clipped to the image.
Map2D dark_channel(const Image& image, std::size_t patch);

// 1 - omega * dark_channel(image / A), clamped to [t_min, 1].
TransmissionMap estimate_transmission_dcp(const Image& image, std::span<const double> airlight, double omega = 0.95,
                                          std::size_t patch = 7, double t_min = kTransmissionFloor);

struct DcpOptions {
    double omega = 0.95;
    std::size_t patch = 7;
    double t_min = kTransmissionFloor;
    // Share of pixels, ranked by dark channel value, averaged into the airlight.
    double bright_fraction = 0.001;
};

struct DcpResult {
    Image defogged;
    TransmissionMap transmission;
    Airlight airlight;
};

DcpResult dcp_defog(const Image& image, const DcpOptions& options = {});

// (v - min) / (max - min); all zeros when max - min < 1e-8.
Map2D normalize_map(const Map2D& map);

}  // namespace fogda
