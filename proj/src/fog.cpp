#include "fogda/fog.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fogda {

namespace {

void require_airlight(const char* op, const Image& img, std::span<const double> airlight) {
    if (airlight.size() != img.channels) {
        throw std::invalid_argument(std::string(op) + ": airlight has " + std::to_string(airlight.size()) +
                                    " components for a " + std::to_string(img.channels) + "-channel image");
    }
}

// Separable min filter with the window clipped to the map.
Map2D min_filter(const Map2D& in, std::size_t patch) {
    const std::size_t r = patch / 2;
    Map2D rows(in.height, in.width);
    for (std::size_t y = 0; y < in.height; ++y) {
        for (std::size_t x = 0; x < in.width; ++x) {
            const std::size_t x0 = x >= r ? x - r : 0;
            const std::size_t x1 = std::min(in.width - 1, x + r);
            double m = in.at(y, x0);
            for (std::size_t xx = x0 + 1; xx <= x1; ++xx) m = std::min(m, in.at(y, xx));
            rows.at(y, x) = m;
        }
    }
    Map2D out(in.height, in.width);
    for (std::size_t y = 0; y < in.height; ++y) {
        const std::size_t y0 = y >= r ? y - r : 0;
        const std::size_t y1 = std::min(in.height - 1, y + r);
        for (std::size_t x = 0; x < in.width; ++x) {
            double m = rows.at(y0, x);
            for (std::size_t yy = y0 + 1; yy <= y1; ++yy) m = std::min(m, rows.at(yy, x));
            out.at(y, x) = m;
        }
    }
    return out;
}

}  // namespace

TransmissionMap transmission_from_depth(const Map2D& depth, double beta) {
    if (!(beta >= 0.0)) throw std::invalid_argument("transmission_from_depth: beta must be >= 0");
    TransmissionMap t{Map2D(depth.height, depth.width)};
    for (std::size_t i = 0; i < depth.data.size(); ++i) {
        const double d = depth.data[i];
        if (!(d >= 0.0)) {
            throw std::invalid_argument("transmission_from_depth: negative depth " + std::to_string(d) + " at index " +
                                        std::to_string(i));
        }
        t.values.data[i] = std::exp(-beta * d);
    }
    return t;
}

Image apply_fog(const Image& clear, const TransmissionMap& t, std::span<const double> airlight) {
    require_same_size("apply_fog", clear, t.values);
    require_airlight("apply_fog", clear, airlight);
    Image out(clear.channels, clear.height, clear.width);
    const std::size_t hw = clear.pixels();
    for (std::size_t c = 0; c < clear.channels; ++c) {
        for (std::size_t i = 0; i < hw; ++i) {
            const double tv = t.values.data[i];
            out.data[c * hw + i] = clear.data[c * hw + i] * tv + airlight[c] * (1.0 - tv);
        }
    }
    return out;
}

Image dehaze_exact(const Image& foggy, const TransmissionMap& t, std::span<const double> airlight, double t_min) {
    require_same_size("dehaze_exact", foggy, t.values);
    require_airlight("dehaze_exact", foggy, airlight);
    Image out(foggy.channels, foggy.height, foggy.width);
    const std::size_t hw = foggy.pixels();
    for (std::size_t c = 0; c < foggy.channels; ++c) {
        for (std::size_t i = 0; i < hw; ++i) {
            const double tv = std::max(t.values.data[i], t_min);
            const double j = (foggy.data[c * hw + i] - airlight[c]) / tv + airlight[c];
            out.data[c * hw + i] = std::clamp(j, 0.0, 1.0);
        }
    }
    return out;
}

Map2D dark_channel(const Image& image, std::size_t patch) {
    if (patch == 0 || patch % 2 == 0) throw std::invalid_argument("dark_channel: patch must be odd and >= 1");
    Map2D cmin(image.height, image.width, 0.0);
    const std::size_t hw = image.pixels();
    if (image.channels == 0) return cmin;
    for (std::size_t i = 0; i < hw; ++i) {
        double m = image.data[i];
        for (std::size_t c = 1; c < image.channels; ++c) m = std::min(m, image.data[c * hw + i]);
        cmin.data[i] = m;
    }
    return min_filter(cmin, patch);
}

TransmissionMap estimate_transmission_dcp(const Image& image, std::span<const double> airlight, double omega,
                                          std::size_t patch, double t_min) {
    require_airlight("estimate_transmission_dcp", image, airlight);
    Image normalized = image;
    const std::size_t hw = image.pixels();
    for (std::size_t c = 0; c < image.channels; ++c) {
        if (!(airlight[c] > 0.0)) throw std::invalid_argument("estimate_transmission_dcp: airlight must be > 0");
        for (std::size_t i = 0; i < hw; ++i) normalized.data[c * hw + i] /= airlight[c];
    }
    const Map2D dark = dark_channel(normalized, patch);
    TransmissionMap t{Map2D(image.height, image.width)};
    for (std::size_t i = 0; i < hw; ++i) t.values.data[i] = std::clamp(1.0 - omega * dark.data[i], t_min, 1.0);
    return t;
}

DcpResult dcp_defog(const Image& image, const DcpOptions& options) {
    const Map2D dark = dark_channel(image, options.patch);
    const std::size_t hw = image.pixels();
    std::size_t count = static_cast<std::size_t>(std::ceil(options.bright_fraction * static_cast<double>(hw)));
    count = std::clamp<std::size_t>(count, 1, std::max<std::size_t>(hw, 1));
    std::vector<std::size_t> order(hw);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dark.data[a] > dark.data[b]; });

    Airlight airlight(image.channels, 0.0);
    for (std::size_t k = 0; k < count && k < hw; ++k) {
        for (std::size_t c = 0; c < image.channels; ++c) airlight[c] += image.data[c * hw + order[k]];
    }
    // A black airlight would make I/A undefined.
    for (double& a : airlight) a = std::max(a / static_cast<double>(count), 1e-3);

    DcpResult result;
    result.transmission = estimate_transmission_dcp(image, airlight, options.omega, options.patch, options.t_min);
    result.defogged = dehaze_exact(image, result.transmission, airlight, options.t_min);
    result.airlight = std::move(airlight);
    return result;
}

Map2D normalize_map(const Map2D& map) {
    Map2D out(map.height, map.width, 0.0);
    if (map.data.empty()) return out;
    const auto [lo, hi] = std::minmax_element(map.data.begin(), map.data.end());
    const double range = *hi - *lo;
    if (range < 1e-8) return out;
    for (std::size_t i = 0; i < map.data.size(); ++i) out.data[i] = (map.data[i] - *lo) / range;
    return out;
}

}  // namespace fogda
