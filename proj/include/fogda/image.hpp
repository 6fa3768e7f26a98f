#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fogda/tensor.hpp"

namespace fogda {

// Planar CHW image with values nominally in [0,1].
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(c), height(h), width(w), data(c * h * w, fill) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
    std::size_t pixels() const { return height * width; }

    // [1,C,H,W] tensor for model input.
    Tensor to_tensor() const { return Tensor({1, channels, height, width}, data); }

    friend bool operator==(const Image&, const Image&) = default;
};

// Single-channel H x W field (depth, dark channel, transmission values).
struct Map2D {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    Map2D() = default;
    Map2D(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w, fill) {}

    double& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
    double at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

    // [1,1,H,W] tensor.
    Tensor to_tensor() const { return Tensor({1, 1, height, width}, data); }

    friend bool operator==(const Map2D&, const Map2D&) = default;
};

// Fraction of scene radiance surviving the fog, per pixel, in (0,1].
struct TransmissionMap {
    Map2D values;

    std::size_t height() const { return values.height; }
    std::size_t width() const { return values.width; }
    double at(std::size_t y, std::size_t x) const { return values.at(y, x); }

    friend bool operator==(const TransmissionMap&, const TransmissionMap&) = default;
};

inline void require_same_size(const char* op, const Image& img, const Map2D& m) {
    if (img.height != m.height || img.width != m.width) {
        throw std::invalid_argument(std::string(op) + ": image " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + " vs map " + std::to_string(m.height) + "x" +
                                    std::to_string(m.width));
    }
}

}  // namespace fogda
