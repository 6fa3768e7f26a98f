#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "fogda/image.hpp"

namespace fogda {

// RGB PNG at 8 or 16 bits per channel. Values are clamped to [0,1] and
// rounded to the nearest code.
void write_png(const std::filesystem::path& path, const Image& image, int bit_depth = 8);
// Any PNG colour type; gray is expanded to RGB and alpha dropped.
Image read_png(const std::filesystem::path& path);

// FMAP: "FMAP", u32 height, u32 width (little-endian), then height*width
// little-endian float32 values, row-major.
void write_fmap(const std::filesystem::path& path, const Map2D& map);
Map2D read_fmap(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace fogda
