#include "fogda/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <vector>

#include <openssl/evp.h>

#include "fogda/errors.hpp"

namespace fogda {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open " + path.string());
    return f;
}

void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image, int bit_depth) {
    if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("write_png: bit depth must be 8 or 16");
    if (image.channels != 3) throw std::invalid_argument("write_png: expected an RGB image");
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png: libpng initialisation failed for " + path.string());
    }
    const std::size_t bytes_per = bit_depth == 16 ? 2 : 1;
    const std::size_t hw = image.pixels();
    std::vector<unsigned char> rows(image.height * image.width * 3 * bytes_per);
    const double max_code = bit_depth == 16 ? 65535.0 : 255.0;
    for (std::size_t y = 0; y < image.height; ++y) {
        for (std::size_t x = 0; x < image.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(image.data[c * hw + y * image.width + x], 0.0, 1.0);
                const auto code = static_cast<std::uint32_t>(std::lround(v * max_code));
                const std::size_t at = ((y * image.width + x) * 3 + c) * bytes_per;
                if (bytes_per == 2) {
                    rows[at] = static_cast<unsigned char>(code >> 8);
                    rows[at + 1] = static_cast<unsigned char>(code & 0xFFu);
                } else {
                    rows[at] = static_cast<unsigned char>(code);
                }
            }
        }
    }
    std::vector<png_bytep> row_ptrs(image.height);
    for (std::size_t y = 0; y < image.height; ++y) row_ptrs[y] = rows.data() + y * image.width * 3 * bytes_per;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png: libpng error writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), bit_depth,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError("read_png: " + path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png: libpng initialisation failed for " + path.string());
    }
    Image image;
    std::vector<unsigned char> rows;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png: corrupt PNG " + path.string());
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const std::size_t width = png_get_image_width(png, info);
    const std::size_t height = png_get_image_height(png, info);
    const std::size_t out_depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    rows.resize(rowbytes * height);
    row_ptrs.resize(height);
    for (std::size_t y = 0; y < height; ++y) row_ptrs[y] = rows.data() + y * rowbytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    image = Image(3, height, width);
    const std::size_t hw = height * width;
    const double max_code = out_depth == 16 ? 65535.0 : 255.0;
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double code;
                if (out_depth == 16) {
                    const unsigned char* p = rows.data() + y * rowbytes + (x * 3 + c) * 2;
                    code = static_cast<double>((static_cast<unsigned>(p[0]) << 8) | p[1]);
                } else {
                    code = static_cast<double>(rows[y * rowbytes + x * 3 + c]);
                }
                image.data[c * hw + y * width + x] = code / max_code;
            }
        }
    }
    return image;
}

void write_fmap(const std::filesystem::path& path, const Map2D& map) {
    std::vector<unsigned char> out{'F', 'M', 'A', 'P'};
    put_u32le(out, static_cast<std::uint32_t>(map.height));
    put_u32le(out, static_cast<std::uint32_t>(map.width));
    for (double v : map.data) put_u32le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

Map2D read_fmap(const std::filesystem::path& path) {
    const std::vector<unsigned char> bytes = read_bytes(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "FMAP", 4) != 0) {
        throw IoError("read_fmap: " + path.string() + " lacks the FMAP header");
    }
    const std::size_t h = get_u32le(bytes.data() + 4);
    const std::size_t w = get_u32le(bytes.data() + 8);
    if (bytes.size() != 12 + 4 * h * w) {
        throw IoError("read_fmap: " + path.string() + " is truncated or has trailing bytes");
    }
    Map2D map(h, w);
    for (std::size_t i = 0; i < h * w; ++i) {
        map.data[i] = static_cast<double>(std::bit_cast<float>(get_u32le(bytes.data() + 12 + 4 * i)));
    }
    return map;
}

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256: digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace fogda
