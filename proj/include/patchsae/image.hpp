#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace patchsae {

/// Interleaved 8-bit RGB image, row-major.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Decodes PPM/PGM (P2, P3, P5, P6), PNG or JPEG by magic bytes. Throws FormatError.
ImageU8 decode_image(const std::filesystem::path& path);
ImageU8 decode_image(std::span<const std::uint8_t> bytes);

/// Shortest side resized to `size` (bilinear) followed by a centered size x size crop.
ImageU8 resize_center_crop(const ImageU8& image, int size);

/// Binary PPM (P6) encoding.
std::vector<std::uint8_t> encode_ppm(const ImageU8& image);
std::vector<std::uint8_t> encode_jpeg(const ImageU8& image, int quality = 90);
/// 16-bit grayscale PNG from row-major values in [0, 1].
std::vector<std::uint8_t> encode_png16(std::span<const double> values, int width, int height);
/// Decodes any PNG to 16-bit gray samples (test and round-trip helper).
std::vector<std::uint16_t> decode_png16_gray(std::span<const std::uint8_t> bytes, int& width, int& height);

} // namespace patchsae
