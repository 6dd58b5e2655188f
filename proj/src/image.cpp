#include "patchsae/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <string>

#include <jpeglib.h>
#include <png.h>

#include "patchsae/errors.hpp"
#include "patchsae/io.hpp"

namespace patchsae {

namespace {

class PnmReader {
public:
    explicit PnmReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    int next_int() {
        skip_space();
        if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) throw FormatError("pnm: expected integer");
        long value = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            value = value * 10 + (bytes_[pos_++] - '0');
            if (value > (1 << 24)) throw FormatError("pnm: integer out of range");
        }
        return static_cast<int>(value);
    }

    std::uint8_t next_byte() {
        if (pos_ >= bytes_.size()) throw FormatError("pnm: truncated pixel data");
        return bytes_[pos_++];
    }

    void skip_single_space() {
        if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) throw FormatError("pnm: malformed header");
        ++pos_;
    }

private:
    void skip_space() {
        while (pos_ < bytes_.size()) {
            if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 2;
};

ImageU8 decode_pnm(std::span<const std::uint8_t> bytes) {
    const char kind = static_cast<char>(bytes[1]);
    const bool color = kind == '3' || kind == '6';
    const bool binary = kind == '5' || kind == '6';
    PnmReader reader(bytes);
    ImageU8 img;
    img.width = reader.next_int();
    img.height = reader.next_int();
    const int maxval = reader.next_int();
    if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 255)
        throw FormatError("pnm: unsupported dimensions or maxval");
    if (binary) reader.skip_single_space();
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    img.rgb.resize(n * 3);
    auto sample = [&] {
        const int v = binary ? reader.next_byte() : reader.next_int();
        return static_cast<std::uint8_t>(std::min(255, v * 255 / maxval));
    };
    for (std::size_t i = 0; i < n; ++i) {
        if (color) {
            for (int c = 0; c < 3; ++c) img.rgb[i * 3 + c] = sample();
        } else {
            const auto g = sample();
            img.rgb[i * 3] = img.rgb[i * 3 + 1] = img.rgb[i * 3 + 2] = g;
        }
    }
    return img;
}

ImageU8 decode_png(std::span<const std::uint8_t> bytes) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw FormatError(std::string("png: ") + image.message);
    image.format = PNG_FORMAT_RGB;
    ImageU8 img;
    img.width = static_cast<int>(image.width);
    img.height = static_cast<int>(image.height);
    img.rgb.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, img.rgb.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw FormatError("png: " + msg);
    }
    return img;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

ImageU8 decode_jpeg(std::span<const std::uint8_t> bytes) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    ImageU8 img;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw FormatError(std::string("jpeg: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    img.width = static_cast<int>(cinfo.output_width);
    img.height = static_cast<int>(cinfo.output_height);
    img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

} // namespace

ImageU8 decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '2' && bytes[1] <= '6' && bytes[1] != '4')
        return decode_pnm(bytes);
    if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G')
        return decode_png(bytes);
    if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return decode_jpeg(bytes);
    throw FormatError("unrecognized image format");
}

ImageU8 decode_image(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_bytes(path);
    } catch (const LookupError& e) {
        throw FormatError(e.what());
    }
    return decode_image(bytes);
}

ImageU8 resize_center_crop(const ImageU8& image, int size) {
    PATCHSAE_REQUIRE(image.width > 0 && image.height > 0 && size > 0, "resize: empty image or size");
    const double scale = static_cast<double>(size) / std::min(image.width, image.height);
    const int rw = std::max(size, static_cast<int>(std::lround(image.width * scale)));
    const int rh = std::max(size, static_cast<int>(std::lround(image.height * scale)));
    const int x0 = (rw - size) / 2;
    const int y0 = (rh - size) / 2;
    ImageU8 out;
    out.width = out.height = size;
    out.rgb.resize(static_cast<std::size_t>(size) * size * 3);
    const double sx = static_cast<double>(image.width) / rw;
    const double sy = static_cast<double>(image.height) / rh;
    for (int y = 0; y < size; ++y) {
        const double fy = std::clamp((y + y0 + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
        const int iy = static_cast<int>(fy);
        const int iy1 = std::min(iy + 1, image.height - 1);
        const double wy = fy - iy;
        for (int x = 0; x < size; ++x) {
            const double fx = std::clamp((x + x0 + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
            const int ix = static_cast<int>(fx);
            const int ix1 = std::min(ix + 1, image.width - 1);
            const double wx = fx - ix;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * image.at(ix, iy, c) + wx * image.at(ix1, iy, c)) +
                                 wy * ((1 - wx) * image.at(ix, iy1, c) + wx * image.at(ix1, iy1, c));
                out.rgb[(static_cast<std::size_t>(y) * size + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> encode_ppm(const ImageU8& image) {
    const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), image.rgb.begin(), image.rgb.end());
    return out;
}

std::vector<std::uint8_t> encode_jpeg(const ImageU8& image, int quality) {
    jpeg_compress_struct cinfo{};
    jpeg_error_mgr jerr{};
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_compress(&cinfo);
    unsigned char* buffer = nullptr;
    unsigned long size = 0;
    jpeg_mem_dest(&cinfo, &buffer, &size);
    cinfo.image_width = static_cast<JDIMENSION>(image.width);
    cinfo.image_height = static_cast<JDIMENSION>(image.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        auto* row = const_cast<JSAMPLE*>(image.rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3);
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    std::vector<std::uint8_t> out(buffer, buffer + size);
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    return out;
}

std::vector<std::uint8_t> encode_png16(std::span<const double> values, int width, int height) {
    PATCHSAE_REQUIRE(values.size() == static_cast<std::size_t>(width) * height, "png16: size mismatch");
    std::vector<std::uint16_t> samples(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 65535.0));
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = PNG_FORMAT_LINEAR_Y;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, samples.data(), 0, nullptr))
        throw std::runtime_error(std::string("png: ") + image.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, samples.data(), 0, nullptr))
        throw std::runtime_error(std::string("png: ") + image.message);
    out.resize(size);
    return out;
}

std::vector<std::uint16_t> decode_png16_gray(std::span<const std::uint8_t> bytes, int& width, int& height) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw FormatError(std::string("png: ") + image.message);
    image.format = PNG_FORMAT_LINEAR_Y;
    width = static_cast<int>(image.width);
    height = static_cast<int>(image.height);
    std::vector<std::uint16_t> samples(static_cast<std::size_t>(width) * height);
    if (!png_image_finish_read(&image, nullptr, samples.data(), 0, nullptr))
        throw FormatError(std::string("png: ") + image.message);
    return samples;
}

} // namespace patchsae
