#include "patchsae/io.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "patchsae/errors.hpp"

namespace patchsae::io {

static_assert(std::endian::native == std::endian::little,
              "binary artifacts are written in host order; big-endian hosts need byte swapping");

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LookupError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LookupError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Json read_json(const fs::path& path) {
    try {
        return Json::parse(read_text(path));
    } catch (const Json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const Json& value) {
    write_text(path, value.dump(2) + "\n");
}

std::vector<float> read_f32(const fs::path& path) {
    const auto bytes = read_bytes(path);
    if (bytes.size() % sizeof(float) != 0)
        throw FormatError(path.string() + ": size is not a multiple of 4 bytes");
    std::vector<float> values(bytes.size() / sizeof(float));
    std::memcpy(values.data(), bytes.data(), bytes.size());
    return values;
}

void write_f32(const fs::path& path, std::span<const float> values) {
    std::vector<std::uint8_t> bytes;
    append_f32(bytes, values);
    write_bytes(path, bytes);
}

void append_f32(std::vector<std::uint8_t>& out, std::span<const float> values) {
    const auto offset = out.size();
    out.resize(offset + values.size_bytes());
    std::memcpy(out.data() + offset, values.data(), values.size_bytes());
}

namespace {

std::string sha1_hex(std::string_view header, std::span<const std::uint8_t> content) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size());
    EVP_DigestUpdate(ctx, content.data(), content.size());
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    hex.reserve(len * 2);
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

} // namespace

std::string git_blob_hash(std::span<const std::uint8_t> content) {
    std::string header = "blob " + std::to_string(content.size());
    header.push_back('\0');
    return sha1_hex(header, content);
}

std::string git_blob_hash(std::string_view content) {
    return git_blob_hash(std::span(reinterpret_cast<const std::uint8_t*>(content.data()), content.size()));
}

std::string file_hash(const fs::path& path) {
    return git_blob_hash(read_bytes(path));
}

std::string directory_hash(const fs::path& dir) {
    std::vector<std::string> lines;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        lines.push_back(fs::relative(entry.path(), dir).generic_string() + " " + file_hash(entry.path()));
    }
    std::sort(lines.begin(), lines.end());
    std::string joined;
    for (const auto& l : lines) joined += l + "\n";
    return git_blob_hash(joined);
}

double round_sig9(double value) {
    if (!std::isfinite(value) || value == 0.0) return value;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", value);
    return std::strtod(buf, nullptr);
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::snprintf(buf, sizeof buf, "%04d%02d%02dT%02d%02d%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

} // namespace patchsae::io
