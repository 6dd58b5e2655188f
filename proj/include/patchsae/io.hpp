#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace patchsae::io {

namespace fs = std::filesystem;
using Json = nlohmann::json;

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);
std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes);

Json read_json(const fs::path& path);
/// Pretty-printed with a trailing newline so files diff cleanly.
void write_json(const fs::path& path, const Json& value);

/// Raw little-endian float32 file (no header).
std::vector<float> read_f32(const fs::path& path);
void write_f32(const fs::path& path, std::span<const float> values);

/// Appends the little-endian bytes of `values` to `out`.
void append_f32(std::vector<std::uint8_t>& out, std::span<const float> values);

/// Git blob hash: sha1("blob <size>\0" + content), lowercase hex.
std::string git_blob_hash(std::span<const std::uint8_t> content);
std::string git_blob_hash(std::string_view content);
std::string file_hash(const fs::path& path);
/// Hash over the sorted (relative path, blob hash) pairs of every regular file.
std::string directory_hash(const fs::path& dir);

/// Rounds to 9 significant digits so the JSON writer emits at most 9 digits.
double round_sig9(double value);

std::string utc_timestamp();

} // namespace patchsae::io
