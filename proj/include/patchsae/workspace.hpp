#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "patchsae/io.hpp"

namespace patchsae {

/// Percent-encodes every byte outside [A-Za-z0-9._-]; "." and ".." are
/// encoded too so the result is always a single safe path segment.
std::string encode_path_segment(const std::string& text);

/// git-style hash of a file, or of a directory's sorted (relpath, hash) listing.
std::string artifact_hash(const std::filesystem::path& path);

/// Root directory holding registry.jsonl (append-only), runs/ and thumbnails/.
class Workspace {
public:
    /// Opens (creating if needed) the workspace at `root`.
    explicit Workspace(std::filesystem::path root);

    /// `flag` when non-empty, else $PATCHSAE_WORKSPACE; ConfigError when neither is set.
    static std::filesystem::path resolve_root(const std::string& flag);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path registry_path() const { return root_ / "registry.jsonl"; }
    std::filesystem::path thumbnail_path(const std::string& image_id) const;

    /// Appends {kind, path, hash, registered_at, meta}. Paths inside the
    /// workspace are stored relative to the root.
    io::Json register_artifact(const std::string& kind, const std::filesystem::path& path, io::Json meta = {});

    std::vector<io::Json> entries() const;
    /// Entries of `kind` in registration order, filtered by `keep`.
    std::vector<io::Json> entries_of(const std::string& kind,
                                     const std::function<bool(const io::Json&)>& keep = {}) const;
    /// Most recently registered matching entry.
    std::optional<io::Json> latest(const std::string& kind,
                                   const std::function<bool(const io::Json&)>& keep = {}) const;

    std::filesystem::path resolve(const io::Json& entry) const;
    /// True when the artifact still hashes to its registered value.
    bool verify(const io::Json& entry) const;

    /// Writes runs/<timestamp>.json (suffixed on collision) and returns its path.
    std::filesystem::path write_run_record(const io::Json& record) const;

private:
    std::filesystem::path root_;
};

} // namespace patchsae
