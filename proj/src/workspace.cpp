#include "patchsae/workspace.hpp"

#include <cstdlib>
#include <fstream>

#include "patchsae/errors.hpp"

namespace patchsae {

namespace fs = std::filesystem;

std::string encode_path_segment(const std::string& text) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    const bool dots_only = text == "." || text == "..";
    for (unsigned char ch : text) {
        const bool plain = std::isalnum(ch) || ch == '-' || ch == '_' || (ch == '.' && !dots_only);
        if (plain) {
            out.push_back(static_cast<char>(ch));
        } else {
            out.push_back('%');
            out.push_back(hex[ch >> 4]);
            out.push_back(hex[ch & 15]);
        }
    }
    return out.empty() ? "%00" : out;
}

std::string artifact_hash(const fs::path& path) {
    if (fs::is_directory(path)) return io::directory_hash(path);
    if (fs::is_regular_file(path)) return io::file_hash(path);
    throw LookupError("artifact not found: " + path.string());
}

Workspace::Workspace(fs::path root) : root_(std::move(root)) {
    PATCHSAE_REQUIRE(!root_.empty(), "workspace root must not be empty");
    fs::create_directories(root_ / "runs");
    root_ = fs::canonical(root_);
}

fs::path Workspace::resolve_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("PATCHSAE_WORKSPACE"); env && *env) return env;
    throw ConfigError("no workspace: pass --workspace or set PATCHSAE_WORKSPACE");
}

fs::path Workspace::thumbnail_path(const std::string& image_id) const {
    return root_ / "thumbnails" / (encode_path_segment(image_id) + ".jpg");
}

io::Json Workspace::register_artifact(const std::string& kind, const fs::path& path, io::Json meta) {
    const fs::path full = fs::weakly_canonical(fs::absolute(path));
    const auto rel = full.lexically_relative(root_);
    const bool inside = !rel.empty() && *rel.begin() != "..";
    io::Json entry = {{"kind", kind},
                      {"path", inside ? rel.generic_string() : full.generic_string()},
                      {"hash", artifact_hash(full)},
                      {"registered_at", io::utc_timestamp()},
                      {"meta", meta.is_null() ? io::Json::object() : std::move(meta)}};
    std::ofstream out(registry_path(), std::ios::app | std::ios::binary);
    if (!out) throw FormatError("cannot append to " + registry_path().string());
    out << entry.dump() << '\n';
    return entry;
}

std::vector<io::Json> Workspace::entries() const {
    std::vector<io::Json> out;
    std::ifstream in(registry_path(), std::ios::binary);
    if (!in) return out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(io::Json::parse(line));
        } catch (const io::Json::exception& e) {
            throw FormatError(registry_path().string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<io::Json> Workspace::entries_of(const std::string& kind,
                                            const std::function<bool(const io::Json&)>& keep) const {
    std::vector<io::Json> out;
    for (auto& e : entries())
        if (e.value("kind", "") == kind && (!keep || keep(e))) out.push_back(std::move(e));
    return out;
}

std::optional<io::Json> Workspace::latest(const std::string& kind,
                                          const std::function<bool(const io::Json&)>& keep) const {
    auto all = entries_of(kind, keep);
    if (all.empty()) return std::nullopt;
    return all.back();
}

fs::path Workspace::resolve(const io::Json& entry) const {
    const fs::path p = entry.at("path").get<std::string>();
    return p.is_absolute() ? p : root_ / p;
}

bool Workspace::verify(const io::Json& entry) const {
    const auto path = resolve(entry);
    return fs::exists(path) && artifact_hash(path) == entry.at("hash").get<std::string>();
}

fs::path Workspace::write_run_record(const io::Json& record) const {
    const std::string stamp = io::utc_timestamp();
    fs::path path = root_ / "runs" / (stamp + ".json");
    for (int i = 1; fs::exists(path); ++i) path = root_ / "runs" / (stamp + "-" + std::to_string(i) + ".json");
    io::write_json(path, record);
    return path;
}

} // namespace patchsae
