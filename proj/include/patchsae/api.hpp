#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "patchsae/backbone.hpp"
#include "patchsae/latent_stats.hpp"
#include "patchsae/sae_train.hpp"
#include "patchsae/shard.hpp"
#include "patchsae/workspace.hpp"

namespace patchsae::api {

struct Request {
    std::string path;  ///< decoded, e.g. "/api/latent/3/stats"
    std::map<std::string, std::string> query;
};

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

/// Splits "/path?a=1&b=2" and percent-decodes both parts.
Request parse_target(const std::string& target);
/// Encoded "k=v&k2=v2" with keys sorted; the form used by export file names.
std::string canonical_query(const std::map<std::string, std::string>& query);
std::string to_target(const Request& request);

/// Bundle-relative file for a request: "<path>/index.<ext>" without a query,
/// "<path>/<canonical query>.<ext>" otherwise; every path segment encoded.
std::filesystem::path static_relpath(const Request& request, const std::string& content_type);

/// Number of latents listed per image in the latents endpoints.
inline constexpr int kTopLatents = 16;

struct Gap {
    std::string section;
    std::string reason;
};

struct LoadOptions {
    std::filesystem::path sae;  ///< empty: latest registered checkpoint
};

/// Read-only view over a workspace's precomputed artifacts. Immutable after
/// load; handle() is safe to call concurrently.
class Session {
public:
    static std::shared_ptr<const Session> load(const Workspace& workspace, const LoadOptions& options = {});

    Response handle(const Request& request) const;

    /// Every request the static export writes.
    std::vector<Request> export_requests(bool include_patches) const;
    /// Sections the workspace cannot serve.
    const std::vector<Gap>& gaps() const { return gaps_; }

    struct BackboneData {
        std::string backbone_id;
        std::optional<BackboneSpec> spec;
        std::vector<std::shared_ptr<const ActivationShard>> shards;
        std::map<std::string, std::pair<std::size_t, std::size_t>> rows;  ///< image_id -> (shard, row)
        std::optional<LatentStats> stats;
    };

private:
    Session() = default;

    Response backbones() const;
    Response images(const Request& r) const;
    Response image_latents(const std::string& image_id, const Request& r) const;
    Response thumbnail(const std::string& image_id) const;
    Response latents_compare(const Request& r) const;
    Response refimages(int latent, const Request& r) const;
    Response mask(int latent, const std::string& image_id, const Request& r) const;
    Response latent_stats(int latent, const Request& r) const;
    Response compare_report(const Request& r) const;

    const BackboneData& backbone_param(const Request& r) const;
    RowMatrixf encode_image(const BackboneData& b, const std::string& image_id) const;
    int check_latent(int latent) const;

    std::filesystem::path root_;
    std::optional<Checkpoint> sae_;
    std::map<std::string, BackboneData> backbones_;
    std::map<std::string, ImageRecord> images_;
    std::map<std::string, std::filesystem::path> comparisons_;  ///< dataset -> report file (latest)
    std::filesystem::path latest_comparison_;
    std::vector<Gap> gaps_;
};

struct ExportResult {
    std::size_t files = 0;
    std::vector<Gap> gaps;
};

/// Writes every export request's response under `out_dir` plus
/// export_manifest.json listing files and gaps.
ExportResult export_demo(const Session& session, const std::filesystem::path& out_dir, bool include_patches = false);

/// Serves a directory written by export_demo with the same routing rules.
Response serve_static(const std::filesystem::path& bundle, const Request& request);

/// HTTP/1.1 front end for a request handler (GET only).
class HttpServer {
public:
    explicit HttpServer(std::function<Response(const Request&)> handler);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Binds `host:port` (0 picks a free port) and returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop() is called.
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace patchsae::api
