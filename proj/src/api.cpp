#include "patchsae/api.hpp"

#include <algorithm>
#include <set>

#include "httplib.h"
#include "patchsae/concept_maps.hpp"
#include "patchsae/image.hpp"

namespace patchsae::api {

namespace fs = std::filesystem;
using io::Json;

namespace {

struct HttpError : std::runtime_error {
    HttpError(int status, const std::string& message) : std::runtime_error(message), status(status) {}
    int status;
};

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

std::string percent_decode(const std::string& text, bool plus_is_space) {
    std::string out;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '%' && i + 2 < text.size() && hex_value(text[i + 1]) >= 0 &&
            hex_value(text[i + 2]) >= 0) {
            out.push_back(static_cast<char>(hex_value(text[i + 1]) * 16 + hex_value(text[i + 2])));
            i += 2;
        } else if (plus_is_space && text[i] == '+') {
            out.push_back(' ');
        } else {
            out.push_back(text[i]);
        }
    }
    return out;
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= path.size()) {
        const auto end = path.find('/', start);
        const auto piece = path.substr(start, end == std::string::npos ? std::string::npos : end - start);
        if (!piece.empty()) out.push_back(piece);
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return out;
}

std::string extension_for(const std::string& content_type) {
    if (content_type == "image/png") return ".png";
    if (content_type == "image/jpeg") return ".jpg";
    return ".json";
}

Response json_response(const Json& j, int status = 200) { return {status, "application/json", j.dump(2) + "\n"}; }

Response error_response(int status, const std::string& message) {
    return json_response({{"schema", "error/v1"}, {"status", "error"}, {"code", status}, {"message", message}}, status);
}

Response not_computed(const std::string& artifact, const std::string& message) {
    return json_response(
        {{"schema", "not_computed/v1"}, {"status", "not_computed"}, {"artifact", artifact}, {"message", message}});
}

void allow_keys(const Request& r, std::initializer_list<const char*> keys) {
    for (const auto& [k, v] : r.query)
        if (std::find_if(keys.begin(), keys.end(), [&](const char* a) { return k == a; }) == keys.end())
            throw HttpError(400, "unknown query parameter '" + k + "'");
}

std::optional<std::string> param(const Request& r, const std::string& key) {
    const auto it = r.query.find(key);
    if (it == r.query.end()) return std::nullopt;
    return it->second;
}

std::string required(const Request& r, const std::string& key) {
    auto v = param(r, key);
    if (!v || v->empty()) throw HttpError(400, "missing query parameter '" + key + "'");
    return *v;
}

bool parse_bool(const std::string& text, const std::string& key) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw HttpError(400, "query parameter '" + key + "' must be true or false");
}

int parse_latent(const std::string& text) {
    if (text.empty() || text.size() > 9 || !std::all_of(text.begin(), text.end(), ::isdigit))
        throw HttpError(400, "latent id must be a non-negative integer");
    return std::stoi(text);
}

std::string thumbnail_url(const std::string& image_id) {
    return "/api/image/" + encode_path_segment(image_id) + "/thumbnail";
}

/// Top latents by value, ties to the smaller id; only positive values.
Json top_values(const Vectorf& values, int n) {
    std::vector<int> ids;
    for (Eigen::Index s = 0; s < values.size(); ++s)
        if (values[s] > 0.0f) ids.push_back(static_cast<int>(s));
    std::sort(ids.begin(), ids.end(), [&](int a, int b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
    if (ids.size() > static_cast<std::size_t>(n)) ids.resize(static_cast<std::size_t>(n));
    Json out = Json::array();
    for (int s : ids) out.push_back({{"latent_id", s}, {"value", io::round_sig9(values[s])}});
    return out;
}

} // namespace

Request parse_target(const std::string& target) {
    Request r;
    const auto q = target.find('?');
    r.path = percent_decode(target.substr(0, q), false);
    if (q == std::string::npos) return r;
    const std::string query = target.substr(q + 1);
    std::size_t start = 0;
    while (start < query.size()) {
        auto end = query.find('&', start);
        if (end == std::string::npos) end = query.size();
        const auto pair = query.substr(start, end - start);
        if (!pair.empty()) {
            const auto eq = pair.find('=');
            r.query[percent_decode(pair.substr(0, eq), true)] =
                eq == std::string::npos ? std::string{} : percent_decode(pair.substr(eq + 1), true);
        }
        start = end + 1;
    }
    return r;
}

std::string canonical_query(const std::map<std::string, std::string>& query) {
    std::string out;
    for (const auto& [k, v] : query) {
        if (!out.empty()) out.push_back('&');
        out += encode_path_segment(k) + "=" + encode_path_segment(v);
    }
    return out;
}

std::string to_target(const Request& request) {
    std::string out;
    for (const auto& seg : split_path(request.path)) out += "/" + encode_path_segment(seg);
    if (!request.query.empty()) out += "?" + canonical_query(request.query);
    return out;
}

fs::path static_relpath(const Request& request, const std::string& content_type) {
    fs::path out;
    for (const auto& seg : split_path(request.path)) out /= encode_path_segment(seg);
    const std::string stem = request.query.empty() ? "index" : canonical_query(request.query);
    return out / (stem + extension_for(content_type));
}

// ---------------------------------------------------------------------------
// Loading

std::shared_ptr<const Session> Session::load(const Workspace& workspace, const LoadOptions& options) {
    std::shared_ptr<Session> s(new Session());
    s->root_ = workspace.root();

    if (!options.sae.empty()) {
        s->sae_ = load_checkpoint(options.sae);
    } else if (auto e = workspace.latest("checkpoint")) {
        try {
            s->sae_ = load_checkpoint(workspace.resolve(*e));
        } catch (const std::exception& ex) {
            s->gaps_.push_back({"sae", std::string("registered checkpoint unreadable: ") + ex.what()});
        }
    }
    if (!s->sae_ && s->gaps_.empty()) s->gaps_.push_back({"sae", "no SAE checkpoint registered"});

    std::set<fs::path> seen;
    auto shard_entries = workspace.entries_of("shard");
    std::reverse(shard_entries.begin(), shard_entries.end());
    std::vector<fs::path> shard_paths;
    for (const auto& e : shard_entries)
        if (seen.insert(workspace.resolve(e)).second) shard_paths.push_back(workspace.resolve(e));
    std::reverse(shard_paths.begin(), shard_paths.end());
    for (const auto& path : shard_paths) {
        std::shared_ptr<const ActivationShard> shard;
        try {
            shard = std::make_shared<const ActivationShard>(read_shard(path));
        } catch (const std::exception& ex) {
            s->gaps_.push_back({"shards", "unreadable shard " + path.string() + ": " + ex.what()});
            continue;
        }
        auto& b = s->backbones_[shard->spec().backbone_id];
        b.backbone_id = shard->spec().backbone_id;
        if (!b.spec) b.spec = shard->spec();
        if (!b.spec->same_geometry(shard->spec())) {
            s->gaps_.push_back({"shards", "shard " + path.string() + " disagrees with earlier shards of " + b.backbone_id});
            continue;
        }
        b.shards.push_back(shard);
        for (std::size_t i = 0; i < shard->size(); ++i) {
            const auto& rec = shard->records()[i];
            b.rows.emplace(rec.image_id, std::make_pair(b.shards.size() - 1, i));
            s->images_.emplace(rec.image_id, rec);
        }
    }
    if (s->backbones_.empty()) s->gaps_.push_back({"shards", "no activation shards registered"});

    for (const auto& e : workspace.entries_of("stats")) {
        const std::string id = e.at("meta").value("backbone_id", "");
        try {
            auto stats = read_latent_stats(workspace.resolve(e));
            auto& b = s->backbones_[id];
            b.backbone_id = id;
            b.stats = std::move(stats);
        } catch (const std::exception& ex) {
            s->gaps_.push_back({"stats:" + id, std::string("unreadable stats: ") + ex.what()});
        }
    }
    for (const auto& [id, b] : s->backbones_) {
        if (!b.stats) s->gaps_.push_back({"stats:" + id, "no latent statistics registered"});
        if (s->sae_ && b.spec && b.spec->d_vit != s->sae_->params.d_vit())
            s->gaps_.push_back({"sae", "SAE width does not match backbone " + id});
    }

    for (const auto& e : workspace.entries_of("comparison")) {
        const auto path = workspace.resolve(e);
        if (!fs::is_regular_file(path)) continue;
        s->comparisons_[e.at("meta").value("dataset", "")] = path;
        s->latest_comparison_ = path;
    }
    if (s->comparisons_.empty()) s->gaps_.push_back({"comparison", "no comparison report registered"});

    std::size_t missing_thumbs = 0;
    for (const auto& [id, rec] : s->images_)
        if (!fs::exists(workspace.thumbnail_path(id))) ++missing_thumbs;
    if (s->images_.empty())
        s->gaps_.push_back({"thumbnails", "no images"});
    else if (missing_thumbs > 0)
        s->gaps_.push_back({"thumbnails", std::to_string(missing_thumbs) + " images have no thumbnail"});
    return s;
}

// ---------------------------------------------------------------------------
// Routing

Response Session::handle(const Request& request) const {
    try {
        const auto seg = split_path(request.path);
        if (seg.size() < 2 || seg[0] != "api") throw HttpError(404, "unknown route " + request.path);
        const auto n = seg.size();
        if (n == 2 && seg[1] == "backbones") {
            allow_keys(request, {});
            return backbones();
        }
        if (n == 2 && seg[1] == "images") return images(request);
        if (n == 4 && seg[1] == "image" && seg[3] == "latents") return image_latents(seg[2], request);
        if (n == 4 && seg[1] == "image" && seg[3] == "thumbnail") {
            allow_keys(request, {});
            return thumbnail(seg[2]);
        }
        if (n == 3 && seg[1] == "latents" && seg[2] == "compare") return latents_compare(request);
        if (n == 4 && seg[1] == "latent" && seg[3] == "refimages") return refimages(parse_latent(seg[2]), request);
        if (n == 5 && seg[1] == "latent" && seg[3] == "mask") return mask(parse_latent(seg[2]), seg[4], request);
        if (n == 4 && seg[1] == "latent" && seg[3] == "stats") return latent_stats(parse_latent(seg[2]), request);
        if (n == 3 && seg[1] == "compare" && seg[2] == "report") return compare_report(request);
        throw HttpError(404, "unknown route " + request.path);
    } catch (const HttpError& e) {
        return error_response(e.status, e.what());
    } catch (const LookupError& e) {
        return error_response(404, e.what());
    } catch (const ContractError& e) {
        return error_response(400, e.what());
    }
}

const Session::BackboneData& Session::backbone_param(const Request& r) const {
    const auto id = required(r, "backbone");
    const auto it = backbones_.find(id);
    if (it == backbones_.end()) throw HttpError(404, "unknown backbone '" + id + "'");
    return it->second;
}

int Session::check_latent(int latent) const {
    int d_sae = 0;
    if (sae_) d_sae = sae_->params.d_sae();
    for (const auto& [id, b] : backbones_)
        if (b.stats) d_sae = std::max(d_sae, static_cast<int>(b.stats->latents.size()));
    if (latent >= d_sae) throw HttpError(404, "unknown latent " + std::to_string(latent));
    return latent;
}

RowMatrixf Session::encode_image(const BackboneData& b, const std::string& image_id) const {
    const auto it = b.rows.find(image_id);
    const auto& shard = *b.shards[it->second.first];
    return encode(RowMatrixf(shard.tokens(it->second.second)), sae_->params);
}

Response Session::backbones() const {
    Json list = Json::array();
    for (const auto& [id, b] : backbones_) {
        Json entry = {{"backbone_id", id},
                      {"n_images", b.rows.size()},
                      {"has_activations", !b.shards.empty()},
                      {"has_stats", b.stats.has_value()}};
        if (b.spec) {
            entry["hook_layer"] = b.spec->hook_layer;
            entry["d_vit"] = b.spec->d_vit;
            entry["tokens_per_image"] = b.spec->tokens_per_image;
            entry["grid_h"] = b.spec->grid_h;
            entry["grid_w"] = b.spec->grid_w;
        } else {
            for (const char* k : {"hook_layer", "d_vit", "tokens_per_image", "grid_h", "grid_w"}) entry[k] = nullptr;
        }
        list.push_back(entry);
    }
    Json sae = nullptr;
    if (sae_)
        sae = {{"d_vit", sae_->params.d_vit()},
               {"d_sae", sae_->params.d_sae()},
               {"content_hash", sae_->metadata.value("content_hash", "")},
               {"trained_on", sae_->metadata.value("backbone_id", "")}};
    return json_response({{"schema", "backbones/v1"}, {"status", "ok"}, {"backbones", list}, {"sae", sae}});
}

Response Session::images(const Request& r) const {
    allow_keys(r, {"dataset", "split"});
    const auto dataset = param(r, "dataset");
    const auto split = param(r, "split");
    if (split) {
        bool known = false;
        for (auto s : {Split::train, Split::base_test, Split::novel_test, Split::other}) known |= to_string(s) == *split;
        if (!known) throw HttpError(400, "unknown split '" + *split + "'");
    }
    Json list = Json::array();
    for (const auto& [id, rec] : images_) {
        if (dataset && rec.dataset_name != *dataset) continue;
        if (split && to_string(rec.split) != *split) continue;
        Json in = Json::array();
        for (const auto& [bid, b] : backbones_)
            if (b.rows.count(id)) in.push_back(bid);
        const bool thumb = fs::exists(root_ / "thumbnails" / (encode_path_segment(id) + ".jpg"));
        list.push_back({{"image_id", id},
                        {"label_id", rec.label_id},
                        {"label_name", rec.label_name},
                        {"dataset_name", rec.dataset_name},
                        {"split", to_string(rec.split)},
                        {"backbones", in},
                        {"thumbnail", thumb ? Json(thumbnail_url(id)) : Json(nullptr)}});
    }
    return json_response({{"schema", "images/v1"},
                          {"status", "ok"},
                          {"dataset", dataset ? Json(*dataset) : Json(nullptr)},
                          {"split", split ? Json(*split) : Json(nullptr)},
                          {"images", list}});
}

Response Session::image_latents(const std::string& image_id, const Request& r) const {
    allow_keys(r, {"backbone", "patch"});
    if (!images_.count(image_id)) throw HttpError(404, "unknown image '" + image_id + "'");
    const auto& b = backbone_param(r);
    std::optional<int> token;
    Json patch_info = nullptr;
    if (auto p = param(r, "patch")) {
        const int gh = b.spec ? b.spec->grid_h : 0;
        const int gw = b.spec ? b.spec->grid_w : 0;
        if (*p == "cls") {
            token = 0;
            patch_info = {{"token", "cls"}, {"row", nullptr}, {"col", nullptr}};
        } else {
            const auto comma = p->find(',');
            int row = -1;
            int col = -1;
            try {
                std::size_t used = 0;
                row = std::stoi(p->substr(0, comma), &used);
                if (used != comma) row = -1;
                col = std::stoi(p->substr(comma + 1), &used);
                if (used != p->size() - comma - 1) col = -1;
            } catch (const std::exception&) {
                row = col = -1;
            }
            if (comma == std::string::npos || row < 0 || col < 0 || row >= gh || col >= gw)
                throw HttpError(400, "patch must be 'cls' or 'row,col' inside the " + std::to_string(gh) + "x" +
                                         std::to_string(gw) + " grid");
            token = 1 + row * gw + col;
            patch_info = {{"token", std::to_string(row) + "," + std::to_string(col)}, {"row", row}, {"col", col}};
        }
    }
    if (!sae_) return not_computed("sae", "no SAE checkpoint in the workspace");
    if (!b.rows.count(image_id))
        return not_computed("activations", "image '" + image_id + "' has no activations for " + b.backbone_id);
    const RowMatrixf h = encode_image(b, image_id);
    const Vectorf mean = h.colwise().mean().transpose();
    if (token) patch_info["latents"] = top_values(h.row(*token).transpose(), kTopLatents);
    return json_response({{"schema", "image_latents/v1"},
                          {"status", "ok"},
                          {"image_id", image_id},
                          {"backbone_id", b.backbone_id},
                          {"label_id", images_.at(image_id).label_id},
                          {"image_level", top_values(mean, kTopLatents)},
                          {"patch", patch_info}});
}

Response Session::thumbnail(const std::string& image_id) const {
    if (!images_.count(image_id)) throw HttpError(404, "unknown image '" + image_id + "'");
    const auto path = root_ / "thumbnails" / (encode_path_segment(image_id) + ".jpg");
    if (!fs::exists(path)) throw HttpError(404, "no thumbnail for '" + image_id + "'");
    const auto bytes = io::read_bytes(path);
    return {200, "image/jpeg", std::string(bytes.begin(), bytes.end())};
}

Response Session::latents_compare(const Request& r) const {
    allow_keys(r, {"image", "a", "b"});
    const auto image_id = required(r, "image");
    if (!images_.count(image_id)) throw HttpError(404, "unknown image '" + image_id + "'");
    auto lookup = [&](const std::string& key) -> const BackboneData& {
        const auto id = required(r, key);
        const auto it = backbones_.find(id);
        if (it == backbones_.end()) throw HttpError(404, "unknown backbone '" + id + "'");
        return it->second;
    };
    const auto& a = lookup("a");
    const auto& b = lookup("b");
    if (!sae_) return not_computed("sae", "no SAE checkpoint in the workspace");
    for (const auto* bb : {&a, &b})
        if (!bb->rows.count(image_id))
            return not_computed("activations", "image '" + image_id + "' has no activations for " + bb->backbone_id);
    const Json ta = top_values(encode_image(a, image_id).colwise().mean().transpose(), kTopLatents);
    const Json tb = top_values(encode_image(b, image_id).colwise().mean().transpose(), kTopLatents);
    std::map<int, Json> vb;
    for (const auto& e : tb) vb[e["latent_id"].get<int>()] = e["value"];
    std::set<int> in_a;
    Json common = Json::array();
    Json only_a = Json::array();
    Json only_b = Json::array();
    for (const auto& e : ta) {
        const int s = e["latent_id"];
        in_a.insert(s);
        if (vb.count(s))
            common.push_back({{"latent_id", s}, {"value_a", e["value"]}, {"value_b", vb[s]}});
        else
            only_a.push_back(e);
    }
    for (const auto& e : tb)
        if (!in_a.count(e["latent_id"].get<int>())) only_b.push_back(e);
    return json_response({{"schema", "latents_compare/v1"},
                          {"status", "ok"},
                          {"image_id", image_id},
                          {"a", a.backbone_id},
                          {"b", b.backbone_id},
                          {"top_n", kTopLatents},
                          {"common", common},
                          {"only_a", only_a},
                          {"only_b", only_b}});
}

Response Session::refimages(int latent, const Request& r) const {
    allow_keys(r, {"backbone", "masked"});
    check_latent(latent);
    const auto& b = backbone_param(r);
    const bool masked = param(r, "masked") ? parse_bool(*param(r, "masked"), "masked") : false;
    if (!b.stats) return not_computed("stats", "no latent statistics for " + b.backbone_id);
    if (latent >= static_cast<int>(b.stats->latents.size())) throw HttpError(404, "unknown latent " + std::to_string(latent));
    Json list = Json::array();
    for (const auto& ref : b.stats->latents[static_cast<std::size_t>(latent)].reference_images) {
        Json mask_grid = nullptr;
        if (masked && sae_ && b.rows.count(ref.image_id) && b.spec) {
            const auto m = segmentation_mask(encode_image(b, ref.image_id), b.spec->grid_h, b.spec->grid_w, ref.image_id, latent);
            mask_grid = mask_json(m)["normalized_values"];
        }
        const bool thumb = fs::exists(root_ / "thumbnails" / (encode_path_segment(ref.image_id) + ".jpg"));
        Json entry = {{"image_id", ref.image_id},
                      {"mean_activation", io::round_sig9(ref.mean_activation)},
                      {"label_id", ref.label_id},
                      {"thumbnail", thumb ? Json(thumbnail_url(ref.image_id)) : Json(nullptr)}};
        if (masked) entry["mask"] = mask_grid;
        list.push_back(entry);
    }
    return json_response({{"schema", "refimages/v1"},
                          {"status", "ok"},
                          {"latent_id", latent},
                          {"backbone_id", b.backbone_id},
                          {"masked", masked},
                          {"reference_images", list}});
}

Response Session::mask(int latent, const std::string& image_id, const Request& r) const {
    allow_keys(r, {"backbone", "format"});
    check_latent(latent);
    if (!images_.count(image_id)) throw HttpError(404, "unknown image '" + image_id + "'");
    const auto& b = backbone_param(r);
    const std::string format = param(r, "format").value_or("json");
    if (format != "json" && format != "png") throw HttpError(400, "format must be json or png");
    if (!sae_) return not_computed("sae", "no SAE checkpoint in the workspace");
    if (latent >= sae_->params.d_sae()) throw HttpError(404, "unknown latent " + std::to_string(latent));
    if (!b.rows.count(image_id) || !b.spec)
        return not_computed("activations", "image '" + image_id + "' has no activations for " + b.backbone_id);
    const auto m = segmentation_mask(encode_image(b, image_id), b.spec->grid_h, b.spec->grid_w, image_id, latent);
    if (format == "png") {
        const auto png = encode_png16(m.normalized_values, m.grid_w, m.grid_h);
        return {200, "image/png", std::string(png.begin(), png.end())};
    }
    Json j = {{"schema", "mask/v1"}, {"status", "ok"}, {"backbone_id", b.backbone_id}};
    j.update(mask_json(m));
    return json_response(j);
}

Response Session::latent_stats(int latent, const Request& r) const {
    allow_keys(r, {"backbone"});
    check_latent(latent);
    const auto& b = backbone_param(r);
    if (!b.stats) return not_computed("stats", "no latent statistics for " + b.backbone_id);
    if (latent >= static_cast<int>(b.stats->latents.size())) throw HttpError(404, "unknown latent " + std::to_string(latent));
    const auto& l = b.stats->latents[static_cast<std::size_t>(latent)];
    Json refs = Json::array();
    for (const auto& ref : l.reference_images)
        refs.push_back({{"image_id", ref.image_id}, {"mean_activation", io::round_sig9(ref.mean_activation)}, {"label_id", ref.label_id}});
    return json_response({{"schema", "latent_stats/v1"},
                          {"status", "ok"},
                          {"latent_id", latent},
                          {"backbone_id", b.backbone_id},
                          {"n_images", b.stats->n_images},
                          {"frequency", io::round_sig9(l.frequency)},
                          {"mean_activation", io::round_sig9(l.mean_activation)},
                          {"label_entropy", io::round_sig9(l.label_entropy)},
                          {"entropy_log_base", "e"},
                          {"label_std", io::round_sig9(l.label_std)},
                          {"image_count", l.image_count},
                          {"positive_token_count", l.positive_token_count},
                          {"reference_images", refs}});
}

Response Session::compare_report(const Request& r) const {
    allow_keys(r, {"dataset"});
    fs::path path = latest_comparison_;
    if (auto d = param(r, "dataset")) {
        const auto it = comparisons_.find(*d);
        path = it == comparisons_.end() ? fs::path{} : it->second;
    }
    if (path.empty()) return not_computed("comparison", "no comparison report for this dataset");
    return json_response({{"schema", "compare_report/v1"}, {"status", "ok"}, {"report", io::read_json(path)}});
}

// ---------------------------------------------------------------------------
// Export

std::vector<Request> Session::export_requests(bool include_patches) const {
    std::vector<Request> out;
    out.push_back({"/api/backbones", {}});
    out.push_back({"/api/images", {}});
    std::set<std::pair<std::string, std::string>> groups;
    for (const auto& [id, rec] : images_) groups.insert({rec.dataset_name, to_string(rec.split)});
    std::set<std::string> datasets;
    for (const auto& [d, s] : groups) {
        datasets.insert(d);
        out.push_back({"/api/images", {{"dataset", d}, {"split", s}}});
    }
    for (const auto& d : datasets) out.push_back({"/api/images", {{"dataset", d}}});

    for (const auto& [id, rec] : images_) {
        if (fs::exists(root_ / "thumbnails" / (encode_path_segment(id) + ".jpg")))
            out.push_back({"/api/image/" + id + "/thumbnail", {}});
        for (const auto& [bid, b] : backbones_) {
            if (!b.rows.count(id) || !sae_) continue;
            out.push_back({"/api/image/" + id + "/latents", {{"backbone", bid}}});
            if (include_patches && b.spec) {
                out.push_back({"/api/image/" + id + "/latents", {{"backbone", bid}, {"patch", "cls"}}});
                for (int row = 0; row < b.spec->grid_h; ++row)
                    for (int col = 0; col < b.spec->grid_w; ++col)
                        out.push_back({"/api/image/" + id + "/latents",
                                       {{"backbone", bid}, {"patch", std::to_string(row) + "," + std::to_string(col)}}});
            }
        }
        if (!sae_) continue;
        for (const auto& [a, ba] : backbones_)
            for (const auto& [b, bb] : backbones_)
                if (ba.rows.count(id) && bb.rows.count(id)) out.push_back({"/api/latents/compare", {{"a", a}, {"b", b}, {"image", id}}});
    }

    for (const auto& [bid, b] : backbones_) {
        if (!b.stats) continue;
        for (std::size_t s = 0; s < b.stats->latents.size(); ++s) {
            const std::string base = "/api/latent/" + std::to_string(s);
            out.push_back({base + "/stats", {{"backbone", bid}}});
            out.push_back({base + "/refimages", {{"backbone", bid}, {"masked", "false"}}});
            out.push_back({base + "/refimages", {{"backbone", bid}, {"masked", "true"}}});
            if (!sae_) continue;
            for (const auto& ref : b.stats->latents[s].reference_images) {
                if (!b.rows.count(ref.image_id)) continue;
                for (const char* format : {"json", "png"})
                    out.push_back({base + "/mask/" + ref.image_id, {{"backbone", bid}, {"format", format}}});
            }
        }
    }
    out.push_back({"/api/compare/report", {}});
    for (const auto& [d, path] : comparisons_) out.push_back({"/api/compare/report", {{"dataset", d}}});
    return out;
}

ExportResult export_demo(const Session& session, const fs::path& out_dir, bool include_patches) {
    ExportResult result;
    result.gaps = session.gaps();
    if (!include_patches)
        result.gaps.push_back({"patch_latents", "patch-level latents are served live only (export with --patches)"});
    Json files = Json::array();
    for (const auto& req : session.export_requests(include_patches)) {
        const auto resp = session.handle(req);
        const auto rel = static_relpath(req, resp.content_type);
        io::write_text(out_dir / rel, resp.body);
        files.push_back({{"target", to_target(req)}, {"file", rel.generic_string()}, {"status", resp.status},
                         {"content_type", resp.content_type}});
        ++result.files;
    }
    Json gaps = Json::array();
    for (const auto& g : result.gaps) gaps.push_back({{"section", g.section}, {"reason", g.reason}});
    io::write_json(out_dir / "export_manifest.json",
                   {{"format_version", 1}, {"created_at", io::utc_timestamp()}, {"files", files}, {"gaps", gaps}});
    return result;
}

Response serve_static(const fs::path& bundle, const Request& request) {
    for (const char* type : {"application/json", "image/png", "image/jpeg"}) {
        const auto path = bundle / static_relpath(request, type);
        if (fs::is_regular_file(path)) {
            const auto bytes = io::read_bytes(path);
            Response r{200, type, std::string(bytes.begin(), bytes.end())};
            if (std::string(type) == "application/json") {
                // Exported error payloads keep their status code.
                const auto j = Json::parse(r.body, nullptr, false);
                if (j.is_object() && j.value("status", "") == "error") r.status = j.value("code", 200);
            }
            return r;
        }
    }
    return error_response(404, "not in the exported bundle: " + to_target(request));
}

struct HttpServer::Impl {
    httplib::Server server;
    std::function<Response(const Request&)> handler;
};

HttpServer::HttpServer(std::function<Response(const Request&)> handler) : impl_(std::make_unique<Impl>()) {
    impl_->handler = std::move(handler);
    impl_->server.Get(R"(/.*)", [impl = impl_.get()](const httplib::Request& req, httplib::Response& res) {
        Request r;
        r.path = req.path;
        for (const auto& [k, v] : req.params) r.query[k] = v;
        const auto out = impl->handler(r);
        res.status = out.status;
        res.set_content(out.body, out.content_type);
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
    return bound;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_) impl_->server.stop();
}

} // namespace patchsae::api
