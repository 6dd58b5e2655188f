#include "patchsae/shard.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "patchsae/errors.hpp"

namespace patchsae {

std::string to_string(Split split) {
    switch (split) {
    case Split::train: return "train";
    case Split::base_test: return "base_test";
    case Split::novel_test: return "novel_test";
    case Split::other: return "other";
    }
    return "other";
}

Split split_from_string(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "base_test") return Split::base_test;
    if (text == "novel_test") return Split::novel_test;
    if (text == "other" || text.empty()) return Split::other;
    throw FormatError("unknown split '" + text + "'");
}

void ImageRecord::validate() const {
    if (image_id.empty()) throw ContractError("image record without image_id");
    if (label_id < -1) throw ContractError("image " + image_id + ": label_id must be >= -1");
    if ((label_id == -1) != label_name.empty())
        throw ContractError("image " + image_id + ": label_id == -1 exactly when label_name is empty");
}

void to_json(io::Json& j, const ImageRecord& r) {
    j = io::Json{{"image_id", r.image_id},     {"path_or_uri", r.path_or_uri},   {"label_id", r.label_id},
                 {"label_name", r.label_name}, {"dataset_name", r.dataset_name}, {"split", to_string(r.split)}};
}

void from_json(const io::Json& j, ImageRecord& r) {
    try {
        r.image_id = j.at("image_id").get<std::string>();
        r.path_or_uri = j.value("path_or_uri", "");
        r.label_id = j.value("label_id", -1);
        r.label_name = j.value("label_name", "");
        r.dataset_name = j.value("dataset_name", "");
        r.split = split_from_string(j.value("split", "other"));
    } catch (const io::Json::exception& e) {
        throw FormatError(std::string("image record: ") + e.what());
    }
}

void check_unique_ids(const std::vector<ImageRecord>& records) {
    std::unordered_set<std::string> seen;
    for (const auto& r : records)
        if (!seen.insert(r.image_id).second) throw ContractError("duplicate image_id '" + r.image_id + "'");
}

ActivationShard::ActivationShard(BackboneSpec spec, std::vector<ImageRecord> records, std::vector<float> data,
                                 std::vector<float> extra)
    : spec_(std::move(spec)), records_(std::move(records)), data_(std::move(data)), extra_(std::move(extra)) {
    const std::size_t block = static_cast<std::size_t>(spec_.tokens_per_image) * spec_.d_vit;
    if (data_.size() != records_.size() * block)
        throw ContractError("shard: data holds " + std::to_string(data_.size()) + " floats, expected " +
                            std::to_string(records_.size() * block));
    const std::size_t extra_block = static_cast<std::size_t>(spec_.extra_tokens) * spec_.d_vit;
    if (extra_.size() != records_.size() * extra_block) throw ContractError("shard: prompt token data size mismatch");
    if (!std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); }))
        throw ContractError("shard: non-finite activation");
    check_unique_ids(records_);
}

ActivationShard::TokenBlock ActivationShard::tokens(std::size_t i) const {
    const std::size_t block = static_cast<std::size_t>(spec_.tokens_per_image) * spec_.d_vit;
    return TokenBlock(data_.data() + i * block, spec_.tokens_per_image, spec_.d_vit);
}

ActivationShard::TokenBlock ActivationShard::extra(std::size_t i) const {
    const std::size_t block = static_cast<std::size_t>(spec_.extra_tokens) * spec_.d_vit;
    return TokenBlock(extra_.data() + i * block, spec_.extra_tokens, spec_.d_vit);
}

std::size_t ActivationShard::index_of(const std::string& image_id) const {
    for (std::size_t i = 0; i < records_.size(); ++i)
        if (records_[i].image_id == image_id) return i;
    throw LookupError("image '" + image_id + "' not in shard");
}

ActivationShard ActivationShard::select(const std::vector<std::size_t>& indices) const {
    std::vector<ImageRecord> records;
    std::vector<float> data;
    std::vector<float> extra;
    const std::size_t block = static_cast<std::size_t>(spec_.tokens_per_image) * spec_.d_vit;
    const std::size_t extra_block = static_cast<std::size_t>(spec_.extra_tokens) * spec_.d_vit;
    for (auto i : indices) {
        records.push_back(records_.at(i));
        data.insert(data.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * block),
                    data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * block));
        extra.insert(extra.end(), extra_.begin() + static_cast<std::ptrdiff_t>(i * extra_block),
                     extra_.begin() + static_cast<std::ptrdiff_t>((i + 1) * extra_block));
    }
    return ActivationShard(spec_, std::move(records), std::move(data), std::move(extra));
}

ExtractResult extract_activations(const std::vector<ImageRecord>& images, const Backbone& backbone, int hook_layer,
                                  int batch_size,
                                  const std::function<void(const ImageRecord&, const ImageU8&)>& on_decoded) {
    PATCHSAE_REQUIRE(batch_size >= 1, "extract: batch_size must be >= 1");
    const BackboneSpec spec = backbone.spec(hook_layer);
    check_unique_ids(images);
    for (const auto& r : images) r.validate();

    struct Slot {
        bool ok = false;
        std::string error;
        ResidualState state;
    };
    const unsigned workers = std::max(1u, std::thread::hardware_concurrency());
    ExtractResult result;
    std::vector<ImageRecord> kept;
    std::vector<float> data;
    std::vector<float> extra;

    for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<Slot> slots(end - start);
        std::vector<ImageU8> decoded(end - start);
        for (std::size_t i = start; i < end; ++i) {
            try {
                decoded[i - start] = decode_image(std::filesystem::path(images[i].path_or_uri));
                slots[i - start].ok = true;
            } catch (const std::exception& e) {
                slots[i - start].error = e.what();
            }
        }
        // Forward passes are independent; results land in their input slot.
        auto run = [&](std::size_t first, std::size_t stride) {
            for (std::size_t k = first; k < slots.size(); k += stride)
                if (slots[k].ok) slots[k].state = backbone.forward_to(decoded[k], hook_layer);
        };
        if (workers > 1 && slots.size() > 1) {
            std::vector<std::future<void>> futures;
            const std::size_t n = std::min<std::size_t>(workers, slots.size());
            for (std::size_t w = 0; w < n; ++w) futures.push_back(std::async(std::launch::async, run, w, n));
            for (auto& f : futures) f.get();
        } else {
            run(0, 1);
        }
        for (std::size_t i = start; i < end; ++i) {
            auto& slot = slots[i - start];
            if (!slot.ok) {
                result.failures.push_back({images[i].image_id, slot.error});
                continue;
            }
            if (on_decoded) on_decoded(images[i], decoded[i - start]);
            kept.push_back(images[i]);
            data.insert(data.end(), slot.state.tokens.data(), slot.state.tokens.data() + slot.state.tokens.size());
            extra.insert(extra.end(), slot.state.extra.data(), slot.state.extra.data() + slot.state.extra.size());
        }
    }
    result.shard = ActivationShard(spec, std::move(kept), std::move(data), std::move(extra));
    return result;
}

void write_shard(const ActivationShard& shard, const std::filesystem::path& dir) {
    const auto& s = shard.spec();
    std::filesystem::create_directories(dir);
    io::Json manifest = {{"format_version", 1},
                         {"backbone_id", s.backbone_id},
                         {"hook_layer", s.hook_layer},
                         {"tokens_per_image", s.tokens_per_image},
                         {"d_vit", s.d_vit},
                         {"embed_dim", s.embed_dim},
                         {"grid_h", s.grid_h},
                         {"grid_w", s.grid_w},
                         {"n_blocks", s.n_blocks},
                         {"extra_tokens_per_image", s.extra_tokens},
                         {"token_order", "cls_first_then_patches_row_major"},
                         {"records", shard.records()}};
    io::write_json(dir / "manifest.json", manifest);
    io::write_f32(dir / "activations.bin", shard.data());
    if (s.extra_tokens > 0) io::write_f32(dir / "extra_tokens.bin", shard.extra_data());
}

ActivationShard read_shard(const std::filesystem::path& dir) {
    const io::Json m = io::read_json(dir / "manifest.json");
    if (m.value("format_version", 0) != 1) throw FormatError(dir.string() + ": unsupported shard format_version");
    BackboneSpec spec;
    std::vector<ImageRecord> records;
    try {
        spec.backbone_id = m.at("backbone_id").get<std::string>();
        spec.hook_layer = m.at("hook_layer");
        spec.tokens_per_image = m.at("tokens_per_image");
        spec.d_vit = m.at("d_vit");
        spec.embed_dim = m.at("embed_dim");
        const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(spec.tokens_per_image - 1))));
        spec.grid_h = m.value("grid_h", grid);
        spec.grid_w = m.value("grid_w", grid);
        spec.n_blocks = m.value("n_blocks", spec.hook_layer);
        spec.extra_tokens = m.value("extra_tokens_per_image", 0);
        records = m.at("records").get<std::vector<ImageRecord>>();
    } catch (const io::Json::exception& e) {
        throw FormatError(dir.string() + "/manifest.json: " + e.what());
    }
    try {
        spec.validate();
    } catch (const ConfigError& e) {
        throw FormatError(dir.string() + ": " + e.what());
    }
    auto data = io::read_f32(dir / "activations.bin");
    const std::size_t expected = records.size() * static_cast<std::size_t>(spec.tokens_per_image) * spec.d_vit;
    if (data.size() != expected)
        throw FormatError(dir.string() + "/activations.bin: " + std::to_string(data.size()) + " floats, expected " +
                          std::to_string(expected));
    std::vector<float> extra;
    if (spec.extra_tokens > 0) {
        extra = io::read_f32(dir / "extra_tokens.bin");
        if (extra.size() != records.size() * static_cast<std::size_t>(spec.extra_tokens) * spec.d_vit)
            throw FormatError(dir.string() + "/extra_tokens.bin: size mismatch");
    }
    return ActivationShard(std::move(spec), std::move(records), std::move(data), std::move(extra));
}

std::vector<ImageRecord> read_image_list(const std::filesystem::path& path) {
    const io::Json list = io::read_json(path);
    if (!list.is_array()) throw FormatError(path.string() + ": expected a JSON array of image records");
    auto records = list.get<std::vector<ImageRecord>>();
    const auto base = path.parent_path();
    for (auto& r : records) {
        if (!r.path_or_uri.empty() && std::filesystem::path(r.path_or_uri).is_relative())
            r.path_or_uri = (base / r.path_or_uri).lexically_normal().string();
        r.validate();
    }
    check_unique_ids(records);
    return records;
}

} // namespace patchsae
