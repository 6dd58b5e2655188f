#include "patchsae/concept_maps.hpp"

#include <algorithm>
#include <set>

namespace patchsae {

void AggregationConfig::validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (grid_h < 1 || grid_w < 1) throw ConfigError("grid dimensions must be >= 1");
}

std::string to_string(Level level) {
    switch (level) {
    case Level::patch: return "patch";
    case Level::image: return "image";
    case Level::class_level: return "class";
    case Level::dataset: return "dataset";
    }
    return "image";
}

Level level_from_string(const std::string& text) {
    if (text == "patch") return Level::patch;
    if (text == "image") return Level::image;
    if (text == "class") return Level::class_level;
    if (text == "dataset") return Level::dataset;
    throw ConfigError("unknown level '" + text + "'");
}

// Activations are float32, so tau is compared at that precision: h = 0.2f is
// not above tau = 0.2.
BinaryMatrix binarize(const RowMatrixf& h, double tau) {
    return (h.array() > static_cast<float>(tau)).cast<std::uint8_t>();
}

SparseCounts image_counts(const RowMatrixf& h, const AggregationConfig& cfg) {
    SparseCounts counts;
    const Eigen::Index first = cfg.include_cls ? 0 : 1;
    const auto tau = static_cast<float>(cfg.tau);
    for (Eigen::Index s = 0; s < h.cols(); ++s) {
        std::int64_t c = 0;
        for (Eigen::Index t = first; t < h.rows(); ++t)
            if (h(t, s) > tau) ++c;
        if (c > 0) counts.emplace(static_cast<LatentId>(s), c);
    }
    return counts;
}

void add_counts(SparseCounts& into, const SparseCounts& from) {
    for (const auto& [s, c] : from) into[s] += c;
}

void CountAggregator::add_image(const ImageRecord& record, SparseCounts counts) {
    images_.push_back({Level::image, record.image_id, std::move(counts)});
    records_.push_back(record);
}

std::string class_entity_id(const ImageRecord& record, bool qualify_dataset) {
    const std::string label = std::to_string(record.label_id);
    return qualify_dataset ? record.dataset_name + "/" + label : label;
}

std::vector<ActivationCounts> CountAggregator::class_level() const {
    std::set<std::string> datasets;
    for (const auto& r : records_) {
        if (!r.labeled()) throw ContractError("class aggregation over unlabeled image '" + r.image_id + "'");
        datasets.insert(r.dataset_name);
    }
    const bool qualify = datasets.size() > 1;
    // Ordered by (dataset, numeric label) so "10" sorts after "9".
    std::map<std::pair<std::string, int>, ActivationCounts> groups;
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const auto& r = records_[i];
        auto& g = groups[{r.dataset_name, r.label_id}];
        g.level = Level::class_level;
        g.entity_id = class_entity_id(r, qualify);
        add_counts(g.counts, images_[i].counts);
    }
    std::vector<ActivationCounts> out;
    for (auto& [key, g] : groups) out.push_back(std::move(g));
    return out;
}

ActivationCounts CountAggregator::dataset_level() const {
    std::set<std::string> names;
    for (const auto& r : records_) names.insert(r.dataset_name);
    ActivationCounts out{Level::dataset, "", {}};
    for (const auto& n : names) out.entity_id += (out.entity_id.empty() ? "" : "+") + n;
    for (const auto& img : images_) add_counts(out.counts, img.counts);
    return out;
}

CountAggregator aggregate(const ActivationShard& shard, const SaeParamsf& params, const AggregationConfig& cfg) {
    cfg.validate();
    PATCHSAE_REQUIRE(shard.spec().d_vit == params.d_vit(), "aggregate: shard d_vit does not match the sae");
    CountAggregator agg;
    for (std::size_t i = 0; i < shard.size(); ++i)
        agg.add_image(shard.records()[i], image_counts(encode(shard.tokens(i), params), cfg));
    return agg;
}

std::vector<std::pair<LatentId, std::int64_t>> top_latents(const SparseCounts& counts, int k) {
    PATCHSAE_REQUIRE(k >= 1, "top_latents: k must be >= 1");
    std::vector<std::pair<LatentId, std::int64_t>> ranked;
    for (const auto& [s, c] : counts)
        if (c > 0) ranked.emplace_back(s, c);
    const auto n = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(k));
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n), ranked.end(),
                      [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
    ranked.resize(n);
    return ranked;
}

SegmentationMask segmentation_mask(const RowMatrixf& h, int grid_h, int grid_w, const std::string& image_id,
                                   LatentId latent_id) {
    if (latent_id < 0 || latent_id >= h.cols())
        throw LookupError("latent " + std::to_string(latent_id) + " outside [0, " + std::to_string(h.cols()) + ")");
    PATCHSAE_REQUIRE(h.rows() == static_cast<Eigen::Index>(grid_h) * grid_w + 1, "mask: token count does not match the grid");
    SegmentationMask mask;
    mask.latent_id = latent_id;
    mask.image_id = image_id;
    mask.grid_h = grid_h;
    mask.grid_w = grid_w;
    mask.cls_value = h(0, latent_id);
    mask.patch_values.resize(static_cast<std::size_t>(grid_h) * grid_w);
    for (std::size_t p = 0; p < mask.patch_values.size(); ++p)
        mask.patch_values[p] = h(static_cast<Eigen::Index>(p) + 1, latent_id);
    const double peak = *std::max_element(mask.patch_values.begin(), mask.patch_values.end());
    mask.normalized_values.resize(mask.patch_values.size(), 0.0);
    if (peak > 0.0)
        for (std::size_t p = 0; p < mask.patch_values.size(); ++p) mask.normalized_values[p] = mask.patch_values[p] / peak;
    return mask;
}

SegmentationMask segmentation_mask(const ActivationShard& shard, const SaeParamsf& params, const std::string& image_id,
                                   LatentId latent_id) {
    const std::size_t i = shard.index_of(image_id);
    if (latent_id < 0 || latent_id >= params.d_sae())
        throw LookupError("latent " + std::to_string(latent_id) + " outside [0, " + std::to_string(params.d_sae()) + ")");
    return segmentation_mask(encode(shard.tokens(i), params), shard.spec().grid_h, shard.spec().grid_w, image_id,
                             latent_id);
}

io::Json counts_json(const std::vector<ActivationCounts>& counts) {
    io::Json out = io::Json::object();
    for (const auto& c : counts) {
        io::Json m = io::Json::object();
        for (const auto& [s, n] : c.counts) m[std::to_string(s)] = n;
        out[c.entity_id] = m;
    }
    return out;
}

std::map<std::string, SparseCounts> read_counts_json(const io::Json& doc) {
    std::map<std::string, SparseCounts> out;
    try {
        for (const auto& [entity, m] : doc.items()) {
            auto& counts = out[entity];
            for (const auto& [s, n] : m.items())
                if (n.get<std::int64_t>() > 0) counts[std::stoi(s)] = n.get<std::int64_t>();
        }
    } catch (const std::exception& e) {
        throw FormatError(std::string("counts: ") + e.what());
    }
    return out;
}

io::Json mask_json(const SegmentationMask& mask) {
    auto rows = [&](const std::vector<double>& v) {
        io::Json grid = io::Json::array();
        for (int r = 0; r < mask.grid_h; ++r) {
            io::Json row = io::Json::array();
            for (int c = 0; c < mask.grid_w; ++c)
                row.push_back(io::round_sig9(v[static_cast<std::size_t>(r) * mask.grid_w + c]));
            grid.push_back(row);
        }
        return grid;
    };
    return {{"latent_id", mask.latent_id},
            {"image_id", mask.image_id},
            {"grid_h", mask.grid_h},
            {"grid_w", mask.grid_w},
            {"cls_value", io::round_sig9(mask.cls_value)},
            {"patch_values", rows(mask.patch_values)},
            {"normalized_values", rows(mask.normalized_values)}};
}

} // namespace patchsae
