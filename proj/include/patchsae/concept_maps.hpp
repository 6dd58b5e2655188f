#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "patchsae/io.hpp"
#include "patchsae/sae.hpp"
#include "patchsae/shard.hpp"

namespace patchsae {

struct AggregationConfig {
    double tau = 0.2;  ///< strict threshold on raw activation values
    int grid_h = 14;
    int grid_w = 14;
    bool include_cls = true;  ///< CLS counts toward image totals, never toward masks

    void validate() const;
};

enum class Level { patch, image, class_level, dataset };

std::string to_string(Level level);
Level level_from_string(const std::string& text);

/// Sparse latent -> count map; zero counts are never stored.
using SparseCounts = std::map<LatentId, std::int64_t>;

struct ActivationCounts {
    Level level = Level::image;
    std::string entity_id;
    SparseCounts counts;
};

using BinaryMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// 1 where h > tau.
BinaryMatrix binarize(const RowMatrixf& h, double tau);

/// Per-latent count of tokens above tau for one image.
SparseCounts image_counts(const RowMatrixf& h, const AggregationConfig& cfg);

void add_counts(SparseCounts& into, const SparseCounts& from);

/// Streams image-level counts into class and dataset totals.
class CountAggregator {
public:
    void add_image(const ImageRecord& record, SparseCounts counts);

    const std::vector<ActivationCounts>& image_level() const { return images_; }
    /// Groups by label id; throws ContractError if any image was unlabeled.
    std::vector<ActivationCounts> class_level() const;
    ActivationCounts dataset_level() const;

private:
    std::vector<ActivationCounts> images_;
    std::vector<ImageRecord> records_;
};

CountAggregator aggregate(const ActivationShard& shard, const SaeParamsf& params, const AggregationConfig& cfg);

/// Class entity id for a record: "<label_id>" or "<dataset>/<label_id>" when
/// `qualify_dataset` is set.
std::string class_entity_id(const ImageRecord& record, bool qualify_dataset);

/// Descending by count, ties by smaller latent id; zero counts never appear.
std::vector<std::pair<LatentId, std::int64_t>> top_latents(const SparseCounts& counts, int k);

struct SegmentationMask {
    LatentId latent_id = 0;
    std::string image_id;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<double> patch_values;       ///< row-major raw activations
    std::vector<double> normalized_values;  ///< patch_values / max (all zero stays zero)
    double cls_value = 0.0;
};

SegmentationMask segmentation_mask(const ActivationShard& shard, const SaeParamsf& params, const std::string& image_id,
                                   LatentId latent_id);
/// Mask from an already-encoded [tokens, d_sae] activation matrix.
SegmentationMask segmentation_mask(const RowMatrixf& h, int grid_h, int grid_w, const std::string& image_id,
                                   LatentId latent_id);

io::Json counts_json(const std::vector<ActivationCounts>& counts);
std::map<std::string, SparseCounts> read_counts_json(const io::Json& doc);
io::Json mask_json(const SegmentationMask& mask);

} // namespace patchsae
