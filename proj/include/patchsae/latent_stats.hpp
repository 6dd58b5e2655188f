#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "patchsae/io.hpp"
#include "patchsae/sae.hpp"
#include "patchsae/shard.hpp"

namespace patchsae {

struct ReferenceImage {
    std::string image_id;
    double mean_activation = 0.0;
    int label_id = -1;

    bool operator==(const ReferenceImage&) const = default;
};

/// True when `a` ranks before `b`: higher mean first, then smaller image_id.
bool ranks_before(const ReferenceImage& a, const ReferenceImage& b);

/// Mergeable per-latent summary of image-level activations. Single writer;
/// combine independent accumulators with merge().
class StatsAccumulator {
public:
    StatsAccumulator(int d_sae, int k);

    int d_sae() const { return d_sae_; }
    int k() const { return k_; }
    std::int64_t n_images_seen() const { return n_images_; }

    /// `h` is the [tokens, d_sae] latent activation of one image.
    void add_image(const ImageRecord& record, const RowMatrixf& h);
    void merge(const StatsAccumulator& other);

    const std::vector<std::int64_t>& activation_image_count() const { return image_count_; }
    const std::vector<double>& activation_value_sum() const { return value_sum_; }
    const std::vector<std::int64_t>& activation_positive_count() const { return positive_count_; }
    const std::vector<std::map<int, double>>& label_sums() const { return label_sums_; }
    /// Current top-k per latent, already in rank order.
    const std::vector<std::vector<ReferenceImage>>& top_images() const { return top_; }

private:
    void offer(LatentId s, ReferenceImage candidate);

    int d_sae_;
    int k_;
    std::int64_t n_images_ = 0;
    std::vector<std::int64_t> image_count_;
    std::vector<double> value_sum_;
    std::vector<std::int64_t> positive_count_;
    std::vector<std::map<int, double>> label_sums_;
    std::vector<std::vector<ReferenceImage>> top_;
};

/// Encodes every image of `shard` and feeds it to `acc`.
StatsAccumulator& accumulate(const ActivationShard& shard, const SaeParamsf& params, StatsAccumulator& acc);
StatsAccumulator merge(const StatsAccumulator& a, const StatsAccumulator& b);

struct LatentStat {
    double frequency = 0.0;
    double mean_activation = 0.0;
    double label_entropy = 0.0;  ///< natural log
    double label_std = 0.0;      ///< population std of reference-image label ids
    std::int64_t image_count = 0;
    std::int64_t positive_token_count = 0;
    std::vector<ReferenceImage> reference_images;
};

struct LatentStats {
    std::int64_t n_images = 0;
    int k = 0;
    std::vector<LatentStat> latents;
};

LatentStats finalize(const StatsAccumulator& acc);

/// Natural-log entropy of the distribution proportional to `sums`.
double label_entropy(const std::map<int, double>& sums);

struct ScatterRow {
    LatentId latent_id = 0;
    double log10_frequency = 0.0;
    double log10_mean_activation = 0.0;
    double entropy = 0.0;
};

struct ScatterTable {
    std::vector<ScatterRow> rows;
    int dead_count = 0;
};

ScatterTable export_scatter(const LatentStats& stats);

io::Json latent_stats_json(const LatentStats& stats, const std::string& backbone_id);
io::Json refimgs_json(const LatentStats& stats);
/// Reads latent_stats.json + refimgs.json back.
LatentStats read_latent_stats(const std::filesystem::path& dir);

} // namespace patchsae
