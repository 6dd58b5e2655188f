#pragma once

#include <optional>
#include <string>
#include <vector>

#include "patchsae/concept_maps.hpp"
#include "patchsae/io.hpp"
#include "patchsae/mask_eval.hpp"

namespace patchsae {

/// per_axis: each backbone gets its own rank thresholds.
/// union_axes: both axes share thresholds ranked over the pooled positive counts.
enum class BoundMode { per_axis, union_axes };

std::string to_string(BoundMode mode);
BoundMode bound_mode_from_string(const std::string& text);

struct GroupBounds {
    int upper_rank = 50;
    int lower_rank = 100;
    BoundMode mode = BoundMode::per_axis;
    double upper_x = 0.0;
    double lower_x = 0.0;
    double upper_y = 0.0;
    double lower_y = 0.0;
    /// Set when an axis had fewer positive latents than the requested rank and
    /// the bound fell back to its smallest positive value.
    bool clamped_x = false;
    bool clamped_y = false;
};

/// Value at 1-based `rank` of the descending positive values; clamps to the
/// smallest positive value. Throws ContractError when `values` has no positives.
double rank_value(std::vector<double> values, int rank, bool* clamped = nullptr);

GroupBounds derive_bounds(const SparseCounts& x, const SparseCounts& y, int upper_rank = 50, int lower_rank = 100,
                          BoundMode mode = BoundMode::per_axis);

enum class Group { high, high_to_low, low_to_high, neither };

std::string to_string(Group group);

/// high is tested first so a degenerate upper == lower bound stays exclusive.
Group classify_latent(double x, double y, const GroupBounds& bounds);

struct LatentGroup {
    LatentId latent_id = 0;
    std::int64_t x = 0;
    std::int64_t y = 0;
    Group group = Group::neither;
};

struct GroupCounts {
    std::int64_t high = 0;
    std::int64_t high_to_low = 0;
    std::int64_t low_to_high = 0;
    std::int64_t neither = 0;
};

/// Latents active on either axis, ascending by id.
std::vector<LatentGroup> assign_groups(const SparseCounts& x, const SparseCounts& y, const GroupBounds& bounds);
GroupCounts count_groups(const std::vector<LatentGroup>& groups);

/// Pearson correlation over the given points; nullopt when fewer than two
/// points or either axis has zero variance.
std::optional<double> pearson_r(const std::vector<LatentGroup>& points);

struct EntityComparison {
    std::string entity_id;
    GroupBounds bounds;
    std::vector<LatentGroup> latents;
    GroupCounts counts;
    std::optional<double> pearson_r;
};

struct SplitComparison {
    EvalSplit split = EvalSplit::full;
    std::vector<EntityComparison> entities;
    /// Entities left out because one axis had no positive counts.
    std::vector<std::string> skipped;
    double average_high = 0.0;
    double average_high_to_low = 0.0;
    double average_low_to_high = 0.0;
    std::optional<double> pearson_r;  ///< pooled over every (entity, latent) point
    std::optional<double> zero_shot_accuracy;
    std::optional<double> adapted_accuracy;
    std::optional<double> delta;
};

struct CompareOptions {
    Level level = Level::class_level;
    AggregationConfig aggregation;
    int upper_rank = 50;
    int lower_rank = 100;
    BoundMode bound_mode = BoundMode::per_axis;
    int n_classes = 0;  ///< 0: one more than the largest label id
    std::vector<EvalSplit> splits = {EvalSplit::base, EvalSplit::novel, EvalSplit::full};
};

struct ComparisonReport {
    std::string dataset;
    std::string backbone_a;
    std::string backbone_b;
    CompareOptions options;
    int n_images = 0;
    std::vector<SplitComparison> splits;

    const SplitComparison& split(EvalSplit s) const;
};

/// Compares precomputed class-level counts. Bounds are derived within each
/// split from that split's own counts.
SplitComparison compare_split(const std::map<int, SparseCounts>& a, const std::map<int, SparseCounts>& b,
                              EvalSplit split, int n_classes, const CompareOptions& options);

/// Encodes both shards with the shared SAE, aggregates counts and compares.
/// The shards must cover the same image ids with the same labels.
ComparisonReport compare_report(const ActivationShard& shard_a, const ActivationShard& shard_b,
                                const SaeParamsf& params, const CompareOptions& options);

/// Attaches Δ to the split of each native eval report pair.
void attach_accuracy(ComparisonReport& report, const EvalReport& zero_shot, const EvalReport& adapted);

io::Json comparison_report_json(const ComparisonReport& report);
/// split,entity_id,latent_id,x,y,group
std::string scatter_csv(const ComparisonReport& report);

} // namespace patchsae
