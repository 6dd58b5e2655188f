#include "patchsae/adapt_compare.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

namespace patchsae {

std::string to_string(BoundMode mode) { return mode == BoundMode::union_axes ? "union" : "per_axis"; }

BoundMode bound_mode_from_string(const std::string& text) {
    if (text == "per_axis") return BoundMode::per_axis;
    if (text == "union") return BoundMode::union_axes;
    throw ConfigError("unknown bound mode '" + text + "' (expected per_axis or union)");
}

std::string to_string(Group group) {
    switch (group) {
    case Group::high: return "high";
    case Group::high_to_low: return "high_to_low";
    case Group::low_to_high: return "low_to_high";
    case Group::neither: return "neither";
    }
    return "neither";
}

double rank_value(std::vector<double> values, int rank, bool* clamped) {
    PATCHSAE_REQUIRE(rank >= 1, "rank must be >= 1");
    std::erase_if(values, [](double v) { return !(v > 0.0); });
    PATCHSAE_REQUIRE(!values.empty(), "cannot derive bounds: no latent has a positive count");
    std::sort(values.begin(), values.end(), std::greater<>());
    const bool short_list = static_cast<std::size_t>(rank) > values.size();
    if (clamped) *clamped = short_list;
    return short_list ? values.back() : values[static_cast<std::size_t>(rank - 1)];
}

namespace {

std::vector<double> values_of(const SparseCounts& counts) {
    std::vector<double> out;
    out.reserve(counts.size());
    for (const auto& [s, c] : counts) out.push_back(static_cast<double>(c));
    return out;
}

std::int64_t count_at(const SparseCounts& counts, LatentId s) {
    const auto it = counts.find(s);
    return it == counts.end() ? 0 : it->second;
}

} // namespace

GroupBounds derive_bounds(const SparseCounts& x, const SparseCounts& y, int upper_rank, int lower_rank,
                          BoundMode mode) {
    PATCHSAE_REQUIRE(upper_rank >= 1 && upper_rank < lower_rank, "bounds need 1 <= upper_rank < lower_rank");
    GroupBounds b;
    b.upper_rank = upper_rank;
    b.lower_rank = lower_rank;
    b.mode = mode;
    const auto xs = values_of(x);
    const auto ys = values_of(y);
    bool cu = false;
    bool cl = false;
    if (mode == BoundMode::per_axis) {
        b.upper_x = rank_value(xs, upper_rank, &cu);
        b.lower_x = rank_value(xs, lower_rank, &cl);
        b.clamped_x = cu || cl;
        b.upper_y = rank_value(ys, upper_rank, &cu);
        b.lower_y = rank_value(ys, lower_rank, &cl);
        b.clamped_y = cu || cl;
    } else {
        PATCHSAE_REQUIRE(!x.empty() && !y.empty(), "cannot derive bounds: an axis has no positive counts");
        auto pooled = xs;
        pooled.insert(pooled.end(), ys.begin(), ys.end());
        b.upper_x = b.upper_y = rank_value(pooled, upper_rank, &cu);
        b.lower_x = b.lower_y = rank_value(pooled, lower_rank, &cl);
        b.clamped_x = b.clamped_y = cu || cl;
    }
    return b;
}

Group classify_latent(double x, double y, const GroupBounds& b) {
    const bool x_high = x >= b.upper_x;
    const bool y_high = y >= b.upper_y;
    if (x_high && y_high) return Group::high;
    if (x_high && y <= b.lower_y) return Group::high_to_low;
    if (y_high && x <= b.lower_x) return Group::low_to_high;
    return Group::neither;
}

std::vector<LatentGroup> assign_groups(const SparseCounts& x, const SparseCounts& y, const GroupBounds& bounds) {
    std::set<LatentId> ids;
    for (const auto& [s, c] : x)
        if (c > 0) ids.insert(s);
    for (const auto& [s, c] : y)
        if (c > 0) ids.insert(s);
    std::vector<LatentGroup> out;
    out.reserve(ids.size());
    for (LatentId s : ids) {
        LatentGroup g{s, count_at(x, s), count_at(y, s), Group::neither};
        g.group = classify_latent(static_cast<double>(g.x), static_cast<double>(g.y), bounds);
        out.push_back(g);
    }
    return out;
}

GroupCounts count_groups(const std::vector<LatentGroup>& groups) {
    GroupCounts c;
    for (const auto& g : groups) {
        switch (g.group) {
        case Group::high: ++c.high; break;
        case Group::high_to_low: ++c.high_to_low; break;
        case Group::low_to_high: ++c.low_to_high; break;
        case Group::neither: ++c.neither; break;
        }
    }
    return c;
}

std::optional<double> pearson_r(const std::vector<LatentGroup>& points) {
    if (points.size() < 2) return std::nullopt;
    double mx = 0.0;
    double my = 0.0;
    for (const auto& p : points) {
        mx += static_cast<double>(p.x);
        my += static_cast<double>(p.y);
    }
    mx /= static_cast<double>(points.size());
    my /= static_cast<double>(points.size());
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (const auto& p : points) {
        const double dx = static_cast<double>(p.x) - mx;
        const double dy = static_cast<double>(p.y) - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

const SplitComparison& ComparisonReport::split(EvalSplit s) const {
    for (const auto& sc : splits)
        if (sc.split == s) return sc;
    throw LookupError("comparison report has no split '" + to_string(s) + "'");
}

namespace {

SparseCounts lookup(const std::map<int, SparseCounts>& counts, int c) {
    const auto it = counts.find(c);
    return it == counts.end() ? SparseCounts{} : it->second;
}

void compare_entity(SplitComparison& out, std::vector<LatentGroup>& pooled, std::string entity, const SparseCounts& x,
                    const SparseCounts& y, const CompareOptions& options) {
    if (x.empty() || y.empty()) {
        out.skipped.push_back(entity);
        return;
    }
    EntityComparison e;
    e.entity_id = std::move(entity);
    e.bounds = derive_bounds(x, y, options.upper_rank, options.lower_rank, options.bound_mode);
    e.latents = assign_groups(x, y, e.bounds);
    e.counts = count_groups(e.latents);
    e.pearson_r = pearson_r(e.latents);
    pooled.insert(pooled.end(), e.latents.begin(), e.latents.end());
    out.entities.push_back(std::move(e));
}

} // namespace

SplitComparison compare_split(const std::map<int, SparseCounts>& a, const std::map<int, SparseCounts>& b,
                              EvalSplit split, int n_classes, const CompareOptions& options) {
    PATCHSAE_REQUIRE(n_classes >= 1, "compare: need at least one class");
    SplitComparison out;
    out.split = split;
    const auto class_ids = split_classes(n_classes, split);
    std::vector<LatentGroup> pooled;
    if (options.level == Level::class_level) {
        for (int c : class_ids) compare_entity(out, pooled, std::to_string(c), lookup(a, c), lookup(b, c), options);
    } else if (options.level == Level::dataset) {
        SparseCounts x;
        SparseCounts y;
        for (int c : class_ids) {
            add_counts(x, lookup(a, c));
            add_counts(y, lookup(b, c));
        }
        compare_entity(out, pooled, "dataset", x, y, options);
    } else {
        throw ContractError("compare supports class and dataset levels only");
    }
    if (!out.entities.empty()) {
        const auto n = static_cast<double>(out.entities.size());
        for (const auto& e : out.entities) {
            out.average_high += static_cast<double>(e.counts.high) / n;
            out.average_high_to_low += static_cast<double>(e.counts.high_to_low) / n;
            out.average_low_to_high += static_cast<double>(e.counts.low_to_high) / n;
        }
    }
    out.pearson_r = pearson_r(pooled);
    return out;
}

namespace {

std::map<int, SparseCounts> class_counts(const ActivationShard& shard, const SaeParamsf& params,
                                         const AggregationConfig& cfg) {
    std::map<int, SparseCounts> out;
    for (std::size_t i = 0; i < shard.size(); ++i) {
        const auto& rec = shard.records()[i];
        PATCHSAE_REQUIRE(rec.labeled(), "compare: image '" + rec.image_id + "' has no label");
        const RowMatrixf h = encode(shard.tokens(i), params);
        add_counts(out[rec.label_id], image_counts(h, cfg));
    }
    return out;
}

} // namespace

ComparisonReport compare_report(const ActivationShard& shard_a, const ActivationShard& shard_b,
                                const SaeParamsf& params, const CompareOptions& options) {
    options.aggregation.validate();
    PATCHSAE_REQUIRE(shard_a.spec().d_vit == params.d_vit() && shard_b.spec().d_vit == params.d_vit(),
                     "compare: shard d_vit does not match the sae");
    PATCHSAE_REQUIRE(shard_a.size() == shard_b.size(), "compare: shards cover different image sets");
    std::map<std::string, int> labels;
    std::string dataset;
    int max_label = -1;
    for (const auto& r : shard_a.records()) {
        labels[r.image_id] = r.label_id;
        max_label = std::max(max_label, r.label_id);
        if (dataset.empty()) dataset = r.dataset_name;
    }
    for (const auto& r : shard_b.records()) {
        const auto it = labels.find(r.image_id);
        PATCHSAE_REQUIRE(it != labels.end(), "compare: shards cover different image sets ('" + r.image_id +
                                                 "' only in " + shard_b.spec().backbone_id + ")");
        PATCHSAE_REQUIRE(it->second == r.label_id, "compare: image '" + r.image_id + "' has different labels");
    }

    ComparisonReport report;
    report.dataset = dataset;
    report.backbone_a = shard_a.spec().backbone_id;
    report.backbone_b = shard_b.spec().backbone_id;
    report.options = options;
    report.n_images = static_cast<int>(shard_a.size());
    const int n_classes = options.n_classes > 0 ? options.n_classes : max_label + 1;
    PATCHSAE_REQUIRE(max_label < n_classes, "compare: label id exceeds n_classes");
    report.options.n_classes = n_classes;

    const auto a = class_counts(shard_a, params, options.aggregation);
    const auto b = class_counts(shard_b, params, options.aggregation);
    for (auto s : options.splits) report.splits.push_back(compare_split(a, b, s, n_classes, options));
    return report;
}

void attach_accuracy(ComparisonReport& report, const EvalReport& zero_shot, const EvalReport& adapted) {
    PATCHSAE_REQUIRE(zero_shot.split == adapted.split, "delta: eval reports cover different splits");
    for (auto& s : report.splits) {
        if (s.split != zero_shot.split) continue;
        s.zero_shot_accuracy = zero_shot.accuracy;
        s.adapted_accuracy = adapted.accuracy;
        s.delta = improvement_rate(zero_shot.accuracy, adapted.accuracy);
        return;
    }
    throw LookupError("delta: comparison has no split '" + to_string(zero_shot.split) + "'");
}

namespace {

io::Json opt_json(const std::optional<double>& v) { return v ? io::Json(io::round_sig9(*v)) : io::Json(nullptr); }

io::Json counts_obj(const GroupCounts& c) {
    return {{"high", c.high}, {"high_to_low", c.high_to_low}, {"low_to_high", c.low_to_high}, {"neither", c.neither}};
}

io::Json bounds_json(const GroupBounds& b) {
    return {{"upper_rank", b.upper_rank}, {"lower_rank", b.lower_rank}, {"mode", to_string(b.mode)},
            {"upper_x", b.upper_x},       {"lower_x", b.lower_x},       {"upper_y", b.upper_y},
            {"lower_y", b.lower_y},       {"clamped_x", b.clamped_x},   {"clamped_y", b.clamped_y}};
}

} // namespace

io::Json comparison_report_json(const ComparisonReport& r) {
    io::Json splits = io::Json::array();
    for (const auto& s : r.splits) {
        io::Json entities = io::Json::array();
        for (const auto& e : s.entities)
            entities.push_back({{"entity_id", e.entity_id},
                                {"bounds", bounds_json(e.bounds)},
                                {"counts", counts_obj(e.counts)},
                                {"active_latents", e.latents.size()},
                                {"pearson_r", opt_json(e.pearson_r)}});
        splits.push_back({{"split", to_string(s.split)},
                          {"entities", entities},
                          {"skipped", s.skipped},
                          {"average", {{"high", io::round_sig9(s.average_high)},
                                       {"high_to_low", io::round_sig9(s.average_high_to_low)},
                                       {"low_to_high", io::round_sig9(s.average_low_to_high)}}},
                          {"pearson_r", opt_json(s.pearson_r)},
                          {"zero_shot_accuracy", opt_json(s.zero_shot_accuracy)},
                          {"adapted_accuracy", opt_json(s.adapted_accuracy)},
                          {"delta", opt_json(s.delta)}});
    }
    return {{"format_version", 1},
            {"dataset", r.dataset},
            {"backbone_a", r.backbone_a},
            {"backbone_b", r.backbone_b},
            {"level", to_string(r.options.level)},
            {"tau", r.options.aggregation.tau},
            {"include_cls", r.options.aggregation.include_cls},
            {"upper_rank", r.options.upper_rank},
            {"lower_rank", r.options.lower_rank},
            {"bound_mode", to_string(r.options.bound_mode)},
            {"n_classes", r.options.n_classes},
            {"n_images", r.n_images},
            {"splits", splits}};
}

std::string scatter_csv(const ComparisonReport& r) {
    std::ostringstream out;
    out << "split,entity_id,latent_id,x,y,group\n";
    for (const auto& s : r.splits)
        for (const auto& e : s.entities)
            for (const auto& g : e.latents)
                out << to_string(s.split) << ',' << e.entity_id << ',' << g.latent_id << ',' << g.x << ',' << g.y << ','
                    << to_string(g.group) << '\n';
    return out.str();
}

} // namespace patchsae
