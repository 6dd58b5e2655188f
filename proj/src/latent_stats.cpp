#include "patchsae/latent_stats.hpp"

#include <algorithm>
#include <cmath>

namespace patchsae {

bool ranks_before(const ReferenceImage& a, const ReferenceImage& b) {
    if (a.mean_activation != b.mean_activation) return a.mean_activation > b.mean_activation;
    return a.image_id < b.image_id;
}

StatsAccumulator::StatsAccumulator(int d_sae, int k)
    : d_sae_(d_sae),
      k_(k),
      image_count_(static_cast<std::size_t>(d_sae), 0),
      value_sum_(static_cast<std::size_t>(d_sae), 0.0),
      positive_count_(static_cast<std::size_t>(d_sae), 0),
      label_sums_(static_cast<std::size_t>(d_sae)),
      top_(static_cast<std::size_t>(d_sae)) {
    PATCHSAE_REQUIRE(d_sae >= 1, "stats: d_sae must be >= 1");
    PATCHSAE_REQUIRE(k >= 1, "stats: k must be >= 1");
}

void StatsAccumulator::offer(LatentId s, ReferenceImage candidate) {
    auto& top = top_[static_cast<std::size_t>(s)];
    if (static_cast<int>(top.size()) == k_ && !ranks_before(candidate, top.back())) return;
    top.insert(std::upper_bound(top.begin(), top.end(), candidate, ranks_before), std::move(candidate));
    if (static_cast<int>(top.size()) > k_) top.pop_back();
}

void StatsAccumulator::add_image(const ImageRecord& record, const RowMatrixf& h) {
    PATCHSAE_REQUIRE(h.cols() == d_sae_, "stats: latent dimension mismatch");
    PATCHSAE_REQUIRE(h.rows() >= 1, "stats: image without tokens");
    ++n_images_;
    const auto tokens = static_cast<double>(h.rows());
    for (Eigen::Index s = 0; s < h.cols(); ++s) {
        double sum = 0.0;
        std::int64_t positives = 0;
        for (Eigen::Index t = 0; t < h.rows(); ++t) {
            const float v = h(t, s);
            if (v > 0.0f) {
                sum += v;
                ++positives;
            }
        }
        if (positives == 0) continue;
        const auto idx = static_cast<std::size_t>(s);
        ++image_count_[idx];
        value_sum_[idx] += sum;
        positive_count_[idx] += positives;
        if (record.labeled()) label_sums_[idx][record.label_id] += sum;
        offer(static_cast<LatentId>(s), {record.image_id, sum / tokens, record.label_id});
    }
}

void StatsAccumulator::merge(const StatsAccumulator& other) {
    PATCHSAE_REQUIRE(other.d_sae_ == d_sae_ && other.k_ == k_, "stats: cannot merge accumulators with different d_sae or k");
    n_images_ += other.n_images_;
    for (std::size_t s = 0; s < image_count_.size(); ++s) {
        image_count_[s] += other.image_count_[s];
        value_sum_[s] += other.value_sum_[s];
        positive_count_[s] += other.positive_count_[s];
        for (const auto& [label, sum] : other.label_sums_[s]) label_sums_[s][label] += sum;
        for (const auto& ref : other.top_[s]) offer(static_cast<LatentId>(s), ref);
    }
}

StatsAccumulator& accumulate(const ActivationShard& shard, const SaeParamsf& params, StatsAccumulator& acc) {
    PATCHSAE_REQUIRE(shard.spec().d_vit == params.d_vit(), "stats: shard d_vit does not match the sae");
    PATCHSAE_REQUIRE(params.d_sae() == acc.d_sae(), "stats: accumulator d_sae does not match the sae");
    for (std::size_t i = 0; i < shard.size(); ++i) acc.add_image(shard.records()[i], encode(shard.tokens(i), params));
    return acc;
}

StatsAccumulator merge(const StatsAccumulator& a, const StatsAccumulator& b) {
    StatsAccumulator out = a;
    out.merge(b);
    return out;
}

double label_entropy(const std::map<int, double>& sums) {
    double total = 0.0;
    for (const auto& [label, sum] : sums) total += sum;
    if (total <= 0.0) return 0.0;
    double entropy = 0.0;
    for (const auto& [label, sum] : sums) {
        if (sum <= 0.0) continue;
        const double p = sum / total;
        entropy -= p * std::log(p);
    }
    return std::max(0.0, entropy);
}

LatentStats finalize(const StatsAccumulator& acc) {
    PATCHSAE_REQUIRE(acc.n_images_seen() >= 1, "stats: finalize needs at least one image");
    LatentStats out;
    out.n_images = acc.n_images_seen();
    out.k = acc.k();
    out.latents.resize(static_cast<std::size_t>(acc.d_sae()));
    for (std::size_t s = 0; s < out.latents.size(); ++s) {
        auto& l = out.latents[s];
        l.image_count = acc.activation_image_count()[s];
        l.positive_token_count = acc.activation_positive_count()[s];
        l.frequency = static_cast<double>(l.image_count) / static_cast<double>(out.n_images);
        l.mean_activation = l.positive_token_count > 0
                                ? acc.activation_value_sum()[s] / static_cast<double>(l.positive_token_count)
                                : 0.0;
        l.label_entropy = label_entropy(acc.label_sums()[s]);
        l.reference_images = acc.top_images()[s];
        std::vector<double> labels;
        for (const auto& r : l.reference_images)
            if (r.label_id >= 0) labels.push_back(r.label_id);
        if (!labels.empty()) {
            double mean = 0.0;
            for (double v : labels) mean += v;
            mean /= static_cast<double>(labels.size());
            double var = 0.0;
            for (double v : labels) var += (v - mean) * (v - mean);
            l.label_std = std::sqrt(var / static_cast<double>(labels.size()));
        }
    }
    return out;
}

ScatterTable export_scatter(const LatentStats& stats) {
    ScatterTable table;
    for (std::size_t s = 0; s < stats.latents.size(); ++s) {
        const auto& l = stats.latents[s];
        if (l.frequency <= 0.0) {
            ++table.dead_count;
            continue;
        }
        table.rows.push_back({static_cast<LatentId>(s), std::log10(l.frequency), std::log10(l.mean_activation),
                              l.label_entropy});
    }
    return table;
}

io::Json latent_stats_json(const LatentStats& stats, const std::string& backbone_id) {
    io::Json latents = io::Json::array();
    for (std::size_t s = 0; s < stats.latents.size(); ++s) {
        const auto& l = stats.latents[s];
        latents.push_back({{"latent_id", s},
                           {"frequency", io::round_sig9(l.frequency)},
                           {"mean_activation", io::round_sig9(l.mean_activation)},
                           {"label_entropy", io::round_sig9(l.label_entropy)},
                           {"label_std", io::round_sig9(l.label_std)},
                           {"image_count", l.image_count},
                           {"positive_token_count", l.positive_token_count}});
    }
    return {{"format_version", 1},
            {"backbone_id", backbone_id},
            {"n_images", stats.n_images},
            {"k", stats.k},
            {"entropy_log_base", "e"},
            {"frequency_unit", "images"},
            {"latents", latents}};
}

io::Json refimgs_json(const LatentStats& stats) {
    io::Json out = io::Json::object();
    for (std::size_t s = 0; s < stats.latents.size(); ++s) {
        io::Json list = io::Json::array();
        for (const auto& r : stats.latents[s].reference_images)
            list.push_back({r.image_id, io::round_sig9(r.mean_activation), r.label_id});
        out[std::to_string(s)] = list;
    }
    return out;
}

LatentStats read_latent_stats(const std::filesystem::path& dir) {
    const io::Json doc = io::read_json(dir / "latent_stats.json");
    const io::Json refs = io::read_json(dir / "refimgs.json");
    LatentStats out;
    try {
        out.n_images = doc.at("n_images");
        out.k = doc.at("k");
        for (const auto& j : doc.at("latents")) {
            LatentStat l;
            l.frequency = j.at("frequency");
            l.mean_activation = j.at("mean_activation");
            l.label_entropy = j.at("label_entropy");
            l.label_std = j.at("label_std");
            l.image_count = j.value("image_count", 0);
            l.positive_token_count = j.value("positive_token_count", 0);
            const std::string key = std::to_string(j.at("latent_id").get<int>());
            if (refs.contains(key))
                for (const auto& r : refs.at(key))
                    l.reference_images.push_back({r.at(0).get<std::string>(), r.at(1).get<double>(),
                                                  r.size() > 2 ? r.at(2).get<int>() : -1});
            out.latents.push_back(std::move(l));
        }
    } catch (const io::Json::exception& e) {
        throw FormatError(dir.string() + ": " + e.what());
    }
    return out;
}

} // namespace patchsae
