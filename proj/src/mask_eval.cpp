#include "patchsae/mask_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace patchsae {

void ClassEmbeddings::validate() const {
    PATCHSAE_REQUIRE(matrix.rows() >= 2, "class embeddings: need at least 2 classes");
    PATCHSAE_REQUIRE(class_names.empty() || static_cast<Eigen::Index>(class_names.size()) == matrix.rows(),
                     "class embeddings: class_names length does not match matrix rows");
    PATCHSAE_REQUIRE(matrix.allFinite(), "class embeddings: non-finite values");
    for (Eigen::Index c = 0; c < matrix.rows(); ++c)
        PATCHSAE_REQUIRE(std::abs(matrix.row(c).norm() - 1.0f) <= 1e-5f,
                         "class embeddings: row " + std::to_string(c) + " is not unit norm");
}

void write_class_embeddings(const ClassEmbeddings& emb, const std::filesystem::path& dir) {
    emb.validate();
    io::Json meta = {{"format_version", 1},
                     {"dataset_name", emb.dataset_name},
                     {"class_names", emb.class_names},
                     {"provenance", emb.provenance},
                     {"classes", emb.matrix.rows()},
                     {"embed_dim", emb.matrix.cols()}};
    io::write_json(dir / "class_embeddings.json", meta);
    io::write_f32(dir / "class_embeddings.bin",
                  std::span<const float>(emb.matrix.data(), static_cast<std::size_t>(emb.matrix.size())));
}

ClassEmbeddings read_class_embeddings(const std::filesystem::path& dir) {
    const io::Json meta = io::read_json(dir / "class_embeddings.json");
    ClassEmbeddings emb;
    int classes = 0;
    int dim = 0;
    try {
        emb.dataset_name = meta.value("dataset_name", "");
        emb.class_names = meta.value("class_names", std::vector<std::string>{});
        emb.provenance = meta.value("provenance", "");
        classes = meta.at("classes");
        dim = meta.at("embed_dim");
    } catch (const io::Json::exception& e) {
        throw FormatError(dir.string() + "/class_embeddings.json: " + e.what());
    }
    const auto values = io::read_f32(dir / "class_embeddings.bin");
    if (values.size() != static_cast<std::size_t>(classes) * dim)
        throw FormatError(dir.string() + "/class_embeddings.bin: size does not match [classes, embed_dim]");
    emb.matrix = Eigen::Map<const RowMatrixf>(values.data(), classes, dim);
    emb.validate();
    return emb;
}

std::string to_string(MaskMode mode) {
    switch (mode) {
    case MaskMode::on_topk: return "on_topk";
    case MaskMode::off_topk: return "off_topk";
    case MaskMode::on_random: return "on_random";
    case MaskMode::off_random: return "off_random";
    case MaskMode::on_dataset_topk: return "on_dataset_topk";
    case MaskMode::off_dataset_topk: return "off_dataset_topk";
    case MaskMode::identity: return "identity";
    case MaskMode::zero: return "zero";
    }
    return "identity";
}

MaskMode mask_mode_from_string(const std::string& text) {
    for (auto m : {MaskMode::on_topk, MaskMode::off_topk, MaskMode::on_random, MaskMode::off_random,
                   MaskMode::on_dataset_topk, MaskMode::off_dataset_topk, MaskMode::identity, MaskMode::zero})
        if (to_string(m) == text) return m;
    throw ConfigError("unknown mask mode '" + text + "'");
}

std::string to_string(SelectionSource source) {
    switch (source) {
    case SelectionSource::class_level: return "class_level";
    case SelectionSource::dataset_level: return "dataset_level";
    case SelectionSource::random: return "random";
    }
    return "class_level";
}

SelectionSource selection_source_from_string(const std::string& text) {
    for (auto s : {SelectionSource::class_level, SelectionSource::dataset_level, SelectionSource::random})
        if (to_string(s) == text) return s;
    throw ConfigError("unknown selection source '" + text + "'");
}

std::string to_string(ErrorTerm term) { return term == ErrorTerm::add_residual ? "add_residual" : "none"; }

ErrorTerm error_term_from_string(const std::string& text) {
    if (text == "none") return ErrorTerm::none;
    if (text == "add_residual") return ErrorTerm::add_residual;
    throw ConfigError("unknown error term '" + text + "'");
}

std::string to_string(MaskApplication application) {
    return application == MaskApplication::per_candidate ? "per_candidate" : "ground_truth";
}

MaskApplication mask_application_from_string(const std::string& text) {
    if (text == "ground_truth") return MaskApplication::ground_truth;
    if (text == "per_candidate") return MaskApplication::per_candidate;
    throw ConfigError("unknown mask application '" + text + "'");
}

std::string to_string(EvalSplit split) {
    switch (split) {
    case EvalSplit::base: return "base";
    case EvalSplit::novel: return "novel";
    case EvalSplit::full: return "full";
    }
    return "full";
}

EvalSplit eval_split_from_string(const std::string& text) {
    if (text == "base") return EvalSplit::base;
    if (text == "novel") return EvalSplit::novel;
    if (text == "full" || text == "all") return EvalSplit::full;
    throw ConfigError("unknown split '" + text + "'");
}

SelectionSource default_source(MaskMode mode) {
    switch (mode) {
    case MaskMode::on_random:
    case MaskMode::off_random: return SelectionSource::random;
    case MaskMode::on_dataset_topk:
    case MaskMode::off_dataset_topk: return SelectionSource::dataset_level;
    default: return SelectionSource::class_level;
    }
}

bool MaskSpec::class_dependent() const {
    return mode == MaskMode::on_topk || mode == MaskMode::off_topk || mode == MaskMode::on_random ||
           mode == MaskMode::off_random;
}

const LatentMask& MaskSpec::mask_for(int class_id) const {
    if (!class_dependent()) return shared;
    const auto it = per_class_masks.find(class_id);
    if (it == per_class_masks.end()) throw ContractError("no mask for class " + std::to_string(class_id));
    return it->second;
}

namespace {

LatentMask mask_from(const std::vector<LatentId>& selected, int d_sae, bool on) {
    LatentMask mask(static_cast<std::size_t>(d_sae), on ? 0 : 1);
    for (auto s : selected) mask[static_cast<std::size_t>(s)] = on ? 1 : 0;
    return mask;
}

std::vector<LatentId> ids_of(const std::vector<std::pair<LatentId, std::int64_t>>& ranked) {
    std::vector<LatentId> ids;
    for (const auto& [s, c] : ranked) ids.push_back(s);
    return ids;
}

} // namespace

MaskSpec build_masks(const std::map<int, SparseCounts>& class_counts, const std::vector<int>& class_ids, MaskMode mode,
                     int k, int d_sae, std::uint64_t seed, std::string selection_backbone_id) {
    PATCHSAE_REQUIRE(d_sae >= 1, "build_masks: d_sae must be >= 1");
    PATCHSAE_REQUIRE(k >= 0, "build_masks: k must be >= 0");
    PATCHSAE_REQUIRE(k <= d_sae, "build_masks: k = " + std::to_string(k) + " exceeds d_sae = " + std::to_string(d_sae));
    MaskSpec spec;
    spec.mode = mode;
    spec.k = k;
    spec.d_sae = d_sae;
    spec.seed = seed;
    spec.selection_source = default_source(mode);
    spec.selection_backbone_id = std::move(selection_backbone_id);

    switch (mode) {
    case MaskMode::identity: spec.shared.assign(static_cast<std::size_t>(d_sae), 1); break;
    case MaskMode::zero: spec.shared.assign(static_cast<std::size_t>(d_sae), 0); break;
    case MaskMode::on_topk:
    case MaskMode::off_topk:
        for (int c : class_ids) {
            const auto it = class_counts.find(c);
            if (it == class_counts.end()) throw ContractError("build_masks: no class-level counts for class " + std::to_string(c));
            spec.selected[c] = k > 0 ? ids_of(top_latents(it->second, k)) : std::vector<LatentId>{};
            spec.per_class_masks[c] = mask_from(spec.selected[c], d_sae, mode == MaskMode::on_topk);
        }
        break;
    case MaskMode::on_dataset_topk:
    case MaskMode::off_dataset_topk: {
        SparseCounts dataset;
        for (const auto& [c, counts] : class_counts) add_counts(dataset, counts);
        const auto ids = k > 0 ? ids_of(top_latents(dataset, k)) : std::vector<LatentId>{};
        for (int c : class_ids) spec.selected[c] = ids;
        spec.shared = mask_from(ids, d_sae, mode == MaskMode::on_dataset_topk);
        break;
    }
    case MaskMode::on_random:
    case MaskMode::off_random:
        for (int c : class_ids) {
            std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(c));
            std::vector<LatentId> pool(static_cast<std::size_t>(d_sae));
            std::iota(pool.begin(), pool.end(), 0);
            for (int i = 0; i < k; ++i) {
                std::uniform_int_distribution<int> pick(i, d_sae - 1);
                std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
            }
            spec.selected[c] = std::vector<LatentId>(pool.begin(), pool.begin() + k);
            spec.per_class_masks[c] = mask_from(spec.selected[c], d_sae, mode == MaskMode::on_random);
        }
        break;
    }
    return spec;
}

RowMatrixf substituted_tokens(const RowMatrixf& tokens, const SaeParamsf& params, const LatentMask& mask,
                              ErrorTerm error_term) {
    PATCHSAE_REQUIRE(tokens.cols() == params.d_vit(), "substitution: token width does not match the sae");
    PATCHSAE_REQUIRE(static_cast<int>(mask.size()) == params.d_sae(), "substitution: mask length does not match d_sae");
    const RowMatrixf h = encode(tokens, params);
    Eigen::Map<const Eigen::Matrix<std::uint8_t, 1, Eigen::Dynamic>> m(mask.data(), params.d_sae());
    const RowMatrixf masked = h.array().rowwise() * m.cast<float>().array();
    RowMatrixf out = decode(masked, params);
    if (error_term == ErrorTerm::add_residual) out += tokens - decode(h, params);
    return out;
}

Vectorf substituted_embedding(const RowMatrixf& tokens, const RowMatrixf& extra, const SaeParamsf& params,
                              const LatentMask& mask, const Backbone& backbone, int hook_layer, ErrorTerm error_term) {
    return backbone.run_tail(substituted_tokens(tokens, params, mask, error_term), extra, hook_layer);
}

Classification classify(const Vectorf& embedding, const RowMatrixf& class_rows) {
    PATCHSAE_REQUIRE(embedding.size() == class_rows.cols(), "classify: embedding dimension does not match class rows");
    const float norm = embedding.norm();
    PATCHSAE_REQUIRE(norm > 0.0f && std::isfinite(norm), "classify: zero or non-finite embedding");
    Classification out;
    out.logits = class_rows * (embedding / norm);
    out.predicted = 0;
    for (Eigen::Index c = 1; c < out.logits.size(); ++c)
        if (out.logits[c] > out.logits[out.predicted]) out.predicted = static_cast<int>(c);
    return out;
}

std::vector<int> split_classes(int n_classes, EvalSplit split) {
    const int base = (n_classes + 1) / 2;
    std::vector<int> ids;
    const int lo = split == EvalSplit::novel ? base : 0;
    const int hi = split == EvalSplit::base ? base : n_classes;
    for (int c = lo; c < hi; ++c) ids.push_back(c);
    return ids;
}

namespace {

void check_backbone(const ActivationShard& shard, const Backbone& backbone) {
    const auto& s = shard.spec();
    const auto& c = backbone.config();
    PATCHSAE_REQUIRE(s.tokens_per_image == c.tokens() && s.d_vit == c.width && s.extra_tokens == c.n_prompts &&
                         s.hook_layer <= c.layers,
                     "backbone '" + backbone.id() + "' does not match the shard geometry of '" + s.backbone_id + "'");
}

} // namespace

EvalReport evaluate(const ActivationShard& shard, const SaeParamsf& params, const MaskSpec& masks,
                    const ClassEmbeddings& class_embeddings, const Backbone& backbone, const EvalOptions& options) {
    class_embeddings.validate();
    check_backbone(shard, backbone);
    PATCHSAE_REQUIRE(!options.substitute || shard.spec().d_vit == params.d_vit(), "evaluate: shard d_vit does not match the sae");
    PATCHSAE_REQUIRE(class_embeddings.matrix.cols() == backbone.config().embed_dim,
                     "evaluate: class embedding dimension does not match the backbone");

    EvalReport report;
    report.dataset = class_embeddings.dataset_name;
    report.split = options.split;
    report.backbone_id = backbone.id();
    report.class_ids = split_classes(class_embeddings.classes(), options.split);
    report.substituted = options.substitute;
    report.error_term = options.error_term;
    report.application = options.application;
    if (options.substitute) report.mask = masks;

    const auto n = report.class_ids.size();
    std::map<int, int> position;
    RowMatrixf rows(static_cast<Eigen::Index>(n), class_embeddings.matrix.cols());
    for (std::size_t j = 0; j < n; ++j) {
        position[report.class_ids[j]] = static_cast<int>(j);
        rows.row(static_cast<Eigen::Index>(j)) = class_embeddings.matrix.row(report.class_ids[j]);
    }
    report.confusion.assign(n, std::vector<std::int64_t>(n, 0));
    const int hook = shard.spec().hook_layer;

    for (std::size_t i = 0; i < shard.size(); ++i) {
        const auto& rec = shard.records()[i];
        PATCHSAE_REQUIRE(rec.labeled(), "evaluate: image '" + rec.image_id + "' has no label");
        PATCHSAE_REQUIRE(rec.label_id < class_embeddings.classes(),
                         "evaluate: label " + std::to_string(rec.label_id) + " has no class embedding");
        const auto pos = position.find(rec.label_id);
        if (pos == position.end()) continue;
        const RowMatrixf tokens = shard.tokens(i);
        const RowMatrixf extra = shard.extra(i);
        int predicted = 0;
        if (!options.substitute) {
            predicted = classify(backbone.run_tail(tokens, extra, hook), rows).predicted;
        } else if (options.application == MaskApplication::ground_truth || !masks.class_dependent()) {
            const auto& mask = masks.mask_for(rec.label_id);
            predicted = classify(substituted_embedding(tokens, extra, params, mask, backbone, hook, options.error_term), rows)
                            .predicted;
        } else {
            Vectorf scores(static_cast<Eigen::Index>(n));
            for (std::size_t j = 0; j < n; ++j) {
                const Vectorf emb = substituted_embedding(tokens, extra, params, masks.mask_for(report.class_ids[j]),
                                                          backbone, hook, options.error_term);
                PATCHSAE_REQUIRE(emb.norm() > 0.0f, "evaluate: zero embedding");
                scores[static_cast<Eigen::Index>(j)] = rows.row(static_cast<Eigen::Index>(j)).dot(emb) / emb.norm();
            }
            for (Eigen::Index j = 1; j < scores.size(); ++j)
                if (scores[j] > scores[predicted]) predicted = static_cast<int>(j);
        }
        ++report.confusion[static_cast<std::size_t>(pos->second)][static_cast<std::size_t>(predicted)];
        ++report.evaluated;
    }

    std::int64_t correct = 0;
    report.per_class_accuracy.assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const auto row_total = std::accumulate(report.confusion[j].begin(), report.confusion[j].end(), std::int64_t{0});
        correct += report.confusion[j][j];
        if (row_total > 0)
            report.per_class_accuracy[j] = 100.0 * static_cast<double>(report.confusion[j][j]) / static_cast<double>(row_total);
    }
    report.accuracy = report.evaluated > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(report.evaluated) : 0.0;
    return report;
}

double cross_entropy(const Vectorf& logits, int target) {
    PATCHSAE_REQUIRE(target >= 0 && target < logits.size(), "cross_entropy: target out of range");
    const Vectord l = logits.cast<double>();
    const double peak = l.maxCoeff();
    const double lse = peak + std::log((l.array() - peak).exp().sum());
    return lse - l[target];
}

ContrastiveMetrics contrastive_metrics(const ActivationShard& shard, const SaeParamsf& params,
                                       const ClassEmbeddings& class_embeddings, const Backbone& backbone) {
    class_embeddings.validate();
    check_backbone(shard, backbone);
    const LatentMask identity(static_cast<std::size_t>(params.d_sae()), 1);
    const int hook = shard.spec().hook_layer;
    ContrastiveMetrics out;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < shard.size(); ++i) {
        const auto& rec = shard.records()[i];
        if (!rec.labeled()) continue;
        PATCHSAE_REQUIRE(rec.label_id < class_embeddings.classes(), "contrastive: label without class embedding");
        const RowMatrixf tokens = shard.tokens(i);
        const RowMatrixf extra = shard.extra(i);
        const auto with_sae = classify(substituted_embedding(tokens, extra, params, identity, backbone, hook, ErrorTerm::none),
                                       class_embeddings.matrix);
        const auto native = classify(backbone.run_tail(tokens, extra, hook), class_embeddings.matrix);
        out.cl_with_sae += cross_entropy(with_sae.logits, rec.label_id);
        out.cl_native += cross_entropy(native.logits, rec.label_id);
        ++n;
    }
    if (n > 0) {
        out.cl_with_sae /= static_cast<double>(n);
        out.cl_native /= static_cast<double>(n);
    }
    return out;
}

double improvement_rate(double zero_shot_accuracy, double adapted_accuracy) {
    if (zero_shot_accuracy == 100.0)
        throw ContractError("improvement rate is undefined for a zero-shot accuracy of 100%");
    PATCHSAE_REQUIRE(zero_shot_accuracy >= 0.0 && zero_shot_accuracy < 100.0,
                     "improvement rate: zero-shot accuracy must lie in [0, 100)");
    return 100.0 * (adapted_accuracy - zero_shot_accuracy) / (100.0 - zero_shot_accuracy);
}

io::Json mask_summary_json(const MaskSpec& masks) {
    io::Json selected = io::Json::object();
    for (const auto& [c, ids] : masks.selected) selected[std::to_string(c)] = ids;
    return {{"mode", to_string(masks.mode)},
            {"k", masks.k},
            {"selection_source", to_string(masks.selection_source)},
            {"selection_backbone_id", masks.selection_backbone_id},
            {"seed", masks.seed},
            {"d_sae", masks.d_sae},
            {"selected_latents", selected}};
}

io::Json eval_report_json(const EvalReport& r) {
    io::Json per_class = io::Json::array();
    for (double a : r.per_class_accuracy) per_class.push_back(io::round_sig9(a));
    return {{"format_version", 1},
            {"dataset", r.dataset},
            {"split", to_string(r.split)},
            {"backbone_id", r.backbone_id},
            {"class_ids", r.class_ids},
            {"accuracy", io::round_sig9(r.accuracy)},
            {"per_class_accuracy", per_class},
            {"confusion_matrix", r.confusion},
            {"evaluated", r.evaluated},
            {"reconstruction_flag", r.substituted ? "substituted" : "native"},
            {"error_term", to_string(r.error_term)},
            {"mask_application", to_string(r.application)},
            {"mask", r.mask ? mask_summary_json(*r.mask) : io::Json(nullptr)}};
}

} // namespace patchsae
