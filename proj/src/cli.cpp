#include "patchsae/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "patchsae/adapt_compare.hpp"
#include "patchsae/api.hpp"
#include "patchsae/concept_maps.hpp"
#include "patchsae/latent_stats.hpp"
#include "patchsae/mask_eval.hpp"
#include "patchsae/sae_train.hpp"
#include "patchsae/workspace.hpp"

namespace patchsae {

namespace fs = std::filesystem;
using io::Json;

namespace {

/// Per-invocation run-record: arguments, seeds, input/output hashes, timing.
struct Run {
    Workspace workspace;
    Json record;

    void input(const fs::path& p) { record["inputs"][fs::absolute(p).generic_string()] = artifact_hash(p); }
    void output(const fs::path& p) { record["outputs"][fs::absolute(p).generic_string()] = artifact_hash(p); }
};

std::vector<ActivationShard> load_shards(Run& run, const std::vector<std::string>& dirs) {
    std::vector<ActivationShard> out;
    for (const auto& d : dirs) {
        run.input(d);
        out.push_back(read_shard(d));
    }
    for (const auto& s : out)
        if (s.spec().backbone_id != out.front().spec().backbone_id || s.spec().hook_layer != out.front().spec().hook_layer)
            throw ConfigError("shards mix backbones or hook layers: " + s.spec().backbone_id + "@" +
                              std::to_string(s.spec().hook_layer) + " vs " + out.front().spec().backbone_id + "@" +
                              std::to_string(out.front().spec().hook_layer));
    return out;
}

Checkpoint load_sae(Run& run, const std::string& dir) {
    run.input(dir);
    return load_checkpoint(dir);
}

void require_width(const ActivationShard& shard, const SaeParamsf& params) {
    if (shard.spec().d_vit != params.d_vit())
        throw ContractError("dimension mismatch: shard d_vit " + std::to_string(shard.spec().d_vit) + " vs SAE d_vit " +
                            std::to_string(params.d_vit()));
}

std::string sae_hash(const Checkpoint& c) { return c.metadata.value("content_hash", ""); }

// ---------------------------------------------------------------------------

struct ExtractArgs {
    std::string images, backbone, out;
    int layer = 0;
    int batch_size = 64;
    bool no_thumbnails = false;
};

void cmd_extract(Run& run, const ExtractArgs& a) {
    run.input(a.images);
    const auto records = read_image_list(a.images);
    const auto backbone = load_backbone(a.backbone);
    const int layer = a.layer > 0 ? a.layer : std::max(1, backbone->config().layers - 1);
    std::function<void(const ImageRecord&, const ImageU8&)> thumbs;
    if (!a.no_thumbnails)
        thumbs = [&](const ImageRecord& rec, const ImageU8& img) {
            io::write_bytes(run.workspace.thumbnail_path(rec.image_id), encode_jpeg(resize_center_crop(img, 224), 85));
        };
    auto result = extract_activations(records, *backbone, layer, a.batch_size, thumbs);
    Json failures = Json::array();
    for (const auto& f : result.failures) {
        std::cerr << "extract: skipped " << f.image_id << ": " << f.message << "\n";
        failures.push_back({{"image_id", f.image_id}, {"message", f.message}});
    }
    run.record["failures"] = failures;
    if (result.shard.size() == 0) throw ContractError("extract: no image could be decoded");
    write_shard(result.shard, a.out);
    run.output(a.out);
    std::set<std::string> datasets;
    for (const auto& r : result.shard.records()) datasets.insert(r.dataset_name);
    run.workspace.register_artifact("shard", a.out,
                                    {{"backbone_id", backbone->id()},
                                     {"hook_layer", layer},
                                     {"n_images", result.shard.size()},
                                     {"datasets", datasets}});
    std::cout << "extracted " << result.shard.size() << " images (" << result.failures.size() << " skipped) from "
              << backbone->id() << " at layer " << layer << " -> " << a.out << "\n";
}

struct TrainArgs {
    std::vector<std::string> shards;
    std::string out;
    SaeConfig config;
    std::string bias_init = "geometric_median";
};

void cmd_train(Run& run, TrainArgs a) {
    const auto shards = load_shards(run, a.shards);
    const auto& spec = shards.front().spec();
    a.config.d_vit = spec.d_vit;
    a.config.decoder_bias_init = decoder_bias_init_from_string(a.bias_init);
    run.record["seeds"] = {{"train", a.config.seed}};
    const auto data = collect_tokens(shards, spec.d_vit);
    auto result = train_sae(data, a.config);
    Checkpoint ckpt{result.params, a.config, Json::object()};
    ckpt.metadata["backbone_id"] = spec.backbone_id;
    ckpt.metadata["hook_layer"] = spec.hook_layer;
    ckpt.metadata["train_report"] = {{"steps", result.report.steps},
                                     {"final_mse", result.report.final_mse},
                                     {"final_l1", result.report.final_l1},
                                     {"final_l0", result.report.final_l0},
                                     {"dead_latent_count", result.report.dead_latent_count}};
    save_checkpoint(ckpt, a.out);
    io::write_json(fs::path(a.out) / "train_report.json", result.report);
    run.output(a.out);
    run.workspace.register_artifact("checkpoint", a.out,
                                    {{"backbone_id", spec.backbone_id},
                                     {"hook_layer", spec.hook_layer},
                                     {"d_sae", a.config.d_sae()}});
    std::cout << "trained d_sae=" << a.config.d_sae() << " steps=" << result.report.steps
              << " mse=" << result.report.final_mse << " l0=" << result.report.final_l0
              << " dead=" << result.report.dead_latent_count << " -> " << a.out << "\n";
}

struct StatsArgs {
    std::vector<std::string> shards;
    std::string sae, out;
    int topk = 16;
};

void cmd_stats(Run& run, const StatsArgs& a) {
    const auto shards = load_shards(run, a.shards);
    const auto ckpt = load_sae(run, a.sae);
    StatsAccumulator total(ckpt.params.d_sae(), a.topk);
    for (const auto& shard : shards) {
        require_width(shard, ckpt.params);
        StatsAccumulator part(ckpt.params.d_sae(), a.topk);
        total.merge(accumulate(shard, ckpt.params, part));
    }
    const auto stats = finalize(total);
    const auto& backbone_id = shards.front().spec().backbone_id;
    const auto scatter = export_scatter(stats);
    Json doc = latent_stats_json(stats, backbone_id);
    doc["dead_latents"] = scatter.dead_count;
    doc["sae_hash"] = sae_hash(ckpt);
    const fs::path out = a.out;
    io::write_json(out / "latent_stats.json", doc);
    io::write_json(out / "refimgs.json", refimgs_json(stats));
    std::string csv = "latent_id,log10_frequency,log10_mean_activation,entropy\n";
    for (const auto& r : scatter.rows)
        csv += std::to_string(r.latent_id) + "," + io::Json(io::round_sig9(r.log10_frequency)).dump() + "," +
               io::Json(io::round_sig9(r.log10_mean_activation)).dump() + "," + io::Json(io::round_sig9(r.entropy)).dump() + "\n";
    io::write_text(out / "scatter.csv", csv);
    run.output(out);
    run.workspace.register_artifact("stats", out, {{"backbone_id", backbone_id}, {"sae_hash", sae_hash(ckpt)}});
    std::cout << "stats over " << stats.n_images << " images: " << scatter.rows.size() << " live, " << scatter.dead_count
              << " dead latents -> " << a.out << "\n";
}

struct ConceptsArgs {
    std::vector<std::string> shards;
    std::string sae, out, level = "class";
    double tau = 0.2;
    bool no_cls = false;
};

void cmd_concepts(Run& run, const ConceptsArgs& a) {
    const auto level = level_from_string(a.level);
    if (level == Level::patch) throw ConfigError("concepts: patch-level counts are not exported (use mask)");
    const auto shards = load_shards(run, a.shards);
    const auto ckpt = load_sae(run, a.sae);
    AggregationConfig cfg;
    cfg.tau = a.tau;
    cfg.include_cls = !a.no_cls;
    cfg.grid_h = shards.front().spec().grid_h;
    cfg.grid_w = shards.front().spec().grid_w;
    cfg.validate();
    CountAggregator agg;
    for (const auto& shard : shards) {
        require_width(shard, ckpt.params);
        const auto part = aggregate(shard, ckpt.params, cfg);
        for (std::size_t i = 0; i < shard.size(); ++i) agg.add_image(shard.records()[i], part.image_level()[i].counts);
    }
    std::vector<ActivationCounts> counts;
    if (level == Level::image)
        counts = agg.image_level();
    else if (level == Level::class_level)
        counts = agg.class_level();
    else
        counts = {agg.dataset_level()};
    const fs::path out = a.out;
    const auto file = out / ("counts_" + to_string(level) + ".json");
    io::write_json(file, counts_json(counts));
    const Json meta = {{"format_version", 1},
                       {"backbone_id", shards.front().spec().backbone_id},
                       {"level", to_string(level)},
                       {"tau", cfg.tau},
                       {"include_cls", cfg.include_cls},
                       {"sae_hash", sae_hash(ckpt)},
                       {"entities", counts.size()}};
    io::write_json(out / ("counts_" + to_string(level) + ".meta.json"), meta);
    run.output(out);
    run.workspace.register_artifact("counts", file, meta);
    std::cout << "counts at " << to_string(level) << " level for " << counts.size() << " entities -> " << file.string()
              << "\n";
}

struct MaskArgs {
    std::string shard, sae, image, out;
    int latent = 0;
};

void cmd_mask(Run& run, const MaskArgs& a) {
    run.input(a.shard);
    const auto shard = read_shard(a.shard);
    const auto ckpt = load_sae(run, a.sae);
    require_width(shard, ckpt.params);
    const auto m = segmentation_mask(shard, ckpt.params, a.image, a.latent);
    const fs::path out = a.out;
    Json j = mask_json(m);
    j["backbone_id"] = shard.spec().backbone_id;
    io::write_json(out / "mask.json", j);
    io::write_bytes(out / "mask.png", encode_png16(m.normalized_values, m.grid_w, m.grid_h));
    run.output(out);
    std::cout << "mask for latent " << a.latent << " on " << a.image << " -> " << a.out << "\n";
}

std::map<int, SparseCounts> class_counts_from(const fs::path& file, const std::string& dataset) {
    std::map<int, SparseCounts> out;
    for (const auto& [entity, counts] : read_counts_json(io::read_json(file))) {
        const auto slash = entity.rfind('/');
        if (slash != std::string::npos && entity.substr(0, slash) != dataset) continue;
        const auto label = entity.substr(slash == std::string::npos ? 0 : slash + 1);
        std::size_t used = 0;
        int id = -1;
        try {
            id = std::stoi(label, &used);
        } catch (const std::exception&) {
        }
        if (id < 0 || used != label.size()) throw FormatError(file.string() + ": '" + entity + "' is not a class entity");
        out[id] = counts;
    }
    return out;
}

struct EvalArgs {
    std::string shard, sae, backbone, mode = "on_topk", select_from, counts, class_emb, split = "full",
                                      error_term = "none", application = "ground_truth", out;
    int k = 3;
    std::uint64_t seed = 0;
    bool native = false;
};

void cmd_eval_mask(Run& run, const EvalArgs& a) {
    run.input(a.shard);
    const auto shard = read_shard(a.shard);
    const auto ckpt = load_sae(run, a.sae);
    require_width(shard, ckpt.params);
    run.input(a.class_emb);
    const auto emb = read_class_embeddings(a.class_emb);
    const auto backbone = load_backbone(a.backbone.empty() ? shard.spec().backbone_id : a.backbone);
    const auto mode = mask_mode_from_string(a.mode);
    if (!a.select_from.empty() && selection_source_from_string(a.select_from) != default_source(mode))
        throw ConfigError("--select-from " + a.select_from + " does not fit mode " + a.mode + " (expects " +
                          to_string(default_source(mode)) + ")");
    EvalOptions options;
    options.split = eval_split_from_string(a.split);
    options.error_term = error_term_from_string(a.error_term);
    options.application = mask_application_from_string(a.application);
    options.substitute = !a.native;

    std::map<int, SparseCounts> counts;
    std::string selection_backbone;
    const bool needs_counts = default_source(mode) != SelectionSource::random && mode != MaskMode::identity &&
                              mode != MaskMode::zero && options.substitute;
    if (needs_counts) {
        if (a.counts.empty()) throw ConfigError("mode " + a.mode + " needs class-level counts (--counts)");
        run.input(a.counts);
        counts = class_counts_from(a.counts, emb.dataset_name);
        const auto meta_path = fs::path(a.counts).replace_extension(".meta.json");
        if (fs::exists(meta_path)) selection_backbone = io::read_json(meta_path).value("backbone_id", "");
    }
    const auto classes = split_classes(emb.classes(), options.split);
    run.record["seeds"] = {{"mask", a.seed}};
    const auto masks = options.substitute
                           ? build_masks(counts, classes, mode, a.k, ckpt.params.d_sae(), a.seed, selection_backbone)
                           : build_masks({}, classes, MaskMode::identity, 0, ckpt.params.d_sae());
    const auto report = evaluate(shard, ckpt.params, masks, emb, *backbone, options);
    Json doc = eval_report_json(report);
    doc["sae_hash"] = sae_hash(ckpt);
    io::write_json(a.out, doc);
    run.output(a.out);
    run.workspace.register_artifact("eval_report", a.out,
                                    {{"backbone_id", report.backbone_id},
                                     {"dataset", report.dataset},
                                     {"split", to_string(report.split)},
                                     {"mode", options.substitute ? a.mode : "native"},
                                     {"k", a.k}});
    std::cout << "accuracy " << report.accuracy << "% over " << report.evaluated << " images (" << a.split << ", "
              << (options.substitute ? a.mode + " k=" + std::to_string(a.k) : std::string("native")) << ") -> "
              << a.out << "\n";
}

struct CompareArgs {
    std::string shard_a, shard_b, sae, out, level = "class", bound_mode = "per_axis";
    int upper = 50, lower = 100, n_classes = 0;
    double tau = 0.2;
    bool no_cls = false;
    std::vector<std::string> zero_shot, adapted;
};

EvalReport eval_from_json(const fs::path& file) {
    const auto j = io::read_json(file);
    EvalReport r;
    try {
        r.split = eval_split_from_string(j.at("split"));
        r.accuracy = j.at("accuracy");
        r.backbone_id = j.at("backbone_id");
    } catch (const Json::exception& e) {
        throw FormatError(file.string() + ": " + e.what());
    }
    return r;
}

void cmd_compare(Run& run, const CompareArgs& a) {
    run.input(a.shard_a);
    run.input(a.shard_b);
    const auto shard_a = read_shard(a.shard_a);
    const auto shard_b = read_shard(a.shard_b);
    const auto ckpt = load_sae(run, a.sae);
    CompareOptions options;
    options.level = level_from_string(a.level);
    options.aggregation.tau = a.tau;
    options.aggregation.include_cls = !a.no_cls;
    options.aggregation.grid_h = shard_a.spec().grid_h;
    options.aggregation.grid_w = shard_a.spec().grid_w;
    options.upper_rank = a.upper;
    options.lower_rank = a.lower;
    options.bound_mode = bound_mode_from_string(a.bound_mode);
    options.n_classes = a.n_classes;
    if (options.upper_rank >= options.lower_rank) throw ConfigError("--upper must be smaller than --lower");
    if (a.zero_shot.size() != a.adapted.size())
        throw ConfigError("--zero-shot-eval and --adapted-eval must be given in pairs");
    auto report = compare_report(shard_a, shard_b, ckpt.params, options);
    for (std::size_t i = 0; i < a.zero_shot.size(); ++i) {
        run.input(a.zero_shot[i]);
        run.input(a.adapted[i]);
        attach_accuracy(report, eval_from_json(a.zero_shot[i]), eval_from_json(a.adapted[i]));
    }
    const fs::path out = a.out;
    Json doc = comparison_report_json(report);
    doc["sae_hash"] = sae_hash(ckpt);
    io::write_json(out / "comparison_report.json", doc);
    io::write_text(out / "scatter.csv", scatter_csv(report));
    run.output(out);
    run.workspace.register_artifact("comparison", out / "comparison_report.json",
                                    {{"dataset", report.dataset},
                                     {"backbone_a", report.backbone_a},
                                     {"backbone_b", report.backbone_b},
                                     {"level", a.level}});
    for (const auto& s : report.splits)
        std::cout << to_string(s.split) << ": high " << s.average_high << ", high_to_low " << s.average_high_to_low
                  << ", low_to_high " << s.average_low_to_high << ", r "
                  << (s.pearson_r ? std::to_string(*s.pearson_r) : std::string("n/a")) << "\n";
    std::cout << "comparison -> " << a.out << "\n";
}

struct ServeArgs {
    std::string host = "127.0.0.1", sae, static_dir;
    int port = 0;
};

void cmd_serve(Run& run, const ServeArgs& a) {
    int port = a.port;
    if (port == 0) {
        const char* env = std::getenv("PATCHSAE_PORT");
        port = env && *env ? std::atoi(env) : 8080;
    }
    std::function<api::Response(const api::Request&)> handler;
    std::shared_ptr<const api::Session> session;
    if (!a.static_dir.empty()) {
        const fs::path dir = a.static_dir;
        handler = [dir](const api::Request& r) { return api::serve_static(dir, r); };
    } else {
        session = api::Session::load(run.workspace, {a.sae});
        for (const auto& g : session->gaps()) std::cerr << "serve: missing " << g.section << ": " << g.reason << "\n";
        handler = [session](const api::Request& r) { return session->handle(r); };
    }
    run.record["status"] = "serving";
    run.workspace.write_run_record(run.record);
    api::HttpServer server(handler);
    const int bound = server.bind(a.host, port);
    std::cout << "serving on http://" << a.host << ":" << bound << "/api/backbones" << std::endl;
    server.run();
}

struct ExportArgs {
    std::string out, sae;
    bool patches = false;
};

void cmd_export(Run& run, const ExportArgs& a) {
    const auto session = api::Session::load(run.workspace, {a.sae});
    const auto result = api::export_demo(*session, a.out, a.patches);
    Json gaps = Json::array();
    for (const auto& g : result.gaps) {
        std::cerr << "export-demo: gap in " << g.section << ": " << g.reason << "\n";
        gaps.push_back({{"section", g.section}, {"reason", g.reason}});
    }
    run.record["gaps"] = gaps;
    run.output(a.out);
    run.workspace.register_artifact("export", a.out, {{"files", result.files}, {"gaps", result.gaps.size()}});
    std::cout << "exported " << result.files << " files (" << result.gaps.size() << " gaps) -> " << a.out << "\n";
}

CLI::Validator non_negative_l1() {
    return CLI::Validator(
        [](std::string& text) -> std::string {
            double v = 0.0;
            try {
                std::size_t used = 0;
                v = std::stod(text, &used);
                if (used != text.size()) return "lambda_l1 must be a number";
            } catch (const std::exception&) {
                return "lambda_l1 must be a number";
            }
            if (!(v >= 0.0) || !std::isfinite(v)) return "constraint violated: λ_l1 ≥ 0 (lambda_l1 >= 0), got " + text;
            return {};
        },
        "λ_l1 ≥ 0", "L1Coefficient");
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Patch-level sparse autoencoder toolkit"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);
    app.fallthrough();
    std::string workspace_flag;
    app.add_option("--workspace", workspace_flag, "Workspace root (default: $PATCHSAE_WORKSPACE)");

    ExtractArgs ex;
    auto* extract = app.add_subcommand("extract", "Extract hook-layer activations into a shard");
    extract->add_option("--images", ex.images, "JSON image list")->required()->check(CLI::ExistingFile);
    extract->add_option("--backbone", ex.backbone, "Backbone id (toy, toy-prompted, vit:<dir>, ...)")->required();
    extract->add_option("--layer", ex.layer, "1-based hook layer (default: second to last block)")->check(CLI::PositiveNumber);
    extract->add_option("--batch-size", ex.batch_size, "Images per batch")->capture_default_str()->check(CLI::PositiveNumber);
    extract->add_option("--out", ex.out, "Shard directory")->required();
    extract->add_flag("--no-thumbnails", ex.no_thumbnails, "Skip writing 224px JPEG thumbnails");

    TrainArgs tr;
    tr.config.log_every = 50;
    auto* train = app.add_subcommand("train", "Train an SAE on activation shards");
    train->add_option("--shards", tr.shards, "Shard directories")->required()->check(CLI::ExistingDirectory);
    train->add_option("--out", tr.out, "Checkpoint directory")->required();
    train->add_option("--l1", tr.config.l1_coefficient, "L1 coefficient λ_l1")->capture_default_str()->check(non_negative_l1());
    train->add_option("--lr", tr.config.learning_rate, "Learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    train->add_option("--warmup", tr.config.warmup_steps, "Linear warmup steps")->capture_default_str()->check(CLI::NonNegativeNumber);
    train->add_option("--expansion", tr.config.expansion_factor, "d_sae / d_vit")->capture_default_str()->check(CLI::PositiveNumber);
    train->add_flag("--ghost-grads,!--no-ghost-grads", tr.config.ghost_gradients, "Ghost gradients for dead latents");
    train->add_option("--seed", tr.config.seed, "Random seed")->capture_default_str();
    train->add_option("--training-images", tr.config.training_images, "Token budget in images")->capture_default_str()->check(CLI::PositiveNumber);
    train->add_option("--batch-size", tr.config.batch_size_tokens, "Tokens per step")->capture_default_str()->check(CLI::PositiveNumber);
    train->add_option("--dead-window", tr.config.dead_latent_window, "Idle steps before a latent counts as dead")->capture_default_str()->check(CLI::PositiveNumber);
    train->add_option("--bias-init", tr.bias_init, "Decoder bias init")->capture_default_str()->check(CLI::IsMember({"geometric_median", "mean"}));
    train->add_option("--log-every", tr.config.log_every, "Loss-curve interval in steps")->capture_default_str()->check(CLI::PositiveNumber);

    StatsArgs st;
    auto* stats = app.add_subcommand("stats", "Per-latent statistics and reference images");
    stats->add_option("--shards", st.shards, "Shard directories")->required()->check(CLI::ExistingDirectory);
    stats->add_option("--sae", st.sae, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    stats->add_option("--topk", st.topk, "Reference images per latent")->capture_default_str()->check(CLI::PositiveNumber);
    stats->add_option("--out", st.out, "Output directory")->required();

    ConceptsArgs co;
    auto* concepts = app.add_subcommand("concepts", "Thresholded activation counts per image/class/dataset");
    concepts->add_option("--shard", co.shards, "Shard directories")->required()->check(CLI::ExistingDirectory);
    concepts->add_option("--sae", co.sae, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    concepts->add_option("--level", co.level, "image, class or dataset")->capture_default_str()->check(CLI::IsMember({"image", "class", "dataset"}));
    concepts->add_option("--tau", co.tau, "Activation threshold (strict)")->capture_default_str()->check(CLI::PositiveNumber);
    concepts->add_flag("--no-cls", co.no_cls, "Exclude the CLS token from counts");
    concepts->add_option("--out", co.out, "Output directory")->required();

    MaskArgs ma;
    auto* mask = app.add_subcommand("mask", "Patch heatmap of one latent on one image");
    mask->add_option("--shard", ma.shard, "Shard directory")->required()->check(CLI::ExistingDirectory);
    mask->add_option("--sae", ma.sae, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    mask->add_option("--image", ma.image, "Image id")->required();
    mask->add_option("--latent", ma.latent, "Latent id")->required()->check(CLI::NonNegativeNumber);
    mask->add_option("--out", ma.out, "Output directory")->required();

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval-mask", "Classification with masked SAE reconstructions");
    eval->add_option("--shard", ev.shard, "Test shard directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--sae", ev.sae, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--backbone", ev.backbone, "Backbone id (default: the shard's)");
    eval->add_option("--mode", ev.mode, "Mask mode")->capture_default_str()->check(CLI::IsMember(
        {"on_topk", "off_topk", "on_random", "off_random", "on_dataset_topk", "off_dataset_topk", "identity", "zero"}));
    eval->add_option("--k", ev.k, "Latents per mask")->capture_default_str()->check(CLI::NonNegativeNumber);
    eval->add_option("--select-from", ev.select_from, "Selection source")->check(CLI::IsMember({"class_level", "dataset_level", "random"}));
    eval->add_option("--counts", ev.counts, "Class-level counts JSON from `concepts`")->check(CLI::ExistingFile);
    eval->add_option("--class-emb", ev.class_emb, "Class embeddings directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--split", ev.split, "base, novel or full")->capture_default_str()->check(CLI::IsMember({"base", "novel", "full"}));
    eval->add_option("--error-term", ev.error_term, "none or add_residual")->capture_default_str()->check(CLI::IsMember({"none", "add_residual"}));
    eval->add_option("--application", ev.application, "ground_truth or per_candidate")->capture_default_str()->check(CLI::IsMember({"ground_truth", "per_candidate"}));
    eval->add_option("--seed", ev.seed, "Seed for random masks")->capture_default_str();
    eval->add_flag("--native", ev.native, "Evaluate native embeddings (no substitution)");
    eval->add_option("--out", ev.out, "Report JSON file")->required();

    CompareArgs cm;
    auto* compare = app.add_subcommand("compare", "Compare latent activity between two backbones");
    compare->add_option("--shard-a", cm.shard_a, "Shard of the reference backbone")->required()->check(CLI::ExistingDirectory);
    compare->add_option("--shard-b", cm.shard_b, "Shard of the adapted backbone")->required()->check(CLI::ExistingDirectory);
    compare->add_option("--sae", cm.sae, "Shared checkpoint")->required()->check(CLI::ExistingDirectory);
    compare->add_option("--level", cm.level, "class or dataset")->capture_default_str()->check(CLI::IsMember({"class", "dataset"}));
    compare->add_option("--upper", cm.upper, "Upper bound rank")->capture_default_str()->check(CLI::PositiveNumber);
    compare->add_option("--lower", cm.lower, "Lower bound rank")->capture_default_str()->check(CLI::PositiveNumber);
    compare->add_option("--bound-mode", cm.bound_mode, "per_axis or union")->capture_default_str()->check(CLI::IsMember({"per_axis", "union"}));
    compare->add_option("--tau", cm.tau, "Activation threshold")->capture_default_str()->check(CLI::PositiveNumber);
    compare->add_flag("--no-cls", cm.no_cls, "Exclude the CLS token from counts");
    compare->add_option("--n-classes", cm.n_classes, "Class count (default: largest label + 1)")->check(CLI::NonNegativeNumber);
    compare->add_option("--zero-shot-eval", cm.zero_shot, "Native eval report of backbone a (for Δ)")->check(CLI::ExistingFile);
    compare->add_option("--adapted-eval", cm.adapted, "Native eval report of backbone b (for Δ)")->check(CLI::ExistingFile);
    compare->add_option("--out", cm.out, "Output directory")->required();

    ServeArgs sv;
    auto* serve = app.add_subcommand("serve", "Read-only HTTP API over the workspace");
    serve->add_option("--port", sv.port, "Port (default: $PATCHSAE_PORT or 8080)")->check(CLI::Range(0, 65535));
    serve->add_option("--host", sv.host, "Bind address")->capture_default_str();
    serve->add_option("--sae", sv.sae, "Checkpoint (default: latest registered)")->check(CLI::ExistingDirectory);
    serve->add_option("--static", sv.static_dir, "Serve an export-demo bundle instead")->check(CLI::ExistingDirectory);

    ExportArgs xa;
    auto* exp = app.add_subcommand("export-demo", "Write every API response as static files");
    exp->add_option("--out", xa.out, "Bundle directory")->required();
    exp->add_option("--sae", xa.sae, "Checkpoint (default: latest registered)")->check(CLI::ExistingDirectory);
    exp->add_flag("--patches", xa.patches, "Also export patch-level latents");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    auto* sub = app.get_subcommands().front();
    const auto started = std::chrono::steady_clock::now();
    std::optional<Run> run;
    try {
        run.emplace(Run{Workspace(Workspace::resolve_root(workspace_flag)), Json::object()});
        Json args = Json::array();
        for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
        run->record = {{"format_version", 1},
                       {"command", sub->get_name()},
                       {"argv", args},
                       {"config", sub->config_to_str(true, false)},
                       {"cwd", fs::current_path().generic_string()},
                       {"started_at", io::utc_timestamp()},
                       {"seeds", Json::object()},
                       {"inputs", Json::object()},
                       {"outputs", Json::object()}};
        const auto name = sub->get_name();
        if (name == "extract") cmd_extract(*run, ex);
        else if (name == "train") cmd_train(*run, tr);
        else if (name == "stats") cmd_stats(*run, st);
        else if (name == "concepts") cmd_concepts(*run, co);
        else if (name == "mask") cmd_mask(*run, ma);
        else if (name == "eval-mask") cmd_eval_mask(*run, ev);
        else if (name == "compare") cmd_compare(*run, cm);
        else if (name == "serve") cmd_serve(*run, sv);
        else if (name == "export-demo") cmd_export(*run, xa);
    } catch (const std::exception& e) {
        std::cerr << "patchsae " << sub->get_name() << ": error: " << e.what() << "\n";
        if (run) {
            run->record["status"] = "error";
            run->record["error"] = e.what();
            run->record["exit_code"] = 1;
            run->record["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            try {
                run->workspace.write_run_record(run->record);
            } catch (const std::exception&) {
            }
        }
        return 1;
    }
    run->record["status"] = "ok";
    run->record["exit_code"] = 0;
    run->record["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    const auto path = run->workspace.write_run_record(run->record);
    std::cerr << "run-record: " << path.string() << "\n";
    return 0;
}

} // namespace patchsae
