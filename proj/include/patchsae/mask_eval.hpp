#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "patchsae/backbone.hpp"
#include "patchsae/concept_maps.hpp"
#include "patchsae/io.hpp"
#include "patchsae/sae.hpp"
#include "patchsae/shard.hpp"

namespace patchsae {

/// Text-side class embeddings, ingested precomputed. Row c belongs to label id c.
struct ClassEmbeddings {
    std::string dataset_name;
    std::vector<std::string> class_names;
    RowMatrixf matrix;  ///< [C, embed_dim], unit-norm rows
    std::string provenance;

    int classes() const { return static_cast<int>(matrix.rows()); }
    void validate() const;
};

/// class_embeddings.json (names, provenance) + class_embeddings.bin (float32 [C, embed_dim]).
void write_class_embeddings(const ClassEmbeddings& emb, const std::filesystem::path& dir);
ClassEmbeddings read_class_embeddings(const std::filesystem::path& dir);

enum class MaskMode { on_topk, off_topk, on_random, off_random, on_dataset_topk, off_dataset_topk, identity, zero };
enum class SelectionSource { class_level, dataset_level, random };
enum class ErrorTerm { none, add_residual };
/// How per-class masks meet test images: by the image's ground-truth class,
/// or by scoring each candidate class with its own mask.
enum class MaskApplication { ground_truth, per_candidate };
enum class EvalSplit { base, novel, full };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& text);
std::string to_string(SelectionSource source);
SelectionSource selection_source_from_string(const std::string& text);
std::string to_string(ErrorTerm term);
ErrorTerm error_term_from_string(const std::string& text);
std::string to_string(MaskApplication application);
MaskApplication mask_application_from_string(const std::string& text);
std::string to_string(EvalSplit split);
EvalSplit eval_split_from_string(const std::string& text);

/// Source selection a mode implies (random modes -> random, dataset modes -> dataset_level, ...).
SelectionSource default_source(MaskMode mode);

using LatentMask = std::vector<std::uint8_t>;

struct MaskSpec {
    MaskMode mode = MaskMode::identity;
    int k = 0;
    SelectionSource selection_source = SelectionSource::class_level;
    std::string selection_backbone_id;
    std::uint64_t seed = 0;
    int d_sae = 0;
    /// Latents selected per class (empty for identity/zero).
    std::map<int, std::vector<LatentId>> selected;
    std::map<int, LatentMask> per_class_masks;
    LatentMask shared;  ///< used when the mode does not depend on the class

    bool class_dependent() const;
    const LatentMask& mask_for(int class_id) const;
};

/// Builds masks for `class_ids`. `class_counts` maps label id -> class-level
/// counts; dataset modes sum them into one shared ranking.
MaskSpec build_masks(const std::map<int, SparseCounts>& class_counts, const std::vector<int>& class_ids, MaskMode mode,
                     int k, int d_sae, std::uint64_t seed = 0, std::string selection_backbone_id = {});

/// Replaces each token by the decoded masked latent vector and finishes the
/// backbone forward pass.
Vectorf substituted_embedding(const RowMatrixf& tokens, const RowMatrixf& extra, const SaeParamsf& params,
                              const LatentMask& mask, const Backbone& backbone, int hook_layer, ErrorTerm error_term);

/// The per-token tensor fed to run_tail by substituted_embedding.
RowMatrixf substituted_tokens(const RowMatrixf& tokens, const SaeParamsf& params, const LatentMask& mask,
                              ErrorTerm error_term);

struct Classification {
    int predicted = 0;  ///< row index into the candidate matrix
    Vectorf logits;     ///< cosine similarities
};

/// Cosine logits against unit-norm rows; argmax ties resolve to the smaller index.
Classification classify(const Vectorf& embedding, const RowMatrixf& class_rows);

struct EvalOptions {
    EvalSplit split = EvalSplit::full;
    ErrorTerm error_term = ErrorTerm::none;
    MaskApplication application = MaskApplication::ground_truth;
    bool substitute = true;  ///< false: native embeddings, mask ignored
};

struct EvalReport {
    std::string dataset;
    EvalSplit split = EvalSplit::full;
    std::string backbone_id;
    std::vector<int> class_ids;
    double accuracy = 0.0;  ///< percent
    std::vector<double> per_class_accuracy;
    std::vector<std::vector<std::int64_t>> confusion;  ///< [true][predicted] within class_ids
    bool substituted = true;
    ErrorTerm error_term = ErrorTerm::none;
    MaskApplication application = MaskApplication::ground_truth;
    std::optional<MaskSpec> mask;
    std::int64_t evaluated = 0;
};

/// Labels in the split: base = first ceil(C/2), novel = the rest.
std::vector<int> split_classes(int n_classes, EvalSplit split);

EvalReport evaluate(const ActivationShard& shard, const SaeParamsf& params, const MaskSpec& masks,
                    const ClassEmbeddings& class_embeddings, const Backbone& backbone, const EvalOptions& options);

struct ContrastiveMetrics {
    double cl_with_sae = 0.0;
    double cl_native = 0.0;
};

/// Mean cross-entropy of softmax over cosine logits (no temperature).
double cross_entropy(const Vectorf& logits, int target);

ContrastiveMetrics contrastive_metrics(const ActivationShard& shard, const SaeParamsf& params,
                                       const ClassEmbeddings& class_embeddings, const Backbone& backbone);

/// 100 * (adapted - zero_shot) / (100 - zero_shot), in percent.
double improvement_rate(double zero_shot_accuracy, double adapted_accuracy);

io::Json mask_summary_json(const MaskSpec& masks);
io::Json eval_report_json(const EvalReport& report);

} // namespace patchsae
