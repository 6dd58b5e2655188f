#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "patchsae/image.hpp"
#include "patchsae/types.hpp"

namespace patchsae {

/// Geometry and preprocessing of a vision transformer in the CLIP layout:
/// patch embedding, class token first, pre-LN residual blocks, final LN on the
/// class token followed by a linear projection.
struct VitConfig {
    int image_size = 224;
    int patch_size = 16;
    int width = 768;
    int layers = 12;
    int heads = 12;
    int mlp_ratio = 4;
    int embed_dim = 512;
    int n_prompts = 0;     ///< learnable tokens appended after the image tokens
    int prompt_depth = 0;  ///< blocks whose input prompt rows are overwritten
    std::array<float, 3> mean{0.48145466f, 0.4578275f, 0.40821073f};
    std::array<float, 3> std{0.26862954f, 0.26130258f, 0.27577711f};

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid() + 1; }
    void validate() const;
};

struct BackboneSpec {
    std::string backbone_id;
    int hook_layer = 11;
    int tokens_per_image = 197;
    int d_vit = 768;
    int embed_dim = 512;
    int grid_h = 14;
    int grid_w = 14;
    int n_blocks = 12;
    int extra_tokens = 0;

    void validate() const;
    bool same_geometry(const BackboneSpec& other) const;
};

struct LayerNormWeights {
    Vectorf gamma;
    Vectorf beta;
};

struct VitBlockWeights {
    LayerNormWeights ln_1;
    RowMatrixf w_qkv;  ///< [width, 3*width], columns q | k | v
    Vectorf b_qkv;
    RowMatrixf w_out;  ///< [width, width]
    Vectorf b_out;
    LayerNormWeights ln_2;
    RowMatrixf w_fc;   ///< [width, mlp_ratio*width]
    Vectorf b_fc;
    RowMatrixf w_proj; ///< [mlp_ratio*width, width]
    Vectorf b_proj;
    RowMatrixf prompts; ///< [n_prompts, width] when the block index < prompt_depth
};

struct VitWeights {
    VitConfig config;
    RowMatrixf patch_embed;     ///< [3*patch*patch, width], input ordered (c, py, px)
    Vectorf class_embedding;    ///< [width]
    RowMatrixf pos_embedding;   ///< [tokens, width]
    LayerNormWeights ln_pre;
    std::vector<VitBlockWeights> blocks;
    LayerNormWeights ln_post;
    RowMatrixf proj;            ///< [width, embed_dim]
};

/// Residual stream at one hook point: image tokens plus any prompt tokens.
struct ResidualState {
    RowMatrixf tokens;  ///< [tokens_per_image, width]
    RowMatrixf extra;   ///< [n_prompts, width], empty without prompts
};

/// Frozen vision backbone. Immutable after construction; all methods are
/// safe to call concurrently.
class Backbone {
public:
    Backbone(std::string id, VitWeights weights);

    const std::string& id() const { return id_; }
    const VitConfig& config() const { return weights_.config; }
    const VitWeights& weights() const { return weights_; }
    BackboneSpec spec(int hook_layer) const;

    /// Normalized [3, S, S] pixel tensor flattened in (c, y, x) order.
    std::vector<float> preprocess(const ImageU8& image) const;
    /// Residual stream entering block 1 (after ln_pre).
    ResidualState embed_input(std::span<const float> pixels) const;
    /// Residual-stream output of block `hook_layer` (1-based).
    ResidualState forward_to(const ImageU8& image, int hook_layer) const;
    /// Continues the forward pass from the output of block `hook_layer`.
    Vectorf run_tail(const RowMatrixf& tokens, const RowMatrixf& extra, int hook_layer) const;
    Vectorf run_tail(const ResidualState& state, int hook_layer) const { return run_tail(state.tokens, state.extra, hook_layer); }
    /// Native image embedding from pixels.
    Vectorf embed(const ImageU8& image) const;

    /// Applies block `index` (0-based) in place to the full residual stream.
    void apply_block(RowMatrixf& stream, int index) const;

private:
    RowMatrixf stack(const RowMatrixf& tokens, const RowMatrixf& extra) const;

    std::string id_;
    VitWeights weights_;
};

/// Seeded small ViT with the same interface as the real backbone.
/// `tokens` must be g*g + 1 for some grid size g.
Backbone load_toy_backbone(std::uint64_t seed, int n_blocks, int tokens, int d_vit, int embed_dim,
                           int n_prompts = 0, std::uint64_t prompt_seed = 1);

/// Resolves `toy`, `toy-seed<N>`, `toy-prompted[-seed<N>]`, `vit:<dir>`, or an
/// id with weights under $PATCHSAE_WEIGHTS/<id>/. Throws ConfigError otherwise.
std::shared_ptr<const Backbone> load_backbone(const std::string& backbone_id);

void save_vit_weights(const VitWeights& weights, const std::filesystem::path& dir);
VitWeights load_vit_weights(const std::filesystem::path& dir);

} // namespace patchsae
