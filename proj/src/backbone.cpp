#include "patchsae/backbone.hpp"

#include <cmath>
#include <cstdlib>
#include <random>

#include "patchsae/errors.hpp"
#include "patchsae/io.hpp"

namespace patchsae {

namespace {

constexpr float kLayerNormEps = 1e-5f;

void layer_norm_rows(RowMatrixf& x, const LayerNormWeights& ln) {
    const auto d = static_cast<float>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        const float mean = row.sum() / d;
        const float var = (row.array() - mean).square().sum() / d;
        const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
        row = ((row.array() - mean) * inv * ln.gamma.transpose().array() + ln.beta.transpose().array()).matrix();
    }
}

void softmax_rows(RowMatrixf& x) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        row = (row.array() - row.maxCoeff()).exp().matrix();
        row /= row.sum();
    }
}

// CLIP uses x * sigmoid(1.702 x).
void quick_gelu(RowMatrixf& x) {
    x = (x.array() / (1.0f + (-1.702f * x.array()).exp())).matrix();
}

} // namespace

void VitConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw ConfigError("vit: image_size must be a positive multiple of patch_size");
    if (width <= 0 || layers <= 0 || heads <= 0 || width % heads != 0)
        throw ConfigError("vit: width must be positive and divisible by heads");
    if (mlp_ratio <= 0 || embed_dim <= 0) throw ConfigError("vit: mlp_ratio and embed_dim must be positive");
    if (n_prompts < 0 || prompt_depth < 0 || prompt_depth > layers || (n_prompts > 0) != (prompt_depth > 0))
        throw ConfigError("vit: prompts need 1 <= prompt_depth <= layers");
}

void BackboneSpec::validate() const {
    if (n_blocks < 1 || hook_layer < 1 || hook_layer > n_blocks)
        throw ConfigError("backbone " + backbone_id + ": hook_layer " + std::to_string(hook_layer) +
                          " outside [1, " + std::to_string(n_blocks) + "]");
    if (d_vit <= 0 || embed_dim <= 0) throw ConfigError("backbone " + backbone_id + ": d_vit and embed_dim must be positive");
    if (tokens_per_image != grid_h * grid_w + 1)
        throw ConfigError("backbone " + backbone_id + ": tokens_per_image must equal grid_h*grid_w + 1");
}

bool BackboneSpec::same_geometry(const BackboneSpec& other) const {
    return tokens_per_image == other.tokens_per_image && d_vit == other.d_vit && grid_h == other.grid_h &&
           grid_w == other.grid_w;
}

Backbone::Backbone(std::string id, VitWeights weights) : id_(std::move(id)), weights_(std::move(weights)) {
    const auto& c = weights_.config;
    c.validate();
    const int patch_in = 3 * c.patch_size * c.patch_size;
    auto check = [&](bool ok, const char* what) {
        if (!ok) throw ConfigError("backbone " + id_ + ": bad shape for " + what);
    };
    check(weights_.patch_embed.rows() == patch_in && weights_.patch_embed.cols() == c.width, "patch_embed");
    check(weights_.class_embedding.size() == c.width, "class_embedding");
    check(weights_.pos_embedding.rows() == c.tokens() && weights_.pos_embedding.cols() == c.width, "pos_embedding");
    check(static_cast<int>(weights_.blocks.size()) == c.layers, "blocks");
    for (int b = 0; b < c.layers; ++b) {
        const auto& blk = weights_.blocks[static_cast<std::size_t>(b)];
        check(blk.w_qkv.rows() == c.width && blk.w_qkv.cols() == 3 * c.width, "w_qkv");
        check(blk.w_fc.rows() == c.width && blk.w_fc.cols() == c.mlp_ratio * c.width, "w_fc");
        check(blk.w_proj.rows() == c.mlp_ratio * c.width && blk.w_proj.cols() == c.width, "w_proj");
        if (b < c.prompt_depth) check(blk.prompts.rows() == c.n_prompts && blk.prompts.cols() == c.width, "prompts");
    }
    check(weights_.proj.rows() == c.width && weights_.proj.cols() == c.embed_dim, "proj");
}

BackboneSpec Backbone::spec(int hook_layer) const {
    const auto& c = config();
    BackboneSpec s;
    s.backbone_id = id_;
    s.hook_layer = hook_layer;
    s.tokens_per_image = c.tokens();
    s.d_vit = c.width;
    s.embed_dim = c.embed_dim;
    s.grid_h = s.grid_w = c.grid();
    s.n_blocks = c.layers;
    s.extra_tokens = c.n_prompts;
    s.validate();
    return s;
}

std::vector<float> Backbone::preprocess(const ImageU8& image) const {
    const auto& c = config();
    const ImageU8 resized = resize_center_crop(image, c.image_size);
    const std::size_t plane = static_cast<std::size_t>(c.image_size) * c.image_size;
    std::vector<float> pixels(3 * plane);
    for (int y = 0; y < c.image_size; ++y)
        for (int x = 0; x < c.image_size; ++x)
            for (int ch = 0; ch < 3; ++ch)
                pixels[ch * plane + static_cast<std::size_t>(y) * c.image_size + x] =
                    (resized.at(x, y, ch) / 255.0f - c.mean[ch]) / c.std[ch];
    return pixels;
}

ResidualState Backbone::embed_input(std::span<const float> pixels) const {
    const auto& c = config();
    const int g = c.grid();
    const int p = c.patch_size;
    const std::size_t plane = static_cast<std::size_t>(c.image_size) * c.image_size;
    PATCHSAE_REQUIRE(pixels.size() == 3 * plane, "embed_input: pixel tensor size mismatch");

    RowMatrixf patches(g * g, 3 * p * p);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx)
            for (int ch = 0; ch < 3; ++ch)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        patches(gy * g + gx, (ch * p + py) * p + px) =
                            pixels[ch * plane + static_cast<std::size_t>(gy * p + py) * c.image_size + gx * p + px];

    ResidualState state;
    state.tokens.resize(c.tokens(), c.width);
    state.tokens.row(0) = weights_.class_embedding.transpose();
    state.tokens.bottomRows(g * g) = patches * weights_.patch_embed;
    state.tokens += weights_.pos_embedding;
    layer_norm_rows(state.tokens, weights_.ln_pre);
    state.extra = RowMatrixf::Zero(c.n_prompts, c.width);
    return state;
}

RowMatrixf Backbone::stack(const RowMatrixf& tokens, const RowMatrixf& extra) const {
    RowMatrixf stream(tokens.rows() + extra.rows(), tokens.cols());
    stream.topRows(tokens.rows()) = tokens;
    if (extra.rows() > 0) stream.bottomRows(extra.rows()) = extra;
    return stream;
}

void Backbone::apply_block(RowMatrixf& stream, int index) const {
    const auto& c = config();
    const auto& blk = weights_.blocks[static_cast<std::size_t>(index)];
    if (index < c.prompt_depth) stream.bottomRows(c.n_prompts) = blk.prompts;

    const int d = c.width;
    const int dh = d / c.heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    RowMatrixf x = stream;
    layer_norm_rows(x, blk.ln_1);
    RowMatrixf qkv = x * blk.w_qkv;
    qkv.rowwise() += blk.b_qkv.transpose();
    RowMatrixf attended(stream.rows(), d);
    for (int h = 0; h < c.heads; ++h) {
        RowMatrixf scores = (qkv.middleCols(h * dh, dh) * qkv.middleCols(d + h * dh, dh).transpose()) * scale;
        softmax_rows(scores);
        attended.middleCols(h * dh, dh) = scores * qkv.middleCols(2 * d + h * dh, dh);
    }
    RowMatrixf attn_out = attended * blk.w_out;
    attn_out.rowwise() += blk.b_out.transpose();
    stream += attn_out;

    x = stream;
    layer_norm_rows(x, blk.ln_2);
    RowMatrixf hidden = x * blk.w_fc;
    hidden.rowwise() += blk.b_fc.transpose();
    quick_gelu(hidden);
    RowMatrixf mlp_out = hidden * blk.w_proj;
    mlp_out.rowwise() += blk.b_proj.transpose();
    stream += mlp_out;
}

ResidualState Backbone::forward_to(const ImageU8& image, int hook_layer) const {
    const auto& c = config();
    if (hook_layer < 1 || hook_layer > c.layers)
        throw ConfigError("hook_layer " + std::to_string(hook_layer) + " outside [1, " + std::to_string(c.layers) + "]");
    const auto pixels = preprocess(image);
    ResidualState state = embed_input(pixels);
    RowMatrixf stream = stack(state.tokens, state.extra);
    for (int b = 0; b < hook_layer; ++b) apply_block(stream, b);
    state.tokens = stream.topRows(c.tokens());
    state.extra = stream.bottomRows(c.n_prompts);
    return state;
}

Vectorf Backbone::run_tail(const RowMatrixf& tokens, const RowMatrixf& extra, int hook_layer) const {
    const auto& c = config();
    PATCHSAE_REQUIRE(hook_layer >= 1 && hook_layer <= c.layers, "run_tail: hook_layer out of range");
    PATCHSAE_REQUIRE(tokens.rows() == c.tokens() && tokens.cols() == c.width,
                     "run_tail: expected tokens of shape [" + std::to_string(c.tokens()) + ", " +
                         std::to_string(c.width) + "], got [" + std::to_string(tokens.rows()) + ", " +
                         std::to_string(tokens.cols()) + "]");
    PATCHSAE_REQUIRE(extra.rows() == c.n_prompts && (extra.rows() == 0 || extra.cols() == c.width),
                     "run_tail: prompt token shape mismatch");
    PATCHSAE_REQUIRE(tokens.allFinite(), "run_tail: non-finite tokens");
    RowMatrixf stream = stack(tokens, extra);
    for (int b = hook_layer; b < c.layers; ++b) apply_block(stream, b);
    RowMatrixf cls = stream.topRows(1);
    layer_norm_rows(cls, weights_.ln_post);
    return (cls * weights_.proj).transpose();
}

Vectorf Backbone::embed(const ImageU8& image) const {
    const auto& c = config();
    const auto pixels = preprocess(image);
    const ResidualState state = embed_input(pixels);
    RowMatrixf stream = stack(state.tokens, state.extra);
    for (int b = 0; b < c.layers; ++b) apply_block(stream, b);
    RowMatrixf cls = stream.topRows(1);
    layer_norm_rows(cls, weights_.ln_post);
    return (cls * weights_.proj).transpose();
}

namespace {

struct ToyInit {
    std::mt19937_64 rng;
    std::normal_distribution<float> normal{0.0f, 1.0f};

    RowMatrixf matrix(int rows, int cols, float stddev) {
        RowMatrixf m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * stddev;
        return m;
    }
    Vectorf vector(int n, float stddev, float offset = 0.0f) {
        Vectorf v(n);
        for (int i = 0; i < n; ++i) v[i] = offset + normal(rng) * stddev;
        return v;
    }
    LayerNormWeights layer_norm(int n) { return {vector(n, 0.1f, 1.0f), vector(n, 0.1f)}; }
};

} // namespace

Backbone load_toy_backbone(std::uint64_t seed, int n_blocks, int tokens, int d_vit, int embed_dim, int n_prompts,
                           std::uint64_t prompt_seed) {
    if (n_blocks < 1 || tokens < 2 || d_vit < 1 || embed_dim < 1 || n_prompts < 0)
        throw ConfigError("toy backbone: all dimensions must be >= 1");
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tokens - 1))));
    if (g * g + 1 != tokens) throw ConfigError("toy backbone: tokens must be g*g + 1");

    VitWeights w;
    auto& c = w.config;
    c.patch_size = 4;
    c.image_size = 4 * g;
    c.width = d_vit;
    c.layers = n_blocks;
    c.heads = (d_vit % 2 == 0 && d_vit >= 4) ? 2 : 1;
    c.mlp_ratio = 4;
    c.embed_dim = embed_dim;
    c.n_prompts = n_prompts;
    c.prompt_depth = n_prompts > 0 ? n_blocks : 0;

    ToyInit init{std::mt19937_64(seed)};
    const int patch_in = 3 * c.patch_size * c.patch_size;
    const float s_in = 1.0f / std::sqrt(static_cast<float>(d_vit));
    w.patch_embed = init.matrix(patch_in, d_vit, 1.0f / std::sqrt(static_cast<float>(patch_in)));
    w.class_embedding = init.vector(d_vit, 0.5f);
    w.pos_embedding = init.matrix(tokens, d_vit, 0.5f);
    w.ln_pre = init.layer_norm(d_vit);
    for (int b = 0; b < n_blocks; ++b) {
        VitBlockWeights blk;
        blk.ln_1 = init.layer_norm(d_vit);
        blk.w_qkv = init.matrix(d_vit, 3 * d_vit, s_in);
        blk.b_qkv = init.vector(3 * d_vit, 0.02f);
        blk.w_out = init.matrix(d_vit, d_vit, s_in);
        blk.b_out = init.vector(d_vit, 0.02f);
        blk.ln_2 = init.layer_norm(d_vit);
        blk.w_fc = init.matrix(d_vit, 4 * d_vit, s_in);
        blk.b_fc = init.vector(4 * d_vit, 0.02f);
        blk.w_proj = init.matrix(4 * d_vit, d_vit, 1.0f / std::sqrt(4.0f * d_vit));
        blk.b_proj = init.vector(d_vit, 0.02f);
        w.blocks.push_back(std::move(blk));
    }
    w.ln_post = init.layer_norm(d_vit);
    w.proj = init.matrix(d_vit, embed_dim, s_in);

    if (n_prompts > 0) {
        ToyInit prompt_init{std::mt19937_64(prompt_seed ^ 0x9e3779b97f4a7c15ULL)};
        for (int b = 0; b < c.prompt_depth; ++b)
            w.blocks[static_cast<std::size_t>(b)].prompts = prompt_init.matrix(n_prompts, d_vit, 1.0f);
    }

    std::string id = "toy";
    return Backbone(id, std::move(w));
}

namespace {

template <typename Fn>
void visit_tensors(VitWeights& w, Fn&& fn) {
    const auto& c = w.config;
    const int patch_in = 3 * c.patch_size * c.patch_size;
    auto mat = [&](RowMatrixf& m, int rows, int cols) {
        m.resize(rows, cols);
        fn(m.data(), m.size());
    };
    auto vec = [&](Vectorf& v, int n) {
        v.resize(n);
        fn(v.data(), v.size());
    };
    auto ln = [&](LayerNormWeights& l) {
        vec(l.gamma, c.width);
        vec(l.beta, c.width);
    };
    mat(w.patch_embed, patch_in, c.width);
    vec(w.class_embedding, c.width);
    mat(w.pos_embedding, c.tokens(), c.width);
    ln(w.ln_pre);
    w.blocks.resize(static_cast<std::size_t>(c.layers));
    for (int b = 0; b < c.layers; ++b) {
        auto& blk = w.blocks[static_cast<std::size_t>(b)];
        ln(blk.ln_1);
        mat(blk.w_qkv, c.width, 3 * c.width);
        vec(blk.b_qkv, 3 * c.width);
        mat(blk.w_out, c.width, c.width);
        vec(blk.b_out, c.width);
        ln(blk.ln_2);
        mat(blk.w_fc, c.width, c.mlp_ratio * c.width);
        vec(blk.b_fc, c.mlp_ratio * c.width);
        mat(blk.w_proj, c.mlp_ratio * c.width, c.width);
        vec(blk.b_proj, c.width);
        if (b < c.prompt_depth) mat(blk.prompts, c.n_prompts, c.width);
    }
    ln(w.ln_post);
    mat(w.proj, c.width, c.embed_dim);
}

} // namespace

void save_vit_weights(const VitWeights& weights, const std::filesystem::path& dir) {
    const auto& c = weights.config;
    io::Json cfg = {{"format_version", 1},   {"image_size", c.image_size}, {"patch_size", c.patch_size},
                    {"width", c.width},      {"layers", c.layers},         {"heads", c.heads},
                    {"mlp_ratio", c.mlp_ratio}, {"embed_dim", c.embed_dim}, {"n_prompts", c.n_prompts},
                    {"prompt_depth", c.prompt_depth}, {"mean", c.mean},    {"std", c.std}};
    io::write_json(dir / "config.json", cfg);
    VitWeights copy = weights;
    std::vector<std::uint8_t> bytes;
    visit_tensors(copy, [&](float* data, Eigen::Index n) { io::append_f32(bytes, std::span<const float>(data, n)); });
    io::write_bytes(dir / "weights.bin", bytes);
}

VitWeights load_vit_weights(const std::filesystem::path& dir) {
    const io::Json cfg = io::read_json(dir / "config.json");
    if (cfg.value("format_version", 0) != 1) throw FormatError(dir.string() + ": unsupported vit format_version");
    VitWeights w;
    auto& c = w.config;
    try {
        c.image_size = cfg.at("image_size");
        c.patch_size = cfg.at("patch_size");
        c.width = cfg.at("width");
        c.layers = cfg.at("layers");
        c.heads = cfg.at("heads");
        c.mlp_ratio = cfg.value("mlp_ratio", 4);
        c.embed_dim = cfg.at("embed_dim");
        c.n_prompts = cfg.value("n_prompts", 0);
        c.prompt_depth = cfg.value("prompt_depth", 0);
        if (cfg.contains("mean")) c.mean = cfg.at("mean").get<std::array<float, 3>>();
        if (cfg.contains("std")) c.std = cfg.at("std").get<std::array<float, 3>>();
    } catch (const io::Json::exception& e) {
        throw FormatError(dir.string() + "/config.json: " + e.what());
    }
    c.validate();
    const auto values = io::read_f32(dir / "weights.bin");
    std::size_t offset = 0;
    visit_tensors(w, [&](float* data, Eigen::Index n) {
        if (offset + static_cast<std::size_t>(n) > values.size())
            throw FormatError(dir.string() + "/weights.bin: truncated");
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), n, data);
        offset += static_cast<std::size_t>(n);
    });
    if (offset != values.size()) throw FormatError(dir.string() + "/weights.bin: trailing data");
    return w;
}

namespace {

constexpr int kToyBlocks = 4;
constexpr int kToyTokens = 17;
constexpr int kToyWidth = 32;
constexpr int kToyEmbed = 16;
constexpr int kToyPrompts = 2;

std::optional<std::uint64_t> parse_suffix(const std::string& id, const std::string& prefix) {
    if (id.rfind(prefix, 0) != 0) return std::nullopt;
    const std::string rest = id.substr(prefix.size());
    if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
    return std::stoull(rest);
}

} // namespace

std::shared_ptr<const Backbone> load_backbone(const std::string& backbone_id) {
    auto toy = [&](std::uint64_t seed, int prompts, std::uint64_t prompt_seed) {
        Backbone b = load_toy_backbone(seed, kToyBlocks, kToyTokens, kToyWidth, kToyEmbed, prompts, prompt_seed);
        return std::make_shared<const Backbone>(backbone_id, b.weights());
    };
    if (backbone_id == "toy") return toy(0, 0, 0);
    if (auto seed = parse_suffix(backbone_id, "toy-seed")) return toy(*seed, 0, 0);
    if (backbone_id == "toy-prompted") return toy(0, kToyPrompts, 1);
    if (auto seed = parse_suffix(backbone_id, "toy-prompted-seed")) return toy(0, kToyPrompts, *seed);
    if (backbone_id.rfind("vit:", 0) == 0) {
        const std::filesystem::path dir = backbone_id.substr(4);
        if (!std::filesystem::exists(dir / "config.json")) throw ConfigError("no vit weights at " + dir.string());
        return std::make_shared<const Backbone>(backbone_id, load_vit_weights(dir));
    }
    if (const char* root = std::getenv("PATCHSAE_WEIGHTS")) {
        const auto dir = std::filesystem::path(root) / backbone_id;
        if (std::filesystem::exists(dir / "config.json"))
            return std::make_shared<const Backbone>(backbone_id, load_vit_weights(dir));
    }
    throw ConfigError("unknown backbone id '" + backbone_id +
                      "' (expected toy, toy-seed<N>, toy-prompted[-seed<N>], vit:<dir>, or weights under "
                      "$PATCHSAE_WEIGHTS/<id>/)");
}

} // namespace patchsae
