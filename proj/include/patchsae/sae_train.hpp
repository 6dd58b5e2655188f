#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patchsae/io.hpp"
#include "patchsae/sae.hpp"
#include "patchsae/shard.hpp"

namespace patchsae {

enum class DecoderBiasInit { geometric_median, mean };

std::string to_string(DecoderBiasInit mode);
DecoderBiasInit decoder_bias_init_from_string(const std::string& text);

struct SaeConfig {
    int d_vit = 768;
    int expansion_factor = 64;
    double l1_coefficient = 8e-5;
    double learning_rate = 4e-4;
    int warmup_steps = 500;
    /// Token budget expressed in images; tokens seen = images * tokens_per_image.
    std::int64_t training_images = 2'621'440;
    int batch_size_tokens = 4096;
    bool ghost_gradients = true;
    int dead_latent_window = 2000;
    DecoderBiasInit decoder_bias_init = DecoderBiasInit::geometric_median;
    bool normalize_decoder = true;
    std::uint64_t seed = 0;
    int bias_init_samples = 4096;
    int log_every = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;

    int d_sae() const { return d_vit * expansion_factor; }
    void validate() const;
};

void to_json(io::Json& j, const SaeConfig& c);
void from_json(const io::Json& j, SaeConfig& c);

struct LossPoint {
    std::int64_t step = 0;
    double mse = 0.0;
    double l1 = 0.0;
};

struct SaeMetrics {
    double mse = 0.0;
    double l1 = 0.0;
    double l0 = 0.0;  ///< mean count of strictly positive latents per token
    std::int64_t tokens = 0;
};

struct TrainReport {
    std::int64_t steps = 0;
    double final_mse = 0.0;
    double final_l1 = 0.0;
    double final_l0 = 0.0;
    int dead_latent_count = 0;
    std::vector<LossPoint> loss_curve;
};

void to_json(io::Json& j, const TrainReport& r);

/// Token rows grouped by image: rows [i*group, (i+1)*group) belong to one image.
struct TokenDataset {
    RowMatrixf tokens;
    int tokens_per_group = 1;

    std::int64_t groups() const { return tokens.rows() / tokens_per_group; }
};

/// Concatenates every shard's tokens; throws ConfigError on d_vit mismatch.
TokenDataset collect_tokens(std::span<const ActivationShard> shards, int d_vit);

/// Arithmetic mean or geometric median (Weiszfeld with the Vardi-Zhang
/// correction at data points; tolerance 1e-6, at most 200 iterations).
Vectorf init_decoder_bias(const RowMatrixf& sample, DecoderBiasInit mode);

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    SaeParamsf params;
    TrainReport report;
};

/// Adam on the reconstruction + L1 objective with linear warmup, optional
/// ghost gradients and unit-norm decoder rows after each step. Deterministic
/// for a fixed seed and dataset.
TrainResult train_sae(const TokenDataset& data, const SaeConfig& config,
                      const std::function<void(const LossPoint&)>& on_log = {});

SaeMetrics evaluate_sae(const RowMatrixf& tokens, const SaeParamsf& params);
SaeMetrics evaluate_sae(const ActivationShard& shard, const SaeParamsf& params);

struct Checkpoint {
    SaeParamsf params;
    SaeConfig config;
    io::Json metadata;  ///< backbone_id, hook_layer, created_at, content_hash, ...
};

/// Directory with sae.json and weights.bin (8-byte "PSAE" + u32 version
/// header, then float32 w_enc, b_enc, w_dec, b_dec row-major).
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

} // namespace patchsae
