#include "patchsae/sae_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

namespace patchsae {

std::string to_string(DecoderBiasInit mode) {
    return mode == DecoderBiasInit::mean ? "mean" : "geometric_median";
}

DecoderBiasInit decoder_bias_init_from_string(const std::string& text) {
    if (text == "mean") return DecoderBiasInit::mean;
    if (text == "geometric_median") return DecoderBiasInit::geometric_median;
    throw ConfigError("unknown decoder_bias_init '" + text + "'");
}

void SaeConfig::validate() const {
    if (d_vit <= 0) throw ConfigError("d_vit must be positive");
    if (expansion_factor <= 0) throw ConfigError("expansion_factor must be positive");
    if (!(l1_coefficient >= 0.0)) throw ConfigError("l1 coefficient (lambda_l1) must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (training_images <= 0) throw ConfigError("training_images must be positive");
    if (batch_size_tokens <= 0) throw ConfigError("batch_size_tokens must be positive");
    if (dead_latent_window <= 0) throw ConfigError("dead_latent_window must be positive");
    if (bias_init_samples <= 0 || log_every <= 0) throw ConfigError("bias_init_samples and log_every must be positive");
}

void to_json(io::Json& j, const SaeConfig& c) {
    j = io::Json{{"d_vit", c.d_vit},
                 {"expansion_factor", c.expansion_factor},
                 {"d_sae", c.d_sae()},
                 {"l1_coefficient", c.l1_coefficient},
                 {"learning_rate", c.learning_rate},
                 {"warmup_steps", c.warmup_steps},
                 {"training_images", c.training_images},
                 {"batch_size_tokens", c.batch_size_tokens},
                 {"ghost_gradients", c.ghost_gradients},
                 {"dead_latent_window", c.dead_latent_window},
                 {"decoder_bias_init", to_string(c.decoder_bias_init)},
                 {"normalize_decoder", c.normalize_decoder},
                 {"seed", c.seed},
                 {"bias_init_samples", c.bias_init_samples},
                 {"log_every", c.log_every},
                 {"optimizer", {{"name", "adam"}, {"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"epsilon", c.adam_epsilon}}}};
}

void from_json(const io::Json& j, SaeConfig& c) {
    try {
        c.d_vit = j.at("d_vit");
        c.expansion_factor = j.at("expansion_factor");
        c.l1_coefficient = j.at("l1_coefficient");
        c.learning_rate = j.at("learning_rate");
        c.warmup_steps = j.at("warmup_steps");
        c.training_images = j.at("training_images");
        c.batch_size_tokens = j.at("batch_size_tokens");
        c.ghost_gradients = j.at("ghost_gradients");
        c.dead_latent_window = j.at("dead_latent_window");
        c.decoder_bias_init = decoder_bias_init_from_string(j.at("decoder_bias_init"));
        c.normalize_decoder = j.value("normalize_decoder", true);
        c.seed = j.at("seed");
        c.bias_init_samples = j.value("bias_init_samples", 4096);
        c.log_every = j.value("log_every", 1);
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            c.adam_beta1 = o.value("beta1", 0.9);
            c.adam_beta2 = o.value("beta2", 0.999);
            c.adam_epsilon = o.value("epsilon", 1e-8);
        }
    } catch (const io::Json::exception& e) {
        throw FormatError(std::string("sae config: ") + e.what());
    }
    if (j.contains("d_sae") && j.at("d_sae").get<int>() != c.d_sae())
        throw FormatError("sae config: d_sae != d_vit * expansion_factor");
}

void to_json(io::Json& j, const TrainReport& r) {
    io::Json curve = io::Json::array();
    for (const auto& p : r.loss_curve) curve.push_back({p.step, p.mse, p.l1});
    j = io::Json{{"steps", r.steps},         {"final_mse", r.final_mse},
                 {"final_l1", r.final_l1},   {"final_l0", r.final_l0},
                 {"dead_latent_count", r.dead_latent_count}, {"loss_curve", curve}};
}

TokenDataset collect_tokens(std::span<const ActivationShard> shards, int d_vit) {
    PATCHSAE_REQUIRE(!shards.empty(), "collect_tokens: no shards");
    TokenDataset out;
    out.tokens_per_group = shards.front().spec().tokens_per_image;
    Eigen::Index rows = 0;
    for (const auto& s : shards) {
        if (s.spec().d_vit != d_vit)
            throw ConfigError("shard d_vit " + std::to_string(s.spec().d_vit) + " does not match config d_vit " +
                              std::to_string(d_vit));
        if (s.spec().tokens_per_image != out.tokens_per_group)
            throw ConfigError("shards disagree on tokens_per_image");
        rows += static_cast<Eigen::Index>(s.size()) * s.spec().tokens_per_image;
    }
    out.tokens.resize(rows, d_vit);
    Eigen::Index offset = 0;
    for (const auto& s : shards) {
        const auto n = static_cast<Eigen::Index>(s.data().size()) / d_vit;
        if (n > 0) out.tokens.middleRows(offset, n) = Eigen::Map<const RowMatrixf>(s.data().data(), n, d_vit);
        offset += n;
    }
    return out;
}

Vectorf init_decoder_bias(const RowMatrixf& sample, DecoderBiasInit mode) {
    PATCHSAE_REQUIRE(sample.rows() >= 1, "init_decoder_bias: empty sample");
    const RowMatrixd x = sample.cast<double>();
    Vectord y = x.colwise().mean().transpose();
    if (mode == DecoderBiasInit::mean) return y.cast<float>();

    constexpr double kTol = 1e-6;
    constexpr int kMaxIter = 200;
    constexpr double kCoincide = 1e-12;
    for (int iter = 0; iter < kMaxIter; ++iter) {
        Vectord numerator = Vectord::Zero(x.cols());
        Vectord pull = Vectord::Zero(x.cols());
        double weight = 0.0;
        int coincident = 0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const Vectord diff = x.row(i).transpose() - y;
            const double dist = diff.norm();
            if (dist < kCoincide) {
                ++coincident;
                continue;
            }
            numerator += x.row(i).transpose() / dist;
            pull += diff / dist;
            weight += 1.0 / dist;
        }
        if (weight == 0.0) break;  // every point coincides with y
        const Vectord t = numerator / weight;
        Vectord next;
        if (coincident == 0) {
            next = t;
        } else {
            const double r = pull.norm();
            const double gamma = r > 0.0 ? std::min(1.0, coincident / r) : 1.0;
            next = (1.0 - gamma) * t + gamma * y;
        }
        const double step = (next - y).norm();
        y = next;
        if (step < kTol) break;
    }
    return y.cast<float>();
}

namespace {

struct AdamState {
    SaeParamsf m;
    SaeParamsf v;
};

template <typename Param>
void adam_step(Param& p, const Param& g, Param& m, Param& v, float lr, float b1, float b2, float eps, float c1,
               float c2) {
    m = b1 * m + (1.0f - b1) * g;
    v = (b2 * v.array() + (1.0f - b2) * g.array().square()).matrix();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

} // namespace

TrainResult train_sae(const TokenDataset& data, const SaeConfig& config,
                      const std::function<void(const LossPoint&)>& on_log) {
    config.validate();
    if (data.tokens.cols() != config.d_vit)
        throw ConfigError("training data has " + std::to_string(data.tokens.cols()) + " features, config d_vit is " +
                          std::to_string(config.d_vit));
    PATCHSAE_REQUIRE(data.tokens_per_group >= 1 && data.tokens.rows() % data.tokens_per_group == 0,
                     "train: token rows are not a whole number of images");
    PATCHSAE_REQUIRE(data.tokens.rows() >= config.batch_size_tokens,
                     "train: data supplies " + std::to_string(data.tokens.rows()) + " tokens, fewer than one batch of " +
                         std::to_string(config.batch_size_tokens));

    const int d = config.d_vit;
    const int m = config.d_sae();
    std::mt19937_64 rng(config.seed);

    SaeParamsf params = SaeParamsf::zeros(d, m);
    {
        std::normal_distribution<float> normal(0.0f, 1.0f);
        for (Eigen::Index i = 0; i < params.w_dec.size(); ++i) params.w_dec.data()[i] = normal(rng);
        normalize_decoder_rows(params);
        params.w_enc = params.w_dec.transpose();
        const Eigen::Index n_sample = std::min<Eigen::Index>(data.tokens.rows(), config.bias_init_samples);
        RowMatrixf sample(n_sample, d);
        std::uniform_int_distribution<Eigen::Index> pick(0, data.tokens.rows() - 1);
        for (Eigen::Index i = 0; i < n_sample; ++i)
            sample.row(i) = n_sample == data.tokens.rows() ? data.tokens.row(i) : data.tokens.row(pick(rng));
        params.b_dec = init_decoder_bias(sample, config.decoder_bias_init);
    }

    AdamState adam{SaeParamsf::zeros(d, m), SaeParamsf::zeros(d, m)};
    const std::int64_t budget = config.training_images * data.tokens_per_group;
    const std::int64_t steps = (budget + config.batch_size_tokens - 1) / config.batch_size_tokens;

    std::vector<std::int64_t> order(static_cast<std::size_t>(data.groups()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t group_cursor = 0;
    int token_cursor = 0;

    RowMatrixf batch(config.batch_size_tokens, d);
    SaeParamsf grad;
    Vectorf activity;
    std::vector<int> idle(static_cast<std::size_t>(m), 0);
    std::vector<LatentId> dead;
    TrainReport report;

    for (std::int64_t step = 0; step < steps; ++step) {
        for (int r = 0; r < config.batch_size_tokens; ++r) {
            if (token_cursor == data.tokens_per_group) {
                token_cursor = 0;
                if (++group_cursor == order.size()) {
                    group_cursor = 0;
                    std::shuffle(order.begin(), order.end(), rng);
                }
            }
            batch.row(r) = data.tokens.row(order[group_cursor] * data.tokens_per_group + token_cursor++);
        }

        const LossTerms loss = sae_loss_and_grad(batch, params, config.l1_coefficient, grad, &activity);
        if (config.ghost_gradients) {
            dead.clear();
            for (int s = 0; s < m; ++s)
                if (idle[static_cast<std::size_t>(s)] >= config.dead_latent_window) dead.push_back(s);
            ghost_loss_and_grad(batch, params, dead, grad);
        }
        for (int s = 0; s < m; ++s) idle[static_cast<std::size_t>(s)] = activity[s] > 0.0f ? 0 : idle[static_cast<std::size_t>(s)] + 1;

        if (!std::isfinite(loss.total) || !grad.w_enc.allFinite() || !grad.w_dec.allFinite() ||
            !grad.b_enc.allFinite() || !grad.b_dec.allFinite())
            throw TrainingError("non-finite loss or gradient at step " + std::to_string(step) +
                                " (mse=" + std::to_string(loss.mse) + ", l1=" + std::to_string(loss.l1) +
                                "); lower the learning rate or check the input shards");

        const double warm = config.warmup_steps > 0
                                ? std::min(1.0, static_cast<double>(step + 1) / config.warmup_steps)
                                : 1.0;
        const auto lr = static_cast<float>(config.learning_rate * warm);
        const auto b1 = static_cast<float>(config.adam_beta1);
        const auto b2 = static_cast<float>(config.adam_beta2);
        const auto eps = static_cast<float>(config.adam_epsilon);
        const auto c1 = static_cast<float>(1.0 - std::pow(config.adam_beta1, static_cast<double>(step + 1)));
        const auto c2 = static_cast<float>(1.0 - std::pow(config.adam_beta2, static_cast<double>(step + 1)));
        adam_step(params.w_enc, grad.w_enc, adam.m.w_enc, adam.v.w_enc, lr, b1, b2, eps, c1, c2);
        adam_step(params.b_enc, grad.b_enc, adam.m.b_enc, adam.v.b_enc, lr, b1, b2, eps, c1, c2);
        adam_step(params.w_dec, grad.w_dec, adam.m.w_dec, adam.v.w_dec, lr, b1, b2, eps, c1, c2);
        adam_step(params.b_dec, grad.b_dec, adam.m.b_dec, adam.v.b_dec, lr, b1, b2, eps, c1, c2);
        if (config.normalize_decoder) normalize_decoder_rows(params);

        if (step % config.log_every == 0 || step + 1 == steps) {
            const LossPoint point{step, loss.mse, loss.l1};
            report.loss_curve.push_back(point);
            if (on_log) on_log(point);
        }
    }
    report.steps = steps;

    // Final metrics over at most 2^18 tokens, strided through the dataset.
    constexpr Eigen::Index kEvalTokens = 1 << 18;
    const Eigen::Index stride = std::max<Eigen::Index>(1, data.tokens.rows() / kEvalTokens);
    const Eigen::Index n_eval = (data.tokens.rows() + stride - 1) / stride;
    RowMatrixf eval(n_eval, d);
    for (Eigen::Index i = 0; i < n_eval; ++i) eval.row(i) = data.tokens.row(i * stride);
    const SaeMetrics final_metrics = evaluate_sae(eval, params);
    report.final_mse = final_metrics.mse;
    report.final_l1 = final_metrics.l1;
    report.final_l0 = final_metrics.l0;
    Vectord fired = Vectord::Zero(m);
    for (Eigen::Index start = 0; start < n_eval; start += 4096) {
        const Eigen::Index rows = std::min<Eigen::Index>(4096, n_eval - start);
        fired += encode(eval.middleRows(start, rows), params).cast<double>().colwise().sum().transpose();
    }
    report.dead_latent_count = static_cast<int>((fired.array() == 0.0).count());
    return {std::move(params), std::move(report)};
}

SaeMetrics evaluate_sae(const RowMatrixf& tokens, const SaeParamsf& params) {
    PATCHSAE_REQUIRE(tokens.cols() == params.d_vit(), "evaluate_sae: dimension mismatch, tokens have " +
                                                          std::to_string(tokens.cols()) + " features, sae expects " +
                                                          std::to_string(params.d_vit()));
    SaeMetrics out;
    double sse = 0.0;
    double l1 = 0.0;
    double positives = 0.0;
    constexpr Eigen::Index kChunk = 4096;
    for (Eigen::Index start = 0; start < tokens.rows(); start += kChunk) {
        const Eigen::Index rows = std::min(kChunk, tokens.rows() - start);
        const auto z = tokens.middleRows(start, rows);
        const RowMatrixf h = encode(z, params);
        const RowMatrixf err = decode(h, params) - z;
        sse += err.cast<double>().squaredNorm();
        l1 += h.cast<double>().sum();
        positives += static_cast<double>((h.array() > 0.0f).count());
    }
    out.tokens = tokens.rows();
    if (out.tokens > 0) {
        const auto n = static_cast<double>(out.tokens);
        out.mse = sse / (n * params.d_vit());
        out.l1 = l1 / n;
        out.l0 = positives / n;
    }
    return out;
}

SaeMetrics evaluate_sae(const ActivationShard& shard, const SaeParamsf& params) {
    if (shard.spec().d_vit != params.d_vit())
        throw ContractError("evaluate_sae: dimension mismatch, shard d_vit " + std::to_string(shard.spec().d_vit) +
                            " vs sae d_vit " + std::to_string(params.d_vit()));
    const auto rows = static_cast<Eigen::Index>(shard.data().size()) / params.d_vit();
    return evaluate_sae(RowMatrixf(Eigen::Map<const RowMatrixf>(shard.data().data(), rows, params.d_vit())), params);
}

namespace {

constexpr char kMagic[4] = {'P', 'S', 'A', 'E'};
constexpr std::uint32_t kWeightsVersion = 1;

} // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir) {
    const auto& p = checkpoint.params;
    p.validate();
    std::vector<std::uint8_t> bytes(kMagic, kMagic + 4);
    bytes.resize(8);
    std::memcpy(bytes.data() + 4, &kWeightsVersion, sizeof kWeightsVersion);
    io::append_f32(bytes, std::span<const float>(p.w_enc.data(), static_cast<std::size_t>(p.w_enc.size())));
    io::append_f32(bytes, std::span<const float>(p.b_enc.data(), static_cast<std::size_t>(p.b_enc.size())));
    io::append_f32(bytes, std::span<const float>(p.w_dec.data(), static_cast<std::size_t>(p.w_dec.size())));
    io::append_f32(bytes, std::span<const float>(p.b_dec.data(), static_cast<std::size_t>(p.b_dec.size())));
    std::filesystem::create_directories(dir);
    io::write_bytes(dir / "weights.bin", bytes);

    io::Json meta = checkpoint.metadata.is_object() ? checkpoint.metadata : io::Json::object();
    if (!meta.contains("created_at")) meta["created_at"] = io::utc_timestamp();
    meta["content_hash"] = io::git_blob_hash(bytes);
    meta["weights_layout"] = "PSAE u32 header; w_enc[d_vit,d_sae], b_enc, w_dec[d_sae,d_vit], b_dec; float32 LE";
    meta["decoder_rows_unit_norm"] = checkpoint.config.normalize_decoder;
    io::Json doc = {{"format_version", 1}, {"config", checkpoint.config}, {"metadata", meta}};
    io::write_json(dir / "sae.json", doc);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const io::Json doc = io::read_json(dir / "sae.json");
    if (doc.value("format_version", 0) != 1) throw FormatError(dir.string() + "/sae.json: unsupported format_version");
    Checkpoint ck;
    if (!doc.contains("config")) throw FormatError(dir.string() + "/sae.json: missing config");
    ck.config = doc.at("config").get<SaeConfig>();
    ck.metadata = doc.value("metadata", io::Json::object());

    const auto bytes = io::read_bytes(dir / "weights.bin");
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError(dir.string() + "/weights.bin: bad magic bytes");
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, sizeof version);
    if (version != kWeightsVersion)
        throw FormatError(dir.string() + "/weights.bin: unsupported version " + std::to_string(version));
    const int d = ck.config.d_vit;
    const int m = ck.config.d_sae();
    const std::size_t expected = 8 + sizeof(float) * (2 * static_cast<std::size_t>(d) * m + d + m);
    if (bytes.size() != expected)
        throw FormatError(dir.string() + "/weights.bin: " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(expected) + " (truncated or wrong dimensions)");
    if (ck.metadata.contains("content_hash") && ck.metadata.at("content_hash") != io::git_blob_hash(bytes))
        throw FormatError(dir.string() + "/weights.bin: content hash does not match sae.json");

    ck.params = SaeParamsf::zeros(d, m);
    const std::uint8_t* cursor = bytes.data() + 8;
    auto take = [&](float* out, Eigen::Index n) {
        std::memcpy(out, cursor, static_cast<std::size_t>(n) * sizeof(float));
        cursor += static_cast<std::size_t>(n) * sizeof(float);
    };
    take(ck.params.w_enc.data(), ck.params.w_enc.size());
    take(ck.params.b_enc.data(), ck.params.b_enc.size());
    take(ck.params.w_dec.data(), ck.params.w_dec.size());
    take(ck.params.b_dec.data(), ck.params.b_dec.size());
    ck.params.validate();
    return ck;
}

} // namespace patchsae
