#include "doctest.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "patchsae/errors.hpp"
#include "patchsae/io.hpp"
#include "patchsae/sae_train.hpp"
#include "patchsae/toydata.hpp"
#include "tempdir.hpp"

using namespace patchsae;
using patchsae::testing::TempDir;

namespace {

SaeConfig small_config(int d_vit) {
    SaeConfig c;
    c.d_vit = d_vit;
    c.expansion_factor = 2;
    c.l1_coefficient = 1e-3;
    c.learning_rate = 1e-3;
    c.warmup_steps = 10;
    c.training_images = 20000;
    c.batch_size_tokens = 256;
    c.dead_latent_window = 50;
    c.log_every = 5;
    c.seed = 3;
    return c;
}

TokenDataset dictionary_data(int n, unsigned seed) {
    const auto dict = toy::synthetic_dictionary(16, 8, 2, n, seed);
    return {dict.samples, 1};
}

} // namespace

TEST_CASE("decoder bias initialization examples") {
    RowMatrixf one(1, 3);
    one << 1, -2, 3;
    CHECK(init_decoder_bias(one, DecoderBiasInit::geometric_median) == Vectorf(one.row(0).transpose()));
    CHECK(init_decoder_bias(one, DecoderBiasInit::mean) == Vectorf(one.row(0).transpose()));

    RowMatrixf line(3, 1);
    line << 0, 1, 10;
    CHECK(init_decoder_bias(line, DecoderBiasInit::geometric_median)[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(init_decoder_bias(line, DecoderBiasInit::mean)[0] == doctest::Approx(11.0 / 3.0));

    RowMatrixf square(4, 2);
    square << 1, 1, 1, 3, 3, 1, 3, 3;
    for (auto mode : {DecoderBiasInit::geometric_median, DecoderBiasInit::mean}) {
        const Vectorf c = init_decoder_bias(square, mode);
        CHECK(c[0] == doctest::Approx(2.0).epsilon(1e-5));
        CHECK(c[1] == doctest::Approx(2.0).epsilon(1e-5));
    }
    CHECK_THROWS_AS(init_decoder_bias(RowMatrixf(0, 2), DecoderBiasInit::mean), ContractError);
}

TEST_CASE("geometric median minimizes the sum of distances") {
    std::mt19937 rng(1);
    std::normal_distribution<float> n;
    RowMatrixf x(40, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    x.row(0) << 30, 30, 30;  // outlier
    const Vectorf gm = init_decoder_bias(x, DecoderBiasInit::geometric_median);
    auto cost = [&](const Vectorf& y) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) s += (x.row(i).transpose() - y).norm();
        return s;
    };
    const double best = cost(gm);
    for (int t = 0; t < 50; ++t) {
        Vectorf probe = gm;
        for (int j = 0; j < 3; ++j) probe[j] += 0.05f * n(rng);
        CHECK(cost(probe) >= best - 1e-4);
    }
}

TEST_CASE("training is deterministic and keeps decoder rows at unit norm") {
    const auto data = dictionary_data(4000, 1);
    const auto cfg = small_config(8);
    std::vector<LossPoint> logged;
    const auto a = train_sae(data, cfg, [&](const LossPoint& p) { logged.push_back(p); });
    const auto b = train_sae(data, cfg);
    REQUIRE(a.report.loss_curve.size() == b.report.loss_curve.size());
    for (std::size_t i = 0; i < a.report.loss_curve.size(); ++i) {
        CHECK(a.report.loss_curve[i].step == b.report.loss_curve[i].step);
        CHECK(a.report.loss_curve[i].mse == b.report.loss_curve[i].mse);
        CHECK(a.report.loss_curve[i].l1 == b.report.loss_curve[i].l1);
    }
    CHECK(a.params == b.params);
    CHECK(logged.size() == a.report.loss_curve.size());
    CHECK(a.report.steps == (cfg.training_images + cfg.batch_size_tokens - 1) / cfg.batch_size_tokens);
    for (Eigen::Index s = 0; s < a.params.w_dec.rows(); ++s) CHECK(std::abs(a.params.w_dec.row(s).norm() - 1.0f) <= 1e-5f);
    CHECK(a.report.final_l0 >= 0.0);
    CHECK(a.report.final_l0 <= cfg.d_sae());
    CHECK(a.report.final_mse >= 0.0);

    auto other = cfg;
    other.seed = 4;
    CHECK_FALSE(train_sae(data, other).params == a.params);
}

TEST_CASE("without sparsity pressure the smoothed training MSE keeps falling") {
    const auto data = dictionary_data(3000, 2);
    auto cfg = small_config(8);
    cfg.l1_coefficient = 0.0;
    cfg.ghost_gradients = false;
    cfg.training_images = 60000;
    cfg.log_every = 1;
    const auto res = train_sae(data, cfg);
    const auto& curve = res.report.loss_curve;
    REQUIRE(curve.size() >= 40);
    std::vector<double> smooth;
    for (std::size_t i = 9; i < curve.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = i - 9; j <= i; ++j) s += curve[j].mse;
        smooth.push_back(s / 10.0);
    }
    const std::size_t stride = smooth.size() / 10;
    for (std::size_t i = stride; i < smooth.size(); i += stride) CHECK(smooth[i] <= smooth[i - stride] * 1.01);
    CHECK(smooth.back() < 0.5 * smooth.front());
}

TEST_CASE("training rejects bad configuration and data") {
    const auto data = dictionary_data(500, 3);
    auto cfg = small_config(8);
    cfg.l1_coefficient = -1.0;
    CHECK_THROWS_AS(train_sae(data, cfg), ConfigError);
    cfg = small_config(9);
    CHECK_THROWS_AS(train_sae(data, cfg), ConfigError);
    cfg = small_config(8);
    cfg.warmup_steps = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config(8);
    cfg.batch_size_tokens = 1000;
    CHECK_THROWS_AS(train_sae(data, cfg), ContractError);
}

TEST_CASE("evaluate_sae l0 equals a brute-force count") {
    std::mt19937 rng(5);
    std::normal_distribution<float> n;
    auto p = SaeParamsf::zeros(6, 12);
    for (Eigen::Index i = 0; i < p.w_enc.size(); ++i) p.w_enc.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < p.b_enc.size(); ++i) p.b_enc.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < p.w_dec.size(); ++i) p.w_dec.data()[i] = n(rng);
    RowMatrixf z(5000, 6);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);

    const auto m = evaluate_sae(z, p);
    long long positives = 0;
    double l1 = 0.0, sse = 0.0;
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
        std::vector<double> h(12);
        for (int s = 0; s < 12; ++s) {
            double pre = p.b_enc[s];
            for (int j = 0; j < 6; ++j) pre += (z(t, j) - p.b_dec[j]) * double(p.w_enc(j, s));
            h[s] = std::max(0.0, pre);
            if (h[s] > 0) ++positives;
            l1 += h[s];
        }
        for (int j = 0; j < 6; ++j) {
            double r = p.b_dec[j];
            for (int s = 0; s < 12; ++s) r += h[s] * p.w_dec(s, j);
            sse += (r - z(t, j)) * (r - z(t, j));
        }
    }
    CHECK(m.tokens == 5000);
    CHECK(m.l0 == doctest::Approx(double(positives) / 5000.0).epsilon(1e-3));
    CHECK(m.l1 == doctest::Approx(l1 / 5000.0).epsilon(1e-5));
    CHECK(m.mse == doctest::Approx(sse / (5000.0 * 6)).epsilon(1e-5));

    auto empty = p;
    empty.w_enc.setZero();
    empty.b_enc.setConstant(-0.5f);
    const auto e = evaluate_sae(z, empty);
    CHECK(e.l0 == 0.0);
    CHECK(e.l1 == 0.0);

    auto perfect = SaeParamsf::zeros(2, 2);
    perfect.w_enc.setIdentity();
    perfect.w_dec.setIdentity();
    RowMatrixf pos(2, 2);
    pos << 1, 2, 3, 4;
    CHECK(evaluate_sae(pos, perfect).mse == 0.0);
}

TEST_CASE("checkpoints round-trip bitwise and reject corruption") {
    TempDir dir("ckpt");
    const auto res = train_sae(dictionary_data(2000, 4), small_config(8));
    Checkpoint ck{res.params, small_config(8), {{"backbone_id", "toy"}, {"hook_layer", 2}}};
    save_checkpoint(ck, dir / "sae");
    const auto back = load_checkpoint(dir / "sae");
    CHECK(back.params == res.params);
    CHECK(back.config.l1_coefficient == ck.config.l1_coefficient);
    CHECK(back.config.d_vit == 8);
    CHECK(back.metadata.at("backbone_id") == "toy");
    CHECK(back.metadata.contains("content_hash"));
    CHECK(back.metadata.contains("created_at"));

    // Layout: header, then W_E, b_enc, W_D, b_dec as little-endian f32.
    const auto bytes = io::read_bytes(dir / "sae/weights.bin");
    const std::size_t n_floats = 8 * 16 + 16 + 16 * 8 + 8;
    REQUIRE(bytes.size() >= n_floats * 4);
    const std::size_t header = bytes.size() - n_floats * 4;
    float first = 0.0f;
    std::memcpy(&first, bytes.data() + header, 4);
    CHECK(first == res.params.w_enc(0, 0));
    float last = 0.0f;
    std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
    CHECK(last == res.params.b_dec[7]);

    std::filesystem::copy(dir / "sae", dir / "magic", std::filesystem::copy_options::recursive);
    auto corrupt = bytes;
    corrupt[0] = 'X';
    io::write_bytes(dir / "magic/weights.bin", corrupt);
    CHECK_THROWS_AS(load_checkpoint(dir / "magic"), FormatError);

    std::filesystem::copy(dir / "sae", dir / "short", std::filesystem::copy_options::recursive);
    std::filesystem::resize_file(dir / "short/weights.bin", bytes.size() - 8);
    CHECK_THROWS_AS(load_checkpoint(dir / "short"), FormatError);

    std::filesystem::copy(dir / "sae", dir / "flip", std::filesystem::copy_options::recursive);
    auto flipped = bytes;
    flipped[header + 5] ^= 0x10;
    io::write_bytes(dir / "flip/weights.bin", flipped);
    CHECK_THROWS_AS(load_checkpoint(dir / "flip"), FormatError);

    // A checkpoint for d_vit 8 cannot evaluate a 32-wide shard.
    BackboneSpec spec{"toy", 1, 2, 32, 4, 1, 1, 1, 0};
    ImageRecord rec{"x", "x.ppm", -1, "", "d", Split::other};
    ActivationShard shard(spec, {rec}, std::vector<float>(64, 0.0f));
    CHECK_THROWS_AS(evaluate_sae(shard, back.params), ContractError);
}
