#include "doctest.h"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "patchsae/backbone.hpp"
#include "patchsae/errors.hpp"
#include "tempdir.hpp"

using namespace patchsae;
using patchsae::testing::TempDir;

namespace {

ImageU8 random_image(int size, unsigned seed) {
    std::mt19937 rng(seed);
    ImageU8 img{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size * 3))};
    for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng() & 0xff);
    return img;
}

double rel_err(const Vectorf& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        num += (a[static_cast<Eigen::Index>(i)] - b[i]) * (a[static_cast<Eigen::Index>(i)] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / den);
}

double rel_err(const Vectorf& a, const Vectorf& b) { return (a - b).norm() / b.norm(); }

double max_abs_diff(const RowMatrixf& a, const oracle::Mat& b, std::size_t row_offset = 0) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            worst = std::max(worst, std::abs(a(i, j) - b[row_offset + static_cast<std::size_t>(i)][j]));
    return worst;
}

} // namespace

TEST_CASE("toy forward pass matches the straight-line oracle") {
    const Backbone bb = load_toy_backbone(7, 2, 5, 8, 6);
    const auto& w = bb.weights();
    REQUIRE(w.config.image_size == 8);
    const auto img = random_image(8, 3);
    const auto pixels = oracle::normalize_pixels(img, w.config);

    const auto mine = bb.preprocess(img);
    REQUIRE(mine.size() == pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) CHECK(mine[i] == doctest::Approx(pixels[i]).epsilon(1e-6));

    for (int hook = 1; hook <= 2; ++hook) {
        const auto state = bb.forward_to(img, hook);
        const auto ref = oracle::forward_to(w, pixels, hook);
        CHECK(state.tokens.rows() == 5);
        CHECK(state.tokens.cols() == 8);
        CHECK(state.extra.rows() == 0);
        CHECK(max_abs_diff(state.tokens, ref) < 1e-4);
    }
    const auto ref_embed = oracle::tail(w, oracle::forward_to(w, pixels, 2), 2);
    CHECK(rel_err(bb.embed(img), ref_embed) < 1e-5);
}

TEST_CASE("constant-zero image runs through the oracle and the backbone alike") {
    const Backbone bb = load_toy_backbone(11, 2, 5, 8, 4);
    ImageU8 black{8, 8, std::vector<std::uint8_t>(8 * 8 * 3, 0)};
    const auto pixels = oracle::normalize_pixels(black, bb.config());
    CHECK(pixels[0] == doctest::Approx(-bb.config().mean[0] / bb.config().std[0]));
    const auto ref = oracle::tail(bb.weights(), oracle::forward_to(bb.weights(), pixels, 1), 1);
    CHECK(rel_err(bb.embed(black), ref) < 1e-5);
}

TEST_CASE("run_tail from the hook reproduces the native embedding at every layer") {
    const Backbone bb = load_toy_backbone(0, 4, 17, 32, 16);
    for (unsigned seed = 0; seed < 5; ++seed) {
        const auto img = random_image(16, seed);
        const Vectorf native = bb.embed(img);
        for (int hook = 1; hook <= 4; ++hook) {
            const auto state = bb.forward_to(img, hook);
            CHECK(rel_err(bb.run_tail(state, hook), native) <= 1e-4);
        }
    }
}

TEST_CASE("tail from the last block is ln_post then projection") {
    const Backbone bb = load_toy_backbone(2, 2, 5, 8, 3);
    const auto img = random_image(8, 9);
    const auto state = bb.forward_to(img, 2);
    const auto ref = oracle::tail(bb.weights(), oracle::from_eigen(state.tokens), 2);
    CHECK(rel_err(bb.run_tail(state, 2), ref) < 1e-5);
}

TEST_CASE("prompted backbone keeps prompt rows and matches the oracle") {
    const Backbone bb = load_toy_backbone(0, 3, 5, 8, 4, 2, 1);
    REQUIRE(bb.config().n_prompts == 2);
    const auto img = random_image(8, 4);
    const auto pixels = oracle::normalize_pixels(img, bb.config());
    const auto state = bb.forward_to(img, 2);
    CHECK(state.extra.rows() == 2);
    const auto ref = oracle::forward_to(bb.weights(), pixels, 2);
    CHECK(max_abs_diff(state.tokens, ref) < 1e-4);
    CHECK(max_abs_diff(state.extra, ref, 5) < 1e-4);
    CHECK(rel_err(bb.run_tail(state, 2), bb.embed(img)) <= 1e-4);

    // Same image weights without prompts give a different embedding.
    const Backbone plain = load_toy_backbone(0, 3, 5, 8, 4);
    CHECK(rel_err(plain.embed(img), bb.embed(img)) > 1e-3);
}

TEST_CASE("toy backbones are deterministic per seed") {
    const auto a = load_backbone("toy");
    const auto b = load_backbone("toy");
    const auto c = load_backbone("toy-seed1");
    const auto img = random_image(16, 1);
    CHECK(a->embed(img) == b->embed(img));
    CHECK(a->embed(img) != c->embed(img));
    const auto spec = a->spec(2);
    CHECK(spec.tokens_per_image == 17);
    CHECK(spec.d_vit == 32);
    CHECK(spec.grid_h == 4);
    CHECK(spec.n_blocks == 4);
    CHECK(load_backbone("toy-prompted")->spec(2).extra_tokens == 2);
}

TEST_CASE("backbone contract violations") {
    const auto bb = load_backbone("toy");
    const auto img = random_image(16, 1);
    CHECK_THROWS_AS(bb->forward_to(img, 0), ConfigError);
    CHECK_THROWS_AS(bb->forward_to(img, 5), ConfigError);
    CHECK_THROWS_AS(bb->run_tail(RowMatrixf::Zero(16, 32), RowMatrixf(), 2), ContractError);
    CHECK_THROWS_AS(bb->run_tail(RowMatrixf::Zero(17, 31), RowMatrixf(), 2), ContractError);
    CHECK_THROWS_AS(load_backbone("resnet"), ConfigError);
    CHECK_THROWS_AS(load_toy_backbone(0, 2, 6, 8, 4), ConfigError);
}

TEST_CASE("ViT weights round-trip through a directory") {
    TempDir dir("vit");
    const Backbone bb = load_toy_backbone(5, 2, 5, 8, 4, 1, 3);
    save_vit_weights(bb.weights(), dir.path());
    const auto loaded = load_backbone("vit:" + dir.path().string());
    const auto img = random_image(8, 2);
    CHECK(loaded->embed(img) == bb.embed(img));
    CHECK_THROWS_AS(load_backbone("vit:" + (dir / "nope").string()), ConfigError);
}
