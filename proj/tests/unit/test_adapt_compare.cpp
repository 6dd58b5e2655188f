#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "patchsae/adapt_compare.hpp"
#include "patchsae/errors.hpp"
#include "patchsae/toydata.hpp"
#include "tempdir.hpp"

using namespace patchsae;
using patchsae::testing::TempDir;

namespace {

SparseCounts descending(int n) {
    SparseCounts c;
    for (int s = 0; s < n; ++s) c[s] = n - s;
    return c;
}

SparseCounts random_counts(std::mt19937& rng, int d, int max_count) {
    SparseCounts c;
    for (int s = 0; s < d; ++s)
        if (rng() % 3 == 0) c[s] = static_cast<std::int64_t>(rng() % max_count) + 1;
    return c;
}

GroupBounds fixed_bounds(double upper, double lower) {
    GroupBounds b;
    b.upper_x = b.upper_y = upper;
    b.lower_x = b.lower_y = lower;
    return b;
}

SaeParamsf random_sae(int d_vit, int d_sae, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> g;
    auto p = SaeParamsf::zeros(d_vit, d_sae);
    for (Eigen::Index i = 0; i < p.w_dec.size(); ++i) p.w_dec.data()[i] = g(rng);
    normalize_decoder_rows(p);
    p.w_enc = p.w_dec.transpose();
    p.b_enc.setConstant(-0.5f);
    return p;
}

/// Value at a 1-based rank of the descending positive values, clamped to the last.
double rank_oracle(const SparseCounts& c, int rank) {
    std::vector<double> v;
    for (const auto& [s, n] : c) v.push_back(static_cast<double>(n));
    std::sort(v.rbegin(), v.rend());
    return v[std::min<std::size_t>(v.size(), static_cast<std::size_t>(rank)) - 1];
}

} // namespace

TEST_CASE("derive_bounds examples") {
    const auto b = derive_bounds(descending(10), descending(10), 2, 4);
    CHECK(b.upper_x == 9);
    CHECK(b.lower_x == 7);
    CHECK(b.upper_y == 9);
    CHECK(b.lower_y == 7);
    CHECK_FALSE(b.clamped_x);

    SparseCounts flat{{1, 4}, {2, 4}, {3, 4}};
    const auto f = derive_bounds(flat, flat, 1, 2);
    CHECK(f.upper_x == 4);
    CHECK(f.lower_x == 4);
    for (const auto& g : assign_groups(flat, flat, f)) CHECK(g.group == Group::high);

    const auto clamped = derive_bounds(descending(3), descending(10), 2, 4);
    CHECK(clamped.lower_x == 1);
    CHECK(clamped.clamped_x);
    CHECK_FALSE(clamped.clamped_y);

    CHECK_THROWS_AS(derive_bounds({}, descending(3), 1, 2), ContractError);
    CHECK_THROWS_AS(derive_bounds(descending(3), {}, 1, 2), ContractError);
    CHECK_THROWS_AS(derive_bounds(descending(3), descending(3), 2, 2), ContractError);
    CHECK_THROWS_AS(derive_bounds(descending(3), descending(3), 0, 2), ContractError);
}

TEST_CASE("group predicates: hand case") {
    const auto b = fixed_bounds(5, 2);
    CHECK(classify_latent(6, 1, b) == Group::high_to_low);
    CHECK(classify_latent(1, 6, b) == Group::low_to_high);
    CHECK(classify_latent(6, 6, b) == Group::high);
    CHECK(classify_latent(3, 3, b) == Group::neither);
    CHECK(classify_latent(5, 2, b) == Group::high_to_low);  // bounds are inclusive
}

TEST_CASE("assign_groups covers latents active on either axis, exclusively") {
    std::mt19937 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_counts(rng, 60, 30);
        const auto y = random_counts(rng, 60, 30);
        if (x.empty() || y.empty()) continue;
        const auto b = derive_bounds(x, y, 3, 8);
        CHECK(b.upper_x >= b.lower_x);
        CHECK(b.upper_y >= b.lower_y);
        CHECK(b.upper_x == rank_oracle(x, 3));
        CHECK(b.lower_y == rank_oracle(y, 8));
        const auto groups = assign_groups(x, y, b);
        std::set<int> expected;
        for (auto& [s, n] : x) expected.insert(s);
        for (auto& [s, n] : y) expected.insert(s);
        CHECK(groups.size() == expected.size());
        GroupCounts manual;
        for (const auto& g : groups) {
            const double gx = static_cast<double>(g.x), gy = static_cast<double>(g.y);
            const bool high = gx >= b.upper_x && gy >= b.upper_y;
            const bool h2l = gx >= b.upper_x && gy <= b.lower_y;
            const bool l2h = gx <= b.lower_x && gy >= b.upper_y;
            CHECK(int(high) + int(h2l) + int(l2h) <= 1);
            CHECK(g.group == (high ? Group::high : h2l ? Group::high_to_low : l2h ? Group::low_to_high : Group::neither));
            ++(g.group == Group::high ? manual.high : g.group == Group::high_to_low ? manual.high_to_low
                                                    : g.group == Group::low_to_high ? manual.low_to_high
                                                                                     : manual.neither);
        }
        const auto counts = count_groups(groups);
        CHECK(counts.high == manual.high);
        CHECK(counts.high_to_low == manual.high_to_low);
        CHECK(counts.low_to_high == manual.low_to_high);
        CHECK(counts.neither == manual.neither);
    }
}

TEST_CASE("identical axes have no off-diagonal latents and r = 1") {
    std::mt19937 rng(3);
    const auto x = random_counts(rng, 80, 50);
    const auto groups = assign_groups(x, x, derive_bounds(x, x, 5, 10));
    const auto c = count_groups(groups);
    CHECK(c.high_to_low == 0);
    CHECK(c.low_to_high == 0);
    CHECK(*pearson_r(groups) == doctest::Approx(1.0));
}

TEST_CASE("swapping axes transposes the off-diagonal groups") {
    std::mt19937 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const auto x = random_counts(rng, 80, 40);
        const auto y = random_counts(rng, 80, 40);
        const auto xy = assign_groups(x, y, derive_bounds(x, y, 4, 12));
        const auto yx = assign_groups(y, x, derive_bounds(y, x, 4, 12));
        const auto a = count_groups(xy), b = count_groups(yx);
        CHECK(a.high == b.high);
        CHECK(a.high_to_low == b.low_to_high);
        CHECK(a.low_to_high == b.high_to_low);
        CHECK(*pearson_r(xy) == doctest::Approx(*pearson_r(yx)).epsilon(1e-12));
    }
}

TEST_CASE("pearson r is affine invariant; group counts are invariant under monotone rescaling") {
    std::mt19937 rng(5);
    const auto x = random_counts(rng, 100, 30);
    const auto y = random_counts(rng, 100, 30);
    const auto base = assign_groups(x, y, derive_bounds(x, y, 5, 15));

    SparseCounts y2, ysq;
    for (const auto& [s, n] : y) {
        y2[s] = 2 * n;
        ysq[s] = n * n;
    }
    const auto doubled = assign_groups(x, y2, derive_bounds(x, y2, 5, 15));
    CHECK(*pearson_r(doubled) == doctest::Approx(*pearson_r(base)).epsilon(1e-12));

    const auto squared = assign_groups(x, ysq, derive_bounds(x, ysq, 5, 15));
    const auto a = count_groups(base), b = count_groups(squared);
    CHECK(a.high == b.high);
    CHECK(a.high_to_low == b.high_to_low);
    CHECK(a.low_to_high == b.low_to_high);

    // y = 2x is perfectly correlated.
    SparseCounts x2;
    for (const auto& [s, n] : x) x2[s] = 2 * n;
    CHECK(*pearson_r(assign_groups(x, x2, derive_bounds(x, x2, 5, 15))) == doctest::Approx(1.0));
    CHECK_FALSE(pearson_r({}).has_value());
    CHECK_FALSE(pearson_r({{0, 1, 1, Group::high}, {1, 1, 2, Group::high}}).has_value());
}

TEST_CASE("union bound mode pools both axes") {
    SparseCounts x{{0, 10}, {1, 8}, {2, 6}};
    SparseCounts y{{0, 1}, {1, 2}, {2, 3}};
    const auto b = derive_bounds(x, y, 2, 3, BoundMode::union_axes);
    // pooled descending: 10 8 6 3 2 1
    CHECK(b.upper_x == 8);
    CHECK(b.upper_y == 8);
    CHECK(b.lower_x == 6);
    CHECK(b.lower_y == 6);
    CHECK(bound_mode_from_string("union") == BoundMode::union_axes);
}

TEST_CASE("compare_split: averages, dataset level and skipped entities") {
    const std::map<int, SparseCounts> a{{0, descending(6)}, {1, descending(6)}, {2, {}}, {3, descending(4)}};
    const std::map<int, SparseCounts> b{{0, descending(6)}, {1, {{5, 9}, {0, 1}}}, {2, descending(3)}, {3, descending(4)}};
    CompareOptions opt;
    opt.upper_rank = 1;
    opt.lower_rank = 2;
    const auto full = compare_split(a, b, EvalSplit::full, 4, opt);
    CHECK(full.skipped == std::vector<std::string>{"2"});
    REQUIRE(full.entities.size() == 3);
    double h = 0, h2l = 0, l2h = 0;
    for (const auto& e : full.entities) {
        h += static_cast<double>(e.counts.high) / 3.0;
        h2l += static_cast<double>(e.counts.high_to_low) / 3.0;
        l2h += static_cast<double>(e.counts.low_to_high) / 3.0;
    }
    CHECK(full.average_high == doctest::Approx(h));
    CHECK(full.average_high_to_low == doctest::Approx(h2l));
    CHECK(full.average_low_to_high == doctest::Approx(l2h));
    // Class 1: x top latent 0 (6) drops to 1 on y; latent 5 rises from 1 to 9.
    const auto& c1 = full.entities[1];
    CHECK(c1.entity_id == "1");
    CHECK(c1.counts.high_to_low == 1);
    CHECK(c1.counts.low_to_high == 1);

    const auto base = compare_split(a, b, EvalSplit::base, 4, opt);
    CHECK(base.entities.size() == 2);
    const auto novel = compare_split(a, b, EvalSplit::novel, 4, opt);
    CHECK(novel.entities.size() == 1);
    CHECK(novel.skipped.size() == 1);

    opt.level = Level::dataset;
    const auto ds = compare_split(a, b, EvalSplit::full, 4, opt);
    REQUIRE(ds.entities.size() == 1);
    CHECK(ds.entities[0].entity_id == "dataset");
}

TEST_CASE("compare_report: same backbone, swapped backbones, brute-force oracle and mismatches") {
    TempDir dir("cmp");
    const auto set = toy::write_image_set(dir.path(), Split::base_test, 4, 5, 16, 2);
    const auto shard_a = extract_activations(set.records, *load_backbone("toy"), 2, 32).shard;
    const auto shard_b = extract_activations(set.records, *load_backbone("toy-seed1"), 2, 32).shard;
    const auto params = random_sae(32, 128, 9);
    CompareOptions opt;
    opt.aggregation = {0.2, 4, 4, true};
    opt.upper_rank = 5;
    opt.lower_rank = 10;

    const auto same = compare_report(shard_a, shard_a, params, opt);
    for (const auto& s : same.splits) {
        CHECK(s.average_high_to_low == 0.0);
        CHECK(s.average_low_to_high == 0.0);
        REQUIRE(s.pearson_r.has_value());
        CHECK(*s.pearson_r == doctest::Approx(1.0));
    }

    const auto ab = compare_report(shard_a, shard_b, params, opt);
    const auto ba = compare_report(shard_b, shard_a, params, opt);
    for (std::size_t i = 0; i < ab.splits.size(); ++i) {
        CHECK(ab.splits[i].average_high == doctest::Approx(ba.splits[i].average_high));
        CHECK(ab.splits[i].average_high_to_low == doctest::Approx(ba.splits[i].average_low_to_high));
        CHECK(ab.splits[i].average_low_to_high == doctest::Approx(ba.splits[i].average_high_to_low));
    }

    // Brute force: triple-loop counts, sort-based bounds, predicate groups.
    std::vector<RowMatrixf> ha, hb;
    for (std::size_t i = 0; i < shard_a.size(); ++i) {
        ha.push_back(encode(shard_a.tokens(i), params));
        hb.push_back(encode(shard_b.tokens(i), params));
    }
    const auto ia = oracle::image_counts(shard_a, ha, 0.2, true);
    const auto ib = oracle::image_counts(shard_b, hb, 0.2, true);
    std::map<int, SparseCounts> ca, cb;
    for (const auto& r : shard_a.records()) {
        for (const auto& [s, n] : ia.at(r.image_id)) ca[r.label_id][s] += n;
        for (const auto& [s, n] : ib.at(r.image_id)) cb[r.label_id][s] += n;
    }
    const auto& full = ab.split(EvalSplit::full);
    REQUIRE(full.entities.size() == 4);
    double avg_high = 0.0;
    for (const auto& e : full.entities) {
        const int c = std::stoi(e.entity_id);
        const double ux = rank_oracle(ca[c], 5), lx = rank_oracle(ca[c], 10);
        const double uy = rank_oracle(cb[c], 5), ly = rank_oracle(cb[c], 10);
        CHECK(e.bounds.upper_x == ux);
        CHECK(e.bounds.lower_y == ly);
        std::int64_t high = 0, h2l = 0, l2h = 0;
        std::set<int> active;
        for (auto& [s, n] : ca[c]) active.insert(s);
        for (auto& [s, n] : cb[c]) active.insert(s);
        for (int s : active) {
            const double x = ca[c].contains(s) ? ca[c][s] : 0, y = cb[c].contains(s) ? cb[c][s] : 0;
            if (x >= ux && y >= uy) ++high;
            else if (x >= ux && y <= ly) ++h2l;
            else if (x <= lx && y >= uy) ++l2h;
        }
        CHECK(e.counts.high == high);
        CHECK(e.counts.high_to_low == h2l);
        CHECK(e.counts.low_to_high == l2h);
        CHECK(e.latents.size() == active.size());
        avg_high += static_cast<double>(high) / 4.0;
    }
    CHECK(full.average_high == doctest::Approx(avg_high));

    const auto fewer = shard_b.select({0, 1, 2});
    CHECK_THROWS_AS(compare_report(shard_a, fewer, params, opt), ContractError);
    auto renamed = set.records;
    renamed[0].image_id = "other";
    std::vector<float> data = shard_b.data();
    const ActivationShard other(shard_b.spec(), renamed, data);
    CHECK_THROWS_AS(compare_report(shard_a, other, params, opt), ContractError);
}

TEST_CASE("delta attachment and report serialization") {
    const std::map<int, SparseCounts> a{{0, descending(5)}, {1, descending(5)}};
    CompareOptions opt;
    opt.upper_rank = 1;
    opt.lower_rank = 2;
    ComparisonReport report;
    report.dataset = "d";
    report.backbone_a = "x";
    report.backbone_b = "y";
    report.options = opt;
    report.options.n_classes = 2;
    for (auto s : opt.splits) report.splits.push_back(compare_split(a, a, s, 2, opt));
    EvalReport zs, ad;
    zs.split = ad.split = EvalSplit::base;
    zs.accuracy = 42.61;
    ad.accuracy = 73.07;
    attach_accuracy(report, zs, ad);
    CHECK(*report.split(EvalSplit::base).delta == doctest::Approx(53.08).epsilon(1e-3));
    CHECK_FALSE(report.split(EvalSplit::novel).delta.has_value());

    const auto j = comparison_report_json(report);
    CHECK(j.at("dataset") == "d");
    const auto csv = scatter_csv(report);
    CHECK(csv.rfind("split,entity_id,latent_id,x,y,group\n", 0) == 0);
}
