// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "patchsae/adapt_compare.hpp"
#include "patchsae/concept_maps.hpp"
#include "patchsae/latent_stats.hpp"
#include "patchsae/mask_eval.hpp"
#include "patchsae/sae_train.hpp"
#include "patchsae/toydata.hpp"
#include "toy_workspace.hpp"

using namespace patchsae;
using patchsae::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

SaeConfig dictionary_config(double l1) {
    SaeConfig c;
    c.d_vit = 32;
    c.expansion_factor = 4;
    c.l1_coefficient = l1;
    c.learning_rate = 1e-3;
    c.warmup_steps = 100;
    c.training_images = 500000;
    c.batch_size_tokens = 1024;
    c.dead_latent_window = 200;
    c.seed = 0;
    return c;
}

const toy::SyntheticDictionary& dictionary() {
    static const auto d = toy::synthetic_dictionary(64, 32, 3, 50000, 0);
    return d;
}

// ---------------------------------------------------------------------------

Outcome dictionary_recovery() {
    const auto& dict = dictionary();
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train_sae({dict.samples, 1}, dictionary_config(1e-3));
    const double elapsed = seconds_since(t0);
    int matched = 0;
    for (Eigen::Index a = 0; a < dict.atoms.rows(); ++a) {
        double best = -1.0;
        for (Eigen::Index s = 0; s < res.params.w_dec.rows(); ++s) {
            const auto row = res.params.w_dec.row(s).cast<double>();
            const auto atom = dict.atoms.row(a).cast<double>();
            best = std::max(best, row.dot(atom) / (row.norm() * atom.norm()));
        }
        if (best >= 0.9) ++matched;
    }
    const double frac = matched / 64.0;
    return {frac >= 0.8 && elapsed <= 300.0,
            fmt("%d/64 atoms at cosine >= 0.9 (%.0f%%, need >= 80%%) in %.1f s (limit 300 s)", matched, 100 * frac, elapsed)};
}

Outcome gradient_check() {
    double worst = 0.0;
    int checked = 0;
    for (unsigned seed = 0; seed < 10; ++seed) {
        std::mt19937 rng(seed);
        std::normal_distribution<double> n(0.0, 0.5);
        auto p = SaeParamsd::zeros(4, 8);
        for (auto* m : {&p.w_enc, &p.w_dec})
            for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
        for (auto* v : {&p.b_enc, &p.b_dec})
            for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = n(rng);
        RowMatrixd z(5, 4);
        for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = 2.0 * n(rng);
        const RowMatrixd pre = ((z.rowwise() - p.b_dec.transpose()) * p.w_enc).rowwise() + p.b_enc.transpose();
        if ((pre.array().abs() < 1e-3).any()) continue;  // ReLU kink
        SaeParamsd grad;
        sae_loss_and_grad(z, p, 0.3, grad);
        const auto numeric = oracle::numeric_gradient(p, [&](const SaeParamsd& q) { return sae_loss(z, q, 0.3).total; });
        worst = std::max(worst, oracle::max_relative_error(grad, numeric));
        ++checked;
    }
    return {checked >= 5 && worst <= 1e-4,
            fmt("max rel err %.2e over %d draws (5 tokens, d_vit 4, d_sae 8; limit 1e-4)", worst, checked)};
}

Outcome lambda_sweep() {
    std::vector<double> l0;
    for (double l1 : {0.0, 8e-5, 8e-4}) {
        auto cfg = dictionary_config(l1);
        cfg.training_images = 200000;
        l0.push_back(train_sae({dictionary().samples, 1}, cfg).report.final_l0);
    }
    return {l0[0] > l0[1] && l0[1] > l0[2], fmt("final L0 %.3f > %.3f > %.3f for lambda 0, 8e-5, 8e-4", l0[0], l0[1], l0[2])};
}

Outcome streaming_counts() {
    int mismatches = 0;
    std::int64_t compared = 0;
    for (unsigned seed = 0; seed < 10; ++seed) {
        std::mt19937 rng(seed);
        std::normal_distribution<float> g;
        const int n = 12, d = 6, m = 16;
        BackboneSpec spec{"toy", 1, 5, d, 4, 2, 2, 1, 0};
        std::vector<ImageRecord> records;
        std::vector<float> data(static_cast<std::size_t>(n) * 5 * d);
        for (auto& v : data) v = g(rng);
        for (int i = 0; i < n; ++i)
            records.push_back({"img" + std::to_string(i), "x.ppm", i % 3, "c", "d", Split::train});
        const ActivationShard shard(spec, records, data);
        auto p = SaeParamsf::zeros(d, m);
        for (Eigen::Index i = 0; i < p.w_enc.size(); ++i) p.w_enc.data()[i] = g(rng);
        for (Eigen::Index i = 0; i < p.b_enc.size(); ++i) p.b_enc[i] = 0.3f * g(rng);

        const auto agg = aggregate(shard, p, {0.2, 2, 2, true});
        std::vector<RowMatrixf> h;
        for (std::size_t i = 0; i < shard.size(); ++i) h.push_back(encode(shard.tokens(i), p));
        const auto ref = oracle::image_counts(shard, h, 0.2, true);
        std::map<int, std::map<int, long long>> class_ref;
        std::map<int, long long> dataset_ref;
        for (std::size_t i = 0; i < shard.size(); ++i) {
            const auto& expected = ref.at(records[i].image_id);
            const auto& mine = agg.image_level()[i].counts;
            mismatches += mine.size() != expected.size();
            for (const auto& [s, c] : expected) {
                mismatches += !mine.contains(s) || mine.at(s) != c;
                class_ref[records[i].label_id][s] += c;
                dataset_ref[s] += c;
                ++compared;
            }
        }
        for (const auto& c : agg.class_level()) {
            const auto& expected = class_ref[std::stoi(c.entity_id)];
            mismatches += c.counts.size() != expected.size();
            for (const auto& [s, v] : expected) mismatches += !c.counts.contains(s) || c.counts.at(s) != v;
        }
        const auto ds = agg.dataset_level().counts;
        mismatches += ds.size() != dataset_ref.size();
        for (const auto& [s, v] : dataset_ref) mismatches += !ds.contains(s) || ds.at(s) != v;
    }
    return {mismatches == 0, fmt("10 shards, %lld image-level counts compared, %d mismatches", static_cast<long long>(compared), mismatches)};
}

// Toy task shared by the substitution and masking criteria; image size and
// counts are the patchsae-toy defaults.
struct ToyTask {
    TempDir dir{"accept"};
    std::shared_ptr<const Backbone> backbone = load_backbone("toy");
    ActivationShard train, test;
    ClassEmbeddings emb;
    SaeParamsf sae;
    std::map<int, SparseCounts> class_counts;

    ToyTask() {
        const auto tr = toy::write_image_set(dir.path(), Split::train, 10, 50, 32, 1);
        const auto te = toy::write_image_set(dir.path(), Split::base_test, 10, 50, 32, 2);
        train = extract_activations(tr.records, *backbone, 2, 64).shard;
        test = extract_activations(te.records, *backbone, 2, 64).shard;
        emb = toy::mean_class_embeddings(*backbone, te.records, 10, "toy10");
        SaeConfig c;
        c.d_vit = 32;
        c.expansion_factor = 8;
        c.l1_coefficient = 3e-3;
        c.learning_rate = 1e-3;
        c.warmup_steps = 100;
        c.training_images = 120000;
        c.batch_size_tokens = 1024;
        c.dead_latent_window = 300;
        c.seed = 0;
        const ActivationShard shards[] = {train};
        sae = train_sae(collect_tokens(shards, 32), c).params;
        const auto agg = aggregate(train, sae, {0.2, 4, 4, true});
        for (const auto& e : agg.class_level()) class_counts[std::stoi(e.entity_id)] = e.counts;
    }
};

ToyTask& task() {
    static ToyTask t;
    return t;
}

Outcome substitution() {
    auto& t = task();
    const auto identity = build_masks(t.class_counts, split_classes(10, EvalSplit::full), MaskMode::identity, 0, t.sae.d_sae());
    double worst = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
        const auto& rec = t.test.records()[i];
        const Vectorf native = t.backbone->embed(decode_image(rec.path_or_uri));
        const Vectorf sub = substituted_embedding(t.test.tokens(i), t.test.extra(i), t.sae, identity.shared, *t.backbone, 2,
                                                  ErrorTerm::add_residual);
        worst = std::max(worst, double((sub - native).norm() / native.norm()));
    }
    const auto zero = build_masks(t.class_counts, split_classes(10, EvalSplit::full), MaskMode::zero, 0, t.sae.d_sae());
    const auto report = evaluate(t.test, t.sae, zero, t.emb, *t.backbone, {EvalSplit::full});
    const bool ok = worst <= 1e-5 && report.evaluated >= 500 && report.accuracy <= 100.0 * 2.0 / 10.0;
    return {ok, fmt("identity+residual max rel err %.2e over 100 images (limit 1e-5); zero mask %.1f%% over %lld images (limit 20%%)",
                    worst, report.accuracy, static_cast<long long>(report.evaluated))};
}

Outcome masking_order() {
    auto& t = task();
    auto accuracies = [&](EvalSplit split, int k) {
        const auto classes = split_classes(10, split);
        const auto on = build_masks(t.class_counts, classes, MaskMode::on_topk, k, t.sae.d_sae());
        const auto rnd = build_masks(t.class_counts, classes, MaskMode::on_random, k, t.sae.d_sae(), 0);
        EvalOptions opt;
        opt.split = split;
        return std::make_pair(evaluate(t.test, t.sae, on, t.emb, *t.backbone, opt).accuracy,
                              evaluate(t.test, t.sae, rnd, t.emb, *t.backbone, opt).accuracy);
    };
    std::ostringstream detail, full;
    bool ok = true;
    for (int k : {1, 2, 4, 8}) {
        const auto [on, rnd] = accuracies(EvalSplit::base, k);
        ok &= on > rnd;
        detail << (k == 1 ? "base split: " : "; ") << "k=" << k << " " << on << "% vs " << rnd << "%";
        const auto [on_full, rnd_full] = accuracies(EvalSplit::full, k);
        full << (k == 1 ? "" : ", ") << "k=" << k << " " << on_full << "/" << rnd_full;
    }
    detail << " (full split, not gated: " << full.str() << ")";
    return {ok, detail.str()};
}

Outcome delta_table() {
    struct Row {
        const char* name;
        double zs, adapted, delta;
    };
    const Row rows[] = {{"StanfordCars", 53.45, 56.16, 5.82},  {"FGVC", 21.72, 31.19, 12.10},
                        {"ImageNet", 69.88, 73.80, 13.01},     {"Food101", 84.85, 87.26, 15.91},
                        {"SUN397", 68.74, 77.89, 29.27},       {"UCF101", 66.56, 81.13, 43.57},
                        {"OxfordPets", 85.41, 92.04, 45.44},   {"DTD", 53.12, 75.17, 47.03},
                        {"EuroSAT", 42.61, 73.07, 53.08},      {"Caltech101", 92.57, 97.49, 66.22},
                        {"Flowers102", 56.32, 88.07, 72.69}};
    int ok = 0;
    double worst = 0.0;
    for (const auto& r : rows) {
        const double err = std::abs(improvement_rate(r.zs, r.adapted) - r.delta);
        worst = std::max(worst, err);
        ok += err <= 0.01;
    }
    return {ok == 11, fmt("%d/11 rows within 0.01 (max abs err %.4f)", ok, worst)};
}

Outcome groups() {
    auto& t = task();
    CompareOptions opt;
    opt.aggregation = {0.2, 4, 4, true};
    opt.upper_rank = 5;
    opt.lower_rank = 10;
    const auto same = compare_report(t.test, t.test, t.sae, opt);
    bool same_ok = true;
    for (const auto& s : same.splits)
        same_ok &= s.average_high_to_low == 0.0 && s.average_low_to_high == 0.0 && s.pearson_r && std::abs(*s.pearson_r - 1.0) < 1e-12;

    const auto prompted = load_backbone("toy-prompted");
    const auto test_b = extract_activations(t.test.records(), *prompted, 2, 64).shard;
    const auto ab = compare_report(t.test, test_b, t.sae, opt);
    const auto ba = compare_report(test_b, t.test, t.sae, opt);
    bool swap_ok = true;
    double off_diag = 0.0;
    for (std::size_t i = 0; i < ab.splits.size(); ++i) {
        swap_ok &= ab.splits[i].average_high == ba.splits[i].average_high &&
                   ab.splits[i].average_high_to_low == ba.splits[i].average_low_to_high &&
                   ab.splits[i].average_low_to_high == ba.splits[i].average_high_to_low;
        off_diag += ab.splits[i].average_high_to_low + ab.splits[i].average_low_to_high;
    }

    GroupBounds b;
    b.upper_x = b.upper_y = 5;
    b.lower_x = b.lower_y = 2;
    const bool hand_ok = classify_latent(6, 1, b) == Group::high_to_low && classify_latent(1, 6, b) == Group::low_to_high &&
                         classify_latent(6, 6, b) == Group::high && classify_latent(3, 3, b) == Group::neither;
    return {same_ok && swap_ok && hand_ok,
            fmt("same backbone off-diagonal 0 and r=1: %s; swap transposes h2l/l2h: %s (off-diagonal mass %.2f); hand case: %s",
                same_ok ? "yes" : "no", swap_ok ? "yes" : "no", off_diag, hand_ok ? "yes" : "no")};
}

Outcome statistics() {
    const bool entropy_ok =
        label_entropy({{4, 3.0}}) == 0.0 && std::abs(label_entropy({{0, 1.5}, {1, 1.5}}) - std::log(2.0)) < 1e-12;

    std::mt19937 rng(11);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    const int d_sae = 8, k = 4, n = 30;
    std::vector<std::pair<ImageRecord, RowMatrixf>> samples;
    for (int i = 0; i < n; ++i) {
        RowMatrixf h(5, d_sae);
        for (Eigen::Index j = 0; j < h.size(); ++j) {
            const float v = u(rng);
            h.data()[j] = v < 0.6f ? 0.0f : std::round(v * 4.0f) / 4.0f;  // coarse: frequent ties
        }
        char id[16];
        std::snprintf(id, sizeof id, "im%02d", (i * 17) % n);
        samples.push_back({{id, "x.ppm", static_cast<int>(rng() % 3), "c", "d", Split::train}, h});
    }
    auto run = [&](int first, int last) {
        StatsAccumulator acc(d_sae, k);
        for (int i = first; i < last; ++i) acc.add_image(samples[i].first, samples[i].second);
        return acc;
    };
    auto same = [&](const StatsAccumulator& x, const StatsAccumulator& y) {
        if (x.n_images_seen() != y.n_images_seen() || x.activation_image_count() != y.activation_image_count() ||
            x.activation_positive_count() != y.activation_positive_count() || x.top_images() != y.top_images())
            return false;
        for (int s = 0; s < d_sae; ++s) {
            const double a = x.activation_value_sum()[s], b = y.activation_value_sum()[s];
            if (std::abs(a - b) > 1e-12 * std::max(1.0, std::abs(a))) return false;
            if (x.label_sums()[s].size() != y.label_sums()[s].size()) return false;
        }
        return true;
    };
    const auto a = run(0, 9), b = run(9, 20), c = run(20, n);
    const bool merge_ok = same(merge(a, b), merge(b, a)) && same(merge(merge(a, b), c), merge(a, merge(b, c))) &&
                          same(merge(merge(a, b), c), run(0, n));

    // Full-sort oracle for the reference images.
    const auto stats = finalize(run(0, n));
    bool topk_ok = true;
    for (int s = 0; s < d_sae; ++s) {
        std::vector<std::pair<double, std::string>> all;
        for (const auto& [rec, h] : samples) {
            const double mean = h.col(s).cast<double>().sum() / h.rows();
            if (mean > 0) all.push_back({-mean, rec.image_id});
        }
        std::sort(all.begin(), all.end());
        const auto& refs = stats.latents[static_cast<std::size_t>(s)].reference_images;
        topk_ok &= refs.size() == std::min<std::size_t>(k, all.size());
        for (std::size_t i = 0; i < refs.size() && topk_ok; ++i)
            topk_ok &= refs[i].image_id == all[i].second && std::abs(refs[i].mean_activation + all[i].first) < 1e-9;
    }
    return {entropy_ok && merge_ok && topk_ok, fmt("entropy examples: %s; merge associative+commutative: %s; top-k = full sort: %s",
                                                   entropy_ok ? "yes" : "no", merge_ok ? "yes" : "no", topk_ok ? "yes" : "no")};
}

Outcome pipeline() {
    patchsae::testing::ToyWorkspace w("accept-e2e");
    patchsae::testing::ToyPipelineOptions o;
    o.train_per_class = 30;
    o.test_per_class = 20;
    o.training_images = 60000;
    o.expansion = 8;
    o.l1 = "3e-3";
    o.batch_size = 1024;
    o.dead_window = 300;
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    const int code = w.build(o);
    std::cout.rdbuf(old);
    const double elapsed = seconds_since(t0);
    const std::string cmd = std::string(PATCHSAE_PYTHON) + " " + PATCHSAE_SOURCE_DIR +
                            "/tests/tools/validate_artifacts.py --schemas " + PATCHSAE_SOURCE_DIR + "/schemas --workspace " +
                            w.ws().string() + " --image-list " + (w.data() / "train.json").string() +
                            " --require-kinds shard,checkpoint,stats,counts,eval_report,comparison,export > " +
                            (w.ws() / "validation.txt").string() + " 2>&1";
    const int valid = code == 0 ? std::system(cmd.c_str()) : -1;
    std::string summary = valid >= 0 ? io::read_text(w.ws() / "validation.txt") : "not run";
    while (!summary.empty() && summary.back() == '\n') summary.pop_back();
    if (const auto nl = summary.rfind('\n'); nl != std::string::npos) summary = summary.substr(nl + 1);
    return {code == 0 && valid == 0 && elapsed <= 600.0,
            fmt("exit %d, %.1f s (limit 600 s), schema check: %s", code, elapsed, summary.c_str())};
}

} // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"dictionary recovery", dictionary_recovery},
        {"gradient check", gradient_check},
        {"lambda sweep orders L0", lambda_sweep},
        {"streaming counts equal brute force", streaming_counts},
        {"substitution identities", substitution},
        {"on_topk beats on_random", masking_order},
        {"improvement-rate table", delta_table},
        {"adaptation groups", groups},
        {"latent statistics", statistics},
        {"end-to-end toy pipeline", pipeline},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail << std::endl;
    }
    std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
