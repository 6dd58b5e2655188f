#include "patchsae/toydata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "patchsae/io.hpp"

namespace patchsae::toy {

SyntheticDictionary synthetic_dictionary(int n_atoms, int d, int sparsity, int n_samples, std::uint64_t seed) {
    PATCHSAE_REQUIRE(n_atoms >= 1 && d >= 1 && n_samples >= 1, "synthetic dictionary: sizes must be positive");
    PATCHSAE_REQUIRE(sparsity >= 1 && sparsity <= n_atoms, "synthetic dictionary: sparsity must lie in [1, n_atoms]");
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::uniform_real_distribution<float> weight(0.5f, 1.5f);

    SyntheticDictionary out;
    out.atoms.resize(n_atoms, d);
    for (int a = 0; a < n_atoms; ++a) {
        for (int j = 0; j < d; ++j) out.atoms(a, j) = normal(rng);
        out.atoms.row(a).normalize();
    }
    out.codes = RowMatrixf::Zero(n_samples, n_atoms);
    std::vector<int> pool(static_cast<std::size_t>(n_atoms));
    for (int i = 0; i < n_samples; ++i) {
        std::iota(pool.begin(), pool.end(), 0);
        for (int t = 0; t < sparsity; ++t) {
            std::uniform_int_distribution<int> pick(t, n_atoms - 1);
            std::swap(pool[static_cast<std::size_t>(t)], pool[static_cast<std::size_t>(pick(rng))]);
            out.codes(i, pool[static_cast<std::size_t>(t)]) = weight(rng);
        }
    }
    out.samples = out.codes * out.atoms;
    return out;
}

namespace {

std::array<float, 3> class_color(int class_id, int n_classes) {
    // Evenly spaced hues at full saturation.
    const float h = 6.0f * static_cast<float>(class_id) / static_cast<float>(n_classes);
    const float x = 1.0f - std::abs(std::fmod(h, 2.0f) - 1.0f);
    switch (static_cast<int>(h) % 6) {
    case 0: return {1.0f, x, 0.0f};
    case 1: return {x, 1.0f, 0.0f};
    case 2: return {0.0f, 1.0f, x};
    case 3: return {0.0f, x, 1.0f};
    case 4: return {x, 0.0f, 1.0f};
    default: return {1.0f, 0.0f, x};
    }
}

std::uint8_t to_u8(float v) { return static_cast<std::uint8_t>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f); }

} // namespace

ImageU8 class_image(int class_id, int n_classes, int size, std::mt19937_64& rng) {
    PATCHSAE_REQUIRE(n_classes >= 1 && class_id >= 0 && class_id < n_classes, "class_image: class id out of range");
    PATCHSAE_REQUIRE(size >= 4, "class_image: size must be >= 4");
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::normal_distribution<float> noise(0.0f, 0.05f);

    const auto color = class_color(class_id, n_classes);
    const float angle = 3.14159265f * static_cast<float>(class_id) / static_cast<float>(n_classes);
    const float freq = 0.5f + 0.25f * static_cast<float>(class_id % 3);
    const float phase = 6.2831853f * unit(rng);
    const float background = 0.2f + 0.3f * unit(rng);
    const int side = size / 2 + static_cast<int>(unit(rng) * static_cast<float>(size / 4));
    const int x0 = static_cast<int>(unit(rng) * static_cast<float>(size - side + 1));
    const int y0 = static_cast<int>(unit(rng) * static_cast<float>(size - side + 1));

    ImageU8 img;
    img.width = img.height = size;
    img.rgb.resize(static_cast<std::size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const bool inside = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
            const float u = std::cos(angle) * static_cast<float>(x) + std::sin(angle) * static_cast<float>(y);
            const float stripe = 0.65f + 0.35f * std::sin(freq * u + phase);
            for (int c = 0; c < 3; ++c) {
                const float v = inside ? color[static_cast<std::size_t>(c)] * stripe : background;
                img.rgb[(static_cast<std::size_t>(y) * size + x) * 3 + c] = to_u8(v + noise(rng));
            }
        }
    }
    return img;
}

ToyImageSet write_image_set(const std::filesystem::path& dir, Split split, int n_classes, int per_class, int size,
                            std::uint64_t seed, const std::string& dataset_name) {
    PATCHSAE_REQUIRE(per_class >= 1, "write_image_set: per_class must be >= 1");
    const std::string split_name = to_string(split);
    std::mt19937_64 rng(seed);
    ToyImageSet out;
    io::Json list = io::Json::array();
    for (int i = 0; i < per_class; ++i) {
        for (int c = 0; c < n_classes; ++c) {
            const std::string id = split_name + "-" + std::to_string(c) + "-" + std::to_string(i);
            const auto rel = std::filesystem::path(split_name) / (id + ".ppm");
            io::write_bytes(dir / rel, encode_ppm(class_image(c, n_classes, size, rng)));
            ImageRecord rec{id, (dir / rel).string(), c, "class" + std::to_string(c), dataset_name, split};
            io::Json j = rec;
            j["path_or_uri"] = rel.generic_string();
            list.push_back(j);
            out.records.push_back(std::move(rec));
        }
    }
    out.list_path = dir / (split_name + ".json");
    io::write_json(out.list_path, list);
    return out;
}

ClassEmbeddings mean_class_embeddings(const Backbone& backbone, const std::vector<ImageRecord>& records,
                                      int n_classes, const std::string& dataset_name) {
    RowMatrixf sums = RowMatrixf::Zero(n_classes, backbone.config().embed_dim);
    std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
    for (const auto& rec : records) {
        PATCHSAE_REQUIRE(rec.label_id >= 0 && rec.label_id < n_classes, "class embeddings: label out of range");
        const Vectorf e = backbone.embed(decode_image(rec.path_or_uri));
        sums.row(rec.label_id) += e.transpose() / e.norm();
        ++seen[static_cast<std::size_t>(rec.label_id)];
    }
    ClassEmbeddings out;
    out.dataset_name = dataset_name;
    for (int c = 0; c < n_classes; ++c) {
        PATCHSAE_REQUIRE(seen[static_cast<std::size_t>(c)] > 0, "class embeddings: class " + std::to_string(c) + " has no images");
        sums.row(c).normalize();
        out.class_names.push_back("class" + std::to_string(c));
    }
    out.matrix = sums;
    out.provenance = "normalized mean native image embedding per class (" + backbone.id() + ")";
    return out;
}

} // namespace patchsae::toy
