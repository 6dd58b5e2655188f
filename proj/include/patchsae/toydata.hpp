#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "patchsae/backbone.hpp"
#include "patchsae/image.hpp"
#include "patchsae/mask_eval.hpp"
#include "patchsae/shard.hpp"

namespace patchsae::toy {

/// Samples built as nonnegative sparse combinations of unit-norm atoms.
struct SyntheticDictionary {
    RowMatrixf atoms;    ///< [n_atoms, d]
    RowMatrixf samples;  ///< [n_samples, d]
    RowMatrixf codes;    ///< [n_samples, n_atoms]
};

/// Each sample mixes `sparsity` distinct atoms with weights uniform in [0.5, 1.5].
SyntheticDictionary synthetic_dictionary(int n_atoms, int d, int sparsity, int n_samples, std::uint64_t seed);

/// Synthetic image of class `class_id`: a class-colored textured object on a
/// noisy background, at a random position.
ImageU8 class_image(int class_id, int n_classes, int size, std::mt19937_64& rng);

struct ToyImageSet {
    std::vector<ImageRecord> records;
    std::filesystem::path list_path;
};

/// Writes `per_class` PPM images per class under `dir/<split>/` and an image
/// list `dir/<split>.json`. Image ids are "<split>-<class>-<index>".
ToyImageSet write_image_set(const std::filesystem::path& dir, Split split, int n_classes, int per_class, int size,
                            std::uint64_t seed, const std::string& dataset_name = "toy10");

/// Class embeddings as normalized per-class means of native image embeddings.
/// Stands in for text embeddings on the toy task.
ClassEmbeddings mean_class_embeddings(const Backbone& backbone, const std::vector<ImageRecord>& records,
                                      int n_classes, const std::string& dataset_name);

} // namespace patchsae::toy
