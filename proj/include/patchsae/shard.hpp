#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "patchsae/backbone.hpp"
#include "patchsae/io.hpp"
#include "patchsae/types.hpp"

namespace patchsae {

enum class Split { train, base_test, novel_test, other };

std::string to_string(Split split);
Split split_from_string(const std::string& text);

struct ImageRecord {
    std::string image_id;
    std::string path_or_uri;
    int label_id = -1;
    std::string label_name;
    std::string dataset_name;
    Split split = Split::other;

    bool labeled() const { return label_id >= 0; }
    void validate() const;
};

void to_json(io::Json& j, const ImageRecord& r);
void from_json(const io::Json& j, ImageRecord& r);

/// Per-image, per-token residual-stream activations, row-major
/// [image, token, dim] in float32.
class ActivationShard {
public:
    using TokenBlock = Eigen::Map<const RowMatrixf>;

    ActivationShard() = default;
    ActivationShard(BackboneSpec spec, std::vector<ImageRecord> records, std::vector<float> data,
                    std::vector<float> extra = {});

    const BackboneSpec& spec() const { return spec_; }
    const std::vector<ImageRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    /// [tokens_per_image, d_vit] view of image `i`.
    TokenBlock tokens(std::size_t i) const;
    /// [extra_tokens, d_vit] prompt-token view of image `i` (zero rows without prompts).
    TokenBlock extra(std::size_t i) const;
    std::size_t index_of(const std::string& image_id) const;

    const std::vector<float>& data() const { return data_; }
    const std::vector<float>& extra_data() const { return extra_; }

    /// Subset of images in the given order.
    ActivationShard select(const std::vector<std::size_t>& indices) const;

private:
    BackboneSpec spec_;
    std::vector<ImageRecord> records_;
    std::vector<float> data_;
    std::vector<float> extra_;
};

struct ExtractFailure {
    std::string image_id;
    std::string message;
};

struct ExtractResult {
    ActivationShard shard;
    std::vector<ExtractFailure> failures;
};

/// Runs the backbone up to `hook_layer` for every decodable image, preserving
/// input order. `on_decoded` (optional) sees each decoded image, e.g. to write
/// thumbnails.
ExtractResult extract_activations(const std::vector<ImageRecord>& images, const Backbone& backbone, int hook_layer,
                                  int batch_size,
                                  const std::function<void(const ImageRecord&, const ImageU8&)>& on_decoded = {});

/// Directory with manifest.json + activations.bin (+ extra_tokens.bin with prompts).
void write_shard(const ActivationShard& shard, const std::filesystem::path& dir);
ActivationShard read_shard(const std::filesystem::path& dir);

/// JSON array of ImageRecord objects; relative paths resolve against the list file.
std::vector<ImageRecord> read_image_list(const std::filesystem::path& path);

/// Every image_id appears at most once.
void check_unique_ids(const std::vector<ImageRecord>& records);

} // namespace patchsae
