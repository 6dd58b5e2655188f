#include "doctest.h"

#include <fstream>
#include <random>

#include "patchsae/errors.hpp"
#include "patchsae/image.hpp"
#include "patchsae/io.hpp"
#include "patchsae/shard.hpp"
#include "patchsae/toydata.hpp"
#include "tempdir.hpp"

using namespace patchsae;
using patchsae::testing::TempDir;

TEST_CASE("extraction preserves order and equals per-image forward passes") {
    TempDir dir("shard");
    const auto set = toy::write_image_set(dir.path(), Split::train, 3, 4, 16, 1);
    const auto bb = load_backbone("toy");
    const auto res = extract_activations(set.records, *bb, 2, 5);
    CHECK(res.failures.empty());
    const auto& shard = res.shard;
    REQUIRE(shard.size() == set.records.size());
    CHECK(shard.spec().tokens_per_image == 17);
    CHECK(shard.spec().d_vit == 32);
    CHECK(shard.spec().hook_layer == 2);
    for (std::size_t i = 0; i < shard.size(); ++i) {
        CHECK(shard.records()[i].image_id == set.records[i].image_id);
        const auto expected = bb->forward_to(decode_image(std::filesystem::path(set.records[i].path_or_uri)), 2);
        CHECK(RowMatrixf(shard.tokens(i)) == expected.tokens);
    }
    // Batch size does not change the result.
    const auto single = extract_activations(set.records, *bb, 2, 1);
    CHECK(single.shard.data() == shard.data());
}

TEST_CASE("undecodable images are reported and excluded") {
    TempDir dir("shard");
    auto set = toy::write_image_set(dir.path(), Split::train, 2, 2, 16, 3);
    io::write_text(dir / "broken.ppm", "not an image");
    set.records.push_back({"broken", (dir / "broken.ppm").string(), 0, "class0", "toy10", Split::train});
    set.records.push_back({"gone", (dir / "gone.ppm").string(), 1, "class1", "toy10", Split::train});
    const auto res = extract_activations(set.records, *load_backbone("toy"), 1, 8);
    CHECK(res.shard.size() == 4);
    REQUIRE(res.failures.size() == 2);
    CHECK(res.failures[0].image_id == "broken");
    CHECK(res.failures[1].image_id == "gone");
    CHECK_THROWS_AS(res.shard.index_of("broken"), LookupError);
}

TEST_CASE("shards round-trip bit for bit, prompted ones included") {
    TempDir dir("shard");
    const auto set = toy::write_image_set(dir.path(), Split::base_test, 2, 3, 16, 4);
    for (const std::string id : {"toy", "toy-prompted"}) {
        const auto res = extract_activations(set.records, *load_backbone(id), 3, 4);
        write_shard(res.shard, dir / id);
        const auto back = read_shard(dir / id);
        CHECK(back.data() == res.shard.data());
        CHECK(back.extra_data() == res.shard.extra_data());
        CHECK(back.spec().backbone_id == id);
        CHECK(back.spec().extra_tokens == res.shard.spec().extra_tokens);
        REQUIRE(back.size() == set.records.size());
        for (std::size_t i = 0; i < back.size(); ++i) {
            CHECK(back.records()[i].image_id == set.records[i].image_id);
            CHECK(back.records()[i].label_id == set.records[i].label_id);
            CHECK(back.records()[i].split == Split::base_test);
        }
    }
    CHECK(read_shard(dir / "toy-prompted").spec().extra_tokens == 2);
}

TEST_CASE("corrupted shards raise FormatError") {
    TempDir dir("shard");
    const auto set = toy::write_image_set(dir.path(), Split::train, 2, 2, 16, 5);
    const auto res = extract_activations(set.records, *load_backbone("toy"), 1, 4);
    write_shard(res.shard, dir / "s");
    const auto size = std::filesystem::file_size(dir / "s/activations.bin");
    std::filesystem::resize_file(dir / "s/activations.bin", size - 4 * 32);
    CHECK_THROWS_AS(read_shard(dir / "s"), FormatError);
    io::write_text(dir / "s/manifest.json", "{\"format_version\": 2}");
    CHECK_THROWS_AS(read_shard(dir / "s"), FormatError);
    CHECK_THROWS(read_shard(dir / "nothing"));
}

TEST_CASE("image record invariants") {
    ImageRecord ok{"a", "a.ppm", 0, "cat", "d", Split::train};
    CHECK_NOTHROW(ok.validate());
    ImageRecord no_name = ok;
    no_name.label_name.clear();
    CHECK_THROWS_AS(no_name.validate(), ContractError);
    ImageRecord unlabeled{"b", "b.ppm", -1, "", "d", Split::other};
    CHECK_NOTHROW(unlabeled.validate());
    CHECK_FALSE(unlabeled.labeled());
    ImageRecord bad_label = ok;
    bad_label.label_id = -2;
    CHECK_THROWS_AS(bad_label.validate(), ContractError);
    ImageRecord no_id = ok;
    no_id.image_id.clear();
    CHECK_THROWS_AS(no_id.validate(), ContractError);
    CHECK_THROWS_AS(check_unique_ids({ok, ok}), ContractError);

    BackboneSpec spec{"x", 1, 2, 1, 1, 1, 1, 1, 0};
    CHECK_THROWS_AS(ActivationShard(spec, {ok}, {1.0f}), ContractError);
    CHECK_THROWS_AS(ActivationShard(spec, {ok}, {1.0f, std::nanf("")}), ContractError);
    CHECK_NOTHROW(ActivationShard(spec, {ok}, {1.0f, 2.0f}));
}

TEST_CASE("image lists resolve relative paths against the list location") {
    TempDir dir("shard");
    std::filesystem::create_directories(dir / "lists");
    io::write_json(dir / "lists/l.json", io::Json::array({{{"image_id", "x"},
                                                           {"path_or_uri", "../img/x.ppm"},
                                                           {"label_id", 2},
                                                           {"label_name", "two"},
                                                           {"dataset_name", "d"},
                                                           {"split", "novel_test"}}}));
    const auto records = read_image_list(dir / "lists/l.json");
    REQUIRE(records.size() == 1);
    CHECK(records[0].path_or_uri == (dir / "img/x.ppm").lexically_normal().string());
    CHECK(records[0].split == Split::novel_test);
    io::write_json(dir / "obj.json", io::Json::object());
    CHECK_THROWS_AS(read_image_list(dir / "obj.json"), FormatError);
}
