// Toy fixtures: synthetic class images and stand-in class embeddings.
#include <iostream>

#include "CLI11.hpp"
#include "patchsae/errors.hpp"
#include "patchsae/toydata.hpp"

using namespace patchsae;

int main(int argc, char** argv) {
    CLI::App app{"Toy dataset generator for patchsae"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    std::string out, split = "train", dataset = "toy10";
    int classes = 10, per_class = 50, size = 32;
    std::uint64_t seed = 1;
    auto* images = app.add_subcommand("images", "Write PPM images and an image list");
    images->add_option("--out", out, "Output directory")->required();
    images->add_option("--classes", classes)->capture_default_str()->check(CLI::Range(2, 1000));
    images->add_option("--per-class", per_class)->capture_default_str()->check(CLI::PositiveNumber);
    images->add_option("--size", size, "Image side in pixels")->capture_default_str()->check(CLI::Range(4, 4096));
    images->add_option("--seed", seed)->capture_default_str();
    images->add_option("--split", split)->capture_default_str()->check(CLI::IsMember({"train", "base_test", "novel_test", "other"}));
    images->add_option("--dataset", dataset)->capture_default_str();

    std::string list, backbone = "toy", emb_out;
    auto* emb = app.add_subcommand("class-emb", "Class embeddings from mean native image embeddings");
    emb->add_option("--images", list, "Image list")->required()->check(CLI::ExistingFile);
    emb->add_option("--backbone", backbone)->capture_default_str();
    emb->add_option("--classes", classes)->capture_default_str()->check(CLI::Range(2, 1000));
    emb->add_option("--dataset", dataset)->capture_default_str();
    emb->add_option("--out", emb_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    try {
        if (*images) {
            const auto s = toy::write_image_set(out, split_from_string(split), classes, per_class, size, seed, dataset);
            std::cout << "wrote " << s.records.size() << " images -> " << s.list_path.string() << "\n";
        } else {
            const auto bb = load_backbone(backbone);
            const auto e = toy::mean_class_embeddings(*bb, read_image_list(list), classes, dataset);
            write_class_embeddings(e, emb_out);
            std::cout << "wrote " << e.classes() << " class embeddings -> " << emb_out << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "patchsae-toy: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
