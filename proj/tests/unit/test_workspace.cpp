#include "doctest.h"

#include <cstdlib>
#include <set>

#include "patchsae/errors.hpp"
#include "patchsae/workspace.hpp"
#include "tempdir.hpp"

using namespace patchsae;
using patchsae::testing::TempDir;
namespace fs = std::filesystem;

TEST_CASE("path segments are encoded into a single safe component") {
    CHECK(encode_path_segment("toy-0_a.b") == "toy-0_a.b");
    CHECK(encode_path_segment("a/b") == "a%2Fb");
    CHECK(encode_path_segment("a b?") == "a%20b%3F");
    CHECK(encode_path_segment(".") == "%2E");
    CHECK(encode_path_segment("..") == "%2E%2E");
    CHECK(encode_path_segment("") == "%00");
    CHECK(encode_path_segment("\xc3\xa9") == "%C3%A9");
    // Distinct inputs stay distinct.
    std::set<std::string> seen;
    for (const char* s : {"a/b", "a%2Fb", "a_b", "a b", ".", "%2E"}) CHECK(seen.insert(encode_path_segment(s)).second);
}

TEST_CASE("registry: relative paths, filters, latest and verification") {
    TempDir dir("ws");
    Workspace ws(dir / "root");
    CHECK(fs::is_directory(ws.root() / "runs"));
    CHECK(ws.entries().empty());
    CHECK_FALSE(ws.latest("shard").has_value());

    io::write_text(ws.root() / "a/x.txt", "one");
    io::write_text(dir / "outside.txt", "two");
    const auto e1 = ws.register_artifact("shard", ws.root() / "a", {{"backbone_id", "toy"}});
    const auto e2 = ws.register_artifact("counts", dir / "outside.txt");
    const auto e3 = ws.register_artifact("shard", ws.root() / "a", {{"backbone_id", "other"}});
    CHECK(e1.at("path") == "a");
    CHECK(fs::path(e2.at("path").get<std::string>()).is_absolute());
    CHECK(e1.at("hash") == io::directory_hash(ws.root() / "a"));
    CHECK(e2.at("hash") == io::git_blob_hash("two"));
    CHECK(e2.at("meta").is_object());

    CHECK(ws.entries().size() == 3);
    CHECK(ws.entries_of("shard").size() == 2);
    CHECK(ws.latest("shard")->at("meta").at("backbone_id") == "other");
    const auto toy = ws.latest("shard", [](const io::Json& e) { return e["meta"].value("backbone_id", "") == "toy"; });
    REQUIRE(toy.has_value());
    CHECK(ws.resolve(*toy) == ws.root() / "a");
    CHECK(ws.resolve(e2) == fs::weakly_canonical(dir / "outside.txt"));

    CHECK(ws.verify(e1));
    io::write_text(ws.root() / "a/x.txt", "changed");
    CHECK_FALSE(ws.verify(e1));
    fs::remove(dir / "outside.txt");
    CHECK_FALSE(ws.verify(e2));
    CHECK_THROWS_AS(ws.register_artifact("counts", dir / "missing.json"), LookupError);

    // Reopening sees the same append-only log.
    Workspace again(dir / "root");
    CHECK(again.entries().size() == 3);
    io::write_text(ws.registry_path(), io::read_text(ws.registry_path()) + "{broken\n");
    CHECK_THROWS_AS(again.entries(), FormatError);
}

TEST_CASE("run records never overwrite each other") {
    TempDir dir("runs");
    Workspace ws(dir.path());
    std::set<fs::path> paths;
    for (int i = 0; i < 5; ++i) paths.insert(ws.write_run_record({{"i", i}}));
    CHECK(paths.size() == 5);
    for (const auto& p : paths) CHECK(p.parent_path() == ws.root() / "runs");
}

TEST_CASE("workspace root resolution") {
    CHECK(Workspace::resolve_root("/x/y") == fs::path("/x/y"));
    const char* old = std::getenv("PATCHSAE_WORKSPACE");
    const std::string saved = old ? old : "";
    ::setenv("PATCHSAE_WORKSPACE", "/from/env", 1);
    CHECK(Workspace::resolve_root("") == fs::path("/from/env"));
    CHECK(Workspace::resolve_root("/flag") == fs::path("/flag"));
    ::unsetenv("PATCHSAE_WORKSPACE");
    CHECK_THROWS_AS(Workspace::resolve_root(""), ConfigError);
    if (old) ::setenv("PATCHSAE_WORKSPACE", saved.c_str(), 1);
    CHECK(Workspace(fs::temp_directory_path()).thumbnail_path("a/b").filename() == "a%2Fb.jpg");
}
