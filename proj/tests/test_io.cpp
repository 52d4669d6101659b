#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nsd/io.hpp"
#include "nsd/rng.hpp"

using namespace nsd;
namespace fs = std::filesystem;

namespace {
fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "nsd_io_test";
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}
}  // namespace

TEST_CASE("nsdf header layout") {
    auto path = tmpdir() / "hdr.nsdf";
    save_nsdf(path, {2, 3}, {1, 2, 3, 4, 5, 6});
    std::string b = file_bytes(path);
    REQUIRE(b.size() == 4 + 4 + 8 + 6 * 4);
    CHECK(b.substr(0, 4) == "NSD1");
    CHECK(std::uint8_t(b[4]) == 2);  // rank, little-endian
    CHECK(std::uint8_t(b[8]) == 2);  // extent 0
    CHECK(std::uint8_t(b[12]) == 3);
}

TEST_CASE("nsdf round trip is f32-stable") {
    Rng rng(3);
    std::vector<double> data(60);
    rng.fill_normal(data, 0.0, 2.0);
    auto p1 = tmpdir() / "a.nsdf";
    auto p2 = tmpdir() / "b.nsdf";
    save_nsdf(p1, {3, 4, 5}, data);
    LoadedArray a = load_nsdf(p1);
    REQUIRE(a.shape == Shape{3, 4, 5});
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(a.data[i] == double(float(data[i])));
    // second hop is bit-exact
    save_nsdf(p2, a.shape, a.data);
    CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("nsdf bad magic rejected") {
    auto path = tmpdir() / "bad.nsdf";
    std::ofstream(path, std::ios::binary) << "JUNKJUNKJUNK";
    CHECK_THROWS_AS(load_nsdf(path), Error);
    CHECK_THROWS_AS(load_nsdf(tmpdir() / "does_not_exist.nsdf"), MissingArtifactError);
}

TEST_CASE("manifest round trip and typed accessors") {
    Manifest m;
    m.set("name", "thing");
    m.set_double("lr", 0.001);
    m.set_int("steps", 5000);
    auto path = tmpdir() / "manifest.txt";
    m.save(path);
    Manifest r = Manifest::load(path);
    CHECK(r.get("name") == "thing");
    CHECK(r.get_double("lr") == doctest::Approx(0.001));
    CHECK(r.get_int("steps") == 5000);
    CHECK_THROWS_AS(r.get("missing"), Error);
    CHECK(r.get_or("missing", "x") == "x");
}

TEST_CASE("checkpoint save/load preserves params through f32") {
    Rng rng(11);
    auto dir = tmpdir() / "ckpt";
    Tensor w = Tensor::randn({4, 4}, rng, 1.0, true);
    Tensor b = Tensor::randn({4}, rng, 1.0, true);
    Manifest meta;
    meta.set("kind", "test");
    save_checkpoint(dir, {{"w", w}, {"mlp/b", b}}, meta);

    Tensor w2 = Tensor::zeros({4, 4}, true);
    Tensor b2 = Tensor::zeros({4}, true);
    std::vector<std::pair<std::string, Tensor>> params{{"w", w2}, {"mlp/b", b2}};
    Manifest loaded = load_checkpoint(dir, params);
    CHECK(loaded.get("kind") == "test");
    for (std::size_t i = 0; i < 16; ++i) CHECK(w2.data()[i] == double(float(w.data()[i])));
    for (std::size_t i = 0; i < 4; ++i) CHECK(b2.data()[i] == double(float(b.data()[i])));

    Tensor wrong = Tensor::zeros({2, 2}, true);
    std::vector<std::pair<std::string, Tensor>> bad{{"w", wrong}};
    CHECK_THROWS_AS(load_checkpoint(dir, bad), Error);
}
