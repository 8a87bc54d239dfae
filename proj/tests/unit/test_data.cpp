#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "iomm/shapeworld.hpp"

using namespace iomm;
using namespace iomm::shapeworld;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("data");

namespace {

SceneSpec one(Shape s, Color c, Quadrant q) { return {{{s, c, q}}}; }

fs::path temp_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / "iomm_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("render is deterministic") {
    const auto spec = one(Shape::triangle, Color::yellow, Quadrant::BR);
    const auto a = render_scene(spec, 32);
    const auto b = render_scene(spec, 32);
    CHECK(a.v == b.v);
}

TEST_CASE("red circle in TL colors only its quadrant") {
    const auto img = render_scene(one(Shape::circle, Color::red, Quadrant::TL), 32);
    bool found_red = false;
    for (int64_t y = 0; y < 32; ++y) {
        for (int64_t x = 0; x < 32; ++x) {
            const float* p = img.data() + (y * 32 + x) * 3;
            if (x < 16 && y < 16) {
                if (p[0] == 1.f) {
                    found_red = true;
                    CHECK(p[1] == -1.f);
                    CHECK(p[2] == -1.f);
                }
            } else {
                CHECK(p[0] == kBackground);
                CHECK(p[1] == kBackground);
                CHECK(p[2] == kBackground);
            }
        }
    }
    CHECK(found_red);
}

TEST_CASE("fill ratios inside the bbox: square 1.0, circle ~pi/4, triangle ~0.5") {
    auto fill_of = [](Shape s) {
        const auto img = render_scene(one(s, Color::green, Quadrant::TL), 32);
        int64_t lit = 0;
        int64_t min_x = 99, max_x = -1, min_y = 99, max_y = -1;
        for (int64_t y = 0; y < 16; ++y) {
            for (int64_t x = 0; x < 16; ++x) {
                const float* p = img.data() + (y * 32 + x) * 3;
                if (p[1] == 1.f) {
                    ++lit;
                    min_x = std::min(min_x, x); max_x = std::max(max_x, x);
                    min_y = std::min(min_y, y); max_y = std::max(max_y, y);
                }
            }
        }
        return double(lit) / double((max_x - min_x + 1) * (max_y - min_y + 1));
    };
    CHECK(fill_of(Shape::square) == doctest::Approx(1.0));
    CHECK(fill_of(Shape::circle) == doctest::Approx(3.14159265 / 4).epsilon(0.07));
    CHECK(std::abs(fill_of(Shape::triangle) - 0.5) <= 0.05);
}

TEST_CASE("render rejects duplicate quadrants") {
    SceneSpec bad{{{Shape::circle, Color::red, Quadrant::TL},
                   {Shape::square, Color::blue, Quadrant::TL}}};
    CHECK_THROWS_AS(render_scene(bad, 32), ConfigError);
}

TEST_CASE("caption grammar example") {
    const auto ids = encode_caption(one(Shape::square, Color::green, Quadrant::TR));
    CHECK(ids == CaptionTokens({kBos, kCount1, kColorBase + 1, kShapeBase + 1,
                                kQuadBase + 1, kEos}));
}

TEST_CASE("caption round-trip over all 48 one-object scenes") {
    CHECK(scene_count(1) == 48);
    for (int64_t i = 0; i < 48; ++i) {
        const auto spec = scene_from_index(1, i);
        CHECK(decode_caption(encode_caption(spec)) == spec);
    }
}

TEST_CASE("caption round-trip over the full grammar") {
    for (int n = 1; n <= 3; ++n) {
        const int64_t total = scene_count(n);
        for (int64_t i = 0; i < total; i += (n == 1 ? 1 : 7)) {
            const auto spec = scene_from_index(n, i);
            CHECK(decode_caption(encode_caption(spec)) == spec);
        }
    }
}

TEST_CASE("decode errors carry positions") {
    auto ids = encode_caption(one(Shape::circle, Color::red, Quadrant::TL));
    ids.pop_back();  // missing EOS
    CHECK_THROWS_AS(decode_caption(ids), ParseError);
    try {
        decode_caption(ids);
    } catch (const ParseError& e) {
        CHECK(e.position == ids.size());
    }
    CHECK_THROWS_AS(decode_caption({kBos, kCount1, kEos}), ParseError);
    CHECK_THROWS_AS(decode_caption({kCount1}), ParseError);
    // Quadrant order violations
    CHECK_THROWS_AS(
        decode_caption({kBos, kCount2, kColorBase, kShapeBase, kQuadBase + 1,
                        kColorBase, kShapeBase, kQuadBase, kEos}),
        ParseError);
    // Trailing tokens
    auto ok = encode_caption(one(Shape::circle, Color::red, Quadrant::TL));
    ok.push_back(kPad);
    CHECK_THROWS_AS(decode_caption(ok), ParseError);
}

TEST_CASE("sample_dataset determinism and validation") {
    const auto a = sample_dataset(10, 77, {1, 2}, 32);
    const auto b = sample_dataset(10, 77, {1, 2}, 32);
    REQUIRE(a.size() == 10);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].scene == b[i].scene);
        CHECK(a[i].image.v == b[i].image.v);
    }
    CHECK_THROWS_AS(sample_dataset(0, 1, {1}, 32), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(sample_scene(rng, {}), ConfigError);
}

TEST_CASE("one-object sampling is uniform within the multinomial bound") {
    const auto items = sample_dataset(4800, 4242, {1}, 32);
    std::map<std::string, int> counts;
    for (const auto& item : items) counts[to_string(item.scene)]++;
    CHECK(counts.size() == 48);
    // sigma = sqrt(n p (1-p)), p = 1/48
    const double sigma = std::sqrt(4800.0 * (1.0 / 48) * (47.0 / 48));
    for (const auto& [scene, count] : counts) {
        CHECK(std::abs(count - 100.0) <= 3.0 * sigma);
    }
}

TEST_CASE("dataset write/read round-trips bitwise") {
    const auto dir = temp_dir("dataset_roundtrip");
    Dataset ds = make_dataset(12, 4, 32, 99, {1, 2, 3});
    write_dataset(ds, dir.string());
    const Dataset back = read_dataset(dir.string());
    REQUIRE(back.items.size() == ds.items.size());
    for (size_t i = 0; i < ds.items.size(); ++i) {
        CHECK(back.items[i].image.v == ds.items[i].image.v);
        CHECK(back.items[i].caption == ds.items[i].caption);
        CHECK(back.items[i].scene == ds.items[i].scene);
    }
    CHECK(back.split("train").size() == 12);
    CHECK(back.split("val").size() == 4);
    CHECK(back.splits.at("train").seed == ds.splits.at("train").seed);
}

TEST_CASE("unsupported dataset version is rejected") {
    const auto dir = temp_dir("dataset_version");
    Dataset ds = make_dataset(2, 1, 32, 5, {1});
    write_dataset(ds, dir.string());
    std::string manifest;
    {
        std::ifstream in(dir / "manifest.json");
        manifest.assign(std::istreambuf_iterator<char>(in), {});
    }
    const auto pos = manifest.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, 19, "\"format_version\": 2");
    std::ofstream(dir / "manifest.json") << manifest;
    try {
        read_dataset(dir.string());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("format_version 2") != std::string::npos);
    }
}

TEST_CASE("truncated images.bin is reported with an offset") {
    const auto dir = temp_dir("dataset_trunc");
    Dataset ds = make_dataset(2, 1, 32, 5, {1});
    write_dataset(ds, dir.string());
    const auto path = dir / "images.bin";
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 1);
    try {
        read_dataset(dir.string());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("images.bin") != std::string::npos);
        CHECK(msg.find(std::to_string(size - 1)) != std::string::npos);
    }
}

TEST_CASE("scene enumeration counts") {
    CHECK(scene_count(1) == 48);
    CHECK(scene_count(2) == 6 * 144);
    CHECK(scene_count(3) == 4 * 12 * 12 * 12);
    CHECK_THROWS_AS(scene_from_index(1, 48), ConfigError);
}

TEST_SUITE_END();
