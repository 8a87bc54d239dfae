#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "iomm/rng.hpp"
#include "iomm/tensor.hpp"

// ShapeWorld-mini: procedural compositional scenes. A scene is 1-3 colored
// shapes in distinct quadrants; it renders deterministically to pixels and
// encodes bijectively to a caption token sequence.

namespace iomm::shapeworld {

enum class Shape : uint8_t { circle = 0, square = 1, triangle = 2 };
enum class Color : uint8_t { red = 0, green = 1, blue = 2, yellow = 3 };
enum class Quadrant : uint8_t { TL = 0, TR = 1, BL = 2, BR = 3 };

constexpr int kNumShapes = 3;
constexpr int kNumColors = 4;
constexpr int kNumQuadrants = 4;

struct SceneObject {
    Shape shape;
    Color color;
    Quadrant quadrant;

    bool operator==(const SceneObject&) const = default;
};

// Objects are kept in quadrant order TL, TR, BL, BR.
struct SceneSpec {
    std::vector<SceneObject> objects;

    bool operator==(const SceneSpec&) const = default;
};

// Throws ConfigError on duplicate quadrants or a count outside 1..3.
void validate_scene(const SceneSpec& spec);
SceneSpec canonical(SceneSpec spec);  // sorts objects by quadrant

std::string to_string(const SceneSpec& spec);

// --------------------------------------------------------------------------
// Rendering

constexpr float kBackground = -0.8f;

inline std::array<float, 3> color_rgb(Color c) {
    switch (c) {
        case Color::red: return {1.f, -1.f, -1.f};
        case Color::green: return {-1.f, 1.f, -1.f};
        case Color::blue: return {-1.f, -1.f, 1.f};
        case Color::yellow: return {1.f, 1.f, -1.f};
    }
    return {0.f, 0.f, 0.f};
}

struct QuadRect {
    int64_t x0, y0, size;
};

inline QuadRect quadrant_rect(Quadrant q, int64_t resolution) {
    const int64_t half = resolution / 2;
    const int64_t qi = int64_t(q);
    return {.x0 = (qi % 2) * half, .y0 = (qi / 2) * half, .size = half};
}

constexpr int64_t kObjectMargin = 2;  // pixels between object bbox and quadrant edge

// Deterministic rasterization at resolution in {32, 64}; shape [res, res, 3].
Tensor<float> render_scene(const SceneSpec& spec, int64_t resolution);

// --------------------------------------------------------------------------
// Captions: BOS COUNT_n (color shape quadrant) x n EOS, quadrant order.

enum Token : uint16_t {
    kPad = 0,
    kBos = 1,
    kEos = 2,
    kCount1 = 3,  // kCount1 + (n-1)
    kCount2 = 4,
    kCount3 = 5,
    kColorBase = 6,   // + Color
    kShapeBase = 10,  // + Shape
    kQuadBase = 13,   // + Quadrant
};
constexpr int kVocabSize = 17;
constexpr int kMaxCaptionLen = 12;  // BOS COUNT (c s q)*3 EOS

using CaptionTokens = std::vector<uint16_t>;

CaptionTokens encode_caption(const SceneSpec& spec);
SceneSpec decode_caption(const CaptionTokens& ids);  // ParseError on bad grammar

// --------------------------------------------------------------------------
// Scene enumeration and sampling. Scenes with n objects are indexed by
// (quadrant combination, per-object color*shape attributes); sampling is
// uniform over the union of all scenes whose count is allowed.

int64_t scene_count(int n_objects);
SceneSpec scene_from_index(int n_objects, int64_t index);
SceneSpec sample_scene(Rng& rng, const std::set<int>& allowed_counts);

struct DatasetItem {
    SceneSpec scene;
    CaptionTokens caption;
    Tensor<float> image;
};

std::vector<DatasetItem> sample_dataset(int64_t n, uint64_t seed,
                                        const std::set<int>& allowed_counts,
                                        int64_t resolution);

// --------------------------------------------------------------------------
// On-disk layout: manifest.json + images.bin (raw float32 little-endian,
// row-major, concatenated) + captions.bin (uint16 little-endian length prefix
// per record, then that many uint16 ids).

struct SplitInfo {
    int64_t offset = 0;
    int64_t count = 0;
    uint64_t seed = 0;
};

struct Dataset {
    int64_t resolution = 32;
    std::map<std::string, SplitInfo> splits;
    std::vector<DatasetItem> items;

    std::span<const DatasetItem> split(const std::string& name) const;
};

constexpr int kDatasetFormatVersion = 1;

Dataset make_dataset(int64_t n_train, int64_t n_val, int64_t resolution,
                     uint64_t seed, const std::set<int>& allowed_counts);
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

}  // namespace iomm::shapeworld
