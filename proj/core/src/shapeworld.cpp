#include "iomm/shapeworld.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "iomm/binio.hpp"
#include "iomm/errors.hpp"

namespace iomm::shapeworld {

namespace fs = std::filesystem;
using nlohmann::json;

void validate_scene(const SceneSpec& spec) {
    const size_t n = spec.objects.size();
    if (n < 1 || n > 3) {
        throw ConfigError("invalid scene: object count " + std::to_string(n) +
                          " outside 1..3");
    }
    uint8_t seen = 0;
    for (const auto& o : spec.objects) {
        const uint8_t bit = uint8_t(1u << int(o.quadrant));
        if (seen & bit) throw ConfigError("invalid scene: duplicate quadrant");
        seen |= bit;
    }
}

SceneSpec canonical(SceneSpec spec) {
    std::sort(spec.objects.begin(), spec.objects.end(),
              [](const SceneObject& a, const SceneObject& b) {
                  return int(a.quadrant) < int(b.quadrant);
              });
    return spec;
}

std::string to_string(const SceneSpec& spec) {
    static const char* shapes[] = {"circle", "square", "triangle"};
    static const char* colors[] = {"red", "green", "blue", "yellow"};
    static const char* quads[] = {"TL", "TR", "BL", "BR"};
    std::string s;
    for (const auto& o : spec.objects) {
        if (!s.empty()) s += ", ";
        s += std::string(colors[int(o.color)]) + " " + shapes[int(o.shape)] + " " +
             quads[int(o.quadrant)];
    }
    return s;
}

// --------------------------------------------------------------------------
// Rendering

namespace {

// All shapes are inscribed in the quadrant bbox left after the margin. Pixel
// centers decide membership.
bool inside_shape(Shape shape, double px, double py, double side) {
    const double c = (side - 1.0) / 2.0;
    switch (shape) {
        case Shape::square:
            return true;
        case Shape::circle: {
            const double r = side / 2.0;
            const double dx = px - c, dy = py - c;
            return dx * dx + dy * dy <= r * r;
        }
        case Shape::triangle: {
            // Upward isoceles: apex at top-center, base along the bottom edge.
            const double h = side - 1.0;
            if (h <= 0.0) return false;
            const double halfwidth = c * (py / h);
            return std::abs(px - c) <= halfwidth;
        }
    }
    return false;
}

}  // namespace

Tensor<float> render_scene(const SceneSpec& spec, int64_t resolution) {
    validate_scene(spec);
    if ((resolution != 32 && resolution != 64) || resolution % 4 != 0) {
        throw ConfigError("render resolution must be 32 or 64");
    }
    Tensor<float> img({resolution, resolution, 3});
    img.fill(kBackground);
    for (const auto& obj : spec.objects) {
        const QuadRect q = quadrant_rect(obj.quadrant, resolution);
        const int64_t side = q.size - 2 * kObjectMargin;
        const auto rgb = color_rgb(obj.color);
        for (int64_t y = 0; y < side; ++y) {
            for (int64_t x = 0; x < side; ++x) {
                if (!inside_shape(obj.shape, double(x), double(y), double(side)))
                    continue;
                const int64_t py = q.y0 + kObjectMargin + y;
                const int64_t px = q.x0 + kObjectMargin + x;
                float* p = img.data() + (py * resolution + px) * 3;
                p[0] = rgb[0];
                p[1] = rgb[1];
                p[2] = rgb[2];
            }
        }
    }
    return img;
}

// --------------------------------------------------------------------------
// Captions

CaptionTokens encode_caption(const SceneSpec& raw) {
    validate_scene(raw);
    const SceneSpec spec = canonical(raw);
    CaptionTokens ids;
    ids.push_back(kBos);
    ids.push_back(uint16_t(kCount1 + spec.objects.size() - 1));
    for (const auto& o : spec.objects) {
        ids.push_back(uint16_t(kColorBase + int(o.color)));
        ids.push_back(uint16_t(kShapeBase + int(o.shape)));
        ids.push_back(uint16_t(kQuadBase + int(o.quadrant)));
    }
    ids.push_back(kEos);
    return ids;
}

SceneSpec decode_caption(const CaptionTokens& ids) {
    size_t pos = 0;
    auto need = [&](const char* what) -> uint16_t {
        if (pos >= ids.size())
            throw ParseError(std::string("caption ends early, expected ") + what, pos);
        return ids[pos];
    };
    if (need("BOS") != kBos) throw ParseError("expected BOS", pos);
    ++pos;
    const uint16_t cnt = need("COUNT");
    if (cnt < kCount1 || cnt > kCount3) throw ParseError("expected COUNT token", pos);
    ++pos;
    const int n = cnt - kCount1 + 1;
    SceneSpec spec;
    int prev_quadrant = -1;
    for (int i = 0; i < n; ++i) {
        const uint16_t c = need("color");
        if (c < kColorBase || c >= kColorBase + kNumColors)
            throw ParseError("expected color token", pos);
        ++pos;
        const uint16_t s = need("shape");
        if (s < kShapeBase || s >= kShapeBase + kNumShapes)
            throw ParseError("expected shape token", pos);
        ++pos;
        const uint16_t q = need("quadrant");
        if (q < kQuadBase || q >= kQuadBase + kNumQuadrants)
            throw ParseError("expected quadrant token", pos);
        const int quad = q - kQuadBase;
        if (quad <= prev_quadrant)
            throw ParseError("quadrants out of order or duplicated", pos);
        prev_quadrant = quad;
        ++pos;
        spec.objects.push_back({Shape(s - kShapeBase), Color(c - kColorBase),
                                Quadrant(quad)});
    }
    if (need("EOS") != kEos) throw ParseError("expected EOS", pos);
    ++pos;
    if (pos != ids.size()) throw ParseError("trailing tokens after EOS", pos);
    return spec;
}

// --------------------------------------------------------------------------
// Enumeration & sampling

namespace {

constexpr int kAttrCombos = kNumColors * kNumShapes;  // 12 per object

// C(4, n) quadrant subsets in lexicographic order of their sorted members.
const std::vector<std::vector<std::array<int, 3>>>& quad_combos() {
    static const auto combos = [] {
        std::vector<std::vector<std::array<int, 3>>> all(4);
        for (int a = 0; a < 4; ++a) all[1].push_back({a, -1, -1});
        for (int a = 0; a < 4; ++a)
            for (int b = a + 1; b < 4; ++b) all[2].push_back({a, b, -1});
        for (int a = 0; a < 4; ++a)
            for (int b = a + 1; b < 4; ++b)
                for (int c = b + 1; c < 4; ++c) all[3].push_back({a, b, c});
        return all;
    }();
    return combos;
}

}  // namespace

int64_t scene_count(int n_objects) {
    if (n_objects < 1 || n_objects > 3) return 0;
    int64_t combos = int64_t(quad_combos()[size_t(n_objects)].size());
    int64_t attrs = 1;
    for (int i = 0; i < n_objects; ++i) attrs *= kAttrCombos;
    return combos * attrs;
}

SceneSpec scene_from_index(int n_objects, int64_t index) {
    if (index < 0 || index >= scene_count(n_objects)) {
        throw ConfigError("scene index out of range");
    }
    int64_t attrs_total = 1;
    for (int i = 0; i < n_objects; ++i) attrs_total *= kAttrCombos;
    const auto& combo = quad_combos()[size_t(n_objects)][size_t(index / attrs_total)];
    int64_t rem = index % attrs_total;
    SceneSpec spec;
    for (int i = n_objects - 1; i >= 0; --i) {
        const int attr = int(rem % kAttrCombos);
        rem /= kAttrCombos;
        spec.objects.push_back({Shape(attr % kNumShapes), Color(attr / kNumShapes),
                                Quadrant(combo[size_t(i)])});
    }
    std::reverse(spec.objects.begin(), spec.objects.end());
    return spec;
}

SceneSpec sample_scene(Rng& rng, const std::set<int>& allowed_counts) {
    if (allowed_counts.empty())
        throw ConfigError("allowed_counts must not be empty");
    int64_t total = 0;
    for (int n : allowed_counts) {
        if (n < 1 || n > 3) throw ConfigError("allowed count outside 1..3");
        total += scene_count(n);
    }
    int64_t idx = int64_t(rng.below(uint64_t(total)));
    for (int n : allowed_counts) {
        const int64_t c = scene_count(n);
        if (idx < c) return scene_from_index(n, idx);
        idx -= c;
    }
    throw ConfigError("unreachable: scene sampling index overflow");
}

std::vector<DatasetItem> sample_dataset(int64_t n, uint64_t seed,
                                        const std::set<int>& allowed_counts,
                                        int64_t resolution) {
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    Rng rng(seed);
    std::vector<DatasetItem> items;
    items.reserve(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        DatasetItem item;
        item.scene = sample_scene(rng, allowed_counts);
        item.caption = encode_caption(item.scene);
        item.image = render_scene(item.scene, resolution);
        items.push_back(std::move(item));
    }
    return items;
}

// --------------------------------------------------------------------------
// Serialization

std::span<const DatasetItem> Dataset::split(const std::string& name) const {
    const auto it = splits.find(name);
    if (it == splits.end()) throw ConfigError("dataset has no split '" + name + "'");
    return std::span<const DatasetItem>(items.data() + it->second.offset,
                                        size_t(it->second.count));
}

Dataset make_dataset(int64_t n_train, int64_t n_val, int64_t resolution,
                     uint64_t seed, const std::set<int>& allowed_counts) {
    Dataset ds;
    ds.resolution = resolution;
    const uint64_t train_seed = derive_seed(seed, 0x7261696e);  // "rain"
    const uint64_t val_seed = derive_seed(seed, 0x76616c00);    // "val"
    ds.items = sample_dataset(n_train, train_seed, allowed_counts, resolution);
    auto val = sample_dataset(n_val, val_seed, allowed_counts, resolution);
    ds.splits["train"] = {0, n_train, train_seed};
    ds.splits["val"] = {n_train, n_val, val_seed};
    ds.items.insert(ds.items.end(), std::make_move_iterator(val.begin()),
                    std::make_move_iterator(val.end()));
    return ds;
}

namespace {
constexpr const char* kLayoutNote =
    "images.bin: count * res * res * 3 float32 little-endian row-major, "
    "concatenated; captions.bin: per item a uint16 little-endian length "
    "followed by that many uint16 little-endian token ids";
}

void write_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = kDatasetFormatVersion;
    manifest["resolution"] = ds.resolution;
    manifest["count"] = ds.items.size();
    manifest["layout"] = kLayoutNote;
    json splits = json::object();
    for (const auto& [name, info] : ds.splits) {
        splits[name] = {{"offset", info.offset}, {"count", info.count}, {"seed", info.seed}};
    }
    manifest["splits"] = splits;
    write_file_bytes((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");

    std::string images;
    images.reserve(ds.items.size() * size_t(ds.resolution * ds.resolution * 3) * 4);
    std::string captions;
    for (const auto& item : ds.items) {
        for (const float x : item.image.v) put_f32le(images, x);
        put_u16le(captions, uint16_t(item.caption.size()));
        for (const uint16_t id : item.caption) put_u16le(captions, id);
    }
    write_file_bytes((fs::path(dir) / "images.bin").string(), images);
    write_file_bytes((fs::path(dir) / "captions.bin").string(), captions);
}

Dataset read_dataset(const std::string& dir) {
    const std::string manifest_text =
        read_file_bytes((fs::path(dir) / "manifest.json").string());
    json manifest;
    try {
        manifest = json::parse(manifest_text);
    } catch (const json::exception& e) {
        throw FormatError("bad dataset manifest: " + std::string(e.what()));
    }
    const int version = manifest.at("format_version").get<int>();
    if (version != kDatasetFormatVersion) {
        throw FormatError("unsupported dataset format_version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(kDatasetFormatVersion) + ")");
    }
    Dataset ds;
    ds.resolution = manifest.at("resolution").get<int64_t>();
    const size_t count = manifest.at("count").get<size_t>();
    for (const auto& [name, info] : manifest.at("splits").items()) {
        ds.splits[name] = {info.at("offset").get<int64_t>(),
                           info.at("count").get<int64_t>(),
                           info.at("seed").get<uint64_t>()};
    }

    const std::string images = read_file_bytes((fs::path(dir) / "images.bin").string());
    const size_t per_image = size_t(ds.resolution * ds.resolution * 3);
    if (images.size() != count * per_image * 4) {
        throw FormatError("corrupt dataset: images.bin has " +
                          std::to_string(images.size()) + " bytes, expected " +
                          std::to_string(count * per_image * 4) +
                          " (truncation at offset " + std::to_string(images.size()) + ")");
    }
    const std::string captions = read_file_bytes((fs::path(dir) / "captions.bin").string());
    ByteReader cr(captions, "captions.bin");

    ByteReader ir(images, "images.bin");
    ds.items.resize(count);
    for (size_t i = 0; i < count; ++i) {
        DatasetItem& item = ds.items[i];
        item.image = Tensor<float>({ds.resolution, ds.resolution, 3});
        for (auto& x : item.image.v) x = ir.f32();
        const uint16_t len = cr.u16();
        item.caption.resize(len);
        for (auto& id : item.caption) id = cr.u16();
        item.scene = decode_caption(item.caption);
    }
    if (!cr.done()) {
        throw FormatError("corrupt dataset: trailing bytes in captions.bin at offset " +
                          std::to_string(cr.pos));
    }
    return ds;
}

}  // namespace iomm::shapeworld
