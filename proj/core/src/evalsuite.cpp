#include "iomm/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "iomm/binio.hpp"
#include "iomm/chart.hpp"
#include "iomm/checkpoint.hpp"

namespace iomm::eval {

namespace fs = std::filesystem;
using nlohmann::json;
using shapeworld::Color;
using shapeworld::Quadrant;
using shapeworld::Shape;

namespace {

constexpr double kLitThreshold = 0.5;  // L-inf deviation from background

int64_t presence_threshold(int64_t resolution) {
    const int64_t scale = resolution / 32;
    return 10 * scale * scale;
}

}  // namespace

DetectedScene detect_scene(const Tensor<float>& image) {
    if (image.shape.size() != 3 || image.shape[2] != 3 ||
        image.shape[0] != image.shape[1]) {
        throw ShapeError("detect_scene: expected [res, res, 3] image, got " +
                         image.shape_str());
    }
    const int64_t res = image.shape[0];
    DetectedScene det;
    for (int qi = 0; qi < 4; ++qi) {
        const auto rect = shapeworld::quadrant_rect(Quadrant(qi), res);
        int64_t lit = 0;
        double mean[3] = {0, 0, 0};
        int64_t min_x = rect.size, max_x = -1, min_y = rect.size, max_y = -1;
        for (int64_t y = 0; y < rect.size; ++y) {
            for (int64_t x = 0; x < rect.size; ++x) {
                const float* p =
                    image.data() + ((rect.y0 + y) * res + rect.x0 + x) * 3;
                double dev = 0;
                for (int c = 0; c < 3; ++c) {
                    dev = std::max(dev, std::abs(double(p[c]) - shapeworld::kBackground));
                }
                if (dev <= kLitThreshold) continue;
                ++lit;
                for (int c = 0; c < 3; ++c) mean[c] += double(p[c]);
                min_x = std::min(min_x, x); max_x = std::max(max_x, x);
                min_y = std::min(min_y, y); max_y = std::max(max_y, y);
            }
        }
        DetectedObject& obj = det.quadrants[size_t(qi)];
        obj.lit_pixels = lit;
        obj.present = lit >= presence_threshold(res);
        if (!obj.present) continue;
        for (int c = 0; c < 3; ++c) mean[c] /= double(lit);
        double best = 1e30;
        for (int ci = 0; ci < shapeworld::kNumColors; ++ci) {
            const auto rgb = shapeworld::color_rgb(Color(ci));
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = mean[c] - double(rgb[size_t(c)]);
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                obj.color = Color(ci);
            }
        }
        const int64_t bbox = (max_x - min_x + 1) * (max_y - min_y + 1);
        const double fill = double(lit) / double(bbox);
        obj.shape = fill > 0.9  ? Shape::square
                    : fill >= 0.65 ? Shape::circle
                                   : Shape::triangle;
    }
    return det;
}

AttributeResult attribute_check(const Tensor<float>& image, const SceneSpec& spec) {
    shapeworld::validate_scene(spec);
    const DetectedScene det = detect_scene(image);
    AttributeResult r;
    r.count = det.count() == int(spec.objects.size());

    bool positions = true, colors = true, shapes = true;
    uint8_t spec_mask = 0, det_mask = 0;
    for (const auto& o : spec.objects) {
        spec_mask |= uint8_t(1u << int(o.quadrant));
        const DetectedObject& d = det.quadrants[size_t(o.quadrant)];
        colors &= d.present && d.color == o.color;
        shapes &= d.present && d.shape == o.shape;
    }
    for (int qi = 0; qi < 4; ++qi) {
        if (det.quadrants[size_t(qi)].present) det_mask |= uint8_t(1u << qi);
    }
    positions = spec_mask == det_mask;
    r.position = positions;
    r.color = colors;
    r.shape = shapes;
    return r;
}

// --------------------------------------------------------------------------

const char* to_string(Category c) {
    switch (c) {
        case Category::single_obj: return "single_obj";
        case Category::two_obj: return "two_obj";
        case Category::counting: return "counting";
        case Category::colors: return "colors";
        case Category::position: return "position";
    }
    return "?";
}

namespace {

bool category_pass(Category cat, const AttributeResult& r) {
    switch (cat) {
        case Category::single_obj:
        case Category::two_obj: return r.count && r.shape;
        case Category::counting: return r.count;
        case Category::colors: return r.count && r.color;
        case Category::position: return r.count && r.position;
    }
    return false;
}

SceneSpec sample_scene_with_count(Rng& rng, int count) {
    return shapeworld::scene_from_index(
        count, int64_t(rng.below(uint64_t(shapeworld::scene_count(count)))));
}

}  // namespace

std::vector<Prompt> build_prompt_set(int per_category, uint64_t seed) {
    if (per_category < 1) throw ConfigError("prompt set needs >= 1 prompt per category");
    std::vector<Prompt> prompts;
    for (int ci = 0; ci < kNumCategories; ++ci) {
        const Category cat = Category(ci);
        Rng rng(derive_seed(seed, 0x70726f6d70ull + uint64_t(ci)));
        for (int i = 0; i < per_category; ++i) {
            SceneSpec scene;
            switch (cat) {
                case Category::single_obj:
                case Category::colors: scene = sample_scene_with_count(rng, 1); break;
                case Category::two_obj:
                case Category::position: scene = sample_scene_with_count(rng, 2); break;
                case Category::counting:
                    scene = sample_scene_with_count(rng, 1 + int(rng.below(3)));
                    break;
            }
            prompts.push_back({cat, scene, shapeworld::encode_caption(scene)});
        }
    }
    return prompts;
}

std::string ScoreReport::to_json() const {
    json doc;
    for (int ci = 0; ci < kNumCategories; ++ci) {
        doc["categories"][to_string(Category(ci))] = category_acc[size_t(ci)];
        doc["failures"][to_string(Category(ci))] = category_failures[size_t(ci)];
    }
    doc["overall"] = overall;
    doc["n_prompts"] = n_prompts;
    doc["seed"] = seed;
    return doc.dump(2);
}

ScoreReport geneval_mini(const SamplerFn& sampler, const std::vector<Prompt>& prompts,
                         uint64_t seed, int threads) {
    std::array<int64_t, kNumCategories> totals{};
    for (const auto& p : prompts) totals[size_t(p.category)]++;
    for (int ci = 0; ci < kNumCategories; ++ci) {
        if (totals[size_t(ci)] == 0) {
            throw ConfigError(std::string("prompt set missing category ") +
                              to_string(Category(ci)));
        }
    }

    const int64_t n = int64_t(prompts.size());
    enum class Outcome : uint8_t { fail_sample, pass, miss };
    std::vector<Outcome> outcomes(size_t(n), Outcome::miss);

    int nthreads = threads > 0 ? threads : int(std::thread::hardware_concurrency());
    if (nthreads < 1) nthreads = 1;
    nthreads = int(std::min<int64_t>(nthreads, n));
    auto run_chunk = [&](int tid) {
        const int64_t lo = n * tid / nthreads;
        const int64_t hi = n * (tid + 1) / nthreads;
        for (int64_t i = lo; i < hi; ++i) {
            const Prompt& p = prompts[size_t(i)];
            try {
                const Tensor<float> img = sampler(p.caption, derive_seed(seed, uint64_t(i)));
                const AttributeResult r = attribute_check(img, p.scene);
                outcomes[size_t(i)] =
                    category_pass(p.category, r) ? Outcome::pass : Outcome::miss;
            } catch (const std::exception&) {
                outcomes[size_t(i)] = Outcome::fail_sample;
            }
        }
    };
    if (nthreads == 1) {
        run_chunk(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 1; t < nthreads; ++t) {
            pool.emplace_back([&run_chunk, t] { run_chunk(t); });
        }
        run_chunk(0);
        for (auto& th : pool) th.join();
    }

    ScoreReport report;
    report.n_prompts = n;
    report.seed = seed;
    std::array<int64_t, kNumCategories> passes{};
    for (int64_t i = 0; i < n; ++i) {
        const size_t ci = size_t(prompts[size_t(i)].category);
        if (outcomes[size_t(i)] == Outcome::pass) passes[ci]++;
        if (outcomes[size_t(i)] == Outcome::fail_sample) report.category_failures[ci]++;
    }
    double sum = 0;
    for (int ci = 0; ci < kNumCategories; ++ci) {
        report.category_acc[size_t(ci)] =
            double(passes[size_t(ci)]) / double(totals[size_t(ci)]);
        sum += report.category_acc[size_t(ci)];
    }
    report.overall = sum / double(kNumCategories);
    return report;
}

SamplerFn model_sampler(Model& model, const SamplerConfig& cfg) {
    return [&model, cfg](const CaptionTokens& caption, uint64_t sample_seed) {
        SamplerConfig c = cfg;
        c.seed = sample_seed;
        SampleRequest req;
        req.caption = &caption;
        return sample_image(model, req, c);
    };
}

SamplerFn noise_sampler(int64_t resolution) {
    return [resolution](const CaptionTokens&, uint64_t sample_seed) {
        Rng rng(derive_seed(sample_seed, 0x756e69666full));
        Tensor<float> img({resolution, resolution, 3});
        for (auto& v : img.v) v = float(2.0 * rng.uniform() - 1.0);
        return img;
    };
}

// --------------------------------------------------------------------------

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    require_same_shape(a, b, "psnr");
    double mse = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse == 0.0) return 99.0;
    const double db = 10.0 * std::log10(4.0 / mse);  // peak = 2.0
    return std::min(db, 99.0);
}

ProbeResult identity_collapse_probe(const SelfSamplerFn& sampler,
                                    std::span<const DatasetItem> held_out,
                                    float drop_ratio, int64_t n_images, uint64_t seed) {
    if (!(drop_ratio >= 0.0f && drop_ratio <= 1.0f))
        throw ConfigError("identity_collapse_probe: drop_ratio outside [0, 1]");
    if (held_out.empty()) throw ConfigError("identity_collapse_probe: no held-out images");
    if (n_images < 1) throw ConfigError("identity_collapse_probe: n_images must be >= 1");
    double acc = 0;
    for (int64_t i = 0; i < n_images; ++i) {
        const DatasetItem& item = held_out[size_t(i) % held_out.size()];
        const Tensor<float> gen =
            sampler(item.image, drop_ratio, derive_seed(seed, uint64_t(i)));
        acc += psnr(gen, item.image);
    }
    return {acc / double(n_images), drop_ratio, n_images};
}

ProbeResult identity_collapse_probe(Model& model, const SamplerConfig& cfg,
                                    std::span<const DatasetItem> held_out,
                                    float drop_ratio, int64_t n_images, uint64_t seed) {
    SelfSamplerFn fn = [&model, cfg](const Tensor<float>& source, float drop,
                                     uint64_t s) {
        SamplerConfig c = cfg;
        c.seed = s;
        SampleRequest req;
        req.cond_image = &source;
        req.cond_mask_ratio = drop;
        req.mask_seed = derive_seed(s, 0x64726f70ull);  // "drop"
        return sample_image(model, req, c);
    };
    return identity_collapse_probe(fn, held_out, drop_ratio, n_images, seed);
}

// --------------------------------------------------------------------------

namespace {

struct SpecDiff {
    int count = 0;                 // number of differing attribute slots
    int object_index = -1;
    enum class Field { none, shape, color, quadrant } field = Field::none;
};

SpecDiff diff_specs(const SceneSpec& a, const SceneSpec& b) {
    if (a.objects.size() != b.objects.size())
        throw ConfigError("edit probe: specs differ in object count");
    SpecDiff d;
    for (size_t i = 0; i < a.objects.size(); ++i) {
        const auto& oa = a.objects[i];
        const auto& ob = b.objects[i];
        if (oa.shape != ob.shape) {
            d.count++; d.object_index = int(i); d.field = SpecDiff::Field::shape;
        }
        if (oa.color != ob.color) {
            d.count++; d.object_index = int(i); d.field = SpecDiff::Field::color;
        }
        if (oa.quadrant != ob.quadrant) {
            d.count++; d.object_index = int(i); d.field = SpecDiff::Field::quadrant;
        }
    }
    return d;
}

double psnr_excluding_quadrants(const Tensor<float>& a, const Tensor<float>& b,
                                uint8_t excluded_mask) {
    require_same_shape(a, b, "psnr");
    const int64_t res = a.shape[0];
    const int64_t half = res / 2;
    double mse = 0;
    int64_t n = 0;
    for (int64_t y = 0; y < res; ++y) {
        for (int64_t x = 0; x < res; ++x) {
            const int qi = int(y / half) * 2 + int(x / half);
            if (excluded_mask & (1u << qi)) continue;
            for (int c = 0; c < 3; ++c) {
                const double d =
                    double(a[size_t((y * res + x) * 3 + c)]) -
                    double(b[size_t((y * res + x) * 3 + c)]);
                mse += d * d;
                ++n;
            }
        }
    }
    if (n == 0) return 99.0;
    mse /= double(n);
    if (mse == 0.0) return 99.0;
    return std::min(10.0 * std::log10(4.0 / mse), 99.0);
}

}  // namespace

EditProbeResult edit_probe(Model& model, const SceneSpec& source,
                           const SceneSpec& target, float mask_ratio,
                           const SamplerConfig& cfg) {
    const SceneSpec src = shapeworld::canonical(source);
    const SceneSpec tgt = shapeworld::canonical(target);
    shapeworld::validate_scene(src);
    shapeworld::validate_scene(tgt);
    const SpecDiff diff = diff_specs(src, tgt);
    if (diff.count > 1) {
        throw ConfigError("edit probe: specs differ in " + std::to_string(diff.count) +
                          " attributes (need exactly one)");
    }

    const int64_t res = model.cfg.denoiser.resolution;
    const Tensor<float> source_img = shapeworld::render_scene(src, res);
    const CaptionTokens target_caption = shapeworld::encode_caption(tgt);

    SampleRequest req;
    req.caption = &target_caption;
    req.cond_image = &source_img;
    req.cond_mask_ratio = mask_ratio;
    req.mask_seed = derive_seed(cfg.seed, 0x65646974ull);  // "edit"
    const Tensor<float> gen = sample_image(model, req, cfg);

    EditProbeResult out;
    const AttributeResult check = attribute_check(gen, tgt);
    switch (diff.field) {
        case SpecDiff::Field::none: out.attribute_changed = true; break;  // degenerate
        case SpecDiff::Field::shape: out.attribute_changed = check.shape; break;
        case SpecDiff::Field::color: out.attribute_changed = check.color; break;
        case SpecDiff::Field::quadrant: out.attribute_changed = check.position; break;
    }
    uint8_t excluded = 0;
    if (diff.object_index >= 0) {
        excluded |= uint8_t(1u << int(src.objects[size_t(diff.object_index)].quadrant));
        excluded |= uint8_t(1u << int(tgt.objects[size_t(diff.object_index)].quadrant));
    }
    out.psnr_elsewhere = psnr_excluding_quadrants(gen, source_img, excluded);
    return out;
}

// --------------------------------------------------------------------------

namespace {

double tail_mean_loss(const std::vector<StepMetrics>& metrics, size_t window = 100) {
    if (metrics.empty()) return std::numeric_limits<double>::quiet_NaN();
    const size_t n = std::min(window, metrics.size());
    double acc = 0;
    for (size_t i = metrics.size() - n; i < metrics.size(); ++i) acc += metrics[i].loss;
    return acc / double(n);
}

std::string csv_num(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << v;
    return os.str();
}

}  // namespace

std::vector<RecipeRow> recipe_matrix(const RunConfig& cfg, const std::string& out_dir,
                                     int prompts_per_category, uint64_t eval_seed) {
    fs::create_directories(out_dir);
    const auto dataset = shapeworld::make_dataset(
        cfg.data.train_items, cfg.data.val_items, cfg.model.denoiser.resolution,
        cfg.data.seed, cfg.data.allowed_counts);
    const auto prompts = build_prompt_set(prompts_per_category, eval_seed);

    std::vector<RecipeRow> rows;
    for (const RecipeSpec& recipe : enumerate_recipes()) {
        RecipeRow row;
        row.recipe = recipe;
        const std::string run_dir =
            (fs::path(out_dir) / (std::string("recipe_") + to_string(recipe.pretrain) +
                                  "_" + to_string(recipe.finetune)))
                .string();
        try {
            RunConfig rcfg = cfg;
            rcfg.recipe = recipe;
            finalize_config(rcfg);
            TrainState state =
                make_train_state(rcfg.model, rcfg.trainer.seed, rcfg.digest);
            const RecipeRunResult rr =
                run_recipe(state, recipe, rcfg.trainer, dataset.split("train"), run_dir);
            row.final_loss = tail_mean_loss(rr.finetune_metrics);
            Model em = ema_model(state);
            row.score = geneval_mini(model_sampler(em, rcfg.sampler), prompts, eval_seed,
                                     rcfg.trainer.threads);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
            row.final_loss = std::numeric_limits<double>::quiet_NaN();
            for (auto& a : row.score.category_acc) a = std::numeric_limits<double>::quiet_NaN();
            row.score.overall = std::numeric_limits<double>::quiet_NaN();
        }
        rows.push_back(std::move(row));
    }

    std::string csv = "pretrain,finetune,single_obj,two_obj,counting,colors,position,overall\n";
    std::string md =
        "| pretrain | finetune | single_obj | two_obj | counting | colors | position "
        "| overall |\n|---|---|---|---|---|---|---|---|\n";
    for (const auto& row : rows) {
        std::string cells;
        for (int ci = 0; ci < kNumCategories; ++ci) {
            cells += csv_num(row.score.category_acc[size_t(ci)]) + ",";
        }
        csv += std::string(to_string(row.recipe.pretrain)) + "," +
               to_string(row.recipe.finetune) + "," + cells + csv_num(row.score.overall) +
               "\n";
        md += "| " + std::string(to_string(row.recipe.pretrain)) + " | " +
              to_string(row.recipe.finetune) + " |";
        for (int ci = 0; ci < kNumCategories; ++ci) {
            md += " " + csv_num(row.score.category_acc[size_t(ci)]) + " |";
        }
        md += " " + csv_num(row.score.overall) + " |\n";
    }
    write_file_bytes((fs::path(out_dir) / "recipe_matrix.csv").string(), csv);
    write_file_bytes((fs::path(out_dir) / "recipe_matrix.md").string(), md);
    return rows;
}

AblationAxis ablation_axis_from_string(const std::string& s) {
    if (s == "mask_ratio" || s == "mask") return AblationAxis::mask_ratio;
    if (s == "mix_ratio" || s == "mix") return AblationAxis::mix_ratio;
    if (s == "adapter") return AblationAxis::adapter;
    throw ConfigError("unknown ablation axis '" + s + "'");
}

std::vector<std::string> default_ablation_values(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::mask_ratio: return {"0", "0.45", "0.85", "0.95"};
        case AblationAxis::mix_ratio: return {"0", "0.25", "0.5", "0.75", "1.0"};
        case AblationAxis::adapter: return {"with_rqa", "raw"};
    }
    return {};
}

std::vector<AblationRow> ablate(AblationAxis axis, const std::vector<std::string>& values,
                                const RunConfig& cfg, const std::string& out_dir,
                                int prompts_per_category, uint64_t eval_seed) {
    if (values.empty()) throw ConfigError("ablate: no values given");
    fs::create_directories(out_dir);
    const auto dataset = shapeworld::make_dataset(
        cfg.data.train_items, cfg.data.val_items, cfg.model.denoiser.resolution,
        cfg.data.seed, cfg.data.allowed_counts);
    const auto prompts = build_prompt_set(prompts_per_category, eval_seed);

    const char* axis_name = axis == AblationAxis::mask_ratio  ? "mask_ratio"
                            : axis == AblationAxis::mix_ratio ? "mix_ratio"
                                                              : "adapter";
    std::vector<AblationRow> rows;
    for (const std::string& value : values) {
        AblationRow row;
        row.value = value;
        try {
            RunConfig acfg = cfg;
            switch (axis) {
                case AblationAxis::mask_ratio:
                    acfg.trainer.mask_ratio = std::stof(value);
                    break;
                case AblationAxis::mix_ratio:
                    acfg.trainer.mix_ratio = std::stof(value);
                    acfg.recipe.finetune = StageData::mixed;
                    break;
                case AblationAxis::adapter:
                    if (value == "with_rqa") {
                        acfg.model.cond.use_adapter = true;
                    } else if (value == "raw") {
                        acfg.model.cond.use_adapter = false;
                    } else {
                        throw ConfigError("adapter axis values are with_rqa|raw");
                    }
                    break;
            }
            finalize_config(acfg);
            const std::string run_dir =
                (fs::path(out_dir) / (std::string(axis_name) + "_" + value)).string();
            TrainState state =
                make_train_state(acfg.model, acfg.trainer.seed, acfg.digest);
            const RecipeRunResult rr = run_recipe(state, acfg.recipe, acfg.trainer,
                                                  dataset.split("train"), run_dir);
            row.final_loss = tail_mean_loss(rr.finetune_metrics.empty()
                                                ? rr.pretrain_metrics
                                                : rr.finetune_metrics);
            Model em = ema_model(state);
            row.overall = geneval_mini(model_sampler(em, acfg.sampler), prompts,
                                       eval_seed, acfg.trainer.threads)
                              .overall;
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
            row.final_loss = std::numeric_limits<double>::quiet_NaN();
            row.overall = std::numeric_limits<double>::quiet_NaN();
        }
        rows.push_back(std::move(row));
    }

    std::string csv = std::string(axis_name) + ",final_loss,overall\n";
    for (const auto& row : rows) {
        csv += row.value + "," + csv_num(row.final_loss) + "," + csv_num(row.overall) + "\n";
    }
    write_file_bytes(
        (fs::path(out_dir) / (std::string("ablate_") + axis_name + ".csv")).string(), csv);
    return rows;
}

// --------------------------------------------------------------------------

ReportResult write_report(const std::string& metrics_dir, const std::string& out_dir) {
    std::vector<fs::path> files;
    if (!fs::exists(metrics_dir))
        throw ConfigError("report: no such directory " + metrics_dir);
    for (const auto& entry : fs::recursive_directory_iterator(metrics_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".jsonl") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw ConfigError("report: no metrics JSONL files under " + metrics_dir);

    struct StageSeries {
        std::vector<double> steps, losses;
        double total_ms = 0;
    };
    std::map<std::string, StageSeries> stages;
    ReportResult result;
    std::vector<std::string> warnings;
    for (const auto& file : files) {
        std::ifstream in(file);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                const json j = json::parse(line);
                const std::string stage = j.at("stage").get<std::string>();
                StageSeries& s = stages[stage];
                s.steps.push_back(j.at("step").get<double>());
                s.losses.push_back(j.at("loss").get<double>());
                s.total_ms += j.at("ms").get<double>();
                result.points++;
            } catch (const json::exception& e) {
                warnings.push_back(file.filename().string() + ":" +
                                   std::to_string(lineno) + ": " + e.what());
            }
        }
    }
    result.warnings = int(warnings.size());
    result.stages = int(stages.size());
    if (stages.empty())
        throw ConfigError("report: no parsable metrics lines under " + metrics_dir);

    fs::create_directories(out_dir);
    std::vector<ChartSeries> series;
    for (const auto& [label, s] : stages) {
        series.push_back({label, s.steps, s.losses});
    }
    result.svg_path = (fs::path(out_dir) / "loss_curves.svg").string();
    emit_chart(series, result.svg_path, "step", "loss");

    std::ostringstream md;
    md << "# Training report\n\n";
    md << "| stage | steps | first loss | last loss | wall time (s) |\n";
    md << "|---|---|---|---|---|\n";
    double total_ms = 0;
    int64_t total_steps = 0;
    for (const auto& [label, s] : stages) {
        md << "| " << label << " | " << s.steps.size() << " | " << csv_num(s.losses.front())
           << " | " << csv_num(s.losses.back()) << " | " << csv_num(s.total_ms / 1000.0)
           << " |\n";
        total_ms += s.total_ms;
        total_steps += int64_t(s.steps.size());
    }
    md << "\nTotal: " << total_steps << " steps, " << csv_num(total_ms / 1000.0)
       << " s wall time.\n";
    md << "\nLoss curves: ![loss](loss_curves.svg)\n";
    if (!warnings.empty()) {
        md << "\n## Warnings\n\n";
        for (const auto& w : warnings) md << "- skipped line " << w << "\n";
    }
    result.markdown_path = (fs::path(out_dir) / "report.md").string();
    write_file_bytes(result.markdown_path, md.str());
    return result;
}

}  // namespace iomm::eval
