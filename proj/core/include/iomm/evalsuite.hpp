#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "iomm/runconfig.hpp"
#include "iomm/sampling.hpp"
#include "iomm/shapeworld.hpp"

// GenEval-mini: pixel-arithmetic scene recovery plus category scoring, the
// reconstruction/identity-collapse probes, the recipe matrix, ablation sweeps,
// and the zero-shot edit probe.
//
// Scoring is anchored at the prompt's quadrants: an attribute passes when every
// specified quadrant holds a detected object matching that attribute, and
// `count` when the detected object count equals the prompt's. Categories:
// counting = count; colors = count & color; position = count & position;
// single_obj and two_obj = count & shape.

namespace iomm::eval {

using shapeworld::CaptionTokens;
using shapeworld::DatasetItem;
using shapeworld::SceneSpec;

struct DetectedObject {
    bool present = false;
    shapeworld::Color color = shapeworld::Color::red;
    shapeworld::Shape shape = shapeworld::Shape::circle;
    int64_t lit_pixels = 0;
};

struct DetectedScene {
    std::array<DetectedObject, 4> quadrants;  // indexed by Quadrant

    int count() const {
        int n = 0;
        for (const auto& q : quadrants) n += q.present ? 1 : 0;
        return n;
    }
};

// Presence: >= theta lit pixels (L-inf deviation from background > 0.5);
// color: nearest palette color to the mean lit pixel; shape: bbox fill ratio
// thresholds (> 0.9 square, 0.65..0.9 circle, < 0.65 triangle).
DetectedScene detect_scene(const Tensor<float>& image);

struct AttributeResult {
    bool count = false;
    bool position = false;
    bool color = false;
    bool shape = false;

    bool exact() const { return count && position && color && shape; }
};

// Total: blank or garbage images simply fail every check.
AttributeResult attribute_check(const Tensor<float>& image, const SceneSpec& spec);

// --------------------------------------------------------------------------

enum class Category : uint8_t { single_obj = 0, two_obj, counting, colors, position };
constexpr int kNumCategories = 5;
const char* to_string(Category c);

struct Prompt {
    Category category;
    SceneSpec scene;
    CaptionTokens caption;
};

// per_category prompts for each of the five categories, seeded.
std::vector<Prompt> build_prompt_set(int per_category, uint64_t seed);

struct ScoreReport {
    std::array<double, kNumCategories> category_acc{};
    std::array<int64_t, kNumCategories> category_failures{};  // sampler failures
    double overall = 0.0;  // unweighted mean of the category accuracies
    int64_t n_prompts = 0;
    uint64_t seed = 0;

    double category(Category c) const { return category_acc[size_t(c)]; }
    int64_t total_failures() const {
        int64_t n = 0;
        for (const auto f : category_failures) n += f;
        return n;
    }
    std::string to_json() const;
};

using SamplerFn =
    std::function<Tensor<float>(const CaptionTokens& caption, uint64_t sample_seed)>;

// One image per prompt (sample seed = derive(seed, prompt index)), scored with
// attribute_check. Sampler exceptions are counted per category; the run
// continues. Requires every category to appear in the prompt set.
ScoreReport geneval_mini(const SamplerFn& sampler, const std::vector<Prompt>& prompts,
                         uint64_t seed, int threads = 0);

// Paired-conditioning sampler over the model's EMA-or-live weights.
SamplerFn model_sampler(Model& model, const SamplerConfig& cfg);

// Seeded uniform noise in [-1, 1]; the chance-rate baseline generator.
SamplerFn noise_sampler(int64_t resolution);

// --------------------------------------------------------------------------

// 10 log10(peak^2 / mse), peak = 2.0, capped at 99.0 dB.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

struct ProbeResult {
    double psnr_db = 0.0;
    float drop_ratio = 0.0f;
    int64_t n_images = 0;
};

using SelfSamplerFn = std::function<Tensor<float>(
    const Tensor<float>& source, float drop_ratio, uint64_t seed)>;

// Self-condition on each held-out image with inference-time token drop, sample,
// report the mean PSNR to the source.
ProbeResult identity_collapse_probe(const SelfSamplerFn& sampler,
                                    std::span<const DatasetItem> held_out,
                                    float drop_ratio, int64_t n_images, uint64_t seed);
ProbeResult identity_collapse_probe(Model& model, const SamplerConfig& cfg,
                                    std::span<const DatasetItem> held_out,
                                    float drop_ratio, int64_t n_images, uint64_t seed);

// --------------------------------------------------------------------------

struct EditProbeResult {
    bool attribute_changed = false;
    double psnr_elsewhere = 0.0;
};

// Conditions on the masked source patches concatenated with the target
// caption; source and target must differ in at most one object attribute.
EditProbeResult edit_probe(Model& model, const SceneSpec& source,
                           const SceneSpec& target, float mask_ratio,
                           const SamplerConfig& cfg);

// --------------------------------------------------------------------------

struct RecipeRow {
    RecipeSpec recipe;
    ScoreReport score;
    double final_loss = 0.0;
    bool failed = false;
    std::string error;
};

// Runs all six recipes (fixed order), evaluates each final EMA model, writes
// recipe_matrix.csv and recipe_matrix.md under out_dir. Per-recipe failures
// are recorded in the row and the run continues.
std::vector<RecipeRow> recipe_matrix(const RunConfig& cfg, const std::string& out_dir,
                                     int prompts_per_category, uint64_t eval_seed);

enum class AblationAxis : uint8_t { mask_ratio = 0, mix_ratio, adapter };
AblationAxis ablation_axis_from_string(const std::string& s);
std::vector<std::string> default_ablation_values(AblationAxis axis);

struct AblationRow {
    std::string value;
    double final_loss = 0.0;
    double overall = 0.0;
    bool failed = false;
    std::string error;
};

// One shortened-budget run per value with fixed seeds; writes ablate_<axis>.csv.
std::vector<AblationRow> ablate(AblationAxis axis, const std::vector<std::string>& values,
                                const RunConfig& cfg, const std::string& out_dir,
                                int prompts_per_category, uint64_t eval_seed);

// --------------------------------------------------------------------------

struct ReportResult {
    int stages = 0;
    int points = 0;
    int warnings = 0;
    std::string markdown_path;
    std::string svg_path;
};

// Scans metrics_dir for *.jsonl, draws per-stage loss curves, writes
// report.md + loss_curves.svg under out_dir. Malformed lines are skipped with
// a warning. Errors if no metrics files are found.
ReportResult write_report(const std::string& metrics_dir, const std::string& out_dir);

}  // namespace iomm::eval
