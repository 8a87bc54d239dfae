#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "iomm/conditioner.hpp"
#include "iomm/denoiser.hpp"
#include "iomm/errors.hpp"
#include "iomm/flow.hpp"
#include "iomm/shapeworld.hpp"

// The training loop: per sample draw noise/time, interpolate, build the
// (masked, adapter-refined) condition, predict velocity, take the flow loss,
// clip, AdamW-update the trainable set, and fold the EMA shadow. Two-stage
// recipes run pretrain then finetune with fresh stage seeds.

namespace iomm {

enum class StageData : uint8_t { image_only = 0, paired = 1, mixed = 2 };

const char* to_string(StageData s);
StageData stage_data_from_string(const std::string& s);

// One of the six pretrain x finetune schedules; pretrain is never mixed.
struct RecipeSpec {
    StageData pretrain = StageData::image_only;
    StageData finetune = StageData::mixed;

    void validate() const {
        if (pretrain == StageData::mixed)
            throw ConfigError("recipe pretrain stage must be image-only or paired");
    }
    bool operator==(const RecipeSpec&) const = default;
};

// Fixed order: (img,img) (img,pair) (img,mix) (pair,img) (pair,pair) (pair,mix).
std::array<RecipeSpec, 6> enumerate_recipes();

struct TrainerConfig {
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double max_grad_norm = 1.0;
    double ema_decay = 0.999;
    float mask_ratio = 0.45f;
    float mix_ratio = 0.5f;    // lambda: P(image-only) per sample in mixed stages
    float uncond_prob = 0.1f;  // unconditional draw, enables guided sampling
    int64_t batch_size = 8;
    int64_t pretrain_steps = 2000;
    int64_t finetune_steps = 1000;
    int64_t checkpoint_every = 500;  // 0 = end of stage only
    uint64_t seed = 0;
    bool deterministic = false;  // single worker, fixed-order batching
    int threads = 0;             // 0 = hardware concurrency

    void validate() const;
};

struct ModelConfig {
    DenoiserConfig denoiser;
    BackboneConfig backbone;
    AdapterConfig adapter;
    ConditionerOptions cond;

    void validate() const;
};

struct Model {
    ModelConfig cfg;
    FrozenBackbone<float> backbone;
    Adapter<float> adapter;
    Denoiser<float> denoiser;

    // Trainable set: denoiser then adapter (adapter only when enabled).
    template <class F>
    void for_each_trainable(F&& f) {
        denoiser.for_each_param(f);
        if (cfg.cond.use_adapter) adapter.for_each_param(f);
    }

    void zero_grads() {
        for_each_trainable([](const std::string&, Param<float>& p) { p.zero_grad(); });
    }

    int64_t trainable_count() {
        int64_t n = 0;
        for_each_trainable([&](const std::string&, Param<float>& p) { n += p.w.numel(); });
        return n;
    }
};

Model make_model(const ModelConfig& cfg);

// shadow' = d * shadow + (1 - d) * theta, computed in double.
void ema_update(std::span<double> shadow, std::span<const float> theta, double decay);

struct TrainState {
    Model model;
    // Aligned with the trainable traversal order.
    std::vector<Tensor<float>> adam_m, adam_v;
    std::vector<Tensor<double>> ema;
    int64_t step = 0;
    Rng train_rng{0};
    Rng data_rng{0};
    std::string config_digest;
};

TrainState make_train_state(const ModelConfig& cfg, uint64_t seed,
                            std::string config_digest);

// Copy of the model carrying the EMA weights (for evaluation/sampling).
Model ema_model(TrainState& state);

struct StepMetrics {
    int64_t step = 0;
    std::string stage;
    double loss = 0.0;
    double grad_norm = 0.0;  // pre-clip global norm
    std::string mode;
    double ms = 0.0;
};

// Thrown when a step produces a non-finite loss; the state is left exactly as
// it was before the step.
struct TrainAbortError : NumericError {
    StepMetrics metrics;
    TrainAbortError(const std::string& msg, StepMetrics m)
        : NumericError(msg), metrics(std::move(m)) {}
};

// Per-sample conditioning mode. Order of draws: one uniform for the
// unconditional check, then (mixed stages only) one uniform against lambda.
ConditionMode select_mode(StageData stage, float mix_ratio, float uncond_prob, Rng& rng);

struct TrainHooks {
    TraceHook trace;  // sub-operation labels, in execution order
    std::function<void(const StepMetrics&)> on_step;
};

// Scratch reused across steps: trainable-parameter replicas for worker
// threads 1..n-1 (weights synced from the master each step, gradients
// reduced back in thread order so results are fixed for a given thread count).
struct ModelReplica {
    Denoiser<float> denoiser;
    Adapter<float> adapter;
};
struct TrainWorkspace {
    std::vector<ModelReplica> replicas;
};

StepMetrics train_step(TrainState& state, std::span<const shapeworld::DatasetItem* const> batch,
                       const TrainerConfig& cfg, const std::string& stage_label,
                       StageData stage_data, TrainWorkspace& ws,
                       const TrainHooks& hooks = {});

// Runs `steps` training steps, appending one JSONL metrics line per step to
// <out_dir>/metrics.jsonl and checkpointing per cfg.checkpoint_every (plus a
// final checkpoint). Returns the per-step metrics.
std::vector<StepMetrics> run_stage(TrainState& state, const std::string& stage_label,
                                   StageData data_mode, int64_t steps,
                                   const TrainerConfig& cfg,
                                   std::span<const shapeworld::DatasetItem> data,
                                   const std::string& out_dir,
                                   const TrainHooks& hooks = {});

struct RecipeRunResult {
    std::string pretrain_dir;
    std::string finetune_dir;
    std::vector<StepMetrics> pretrain_metrics;
    std::vector<StepMetrics> finetune_metrics;
};

// Pretrain then finetune with fresh stage seeds; archives metrics and the
// final state (with EMA) under out_dir. The optional warm start skips the
// pretrain stage by loading its final checkpoint from another run.
RecipeRunResult run_recipe(TrainState& state, const RecipeSpec& recipe,
                           const TrainerConfig& cfg,
                           std::span<const shapeworld::DatasetItem> data,
                           const std::string& out_dir,
                           const TrainHooks& hooks = {});

}  // namespace iomm
