#include "iomm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "iomm/checkpoint.hpp"

namespace iomm {

namespace fs = std::filesystem;
using shapeworld::DatasetItem;

const char* to_string(StageData s) {
    switch (s) {
        case StageData::image_only: return "image-only";
        case StageData::paired: return "paired";
        case StageData::mixed: return "mixed";
    }
    return "?";
}

StageData stage_data_from_string(const std::string& s) {
    if (s == "image-only" || s == "image_only" || s == "image") return StageData::image_only;
    if (s == "paired" || s == "pair") return StageData::paired;
    if (s == "mixed" || s == "mix") return StageData::mixed;
    throw ConfigError("unknown stage data type '" + s + "'");
}

std::array<RecipeSpec, 6> enumerate_recipes() {
    return {{{StageData::image_only, StageData::image_only},
             {StageData::image_only, StageData::paired},
             {StageData::image_only, StageData::mixed},
             {StageData::paired, StageData::image_only},
             {StageData::paired, StageData::paired},
             {StageData::paired, StageData::mixed}}};
}

void TrainerConfig::validate() const {
    if (!(learning_rate > 0)) throw ConfigError("trainer.learning_rate must be > 0");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1))
        throw ConfigError("trainer.adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0 && adam_beta2 < 1))
        throw ConfigError("trainer.adam_beta2 must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("trainer.weight_decay must be >= 0");
    if (!(max_grad_norm > 0)) throw ConfigError("trainer.max_grad_norm must be > 0");
    if (!(ema_decay >= 0 && ema_decay <= 1))
        throw ConfigError("trainer.ema_decay must lie in [0, 1]");
    if (!(mask_ratio >= 0 && mask_ratio <= 1))
        throw ConfigError("trainer.mask_ratio must lie in [0, 1]");
    if (!(mix_ratio >= 0 && mix_ratio <= 1))
        throw ConfigError("trainer.mix_ratio must lie in [0, 1]");
    if (!(uncond_prob >= 0 && uncond_prob <= 1))
        throw ConfigError("trainer.uncond_prob must lie in [0, 1]");
    if (batch_size < 1) throw ConfigError("trainer.batch_size must be >= 1");
    if (pretrain_steps < 0 || finetune_steps < 0)
        throw ConfigError("trainer step budgets must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("trainer.checkpoint_every must be >= 0");
}

void ModelConfig::validate() const {
    denoiser.validate();
    backbone.validate();
    adapter.validate();
    if (denoiser.cond_dim != backbone.width)
        throw ConfigError("denoiser.cond_dim must equal backbone.width");
    if (adapter.width != backbone.width)
        throw ConfigError("adapter.width must equal backbone.width");
    if (denoiser.resolution != backbone.resolution)
        throw ConfigError("denoiser and backbone resolutions differ");
}

Model make_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.backbone = make_backbone<float>(cfg.backbone, cfg.adapter.queries);
    m.adapter = make_adapter<float>(cfg.adapter);
    m.denoiser = make_denoiser<float>(cfg.denoiser);
    return m;
}

void ema_update(std::span<double> shadow, std::span<const float> theta, double decay) {
    if (shadow.size() != theta.size())
        throw ShapeError("ema_update: shadow and theta sizes differ");
    if (!(decay >= 0.0 && decay <= 1.0))
        throw ConfigError("ema decay must lie in [0, 1]");
    for (size_t i = 0; i < shadow.size(); ++i) {
        shadow[i] = decay * shadow[i] + (1.0 - decay) * double(theta[i]);
    }
}

TrainState make_train_state(const ModelConfig& cfg, uint64_t seed,
                            std::string config_digest) {
    TrainState st;
    st.model = make_model(cfg);
    st.config_digest = std::move(config_digest);
    st.train_rng = Rng(derive_seed(seed, 0x747261696eull));  // "train"
    st.data_rng = Rng(derive_seed(seed, 0x64617461ull));     // "data"
    st.model.for_each_trainable([&](const std::string&, Param<float>& p) {
        st.adam_m.emplace_back(p.w.shape);
        st.adam_v.emplace_back(p.w.shape);
        Tensor<double> shadow(p.w.shape);
        for (size_t i = 0; i < p.w.v.size(); ++i) shadow[i] = double(p.w[i]);
        st.ema.push_back(std::move(shadow));
    });
    return st;
}

Model ema_model(TrainState& state) {
    Model m = state.model;
    size_t idx = 0;
    m.for_each_trainable([&](const std::string&, Param<float>& p) {
        const Tensor<double>& shadow = state.ema[idx++];
        for (size_t i = 0; i < p.w.v.size(); ++i) p.w[i] = float(shadow[i]);
    });
    return m;
}

ConditionMode select_mode(StageData stage, float mix_ratio, float uncond_prob,
                          Rng& rng) {
    if (rng.uniform() < double(uncond_prob)) return ConditionMode::unconditional;
    switch (stage) {
        case StageData::image_only: return ConditionMode::image_only;
        case StageData::paired: return ConditionMode::paired;
        case StageData::mixed:
            return rng.uniform() < double(mix_ratio) ? ConditionMode::image_only
                                                     : ConditionMode::paired;
    }
    throw ConfigError("unreachable stage data");
}

namespace {

int resolve_threads(const TrainerConfig& cfg) {
    if (cfg.deterministic) return 1;
    if (cfg.threads > 0) return cfg.threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

std::string mode_summary(const std::vector<ConditionMode>& modes) {
    std::map<ConditionMode, int> counts;
    for (const auto m : modes) counts[m]++;
    if (counts.size() == 1) return to_string(modes.front());
    std::string out;
    for (const auto mode : {ConditionMode::image_only, ConditionMode::paired,
                            ConditionMode::unconditional}) {
        const auto it = counts.find(mode);
        if (it == counts.end()) continue;
        if (!out.empty()) out += ",";
        out += std::string(to_string(mode)) + ":" + std::to_string(it->second);
    }
    return out;
}

// Per-element scratch of the forward pass kept alive for the backward phase.
struct ElementWork {
    ConditionMode mode = ConditionMode::unconditional;
    uint64_t subseed = 0;
    const DatasetItem* item = nullptr;
    Tensor<float> z;
    float t = 0.0f;
    Tensor<float> x_t;
    PipelineCache<float> cond_cache;
    DenoiserCache<float> den_cache;
    Tensor<float> h;
    Tensor<float> pred;
};

void sync_replica(ModelReplica& rep, Model& master) {
    auto copy_params = [](auto& dst_mod, auto& src_mod) {
        std::vector<Param<float>*> dst, src;
        dst_mod.for_each_param([&](const std::string&, Param<float>& p) { dst.push_back(&p); });
        src_mod.for_each_param([&](const std::string&, Param<float>& p) { src.push_back(&p); });
        for (size_t i = 0; i < dst.size(); ++i) {
            dst[i]->w.v = src[i]->w.v;
            dst[i]->g.zero();
        }
    };
    copy_params(rep.denoiser, master.denoiser);
    copy_params(rep.adapter, master.adapter);
}

void reduce_replica(Model& master, ModelReplica& rep, bool use_adapter) {
    auto add_grads = [](auto& dst_mod, auto& src_mod) {
        std::vector<Param<float>*> dst, src;
        dst_mod.for_each_param([&](const std::string&, Param<float>& p) { dst.push_back(&p); });
        src_mod.for_each_param([&](const std::string&, Param<float>& p) { src.push_back(&p); });
        for (size_t i = 0; i < dst.size(); ++i) {
            for (size_t j = 0; j < dst[i]->g.v.size(); ++j) dst[i]->g[j] += src[i]->g[j];
        }
    };
    add_grads(master.denoiser, rep.denoiser);
    if (use_adapter) add_grads(master.adapter, rep.adapter);
}

// Forward pass for one batch element against the given trainable set.
void element_forward(ElementWork& ew, const FrozenBackbone<float>& backbone,
                     Adapter<float>* adapter, Denoiser<float>& denoiser,
                     const ConditionerOptions& opts, float mask_ratio,
                     const TraceHook& trace) {
    Rng elem_rng(ew.subseed);
    const auto& den_cfg = denoiser.cfg;
    const int64_t res = den_cfg.resolution;

    if (trace) trace("sample");
    ew.z = Tensor<float>({res, res, 3});
    for (auto& v : ew.z.v) v = float(elem_rng.normal());
    ew.t = float(elem_rng.uniform());
    const uint64_t mask_seed = elem_rng.next_u64();

    if (trace) trace("interpolate");
    const Tensor<float>& x = ew.item->image;
    ew.x_t = Tensor<float>({res, res, 3});
    for (size_t i = 0; i < ew.x_t.v.size(); ++i) {
        ew.x_t[i] = (1.0f - ew.t) * x[i] + ew.t * ew.z[i];
    }

    const MaskSpec mask{mask_ratio, mask_seed};
    const Tensor<float>* cond_image =
        ew.mode == ConditionMode::image_only || ew.mode == ConditionMode::image_caption
            ? &x
            : nullptr;
    const shapeworld::CaptionTokens* caption =
        ew.mode == ConditionMode::paired || ew.mode == ConditionMode::image_caption
            ? &ew.item->caption
            : nullptr;
    ew.h = condition_pipeline(ew.mode, cond_image, caption, mask, backbone, adapter,
                              opts, ew.cond_cache, trace);
    if (trace) trace("denoise");
    ew.pred = denoiser_forward(denoiser, ew.x_t, ew.t, ew.h, ew.den_cache);
}

}  // namespace

StepMetrics train_step(TrainState& state, std::span<const DatasetItem* const> batch,
                       const TrainerConfig& cfg, const std::string& stage_label,
                       StageData stage_data, TrainWorkspace& ws, const TrainHooks& hooks) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    Model& model = state.model;
    const int64_t b = int64_t(batch.size());
    if (b == 0) throw ConfigError("train_step: empty batch");
    const int64_t res = model.cfg.denoiser.resolution;
    const int64_t per = res * res * 3;

    const int threads = std::min<int64_t>(resolve_threads(cfg), b);
    while (int(ws.replicas.size()) < threads - 1) {
        ws.replicas.push_back({model.denoiser, model.adapter});
    }

    // Sequential draws so the stream is independent of threading.
    std::vector<ElementWork> work(static_cast<size_t>(b));
    std::vector<ConditionMode> modes;
    for (int64_t i = 0; i < b; ++i) {
        work[size_t(i)].mode =
            select_mode(stage_data, cfg.mix_ratio, cfg.uncond_prob, state.train_rng);
        work[size_t(i)].subseed = state.train_rng.next_u64();
        work[size_t(i)].item = batch[size_t(i)];
        modes.push_back(work[size_t(i)].mode);
    }

    model.zero_grads();
    for (auto& rep : ws.replicas) sync_replica(rep, model);

    // Parallel over element chunks; thread 0 runs on the master weights.
    std::exception_ptr chunk_error;
    std::mutex error_mutex;
    auto run_chunk = [&](int tid, bool backward_phase, const Tensor<float>* dpred) {
        try {
            Denoiser<float>& den =
                tid == 0 ? model.denoiser : ws.replicas[size_t(tid - 1)].denoiser;
            Adapter<float>* ada = model.cfg.cond.use_adapter
                                      ? (tid == 0 ? &model.adapter
                                                  : &ws.replicas[size_t(tid - 1)].adapter)
                                      : nullptr;
            const int64_t lo = b * tid / threads;
            const int64_t hi = b * (tid + 1) / threads;
            for (int64_t i = lo; i < hi; ++i) {
                ElementWork& ew = work[size_t(i)];
                if (!backward_phase) {
                    const TraceHook trace =
                        (hooks.trace && i == 0) ? hooks.trace : TraceHook{};
                    element_forward(ew, model.backbone, ada, den, model.cfg.cond,
                                    cfg.mask_ratio, trace);
                } else {
                    Tensor<float> dv({res, res, 3});
                    std::copy_n(dpred->data() + i * per, per, dv.data());
                    const Tensor<float> dh = denoiser_backward(den, ew.den_cache, dv);
                    condition_pipeline_backward(ew.cond_cache, model.backbone, ada, dh);
                }
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!chunk_error) chunk_error = std::current_exception();
        }
    };

    auto run_phase = [&](bool backward_phase, const Tensor<float>* dpred) {
        if (threads == 1) {
            run_chunk(0, backward_phase, dpred);
        } else {
            std::vector<std::thread> pool;
            for (int tid = 1; tid < threads; ++tid) {
                pool.emplace_back(
                    [&run_chunk, tid, backward_phase, dpred] { run_chunk(tid, backward_phase, dpred); });
            }
            run_chunk(0, backward_phase, dpred);
            for (auto& th : pool) th.join();
        }
        if (chunk_error) std::rethrow_exception(chunk_error);
    };

    run_phase(false, nullptr);

    // Batch loss exactly as the flow module defines it.
    Tensor<float> pred({b, res, res, 3}), xb({b, res, res, 3}), zb({b, res, res, 3});
    for (int64_t i = 0; i < b; ++i) {
        std::copy_n(work[size_t(i)].pred.data(), per, pred.data() + i * per);
        std::copy_n(work[size_t(i)].item->image.data(), per, xb.data() + i * per);
        std::copy_n(work[size_t(i)].z.data(), per, zb.data() + i * per);
    }
    StepMetrics metrics;
    metrics.step = state.step + 1;
    metrics.stage = stage_label;
    metrics.mode = mode_summary(modes);
    if (hooks.trace) hooks.trace("loss");
    Tensor<float> dpred;
    double loss = 0.0;
    try {
        loss = double(flow::fm_loss_backward(pred, xb, zb, dpred));
    } catch (const NumericError& e) {
        metrics.loss = std::numeric_limits<double>::quiet_NaN();
        throw TrainAbortError(std::string("train_step aborted: ") + e.what(), metrics);
    }
    metrics.loss = loss;
    if (!std::isfinite(loss)) {
        throw TrainAbortError("train_step aborted: non-finite loss", metrics);
    }

    run_phase(true, &dpred);
    for (auto& rep : ws.replicas) reduce_replica(model, rep, model.cfg.cond.use_adapter);

    // Global-norm clip.
    double sq = 0.0;
    model.for_each_trainable([&](const std::string&, Param<float>& p) {
        for (const float g : p.g.v) sq += double(g) * double(g);
    });
    metrics.grad_norm = std::sqrt(sq);
    if (metrics.grad_norm > cfg.max_grad_norm) {
        const float scale = float(cfg.max_grad_norm / metrics.grad_norm);
        model.for_each_trainable([&](const std::string&, Param<float>& p) {
            for (auto& g : p.g.v) g *= scale;
        });
    }

    // Decoupled-weight-decay adaptive-moment update, bias-corrected.
    if (hooks.trace) hooks.trace("update");
    const int64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(t));
    size_t pi = 0;
    model.for_each_trainable([&](const std::string&, Param<float>& p) {
        Tensor<float>& m = state.adam_m[pi];
        Tensor<float>& v = state.adam_v[pi];
        ++pi;
        for (size_t j = 0; j < p.w.v.size(); ++j) {
            const double g = double(p.g[j]);
            const double mj = cfg.adam_beta1 * double(m[j]) + (1.0 - cfg.adam_beta1) * g;
            const double vj = cfg.adam_beta2 * double(v[j]) + (1.0 - cfg.adam_beta2) * g * g;
            m[j] = float(mj);
            v[j] = float(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            const double w = double(p.w[j]);
            p.w[j] = float(w - cfg.learning_rate *
                                   (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                                    cfg.weight_decay * w));
        }
    });

    if (hooks.trace) hooks.trace("ema");
    size_t ei = 0;
    model.for_each_trainable([&](const std::string&, Param<float>& p) {
        ema_update(std::span<double>(state.ema[ei].v),
                   std::span<const float>(p.w.v), cfg.ema_decay);
        ++ei;
    });

    state.step += 1;
    const auto t1 = std::chrono::steady_clock::now();
    metrics.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return metrics;
}

std::vector<StepMetrics> run_stage(TrainState& state, const std::string& stage_label,
                                   StageData data_mode, int64_t steps,
                                   const TrainerConfig& cfg,
                                   std::span<const DatasetItem> data,
                                   const std::string& out_dir, const TrainHooks& hooks) {
    cfg.validate();
    if (data.empty()) throw ConfigError("run_stage: empty dataset");
    if (data_mode != StageData::image_only) {
        for (const auto& item : data) {
            if (item.caption.empty()) {
                throw ConfigError("run_stage: " + std::string(to_string(data_mode)) +
                                  " stage on caption-less dataset");
            }
        }
    }
    fs::create_directories(out_dir);
    std::ofstream metrics_out(fs::path(out_dir) / "metrics.jsonl",
                              std::ios::app);
    if (!metrics_out) throw FormatError("cannot open metrics.jsonl under " + out_dir);

    TrainWorkspace ws;
    std::vector<StepMetrics> all;
    all.reserve(size_t(steps));
    std::vector<const DatasetItem*> batch(size_t(cfg.batch_size));
    for (int64_t s = 0; s < steps; ++s) {
        for (auto& slot : batch) {
            slot = &data[size_t(state.data_rng.below(uint64_t(data.size())))];
        }
        StepMetrics m = train_step(state, batch, cfg, stage_label, data_mode, ws, hooks);
        nlohmann::json line = {{"step", m.step},     {"stage", m.stage},
                               {"loss", m.loss},     {"grad_norm", m.grad_norm},
                               {"mode", m.mode},     {"ms", m.ms}};
        metrics_out << line.dump() << "\n";
        if (hooks.on_step) hooks.on_step(m);
        all.push_back(std::move(m));
        if (cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 && s + 1 < steps) {
            save_checkpoint(state, (fs::path(out_dir) / "checkpoints" / "latest").string());
        }
    }
    metrics_out.flush();
    save_checkpoint(state, (fs::path(out_dir) / "checkpoints" / "final").string());
    return all;
}

RecipeRunResult run_recipe(TrainState& state, const RecipeSpec& recipe,
                           const TrainerConfig& cfg,
                           std::span<const DatasetItem> data,
                           const std::string& out_dir, const TrainHooks& hooks) {
    recipe.validate();
    RecipeRunResult result;
    result.pretrain_dir = (fs::path(out_dir) / "pretrain").string();
    result.finetune_dir = (fs::path(out_dir) / "finetune").string();

    state.train_rng = Rng(derive_seed(cfg.seed, 0x5354414745ull + 0));  // stage 0
    state.data_rng = Rng(derive_seed(cfg.seed, 0x4241544348ull + 0));
    result.pretrain_metrics = run_stage(state, "pretrain", recipe.pretrain,
                                        cfg.pretrain_steps, cfg, data,
                                        result.pretrain_dir, hooks);

    state.train_rng = Rng(derive_seed(cfg.seed, 0x5354414745ull + 1));  // stage 1
    state.data_rng = Rng(derive_seed(cfg.seed, 0x4241544348ull + 1));
    result.finetune_metrics = run_stage(state, "finetune", recipe.finetune,
                                        cfg.finetune_steps, cfg, data,
                                        result.finetune_dir, hooks);
    return result;
}

}  // namespace iomm
