#pragma once

#include <cstdint>

#include "iomm/flow.hpp"
#include "iomm/trainer.hpp"

// Conditional generation: build the latent condition for a request, draw the
// start noise from the sampler seed, and integrate the PF-ODE backward. With
// guidance_scale != 1 the field evaluates the denoiser exactly twice per step
// (conditional + unconditional) and extrapolates between them.

namespace iomm {

struct SampleRequest {
    const shapeworld::CaptionTokens* caption = nullptr;  // paired conditioning
    const Tensor<float>* cond_image = nullptr;  // self-conditioning patches
    float cond_mask_ratio = 0.0f;  // inference-time token drop on image tokens
    uint64_t mask_seed = 0;
};

inline ConditionMode request_mode(const SampleRequest& req) {
    if (req.caption && req.cond_image) return ConditionMode::image_caption;
    if (req.caption) return ConditionMode::paired;
    if (req.cond_image) return ConditionMode::image_only;
    return ConditionMode::unconditional;
}

// field_evals, when given, counts denoiser evaluations (NFE).
inline Tensor<float> sample_image(Model& model, const SampleRequest& req,
                                  const SamplerConfig& cfg, int64_t* field_evals = nullptr) {
    cfg.validate();
    const ConditionMode mode = request_mode(req);
    Adapter<float>* adapter = model.cfg.cond.use_adapter ? &model.adapter : nullptr;
    const MaskSpec mask{req.cond_mask_ratio, req.mask_seed};

    PipelineCache<float> cond_cache;
    const Tensor<float> h_cond =
        condition_pipeline(mode, req.cond_image, req.caption, mask, model.backbone,
                           adapter, model.cfg.cond, cond_cache);
    const bool guided =
        cfg.guidance_scale != 1.0f && mode != ConditionMode::unconditional;
    Tensor<float> h_uncond;
    if (guided) {
        PipelineCache<float> uncond_cache;
        h_uncond = condition_pipeline(ConditionMode::unconditional, nullptr, nullptr,
                                      mask, model.backbone, adapter, model.cfg.cond,
                                      uncond_cache);
    }

    const int64_t res = model.cfg.denoiser.resolution;
    Rng noise_rng(derive_seed(cfg.seed, 0x6e6f6973ull));  // "nois"
    Tensor<float> start({res, res, 3});
    for (auto& v : start.v) v = float(noise_rng.normal());

    DenoiserCache<float> scratch;
    auto field = [&](const Tensor<float>& x, float t) {
        Tensor<float> v_cond = denoiser_forward(model.denoiser, x, t, h_cond, scratch);
        if (field_evals) ++*field_evals;
        if (!guided) return v_cond;
        Tensor<float> v_uncond =
            denoiser_forward(model.denoiser, x, t, h_uncond, scratch);
        if (field_evals) ++*field_evals;
        return flow::guided_velocity(v_cond, v_uncond, cfg.guidance_scale);
    };
    return flow::euler_sample(field, start, cfg);
}

}  // namespace iomm
