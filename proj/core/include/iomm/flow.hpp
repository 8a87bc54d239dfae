#pragma once

#include <cstdint>
#include <string>

#include "iomm/errors.hpp"
#include "iomm/nn.hpp"
#include "iomm/tensor.hpp"

// Flow matching along the linear path x_t = (1-t) x + t z with constant
// velocity target z - x, plus the backward Euler PF-ODE sampler.

namespace iomm {

// Pixel-space image batch, shape [batch, height, width, channel], values in
// [-1, 1] for dataset images.
using ImageBatch = Tensor<float>;

struct SamplerConfig {
    int64_t steps = 50;
    float guidance_scale = 1.0f;  // w = 1 leaves the conditional velocity as-is
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw ConfigError("sampler.steps must be >= 1");
        if (!(guidance_scale >= 0.0f))
            throw ConfigError("sampler.guidance_scale must be >= 0");
    }
};

namespace flow {

template <typename T>
void check_time_batch(const Tensor<T>& x, const Tensor<T>& t) {
    if (t.shape.size() != 1 || t.shape[0] != x.shape[0]) {
        throw ShapeError("time batch " + t.shape_str() + " does not match batch " +
                         x.shape_str());
    }
}

// x_t = (1-t) x + t z, t broadcast over the non-batch axes.
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x, const Tensor<T>& z, const Tensor<T>& t) {
    require_same_shape(x, z, "interpolate");
    check_time_batch(x, t);
    const int64_t batch = x.shape[0];
    const int64_t per = batch > 0 ? x.numel() / batch : 0;
    Tensor<T> out(x.shape);
    for (int64_t b = 0; b < batch; ++b) {
        const T tb = t[size_t(b)];
        const T* xb = x.data() + b * per;
        const T* zb = z.data() + b * per;
        T* ob = out.data() + b * per;
        for (int64_t i = 0; i < per; ++i) ob[i] = (T(1) - tb) * xb[i] + tb * zb[i];
    }
    return out;
}

template <typename T>
Tensor<T> target_velocity(const Tensor<T>& x, const Tensor<T>& z) {
    require_same_shape(x, z, "target_velocity");
    Tensor<T> out(x.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out[i] = z[i] - x[i];
    return out;
}

template <typename T>
void check_loss_inputs(const Tensor<T>& pred, const Tensor<T>& x, const Tensor<T>& z) {
    require_same_shape(pred, x, "fm_loss");
    require_same_shape(pred, z, "fm_loss");
    if (!all_finite(pred.data(), pred.numel()))
        throw NumericError("fm_loss: non-finite values in pred");
    if (!all_finite(x.data(), x.numel()))
        throw NumericError("fm_loss: non-finite values in x");
    if (!all_finite(z.data(), z.numel()))
        throw NumericError("fm_loss: non-finite values in z");
}

// Mean over all elements of (pred - (z - x))^2, accumulated in double.
template <typename T>
T fm_loss(const Tensor<T>& pred, const Tensor<T>& x, const Tensor<T>& z) {
    check_loss_inputs(pred, x, z);
    double acc = 0.0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        const double r = double(pred[i]) - (double(z[i]) - double(x[i]));
        acc += r * r;
    }
    return T(acc / double(pred.numel()));
}

// Same reduction plus d(loss)/d(pred) = 2 (pred - (z - x)) / numel.
template <typename T>
T fm_loss_backward(const Tensor<T>& pred, const Tensor<T>& x, const Tensor<T>& z,
                   Tensor<T>& dpred) {
    check_loss_inputs(pred, x, z);
    dpred = Tensor<T>(pred.shape);
    const double inv_n = 1.0 / double(pred.numel());
    double acc = 0.0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        const double r = double(pred[i]) - (double(z[i]) - double(x[i]));
        acc += r * r;
        dpred[i] = T(2.0 * r * inv_n);
    }
    return T(acc * inv_n);
}

// v_uncond + w (v_cond - v_uncond)
template <typename T>
Tensor<T> guided_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, T w) {
    require_same_shape(v_cond, v_uncond, "guided_velocity");
    if (!(w >= T(0))) throw ConfigError("guidance scale must be >= 0");
    Tensor<T> out(v_cond.shape);
    for (size_t i = 0; i < out.v.size(); ++i) {
        out[i] = v_uncond[i] + w * (v_cond[i] - v_uncond[i]);
    }
    return out;
}

// Fixed-grid explicit Euler for the PF-ODE, integrating from t = 1 down to
// t = 0 with step dt = 1/steps; the field is evaluated at the left (larger-t)
// endpoint of each step: x <- x - dt * field(x, t).
template <typename T, typename Field>
Tensor<T> euler_sample(Field&& field, const Tensor<T>& start, const SamplerConfig& cfg) {
    cfg.validate();
    Tensor<T> x = start;
    const T dt = T(1) / T(cfg.steps);
    for (int64_t step = 0; step < cfg.steps; ++step) {
        const T t = T(1) - T(step) * dt;
        const Tensor<T> v = field(x, t);
        require_same_shape(x, v, "euler_sample field");
        if (!all_finite(v.data(), v.numel())) {
            throw NumericError("euler_sample: non-finite velocity at step " +
                               std::to_string(step) + ", t=" + std::to_string(double(t)));
        }
        for (size_t i = 0; i < x.v.size(); ++i) x[i] -= dt * v[i];
    }
    return x;
}

}  // namespace flow
}  // namespace iomm
