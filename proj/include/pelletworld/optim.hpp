#pragma once

#include "pelletworld/net.hpp"

#include <utility>

namespace pelletworld::nn {

// One RMSProp update on a single parameter tensor. The accumulator is updated
// in place: acc = decay*acc + (1-decay)*g^2, p -= lr*g/sqrt(acc+eps).
// Rejects non-finite gradients before touching any state.
inline void rmsprop_step(Tensor& param, const Tensor& grad, Tensor& acc, float lr, float decay, float eps)
{
    if (lr <= 0.0f)
        throw std::invalid_argument("learning rate must be positive");
    if (!param.same_shape(grad) || !param.same_shape(acc))
        throw std::invalid_argument("rmsprop: parameter/gradient/accumulator shapes differ");
    if (!grad.all_finite())
        throw NumericalError("rmsprop: non-finite gradient, step rejected");
    for (std::size_t i = 0; i < param.data.size(); ++i) {
        float g = grad.data[i];
        acc.data[i] = decay * acc.data[i] + (1.0f - decay) * g * g;
        param.data[i] -= lr * g / std::sqrt(acc.data[i] + eps);
    }
}

struct RmsPropConfig {
    float lr = 2.5e-4f;
    float decay = 0.95f;
    float eps = 1e-8f;
};

// Accumulator state for a whole network.
struct RmsProp {
    RmsPropConfig cfg;
    Gradients acc;

    explicit RmsProp(const QNetwork& net, RmsPropConfig c = {}) : cfg(c), acc(zero_gradients(net)) {}

    void step(QNetwork& net, const Gradients& grads)
    {
        for (std::size_t i = 0; i < net.specs.size(); ++i) {
            if (!net.weights[i].numel()) continue;
            rmsprop_step(net.weights[i], grads.weights[i], acc.weights[i], cfg.lr, cfg.decay, cfg.eps);
            rmsprop_step(net.biases[i], grads.biases[i], acc.biases[i], cfg.lr, cfg.decay, cfg.eps);
        }
    }
};

// Elementwise Huber loss, summed, with the per-element gradient (clipped at
// delta) as the second result.
inline std::pair<float, Tensor> huber_loss(const Tensor& pred, const Tensor& target, float delta)
{
    if (!pred.same_shape(target))
        throw std::invalid_argument("huber_loss: shape mismatch " + shape_str(pred.shape) + " vs " + shape_str(target.shape));
    if (delta <= 0.0f)
        throw std::invalid_argument("huber_loss: delta must be positive");
    float loss = 0.0f;
    Tensor grad(pred.shape);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        float r = pred.data[i] - target.data[i];
        float a = std::fabs(r);
        if (a <= delta) {
            loss += 0.5f * r * r;
            grad.data[i] = r;
        } else {
            loss += delta * (a - 0.5f * delta);
            grad.data[i] = r > 0.0f ? delta : -delta;
        }
    }
    return {loss, std::move(grad)};
}

} // namespace pelletworld::nn
