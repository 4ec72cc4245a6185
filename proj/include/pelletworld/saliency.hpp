#pragma once

#include "pelletworld/net.hpp"
#include "pelletworld/objrec.hpp"
#include "pelletworld/render.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace pelletworld::saliency {

using env::Frame;
using env::GrayImage;
using env::Rgb;
using objrec::Detection;

// |dQ(s,a)/ds| reduced over input planes by maximum.
struct PixelSaliencyMap {
    int h = 0, w = 0;
    std::vector<float> values;
    int action = 0;
    float q_value = 0.0f;

    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }
};

inline PixelSaliencyMap pixel_saliency(const nn::QNetwork& net, const nn::Tensor& state, int action)
{
    nn::ForwardTrace trace;
    auto q = nn::forward(net, state, &trace);
    auto grad = nn::backward_input(net, trace, action); // validates the action index
    PixelSaliencyMap m;
    m.h = state.shape[1];
    m.w = state.shape[2];
    m.action = action;
    m.q_value = q.data[action];
    m.values.assign(static_cast<std::size_t>(m.h) * m.w, 0.0f);
    const std::size_t plane = m.values.size();
    for (int c = 0; c < state.shape[0]; ++c) {
        const float* g = grad.data.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i)
            m.values[i] = std::max(m.values[i], std::fabs(g[i]));
    }
    return m;
}

// Paints the detection's box with the background color in all four history
// frames and clears its own object plane there; every other plane untouched.
// The state layout is 12 frame planes plus k object planes.
inline nn::Tensor mask_object(const nn::Tensor& state, const Detection& det, Rgb background)
{
    if (state.shape.size() != 3 || state.shape[0] < 12)
        throw std::invalid_argument("mask_object expects a (12+k,H,W) state tensor, got " + nn::shape_str(state.shape));
    const int h = state.shape[1], w = state.shape[2];
    const int k = state.shape[0] - 12;
    if (det.x < 0 || det.y < 0 || det.x + det.w > w || det.y + det.h > h)
        throw std::invalid_argument("mask box [" + std::to_string(det.x) + "," + std::to_string(det.y) + " " +
                                    std::to_string(det.w) + "x" + std::to_string(det.h) + "] exceeds frame " +
                                    std::to_string(w) + "x" + std::to_string(h));
    if (k > 0 && (det.type_id < 0 || det.type_id >= k))
        throw std::invalid_argument("detection type_id " + std::to_string(det.type_id) +
                                    " has no object plane (k = " + std::to_string(k) + ")");

    nn::Tensor out = state;
    const float bg[3] = {background.r / 255.0f, background.g / 255.0f, background.b / 255.0f};
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int fi = 0; fi < 4; ++fi)
        for (int c = 0; c < 3; ++c) {
            float* p = out.data.data() + (3 * fi + c) * plane;
            for (int y = det.y; y < det.y + det.h; ++y)
                for (int x = det.x; x < det.x + det.w; ++x)
                    p[static_cast<std::size_t>(y) * w + x] = bg[c];
        }
    if (k > 0) {
        float* p = out.data.data() + (12 + det.type_id) * plane;
        for (int y = det.y; y < det.y + det.h; ++y)
            for (int x = det.x; x < det.x + det.w; ++x)
                p[static_cast<std::size_t>(y) * w + x] = 0.0f;
    }
    return out;
}

// Per-object score w = Q(s,a) - Q(s_o,a): positive marks an object whose
// presence raises the expected return. One shared base evaluation plus one
// masked evaluation per object: k+1 forward passes.
struct ObjectSaliencyResult {
    std::vector<std::pair<Detection, float>> weights;
    float q_base = 0.0f;
    int action = 0;
    int forward_passes = 0;
};

inline ObjectSaliencyResult object_saliency(const nn::QNetwork& net, const nn::Tensor& state,
                                            std::span<const Detection> dets, int action, Rgb background)
{
    auto q = nn::forward(net, state);
    if (action < 0 || action >= static_cast<int>(q.numel()))
        throw std::invalid_argument("action " + std::to_string(action) + " out of range");
    ObjectSaliencyResult res;
    res.action = action;
    res.q_base = q.data[action];
    res.forward_passes = 1;
    res.weights.reserve(dets.size());
    for (const auto& det : dets) {
        auto masked = mask_object(state, det, background);
        auto qm = nn::forward(net, masked);
        ++res.forward_passes;
        res.weights.emplace_back(det, res.q_base - qm.data[action]);
    }
    return res;
}

// Affine rescale to [0,255]; a constant map renders black.
inline GrayImage render_pixel_saliency(const PixelSaliencyMap& map)
{
    float lo = std::numeric_limits<float>::infinity(), hi = -std::numeric_limits<float>::infinity();
    for (float v : map.values) {
        if (std::isnan(v))
            throw std::invalid_argument("saliency map contains NaN");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    GrayImage img(map.h, map.w);
    if (!(hi > lo)) return img;
    const float scale = 255.0f / (hi - lo);
    for (std::size_t i = 0; i < map.values.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(std::lround((map.values[i] - lo) * scale));
    return img;
}

// Dimmed luminance backdrop; each object's box filled with
// 128 + 127*(w/max|w|), so helpful objects render bright, harmful ones dark.
inline GrayImage render_object_saliency(const Frame& frame, const ObjectSaliencyResult& result)
{
    GrayImage img(frame.h, frame.w);
    for (int y = 0; y < frame.h; ++y)
        for (int x = 0; x < frame.w; ++x) {
            const auto* p = frame.px(y, x);
            float lum = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
            img.at(y, x) = static_cast<std::uint8_t>(std::lround(0.25f * lum));
        }
    float wmax = 0.0f;
    for (const auto& [det, w] : result.weights) wmax = std::max(wmax, std::fabs(w));
    for (const auto& [det, w] : result.weights) {
        float shade = wmax > 0.0f ? 128.0f + 127.0f * (w / wmax) : 128.0f;
        auto gray = static_cast<std::uint8_t>(std::lround(shade));
        for (int y = det.y; y < det.y + det.h && y < img.h; ++y)
            for (int x = det.x; x < det.x + det.w && x < img.w; ++x)
                img.at(y, x) = gray;
    }
    return img;
}

} // namespace pelletworld::saliency
