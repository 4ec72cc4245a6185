#pragma once

#include "pelletworld/tensor.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <random>
#include <vector>

namespace pelletworld::nn {

enum class LayerKind { conv, maxpool, fc, relu, flatten };

inline const char* layer_kind_name(LayerKind k)
{
    switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::fc: return "fc";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int out_channels = 0, kernel_h = 0, kernel_w = 0, stride = 1; // conv
    int out_units = 0;                                            // fc

    static LayerSpec conv(int oc, int kh, int kw, int stride = 1)
    {
        LayerSpec s;
        s.kind = LayerKind::conv;
        s.out_channels = oc;
        s.kernel_h = kh;
        s.kernel_w = kw;
        s.stride = stride;
        return s;
    }
    static LayerSpec maxpool()
    {
        LayerSpec s;
        s.kind = LayerKind::maxpool;
        return s;
    }
    static LayerSpec fc(int units)
    {
        LayerSpec s;
        s.kind = LayerKind::fc;
        s.out_units = units;
        return s;
    }
    static LayerSpec relu()
    {
        LayerSpec s;
        s.kind = LayerKind::relu;
        return s;
    }
    static LayerSpec flatten()
    {
        LayerSpec s;
        s.kind = LayerKind::flatten;
        return s;
    }

    bool operator==(const LayerSpec&) const = default;
};

// Four conv layers with three 2x2 pools, fc 512, then the action head.
inline std::vector<LayerSpec> default_architecture(int num_actions)
{
    return {
        LayerSpec::conv(32, 5, 5, 1), LayerSpec::maxpool(),
        LayerSpec::conv(32, 5, 5, 1), LayerSpec::maxpool(),
        LayerSpec::conv(64, 4, 4, 1), LayerSpec::maxpool(),
        LayerSpec::conv(64, 3, 3, 1),
        LayerSpec::flatten(),
        LayerSpec::fc(512), LayerSpec::relu(),
        LayerSpec::fc(num_actions),
    };
}

namespace detail {
    [[noreturn]] inline void layer_error(std::size_t idx, const LayerSpec& spec, const std::string& msg)
    {
        throw std::invalid_argument("layer " + std::to_string(idx) + " (" + layer_kind_name(spec.kind) + "): " + msg);
    }
} // namespace detail

// Output shape of every layer for the given input; throws (naming the layer)
// when the composition is inconsistent.
inline std::vector<std::vector<int>> layer_output_shapes(const std::vector<LayerSpec>& specs, int in_c, int in_h, int in_w)
{
    std::vector<std::vector<int>> out;
    std::vector<int> cur = {in_c, in_h, in_w};
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const LayerSpec& s = specs[i];
        switch (s.kind) {
        case LayerKind::conv: {
            if (cur.size() != 3)
                detail::layer_error(i, s, "expects a (C,H,W) input, got " + shape_str(cur));
            if (s.out_channels <= 0 || s.kernel_h <= 0 || s.kernel_w <= 0 || s.stride <= 0)
                detail::layer_error(i, s, "invalid conv parameters");
            if (s.kernel_h > cur[1] || s.kernel_w > cur[2])
                detail::layer_error(i, s, "kernel " + std::to_string(s.kernel_h) + "x" + std::to_string(s.kernel_w) +
                                              " larger than input " + shape_str(cur));
            int oh = (cur[1] - s.kernel_h) / s.stride + 1;
            int ow = (cur[2] - s.kernel_w) / s.stride + 1;
            cur = {s.out_channels, oh, ow};
            break;
        }
        case LayerKind::maxpool:
            if (cur.size() != 3)
                detail::layer_error(i, s, "expects a (C,H,W) input, got " + shape_str(cur));
            if (cur[1] < 2 || cur[2] < 2)
                detail::layer_error(i, s, "input " + shape_str(cur) + " too small for a 2x2 window");
            cur = {cur[0], cur[1] / 2, cur[2] / 2};
            break;
        case LayerKind::flatten: {
            if (cur.size() != 3)
                detail::layer_error(i, s, "expects a (C,H,W) input, got " + shape_str(cur));
            cur = {cur[0] * cur[1] * cur[2]};
            break;
        }
        case LayerKind::fc:
            if (cur.size() != 1)
                detail::layer_error(i, s, "expects a flat input, got " + shape_str(cur) + " (missing flatten?)");
            if (s.out_units <= 0)
                detail::layer_error(i, s, "out_units must be positive");
            cur = {s.out_units};
            break;
        case LayerKind::relu:
            break;
        }
        out.push_back(cur);
    }
    return out;
}

struct QNetwork {
    std::vector<LayerSpec> specs;
    std::vector<Tensor> weights; // per layer; empty when the layer has no parameters
    std::vector<Tensor> biases;
    int in_channels = 0, in_h = 0, in_w = 0;

    int num_actions() const
    {
        auto shapes = layer_output_shapes(specs, in_channels, in_h, in_w);
        return shapes.empty() ? 0 : shapes.back().back();
    }
    std::int64_t parameter_count() const
    {
        std::int64_t n = 0;
        for (const auto& t : weights) n += t.numel();
        for (const auto& t : biases) n += t.numel();
        return n;
    }
};

// Glorot-uniform weights, zero biases. Draw order is fixed (layer order,
// row-major elements) so a seeded generator reproduces the network.
inline QNetwork make_network(std::vector<LayerSpec> specs, int in_c, int in_h, int in_w, std::mt19937_64& rng)
{
    QNetwork net;
    net.specs = std::move(specs);
    net.in_channels = in_c;
    net.in_h = in_h;
    net.in_w = in_w;
    auto shapes = layer_output_shapes(net.specs, in_c, in_h, in_w); // validates composition
    std::vector<int> cur = {in_c, in_h, in_w};
    for (std::size_t i = 0; i < net.specs.size(); ++i) {
        const LayerSpec& s = net.specs[i];
        Tensor w, b;
        if (s.kind == LayerKind::conv) {
            int fan_in = cur[0] * s.kernel_h * s.kernel_w;
            int fan_out = s.out_channels * s.kernel_h * s.kernel_w;
            float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
            w = Tensor({s.out_channels, cur[0], s.kernel_h, s.kernel_w});
            std::uniform_real_distribution<float> dist(-limit, limit);
            for (float& v : w.data) v = dist(rng);
            b = Tensor({s.out_channels});
        } else if (s.kind == LayerKind::fc) {
            int fan_in = cur[0];
            int fan_out = s.out_units;
            float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
            w = Tensor({s.out_units, fan_in});
            std::uniform_real_distribution<float> dist(-limit, limit);
            for (float& v : w.data) v = dist(rng);
            b = Tensor({s.out_units});
        }
        net.weights.push_back(std::move(w));
        net.biases.push_back(std::move(b));
        cur = shapes[i];
    }
    return net;
}

inline QNetwork make_network(std::vector<LayerSpec> specs, int in_c, int in_h, int in_w, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return make_network(std::move(specs), in_c, in_h, in_w, rng);
}

// Cached activations (and pool argmax routing) from one forward pass.
struct ForwardTrace {
    std::vector<Tensor> acts;                     // acts[0] = input, acts[i+1] = output of layer i
    std::vector<std::vector<std::int32_t>> pool_src; // per layer; maxpool only: winner index into the layer input
};

struct Gradients {
    std::vector<Tensor> weights, biases;
};

inline Gradients zero_gradients(const QNetwork& net)
{
    Gradients g;
    for (const auto& w : net.weights) g.weights.push_back(w.numel() ? Tensor(w.shape) : Tensor());
    for (const auto& b : net.biases) g.biases.push_back(b.numel() ? Tensor(b.shape) : Tensor());
    return g;
}

// Process-wide forward-pass counter; lets tests verify evaluation budgets.
inline std::atomic<std::uint64_t>& forward_eval_count()
{
    static std::atomic<std::uint64_t> count{0};
    return count;
}

namespace detail {

    using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapMat = Eigen::Map<RowMat>;
    using CMapMat = Eigen::Map<const RowMat>;

    inline void im2col(const Tensor& in, const LayerSpec& s, int oh, int ow, std::vector<float>& col)
    {
        const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
        (void)h;
        const int P = oh * ow;
        col.resize(static_cast<std::size_t>(c) * s.kernel_h * s.kernel_w * P);
        std::size_t r = 0;
        for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < s.kernel_h; ++ky)
                for (int kx = 0; kx < s.kernel_w; ++kx, ++r) {
                    float* dst = col.data() + r * P;
                    for (int oy = 0; oy < oh; ++oy) {
                        const float* src = in.data.data() + (static_cast<std::size_t>(ic) * in.shape[1] + oy * s.stride + ky) * w + kx;
                        for (int ox = 0; ox < ow; ++ox)
                            dst[oy * ow + ox] = src[ox * s.stride];
                    }
                }
    }

    inline void conv_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, const LayerSpec& s,
                             Tensor& out, std::vector<float>& col_scratch)
    {
        const int oc = s.out_channels;
        const int oh = out.shape[1], ow = out.shape[2];
        const int P = oh * ow;
        const int K = in.shape[0] * s.kernel_h * s.kernel_w;
        im2col(in, s, oh, ow, col_scratch);
        CMapMat wmat(weight.data.data(), oc, K);
        CMapMat cmat(col_scratch.data(), K, P);
        MapMat omat(out.data.data(), oc, P);
        omat.noalias() = wmat * cmat;
        for (int o = 0; o < oc; ++o)
            omat.row(o).array() += bias.data[o];
    }

    inline void conv_backward(const Tensor& in, const Tensor& weight, const LayerSpec& s, const Tensor& gout,
                              Tensor* gw, Tensor* gb, Tensor* gin, std::vector<float>& col_scratch,
                              std::vector<float>& dcol_scratch)
    {
        const int oc = s.out_channels;
        const int oh = gout.shape[1], ow = gout.shape[2];
        const int P = oh * ow;
        const int K = in.shape[0] * s.kernel_h * s.kernel_w;
        CMapMat gmat(gout.data.data(), oc, P);
        if (gw) {
            im2col(in, s, oh, ow, col_scratch);
            CMapMat cmat(col_scratch.data(), K, P);
            MapMat gwmat(gw->data.data(), oc, K);
            gwmat.noalias() += gmat * cmat.transpose();
            for (int o = 0; o < oc; ++o)
                gb->data[o] += gmat.row(o).sum();
        }
        if (gin) {
            dcol_scratch.resize(static_cast<std::size_t>(K) * P);
            CMapMat wmat(weight.data.data(), oc, K);
            MapMat dcol(dcol_scratch.data(), K, P);
            dcol.noalias() = wmat.transpose() * gmat;
            // col2im scatter-add
            gin->fill(0.0f);
            const int w = in.shape[2];
            std::size_t r = 0;
            for (int ic = 0; ic < in.shape[0]; ++ic)
                for (int ky = 0; ky < s.kernel_h; ++ky)
                    for (int kx = 0; kx < s.kernel_w; ++kx, ++r) {
                        const float* src = dcol_scratch.data() + r * P;
                        for (int oy = 0; oy < oh; ++oy) {
                            float* dst = gin->data.data() + (static_cast<std::size_t>(ic) * in.shape[1] + oy * s.stride + ky) * w + kx;
                            for (int ox = 0; ox < ow; ++ox)
                                dst[ox * s.stride] += src[oy * ow + ox];
                        }
                    }
        }
    }

    inline void maxpool_forward(const Tensor& in, Tensor& out, std::vector<std::int32_t>& src_idx)
    {
        const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
        const int oh = out.shape[1], ow = out.shape[2];
        src_idx.resize(out.data.size());
        std::size_t o = 0;
        for (int ic = 0; ic < c; ++ic)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++o) {
                    // first maximum in window scan order wins (ties deterministic)
                    std::int32_t best = (static_cast<std::int32_t>(ic) * h + 2 * oy) * w + 2 * ox;
                    float bv = in.data[best];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            std::int32_t idx = (static_cast<std::int32_t>(ic) * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if (in.data[idx] > bv) {
                                bv = in.data[idx];
                                best = idx;
                            }
                        }
                    out.data[o] = bv;
                    src_idx[o] = best;
                }
    }

} // namespace detail

// Evaluates the network. `trace`, when given, is filled for a later backward
// pass. Deterministic: identical (net, x) produce bitwise-identical outputs.
inline Tensor forward(const QNetwork& net, const Tensor& x, ForwardTrace* trace = nullptr)
{
    if (x.shape != std::vector<int>{net.in_channels, net.in_h, net.in_w})
        throw std::invalid_argument("network input: expected " +
                                    shape_str({net.in_channels, net.in_h, net.in_w}) + ", got " + shape_str(x.shape));
    forward_eval_count().fetch_add(1, std::memory_order_relaxed);
    auto shapes = layer_output_shapes(net.specs, net.in_channels, net.in_h, net.in_w);
    if (trace) {
        trace->acts.assign(1, x);
        trace->pool_src.assign(net.specs.size(), {});
    }
    Tensor cur = x;
    static thread_local std::vector<float> col; // scratch persists across calls
    for (std::size_t i = 0; i < net.specs.size(); ++i) {
        const LayerSpec& s = net.specs[i];
        Tensor out(shapes[i]);
        switch (s.kind) {
        case LayerKind::conv:
            detail::conv_forward(cur, net.weights[i], net.biases[i], s, out, col);
            break;
        case LayerKind::maxpool: {
            std::vector<std::int32_t> src;
            detail::maxpool_forward(cur, out, src);
            if (trace) trace->pool_src[i] = std::move(src);
            break;
        }
        case LayerKind::flatten:
            out.data = cur.data;
            break;
        case LayerKind::fc: {
            detail::CMapMat wmat(net.weights[i].data.data(), s.out_units, cur.numel());
            Eigen::Map<const Eigen::VectorXf> xv(cur.data.data(), cur.numel());
            Eigen::Map<Eigen::VectorXf> ov(out.data.data(), out.numel());
            Eigen::Map<const Eigen::VectorXf> bv(net.biases[i].data.data(), out.numel());
            ov.noalias() = wmat * xv + bv;
            break;
        }
        case LayerKind::relu:
            for (std::int64_t j = 0; j < cur.numel(); ++j)
                out.data[j] = cur.data[j] > 0.0f ? cur.data[j] : 0.0f;
            break;
        }
        if (trace) trace->acts.push_back(out);
        cur = std::move(out);
    }
    return cur;
}

namespace detail {

    // Shared backward sweep. Accumulates parameter gradients into *gparams
    // (when given) and writes the input gradient to *ginput (when given).
    inline void backprop(const QNetwork& net, const ForwardTrace& trace, const Tensor& dq,
                         Gradients* gparams, Tensor* ginput)
    {
        if (trace.acts.size() != net.specs.size() + 1)
            throw std::invalid_argument("stale trace: " + std::to_string(trace.acts.size() ? trace.acts.size() - 1 : 0) +
                                        " layers recorded, network has " + std::to_string(net.specs.size()));
        if (dq.data.size() != trace.acts.back().data.size())
            throw std::invalid_argument("upstream gradient length " + std::to_string(dq.data.size()) +
                                        " does not match network output length " +
                                        std::to_string(trace.acts.back().data.size()));
        const bool need_input = ginput != nullptr;
        Tensor g = dq;
        g.shape = trace.acts.back().shape;
        static thread_local std::vector<float> col, dcol; // scratch persists across calls
        for (std::size_t ii = net.specs.size(); ii-- > 0;) {
            const LayerSpec& s = net.specs[ii];
            const Tensor& in = trace.acts[ii];
            const bool last = (ii == 0);
            if (last && !need_input && s.kind != LayerKind::conv && s.kind != LayerKind::fc) break;
            const bool want_gin = !last || need_input;
            Tensor gin(want_gin || s.kind == LayerKind::maxpool || s.kind == LayerKind::relu ||
                               s.kind == LayerKind::flatten
                           ? in.shape
                           : std::vector<int>{1});
            switch (s.kind) {
            case LayerKind::conv:
                conv_backward(in, net.weights[ii], s, g,
                              gparams ? &gparams->weights[ii] : nullptr,
                              gparams ? &gparams->biases[ii] : nullptr,
                              (!last || need_input) ? &gin : nullptr, col, dcol);
                break;
            case LayerKind::maxpool: {
                const auto& src = trace.pool_src[ii];
                for (std::size_t j = 0; j < g.data.size(); ++j)
                    gin.data[src[j]] += g.data[j];
                break;
            }
            case LayerKind::flatten:
                gin.data = g.data;
                break;
            case LayerKind::fc: {
                const int n_out = s.out_units;
                const int n_in = static_cast<int>(in.numel());
                Eigen::Map<const Eigen::VectorXf> gv(g.data.data(), n_out);
                Eigen::Map<const Eigen::VectorXf> xv(in.data.data(), n_in);
                if (gparams) {
                    MapMat gw(gparams->weights[ii].data.data(), n_out, n_in);
                    gw.noalias() += gv * xv.transpose();
                    Eigen::Map<Eigen::VectorXf> gb(gparams->biases[ii].data.data(), n_out);
                    gb.noalias() += gv;
                }
                if (!last || need_input) {
                    CMapMat wmat(net.weights[ii].data.data(), n_out, n_in);
                    Eigen::Map<Eigen::VectorXf> giv(gin.data.data(), n_in);
                    giv.noalias() = wmat.transpose() * gv;
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t j = 0; j < g.data.size(); ++j)
                    gin.data[j] = in.data[j] > 0.0f ? g.data[j] : 0.0f;
                break;
            }
            g = std::move(gin);
        }
        if (ginput) *ginput = std::move(g);
    }

} // namespace detail

// ---- batched training path --------------------------------------------------
//
// Sample-packed layout: spatial activations are (C, B, H, W) so one GEMM per
// layer covers the whole batch; flat activations are (N, B). Results agree
// with the single-sample path up to float accumulation order.

struct BatchTrace {
    int batch = 0;
    std::vector<Tensor> acts;
    std::vector<std::vector<std::int32_t>> pool_src;
};

namespace detail {

    inline std::vector<int> batched_shape(const std::vector<int>& per_sample, int B)
    {
        if (per_sample.size() == 3) return {per_sample[0], B, per_sample[1], per_sample[2]};
        return {per_sample[0], B};
    }

    inline void im2col_batch(const Tensor& in, const LayerSpec& s, int B, int oh, int ow, std::vector<float>& col)
    {
        const int c = in.shape[0], h = in.shape[2], w = in.shape[3];
        const int P = oh * ow;
        const std::size_t BP = static_cast<std::size_t>(B) * P;
        col.resize(static_cast<std::size_t>(c) * s.kernel_h * s.kernel_w * BP);
        std::size_t r = 0;
        for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < s.kernel_h; ++ky)
                for (int kx = 0; kx < s.kernel_w; ++kx, ++r) {
                    float* dst_row = col.data() + r * BP;
                    for (int b = 0; b < B; ++b)
                        for (int oy = 0; oy < oh; ++oy) {
                            const float* src = in.data.data() +
                                               ((static_cast<std::size_t>(ic) * B + b) * h + oy * s.stride + ky) * w + kx;
                            float* dst = dst_row + static_cast<std::size_t>(b) * P + oy * ow;
                            for (int ox = 0; ox < ow; ++ox)
                                dst[ox] = src[ox * s.stride];
                        }
                }
    }

} // namespace detail

namespace detail {

// Core batched sweep. With a trace, `owned` is moved into acts[0]; without,
// `borrowed` is read in place and only rolling locals are allocated.
inline Tensor run_forward_batch(const QNetwork& net, const Tensor* borrowed, Tensor owned, BatchTrace* trace)
{
    const Tensor& input = trace ? owned : *borrowed;
    if (input.shape.size() != 4 || input.shape[0] != net.in_channels || input.shape[2] != net.in_h ||
        input.shape[3] != net.in_w)
        throw std::invalid_argument("batched input: expected (C,B,H,W) = (" + std::to_string(net.in_channels) +
                                    ",B," + std::to_string(net.in_h) + "," + std::to_string(net.in_w) + "), got " +
                                    shape_str(input.shape));
    const int B = input.shape[1];
    forward_eval_count().fetch_add(static_cast<std::uint64_t>(B), std::memory_order_relaxed);
    auto shapes = layer_output_shapes(net.specs, net.in_channels, net.in_h, net.in_w);
    if (trace) {
        trace->batch = B;
        trace->acts.clear();
        trace->pool_src.assign(net.specs.size(), {});
        trace->acts.push_back(std::move(owned));
    }
    Tensor local;
    static thread_local std::vector<float> col;
    const Tensor* cur = trace ? &trace->acts[0] : borrowed;
    for (std::size_t i = 0; i < net.specs.size(); ++i) {
        const LayerSpec& s = net.specs[i];
        Tensor out(detail::batched_shape(shapes[i], B));
        switch (s.kind) {
        case LayerKind::conv: {
            const int oh = shapes[i][1], ow = shapes[i][2];
            const int P = oh * ow;
            const std::size_t BP = static_cast<std::size_t>(B) * P;
            const int K = cur->shape[0] * s.kernel_h * s.kernel_w;
            detail::im2col_batch(*cur, s, B, oh, ow, col);
            detail::CMapMat wmat(net.weights[i].data.data(), s.out_channels, K);
            detail::CMapMat cmat(col.data(), K, static_cast<Eigen::Index>(BP));
            detail::MapMat omat(out.data.data(), s.out_channels, static_cast<Eigen::Index>(BP));
            omat.noalias() = wmat * cmat;
            for (int o = 0; o < s.out_channels; ++o)
                omat.row(o).array() += net.biases[i].data[o];
            break;
        }
        case LayerKind::maxpool: {
            const int c = cur->shape[0], h = cur->shape[2], w = cur->shape[3];
            const int oh = shapes[i][1], ow = shapes[i][2];
            std::vector<std::int32_t> src_idx(out.data.size());
            std::size_t o = 0;
            for (int ic = 0; ic < c; ++ic)
                for (int b = 0; b < B; ++b)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox, ++o) {
                            const std::size_t plane = (static_cast<std::size_t>(ic) * B + b) * h;
                            std::int32_t best = static_cast<std::int32_t>((plane + 2 * oy) * w + 2 * ox);
                            float bv = cur->data[best];
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    auto idx = static_cast<std::int32_t>((plane + 2 * oy + dy) * w + 2 * ox + dx);
                                    if (cur->data[idx] > bv) {
                                        bv = cur->data[idx];
                                        best = idx;
                                    }
                                }
                            out.data[o] = bv;
                            src_idx[o] = best;
                        }
            if (trace) trace->pool_src[i] = std::move(src_idx);
            break;
        }
        case LayerKind::flatten: {
            const int c = cur->shape[0], hw = cur->shape[2] * cur->shape[3];
            for (int ic = 0; ic < c; ++ic)
                for (int b = 0; b < B; ++b) {
                    const float* src = cur->data.data() + (static_cast<std::size_t>(ic) * B + b) * hw;
                    for (int j = 0; j < hw; ++j)
                        out.data[(static_cast<std::size_t>(ic) * hw + j) * B + b] = src[j];
                }
            break;
        }
        case LayerKind::fc: {
            const int n_in = cur->shape[0];
            detail::CMapMat wmat(net.weights[i].data.data(), s.out_units, n_in);
            detail::CMapMat xmat(cur->data.data(), n_in, B);
            detail::MapMat omat(out.data.data(), s.out_units, B);
            omat.noalias() = wmat * xmat;
            for (int o = 0; o < s.out_units; ++o)
                omat.row(o).array() += net.biases[i].data[o];
            break;
        }
        case LayerKind::relu:
            for (std::size_t j = 0; j < cur->data.size(); ++j)
                out.data[j] = cur->data[j] > 0.0f ? cur->data[j] : 0.0f;
            break;
        }
        if (trace) {
            trace->acts.push_back(std::move(out));
            cur = &trace->acts.back();
        } else {
            local = std::move(out);
            cur = &local;
        }
    }
    return *cur;
}

} // namespace detail

// Read-only batched forward (no trace); the input buffer is left untouched.
inline Tensor forward_batch(const QNetwork& net, const Tensor& packed)
{
    return detail::run_forward_batch(net, &packed, {}, nullptr);
}

// Traced batched forward; consumes `packed` (reclaim it from trace.acts[0]).
inline Tensor forward_batch_traced(const QNetwork& net, Tensor packed, BatchTrace& trace)
{
    return detail::run_forward_batch(net, nullptr, std::move(packed), &trace);
}

// Accumulates batch-summed parameter gradients; dq is (|A|, B).
inline void backward_params_batch(const QNetwork& net, const BatchTrace& trace, const Tensor& dq, Gradients& gparams)
{
    if (trace.acts.size() != net.specs.size() + 1)
        throw std::invalid_argument("stale batch trace");
    const int B = trace.batch;
    if (dq.shape != trace.acts.back().shape)
        throw std::invalid_argument("batched upstream gradient shape mismatch");
    Tensor g = dq;
    static thread_local std::vector<float> col, dcol;
    for (std::size_t ii = net.specs.size(); ii-- > 0;) {
        const LayerSpec& s = net.specs[ii];
        const Tensor& in = trace.acts[ii];
        const bool last = (ii == 0);
        if (last && s.kind != LayerKind::conv && s.kind != LayerKind::fc) break;
        Tensor gin(last ? std::vector<int>{1} : in.shape);
        switch (s.kind) {
        case LayerKind::conv: {
            const int oh = g.shape[2], ow = g.shape[3];
            const int P = oh * ow;
            const std::size_t BP = static_cast<std::size_t>(B) * P;
            const int K = in.shape[0] * s.kernel_h * s.kernel_w;
            detail::CMapMat gmat(g.data.data(), s.out_channels, static_cast<Eigen::Index>(BP));
            detail::im2col_batch(in, s, B, oh, ow, col);
            detail::CMapMat cmat(col.data(), K, static_cast<Eigen::Index>(BP));
            detail::MapMat gwmat(gparams.weights[ii].data.data(), s.out_channels, K);
            gwmat.noalias() += gmat * cmat.transpose();
            for (int o = 0; o < s.out_channels; ++o)
                gparams.biases[ii].data[o] += gmat.row(o).sum();
            if (!last) {
                dcol.resize(static_cast<std::size_t>(K) * BP);
                detail::CMapMat wmat(net.weights[ii].data.data(), s.out_channels, K);
                detail::MapMat dcmat(dcol.data(), K, static_cast<Eigen::Index>(BP));
                dcmat.noalias() = wmat.transpose() * gmat;
                gin.fill(0.0f);
                const int h = in.shape[2], w = in.shape[3];
                std::size_t r = 0;
                for (int ic = 0; ic < in.shape[0]; ++ic)
                    for (int ky = 0; ky < s.kernel_h; ++ky)
                        for (int kx = 0; kx < s.kernel_w; ++kx, ++r) {
                            const float* src_row = dcol.data() + r * BP;
                            for (int b = 0; b < B; ++b)
                                for (int oy = 0; oy < oh; ++oy) {
                                    float* dst = gin.data.data() +
                                                 ((static_cast<std::size_t>(ic) * B + b) * h + oy * s.stride + ky) * w + kx;
                                    const float* src = src_row + static_cast<std::size_t>(b) * P + oy * ow;
                                    for (int ox = 0; ox < ow; ++ox)
                                        dst[ox * s.stride] += src[ox];
                                }
                        }
            }
            break;
        }
        case LayerKind::maxpool: {
            const auto& src = trace.pool_src[ii];
            for (std::size_t j = 0; j < g.data.size(); ++j)
                gin.data[src[j]] += g.data[j];
            break;
        }
        case LayerKind::flatten: {
            const int c = in.shape[0], hw = in.shape[2] * in.shape[3];
            for (int ic = 0; ic < c; ++ic)
                for (int b = 0; b < B; ++b) {
                    float* dst = gin.data.data() + (static_cast<std::size_t>(ic) * B + b) * hw;
                    for (int j = 0; j < hw; ++j)
                        dst[j] = g.data[(static_cast<std::size_t>(ic) * hw + j) * B + b];
                }
            break;
        }
        case LayerKind::fc: {
            const int n_out = s.out_units;
            const int n_in = in.shape[0];
            detail::CMapMat gmat(g.data.data(), n_out, B);
            detail::CMapMat xmat(in.data.data(), n_in, B);
            detail::MapMat gw(gparams.weights[ii].data.data(), n_out, n_in);
            gw.noalias() += gmat * xmat.transpose();
            for (int o = 0; o < n_out; ++o)
                gparams.biases[ii].data[o] += gmat.row(o).sum();
            if (!last) {
                detail::CMapMat wmat(net.weights[ii].data.data(), n_out, n_in);
                detail::MapMat gi(gin.data.data(), n_in, B);
                gi.noalias() = wmat.transpose() * gmat;
            }
            break;
        }
        case LayerKind::relu:
            for (std::size_t j = 0; j < g.data.size(); ++j)
                gin.data[j] = in.data[j] > 0.0f ? g.data[j] : 0.0f;
            break;
        }
        g = std::move(gin);
    }
}

// Gradients of a scalar loss with respect to every parameter, given the loss
// gradient at the network output.
inline Gradients backward_params(const QNetwork& net, const ForwardTrace& trace, const Tensor& dq)
{
    Gradients g = zero_gradients(net);
    detail::backprop(net, trace, dq, &g, nullptr);
    return g;
}

// Accumulating variant used by the trainer (sums over a batch).
inline void backward_params_into(const QNetwork& net, const ForwardTrace& trace, const Tensor& dq, Gradients& g)
{
    detail::backprop(net, trace, dq, &g, nullptr);
}

// Gradient of qvalues[action] with respect to every input element.
inline Tensor backward_input(const QNetwork& net, const ForwardTrace& trace, int action)
{
    if (trace.acts.empty())
        throw std::invalid_argument("stale trace: empty");
    const std::int64_t n_out = trace.acts.back().numel();
    if (action < 0 || action >= n_out)
        throw std::invalid_argument("action " + std::to_string(action) + " out of range (|A| = " + std::to_string(n_out) + ")");
    Tensor dq(trace.acts.back().shape);
    dq.data[action] = 1.0f;
    Tensor gin;
    detail::backprop(net, trace, dq, nullptr, &gin);
    return gin;
}

} // namespace pelletworld::nn
