#pragma once

// Double-precision plain-loop reference network used as the independent
// finite-difference oracle. Deliberately shares no code with the production
// im2col/Eigen path.

#include <pelletworld/net.hpp>

#include <cstdint>
#include <random>
#include <vector>

namespace refnet {

using pelletworld::nn::LayerKind;
using pelletworld::nn::LayerSpec;
using pelletworld::nn::QNetwork;

struct RefNet {
    std::vector<LayerSpec> specs;
    std::vector<std::vector<double>> weights, biases;
    int in_c = 0, in_h = 0, in_w = 0;

    static RefNet from(const QNetwork& net)
    {
        RefNet r;
        r.specs = net.specs;
        r.in_c = net.in_channels;
        r.in_h = net.in_h;
        r.in_w = net.in_w;
        for (const auto& w : net.weights) r.weights.emplace_back(w.data.begin(), w.data.end());
        for (const auto& b : net.biases) r.biases.emplace_back(b.data.begin(), b.data.end());
        return r;
    }

    std::vector<double> forward(const std::vector<double>& x) const
    {
        std::vector<double> cur = x;
        int c = in_c, h = in_h, w = in_w;
        bool flat = false;
        for (std::size_t li = 0; li < specs.size(); ++li) {
            const LayerSpec& s = specs[li];
            switch (s.kind) {
            case LayerKind::conv: {
                int oh = (h - s.kernel_h) / s.stride + 1;
                int ow = (w - s.kernel_w) / s.stride + 1;
                std::vector<double> out(static_cast<std::size_t>(s.out_channels) * oh * ow, 0.0);
                for (int oc = 0; oc < s.out_channels; ++oc)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            double acc = biases[li][oc];
                            for (int ic = 0; ic < c; ++ic)
                                for (int ky = 0; ky < s.kernel_h; ++ky)
                                    for (int kx = 0; kx < s.kernel_w; ++kx)
                                        acc += weights[li][((static_cast<std::size_t>(oc) * c + ic) * s.kernel_h + ky) * s.kernel_w + kx] *
                                               cur[(static_cast<std::size_t>(ic) * h + oy * s.stride + ky) * w + ox * s.stride + kx];
                            out[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
                        }
                cur = std::move(out);
                c = s.out_channels;
                h = oh;
                w = ow;
                break;
            }
            case LayerKind::maxpool: {
                int oh = h / 2, ow = w / 2;
                std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
                for (int ic = 0; ic < c; ++ic)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            double m = cur[(static_cast<std::size_t>(ic) * h + 2 * oy) * w + 2 * ox];
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    m = std::max(m, cur[(static_cast<std::size_t>(ic) * h + 2 * oy + dy) * w + 2 * ox + dx]);
                            out[(static_cast<std::size_t>(ic) * oh + oy) * ow + ox] = m;
                        }
                cur = std::move(out);
                h = oh;
                w = ow;
                break;
            }
            case LayerKind::flatten:
                flat = true;
                break;
            case LayerKind::fc: {
                std::vector<double> out(s.out_units);
                const std::size_t n = cur.size();
                for (int o = 0; o < s.out_units; ++o) {
                    double acc = biases[li][o];
                    for (std::size_t j = 0; j < n; ++j)
                        acc += weights[li][o * n + j] * cur[j];
                    out[o] = acc;
                }
                cur = std::move(out);
                break;
            }
            case LayerKind::relu:
                for (double& v : cur)
                    if (v < 0.0) v = 0.0;
                break;
            }
        }
        (void)flat;
        return cur;
    }

    // f = sum_j coeff[j] * output[j]
    double weighted_output(const std::vector<double>& x, const std::vector<double>& coeff) const
    {
        auto out = forward(x);
        double f = 0.0;
        for (std::size_t j = 0; j < out.size(); ++j) f += coeff[j] * out[j];
        return f;
    }
};

// Central finite difference with a linearity screen: these networks are
// piecewise affine, so estimates at h and h/2 agree (to rounding) unless the
// interval crosses a pool/relu kink. Returns false when a kink is detected
// and the coordinate should be resampled.
template <typename EvalFn>
inline bool central_diff(EvalFn&& eval_at, double h, double& deriv)
{
    double d1 = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    double d2 = (eval_at(h / 2) - eval_at(-h / 2)) / h;
    double scale = std::max({1.0, std::fabs(d1), std::fabs(d2)});
    if (std::fabs(d1 - d2) > 1e-6 * scale) return false;
    deriv = d2;
    return true;
}

inline bool rel_close(double a, double b, double rel_tol, double abs_floor)
{
    return std::fabs(a - b) <= std::max(rel_tol * std::max(std::fabs(a), std::fabs(b)), abs_floor);
}

inline std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

struct GradCheckResult {
    int input_checked = 0, param_checked = 0, skipped = 0;
    double max_rel_err = 0.0;
    bool ok = true;
};

// Checks backward_input and backward_params of `net` on `x` against the
// reference oracle, sampling coordinates until the requested counts pass.
inline GradCheckResult gradcheck(const QNetwork& net, const pelletworld::nn::Tensor& x,
                                 int want_input_coords, int want_param_coords,
                                 std::mt19937_64& rng, double h = 1e-3,
                                 double rel_tol = 1e-3, double abs_floor = 1e-5)
{
    namespace nn = pelletworld::nn;
    GradCheckResult res;
    RefNet ref = RefNet::from(net);
    std::vector<double> xd = to_double(x.data);

    nn::ForwardTrace trace;
    nn::Tensor q = nn::forward(net, x, &trace);
    const int n_out = static_cast<int>(q.numel());

    auto note = [&res, rel_tol, abs_floor](double analytic, double fd) {
        double denom = std::max({std::fabs(analytic), std::fabs(fd), abs_floor});
        res.max_rel_err = std::max(res.max_rel_err, std::fabs(analytic - fd) / denom);
        if (!rel_close(analytic, fd, rel_tol, abs_floor)) res.ok = false;
    };

    // input gradients of single outputs
    std::uniform_int_distribution<int> pick_out(0, n_out - 1);
    std::uniform_int_distribution<std::size_t> pick_in(0, x.data.size() - 1);
    int guard = 0;
    while (res.input_checked < want_input_coords && guard++ < want_input_coords * 20) {
        int a = pick_out(rng);
        std::size_t i = pick_in(rng);
        nn::Tensor gin = nn::backward_input(net, trace, a);
        double fd;
        auto eval = [&](double dh) {
            std::vector<double> xp = xd;
            xp[i] += dh;
            return ref.forward(xp)[a];
        };
        if (!central_diff(eval, h, fd)) {
            ++res.skipped;
            continue;
        }
        note(gin.data[i], fd);
        ++res.input_checked;
    }

    // parameter gradients of a random linear functional of the outputs
    std::vector<std::pair<std::size_t, std::size_t>> param_slots; // (layer, -1=weights marker via pair.second==0/1)
    for (std::size_t li = 0; li < net.specs.size(); ++li)
        if (net.weights[li].numel()) {
            param_slots.push_back({li, 0});
            param_slots.push_back({li, 1});
        }
    if (!param_slots.empty() && want_param_coords > 0) {
        std::uniform_real_distribution<double> coeff_dist(-1.0, 1.0);
        guard = 0;
        while (res.param_checked < want_param_coords && guard++ < want_param_coords * 20) {
            std::vector<double> coeff(n_out);
            for (double& cv : coeff) cv = coeff_dist(rng);
            nn::Tensor dq(q.shape);
            for (int j = 0; j < n_out; ++j) dq.data[j] = static_cast<float>(coeff[j]);
            nn::Gradients grads = nn::backward_params(net, trace, dq);

            auto [li, which] = param_slots[rng() % param_slots.size()];
            auto& tensor = which == 0 ? net.weights[li] : net.biases[li];
            auto& gtensor = which == 0 ? grads.weights[li] : grads.biases[li];
            auto& ref_vec = which == 0 ? ref.weights[li] : ref.biases[li];
            std::size_t j = rng() % tensor.data.size();

            double fd;
            auto eval = [&](double dh) {
                double saved = ref_vec[j];
                ref_vec[j] += dh;
                double f = ref.weighted_output(xd, coeff);
                ref_vec[j] = saved;
                return f;
            };
            if (!central_diff(eval, h, fd)) {
                ++res.skipped;
                continue;
            }
            note(gtensor.data[j], fd);
            ++res.param_checked;
        }
    }
    return res;
}

} // namespace refnet
