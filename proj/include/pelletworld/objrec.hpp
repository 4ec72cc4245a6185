#pragma once

#include "pelletworld/render.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pelletworld::objrec {

using env::Frame;

struct Template {
    int type_id = 0;
    std::string name;
    Frame image;
};

struct TemplateSet {
    std::vector<Template> templates;

    int k() const { return static_cast<int>(templates.size()); }

    void validate() const
    {
        if (templates.empty())
            throw std::invalid_argument("template set is empty");
        std::vector<bool> seen(templates.size(), false);
        for (const auto& t : templates) {
            if (t.type_id < 0 || t.type_id >= k() || seen[t.type_id])
                throw std::invalid_argument("template type_ids must be dense and unique, bad id " +
                                            std::to_string(t.type_id));
            seen[t.type_id] = true;
            if (t.image.h < 1 || t.image.w < 1)
                throw std::invalid_argument("template '" + t.name + "' has no pixels");
        }
    }
};

// The sprite tiles the renderer draws, in canonical type order.
inline TemplateSet canonical_templates(int tile_size = 8)
{
    TemplateSet set;
    for (int t = 0; t < env::kNumObjectTypes; ++t)
        set.templates.push_back({t, env::object_type_name(t), env::sprite_tile(t, tile_size)});
    return set;
}

// Scored axis-aligned box; (x, y) is the top-left pixel.
struct Detection {
    int type_id = 0;
    int x = 0, y = 0;
    int w = 0, h = 0;
    float score = 0.0f;
    bool operator==(const Detection&) const = default;
};

namespace detail {
    // integer-exact flatness test plus centered-template correlation terms
    struct TemplateStats {
        std::vector<double> centered; // pixel - mean, template scan order
        double norm2 = 0.0;           // sum of squared centered values
        bool flat = false;
    };

    inline TemplateStats template_stats(const Frame& t)
    {
        TemplateStats s;
        const std::size_t n = t.rgb.size();
        std::int64_t sum = 0, sumsq = 0;
        for (std::uint8_t v : t.rgb) {
            sum += v;
            sumsq += static_cast<std::int64_t>(v) * v;
        }
        s.flat = (sumsq * static_cast<std::int64_t>(n) == sum * sum);
        const double mean = static_cast<double>(sum) / static_cast<double>(n);
        s.centered.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            s.centered[i] = t.rgb[i] - mean;
            s.norm2 += s.centered[i] * s.centered[i];
        }
        return s;
    }
} // namespace detail

// Zero-normalized cross-correlation of the template against every placement,
// in row-major placement order. Flat (zero-variance) patches or templates
// score 1 on exact pixel equality and 0 otherwise.
inline std::vector<Detection> match_template(const Frame& frame, const Template& tmpl, float threshold)
{
    const Frame& t = tmpl.image;
    if (t.h > frame.h || t.w > frame.w)
        throw std::invalid_argument("template " + std::to_string(t.w) + "x" + std::to_string(t.h) +
                                    " larger than frame " + std::to_string(frame.w) + "x" + std::to_string(frame.h));
    if (!(threshold > 0.0f && threshold <= 1.0f))
        throw std::invalid_argument("threshold must lie in (0,1]");

    const auto stats = detail::template_stats(t);
    const std::size_t n = t.rgb.size();
    std::vector<Detection> out;

    // prefix sums of pixel values and squares (all channels pooled) give each
    // patch's flatness test in O(1); a zero-variance patch is uniform, so it
    // can only score against a uniform template
    const int W1 = frame.w + 1;
    std::vector<std::int64_t> psum(static_cast<std::size_t>(frame.h + 1) * W1, 0);
    std::vector<std::int64_t> psq(psum.size(), 0);
    for (int y = 0; y < frame.h; ++y) {
        std::int64_t rs = 0, rq = 0;
        for (int x = 0; x < frame.w; ++x) {
            const std::uint8_t* p = frame.px(y, x);
            rs += p[0] + p[1] + p[2];
            rq += static_cast<std::int64_t>(p[0]) * p[0] + static_cast<std::int64_t>(p[1]) * p[1] +
                  static_cast<std::int64_t>(p[2]) * p[2];
            psum[(y + 1) * static_cast<std::size_t>(W1) + x + 1] = psum[y * static_cast<std::size_t>(W1) + x + 1] + rs;
            psq[(y + 1) * static_cast<std::size_t>(W1) + x + 1] = psq[y * static_cast<std::size_t>(W1) + x + 1] + rq;
        }
    }
    auto rect = [W1](const std::vector<std::int64_t>& p, int y0, int x0, int y1, int x1) {
        return p[static_cast<std::size_t>(y1) * W1 + x1] - p[static_cast<std::size_t>(y0) * W1 + x1] -
               p[static_cast<std::size_t>(y1) * W1 + x0] + p[static_cast<std::size_t>(y0) * W1 + x0];
    };

    for (int y = 0; y + t.h <= frame.h; ++y)
        for (int x = 0; x + t.w <= frame.w; ++x) {
            const std::int64_t sum = rect(psum, y, x, y + t.h, x + t.w);
            const std::int64_t sumsq = rect(psq, y, x, y + t.h, x + t.w);
            const bool patch_flat = (sumsq * static_cast<std::int64_t>(n) == sum * sum);
            float score;
            if (patch_flat || stats.flat) {
                if (patch_flat && stats.flat)
                    score = frame.px(y, x)[0] == t.rgb[0] ? 1.0f : 0.0f; // uniform vs uniform
                else
                    score = 0.0f;
            } else {
                double dot = 0.0;
                std::size_t i = 0;
                for (int ty = 0; ty < t.h; ++ty) {
                    const std::uint8_t* row = frame.px(y + ty, x);
                    for (int k = 0; k < t.w * 3; ++k, ++i)
                        dot += stats.centered[i] * row[k];
                }
                const double patch_norm2 =
                    static_cast<double>(sumsq) - static_cast<double>(sum) * sum / static_cast<double>(n);
                double s = dot / std::sqrt(patch_norm2 * stats.norm2);
                score = static_cast<float>(std::clamp(s, -1.0, 1.0));
            }
            if (score >= threshold)
                out.push_back({tmpl.type_id, x, y, t.w, t.h, score});
        }
    return out;
}

inline float box_iou(const Detection& a, const Detection& b)
{
    const int x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
    const int x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
    const int iw = std::max(0, x1 - x0), ih = std::max(0, y1 - y0);
    const float inter = static_cast<float>(iw) * ih;
    const float uni = static_cast<float>(a.w) * a.h + static_cast<float>(b.w) * b.h - inter;
    return uni > 0.0f ? inter / uni : 0.0f;
}

// Greedy by score (ties row-major); drops same-type boxes overlapping a kept
// box with IoU above the threshold. Result is sorted by descending score.
inline std::vector<Detection> non_max_suppression(std::vector<Detection> dets, float iou_thresh)
{
    if (!(iou_thresh >= 0.0f && iou_thresh < 1.0f))
        throw std::invalid_argument("iou threshold must lie in [0,1)");
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (k.type_id == d.type_id && box_iou(k, d) > iou_thresh) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// Per-template matching with per-type suppression; concatenated in type order.
inline std::vector<Detection> detect_all(const Frame& frame, const TemplateSet& set,
                                         float threshold = 0.95f, float iou_thresh = 0.3f)
{
    set.validate();
    std::vector<Detection> out;
    for (const auto& t : set.templates) {
        auto dets = non_max_suppression(match_template(frame, t, threshold), iou_thresh);
        out.insert(out.end(), dets.begin(), dets.end());
    }
    return out;
}

// k binary presence planes over the frame raster.
struct ObjectChannels {
    int k = 0, h = 0, w = 0;
    std::vector<std::uint8_t> planes; // k*h*w, values in {0,1}

    std::uint8_t at(int c, int y, int x) const
    {
        return planes[(static_cast<std::size_t>(c) * h + y) * w + x];
    }
    std::int64_t ones() const
    {
        std::int64_t n = 0;
        for (auto v : planes) n += v;
        return n;
    }
};

inline ObjectChannels encode_object_channels(int frame_h, int frame_w, std::span<const Detection> dets, int k)
{
    ObjectChannels oc;
    oc.k = k;
    oc.h = frame_h;
    oc.w = frame_w;
    oc.planes.assign(static_cast<std::size_t>(k) * frame_h * frame_w, 0);
    for (const auto& d : dets) {
        if (d.type_id < 0 || d.type_id >= k)
            throw std::invalid_argument("detection type_id " + std::to_string(d.type_id) +
                                        " outside the " + std::to_string(k) + " encoded channels");
        if (d.x < 0 || d.y < 0 || d.x + d.w > frame_w || d.y + d.h > frame_h)
            throw std::invalid_argument("detection box exceeds the frame");
        for (int y = d.y; y < d.y + d.h; ++y)
            for (int x = d.x; x < d.x + d.w; ++x)
                oc.planes[(static_cast<std::size_t>(d.type_id) * frame_h + y) * frame_w + x] = 1;
    }
    return oc;
}

} // namespace pelletworld::objrec
