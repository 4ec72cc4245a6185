#pragma once

#include "pelletworld/grid.hpp"

#include <cstdint>
#include <vector>

namespace pelletworld::env {

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

// Row-major H x W x 3 raster, 8 bits per channel.
struct Frame {
    int h = 0, w = 0;
    std::vector<std::uint8_t> rgb;

    Frame() = default;
    Frame(int height, int width) : h(height), w(width), rgb(static_cast<std::size_t>(height) * width * 3, 0) {}

    std::uint8_t* px(int y, int x) { return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
    const std::uint8_t* px(int y, int x) const { return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
    void set(int y, int x, Rgb c)
    {
        auto* p = px(y, x);
        p[0] = c.r;
        p[1] = c.g;
        p[2] = c.b;
    }
    bool operator==(const Frame&) const = default;
};

// Row-major H x W single-channel 8-bit raster.
struct GrayImage {
    int h = 0, w = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(int height, int width) : h(height), w(width), pixels(static_cast<std::size_t>(height) * width, 0) {}

    std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * w + x]; }
    bool operator==(const GrayImage&) const = default;
};

// Canonical object type ids shared with the recognizer.
inline constexpr int kAgentType = 0;
inline constexpr int kPelletType = 1;
inline constexpr int kCherryType = 2;
inline constexpr int kGhostType = 3;
inline constexpr int kNumObjectTypes = 4;

inline constexpr Rgb kBackgroundColor{0, 0, 0};
inline constexpr Rgb kWallColor{128, 128, 128};
inline constexpr Rgb kAgentColor{255, 200, 0};
inline constexpr Rgb kPelletColor{236, 236, 236};
inline constexpr Rgb kCherryColor{220, 40, 60};
inline constexpr Rgb kGhostColor{0, 180, 255};

inline const char* object_type_name(int type_id)
{
    switch (type_id) {
    case kAgentType: return "agent";
    case kPelletType: return "pellet";
    case kCherryType: return "cherry";
    case kGhostType: return "ghost";
    }
    return "?";
}

namespace detail {
    inline void fill_rect(Frame& f, int y0, int x0, int y1, int x1, Rgb c)
    {
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                f.set(y, x, c);
    }
} // namespace detail

// Fixed-pixel sprite for one object type on a black tile: a 1-pixel margin
// plus a centered flat-color block whose extent identifies the type. These
// exact tiles double as the recognizer's templates.
inline Frame sprite_tile(int type_id, int tile)
{
    Frame t(tile, tile);
    switch (type_id) {
    case kAgentType:
        detail::fill_rect(t, 1, 1, tile - 1, tile - 1, kAgentColor);
        break;
    case kGhostType:
        detail::fill_rect(t, 1, 1, tile - 1, tile - 1, kGhostColor);
        break;
    case kCherryType:
        detail::fill_rect(t, 2, 2, tile - 2, tile - 2, kCherryColor);
        break;
    case kPelletType:
        detail::fill_rect(t, tile / 2 - 1, tile / 2 - 1, tile / 2 + 1, tile / 2 + 1, kPelletColor);
        break;
    default:
        throw std::invalid_argument("unknown object type " + std::to_string(type_id));
    }
    return t;
}

namespace detail {
    inline void blit_tile(Frame& f, const Frame& tile, int y0, int x0)
    {
        for (int y = 0; y < tile.h; ++y)
            for (int x = 0; x < tile.w; ++x) {
                const std::uint8_t* s = tile.px(y, x);
                std::uint8_t* d = f.px(y0 + y, x0 + x);
                d[0] = s[0];
                d[1] = s[1];
                d[2] = s[2];
            }
    }
} // namespace detail

// Walls on black; no entities.
inline Frame render_background(const GridSpec& spec)
{
    const int T = spec.tile_size;
    Frame f(spec.height * T, spec.width * T);
    for (int r = 0; r < spec.height; ++r)
        for (int c = 0; c < spec.width; ++c)
            if (spec.is_wall(spec.cell(r, c)))
                detail::fill_rect(f, r * T, c * T, (r + 1) * T, (c + 1) * T, kWallColor);
    return f;
}

// Sprite types drawn by render(), with occlusion resolved (the ghost covers
// the agent when they share a cell; only possible in terminal states).
struct VisibleEntity {
    int type_id = 0;
    int cell = 0;
    bool operator==(const VisibleEntity&) const = default;
};

inline std::vector<VisibleEntity> visible_entities(const GridSpec& spec, const GameState& s)
{
    std::vector<VisibleEntity> out;
    for (int i = 0; i < spec.item_count(); ++i)
        if (s.item_present(i) && !(spec.ghost_enabled && s.ghost == spec.item_cell(i)))
            out.push_back({spec.item_is_cherry(i) ? kCherryType : kPelletType, spec.item_cell(i)});
    if (!(spec.ghost_enabled && s.ghost == s.agent))
        out.push_back({kAgentType, s.agent});
    if (spec.ghost_enabled)
        out.push_back({kGhostType, s.ghost});
    return out;
}

// In-place render; reuses `f`'s buffer when the size already matches.
inline void render_into(const GridSpec& spec, const GameState& s, Frame& f)
{
    const int T = spec.tile_size;
    const int H = spec.height * T, W = spec.width * T;
    if (f.h != H || f.w != W) {
        f = Frame(H, W);
    } else {
        std::fill(f.rgb.begin(), f.rgb.end(), 0);
    }
    for (int r = 0; r < spec.height; ++r)
        for (int c = 0; c < spec.width; ++c)
            if (spec.is_wall(spec.cell(r, c)))
                detail::fill_rect(f, r * T, c * T, (r + 1) * T, (c + 1) * T, kWallColor);
    for (int i = 0; i < spec.item_count(); ++i)
        if (s.item_present(i)) {
            int c = spec.item_cell(i);
            detail::blit_tile(f, sprite_tile(spec.item_is_cherry(i) ? kCherryType : kPelletType, T),
                              spec.row_of(c) * T, spec.col_of(c) * T);
        }
    detail::blit_tile(f, sprite_tile(kAgentType, T), spec.row_of(s.agent) * T, spec.col_of(s.agent) * T);
    if (spec.ghost_enabled)
        detail::blit_tile(f, sprite_tile(kGhostType, T), spec.row_of(s.ghost) * T, spec.col_of(s.ghost) * T);
}

inline Frame render(const GridSpec& spec, const GameState& s)
{
    Frame f;
    render_into(spec, s, f);
    return f;
}

} // namespace pelletworld::env
