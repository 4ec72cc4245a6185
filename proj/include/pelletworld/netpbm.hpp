#pragma once

#include "pelletworld/render.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace pelletworld::io {

using env::Frame;
using env::GrayImage;

// Malformed input files; the CLI maps this to exit code 2.
struct NetpbmError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

    inline std::string slurp(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in)
            throw NetpbmError("cannot open " + path.string());
        return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }

    [[noreturn]] inline void bad(const std::filesystem::path& path, std::size_t offset, const std::string& what)
    {
        throw NetpbmError(path.string() + ": " + what + " at byte offset " + std::to_string(offset));
    }

    inline void skip_space(const std::string& d, std::size_t& pos)
    {
        while (pos < d.size()) {
            char c = d[pos];
            if (c == '#') {
                while (pos < d.size() && d[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    inline long parse_int(const std::filesystem::path& path, const std::string& d, std::size_t& pos, const char* what)
    {
        skip_space(d, pos);
        if (pos >= d.size() || d[pos] < '0' || d[pos] > '9')
            bad(path, pos, std::string("expected ") + what);
        long v = 0;
        while (pos < d.size() && d[pos] >= '0' && d[pos] <= '9') {
            v = v * 10 + (d[pos] - '0');
            if (v > 1'000'000'000) bad(path, pos, std::string(what) + " out of range");
            ++pos;
        }
        return v;
    }

    inline std::size_t parse_header(const std::filesystem::path& path, const std::string& d, const char* magic,
                                    int& w, int& h)
    {
        std::size_t pos = 0;
        if (d.size() < 2 || d[0] != magic[0] || d[1] != magic[1])
            bad(path, 0, std::string("expected magic ") + magic);
        pos = 2;
        w = static_cast<int>(parse_int(path, d, pos, "width"));
        h = static_cast<int>(parse_int(path, d, pos, "height"));
        std::size_t maxval_at = pos;
        long maxval = parse_int(path, d, pos, "maxval");
        if (maxval != 255) {
            skip_space(d, maxval_at);
            bad(path, maxval_at, "maxval must be 255, got " + std::to_string(maxval));
        }
        if (pos >= d.size() || !(d[pos] == ' ' || d[pos] == '\t' || d[pos] == '\r' || d[pos] == '\n'))
            bad(path, pos, "expected single whitespace before pixel data");
        ++pos;
        if (w <= 0 || h <= 0)
            bad(path, 2, "dimensions must be positive");
        return pos;
    }

} // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Frame& f)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw NetpbmError("cannot write " + path.string());
    out << "P6\n" << f.w << " " << f.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size()));
    if (!out)
        throw NetpbmError("short write to " + path.string());
}

inline Frame read_ppm(const std::filesystem::path& path)
{
    const std::string d = detail::slurp(path);
    int w = 0, h = 0;
    std::size_t pos = detail::parse_header(path, d, "P6", w, h);
    const std::size_t need = static_cast<std::size_t>(w) * h * 3;
    if (d.size() - pos < need)
        detail::bad(path, d.size(), "truncated pixel data: need " + std::to_string(need) + " bytes, have " +
                                        std::to_string(d.size() - pos));
    Frame f(h, w);
    std::copy_n(reinterpret_cast<const std::uint8_t*>(d.data()) + pos, need, f.rgb.data());
    return f;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw NetpbmError("cannot write " + path.string());
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out)
        throw NetpbmError("short write to " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path)
{
    const std::string d = detail::slurp(path);
    int w = 0, h = 0;
    std::size_t pos = detail::parse_header(path, d, "P5", w, h);
    const std::size_t need = static_cast<std::size_t>(w) * h;
    if (d.size() - pos < need)
        detail::bad(path, d.size(), "truncated pixel data: need " + std::to_string(need) + " bytes, have " +
                                        std::to_string(d.size() - pos));
    GrayImage img(h, w);
    std::copy_n(reinterpret_cast<const std::uint8_t*>(d.data()) + pos, need, img.pixels.data());
    return img;
}

} // namespace pelletworld::io
