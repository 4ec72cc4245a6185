#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pelletworld::nn {

// Thrown when a numeric result leaves the finite range (NaN/Inf). The CLI maps
// this to exit code 3; every other input/contract violation maps to 2.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::int64_t shape_numel(const std::vector<int>& shape)
{
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0)
            throw std::invalid_argument("tensor dimension must be positive, got " + std::to_string(d));
        n *= d;
    }
    return n;
}

// Dense row-major float32 tensor. Images are (channels, height, width),
// channel-major; flat vectors are rank 1.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0f) {}
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d))
    {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("tensor data length does not match shape");
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // (c, y, x) indexing for rank-3 tensors
    float& at(int c, int y, int x)
    {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    float at(int c, int y, int x) const
    {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const
    {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int>& s)
{
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

} // namespace pelletworld::nn
