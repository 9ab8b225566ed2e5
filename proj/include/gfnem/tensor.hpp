#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfnem {

// Dense row-major array of 64-bit reals. Rank 0 is a scalar.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        values.assign(static_cast<size_t>(count(shape)), 0.0);
    }
    Tensor(std::vector<int64_t> s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<int64_t>(values.size()) != count(shape))
            throw std::runtime_error("Tensor: shape/value size mismatch");
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor vector1d(std::vector<double> v) {
        int64_t n = static_cast<int64_t>(v.size());
        return Tensor({n}, std::move(v));
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    int64_t size() const { return static_cast<int64_t>(values.size()); }
    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? size() / rows() : shape[1]; }
    bool is_scalar() const { return values.size() == 1 && shape.empty(); }

    double& at(size_t i) { return values[i]; }
    double at(size_t i) const { return values[i]; }
    double& at2(int64_t r, int64_t c) { return values[static_cast<size_t>(r * cols() + c)]; }
    double at2(int64_t r, int64_t c) const { return values[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace gfnem
