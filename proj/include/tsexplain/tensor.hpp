#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "tsexplain/common.hpp"
#include "tsexplain/rng.hpp"

namespace tsexplain {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

// Dense row-major tensor of 64-bit reals. Value semantics throughout; the
// grad buffer is non-empty iff requires_grad.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor init: " + shape_str(shape) + " vs " +
                             std::to_string(data.size()) + " values");
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    void set_requires_grad(bool on) {
        requires_grad = on;
        if (on)
            grad.assign(data.size(), 0.0);
        else
            grad.clear();
    }

    void zero_grad() {
        if (requires_grad) grad.assign(data.size(), 0.0);
    }

    double& at(std::initializer_list<std::size_t> idx) { return data[offset(idx)]; }
    double at(std::initializer_list<std::size_t> idx) const { return data[offset(idx)]; }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        std::size_t off = 0, stride = 1;
        std::size_t k = idx.size();
        auto it = idx.end();
        while (k-- > 0) {
            --it;
            off += *it * stride;
            stride *= shape[k];
        }
        return off;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor uniform(Shape s, double lo, double hi, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.uniform(lo, hi);
        return t;
    }
    static Tensor gauss(Shape s, double mean, double std, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.gauss(mean, std);
        return t;
    }
};

}  // namespace tsexplain
