#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "emostyle/errors.hpp"
#include "emostyle/rng.hpp"

namespace emostyle {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major array. The project trains in float and gradient-checks in
// double; the scalar type is the precision mode.
template <class S>
struct Tensor {
    Shape shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(Shape sh) : shape(std::move(sh)), data(shape_numel(shape), S(0)) {}
    Tensor(Shape sh, std::vector<S> values) : shape(std::move(sh)), data(std::move(values)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    }

    static Tensor zeros(Shape sh) { return Tensor(std::move(sh)); }
    static Tensor full(Shape sh, S v) {
        Tensor t(std::move(sh));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor random_normal(Shape sh, Rng rng, double stddev = 1.0) {
        Tensor t(std::move(sh));
        for (S& x : t.data) x = static_cast<S>(rng.gaussian() * stddev);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }

    S& at(std::size_t i) { return data[i]; }
    S at(std::size_t i) const { return data[i]; }
    S& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    S at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <class S>
void check_finite(const Tensor<S>& t, const std::string& what) {
    if (!t.all_finite()) throw NumericError(what + ": non-finite values in tensor " + shape_str(t.shape));
}

template <class S>
double l2_distance(const Tensor<S>& a, const Tensor<S>& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out(t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

}  // namespace emostyle
