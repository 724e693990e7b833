#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sac/error.hpp"
#include "sac/rng.hpp"

namespace sac {

// Dense row-major tensor. Parameters and activations use the float
// instantiation; gradient-check oracles instantiate with double.
template <typename T>
struct TensorT {
    std::vector<std::size_t> shape;
    std::vector<T> v;

    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> s) : shape(std::move(s)) {
        v.assign(count(shape), T(0));
    }

    TensorT(std::vector<std::size_t> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != count(shape)) {
            throw shape_error("tensor data length " + std::to_string(v.size()) +
                              " does not match shape volume " + std::to_string(count(shape)));
        }
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t size() const { return v.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](std::size_t i) { return v[i]; }
    const T& operator[](std::size_t i) const { return v[i]; }

    // [n, d] indexing
    T& at2(std::size_t i, std::size_t j) { return v[i * shape[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return v[i * shape[1] + j]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    void require_finite(const char* what) const {
        if (!all_finite()) throw invalid_input_error(std::string(what) + ": non-finite entries");
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape);
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    // View of sample i of a batch tensor [n, ...] as a standalone tensor copy.
    TensorT slice_row(std::size_t i) const {
        std::vector<std::size_t> s(shape.begin() + 1, shape.end());
        std::size_t stride = count(s);
        TensorT out(s);
        std::copy(v.begin() + i * stride, v.begin() + (i + 1) * stride, out.v.begin());
        return out;
    }
};

using Tensor = TensorT<float>;

template <typename T>
inline void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw shape_error(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <typename T>
inline std::uint64_t content_hash(const TensorT<T>& t) {
    std::uint64_t h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(std::size_t));
    return fnv1a64(t.v.data(), t.v.size() * sizeof(T), h);
}

} // namespace sac
