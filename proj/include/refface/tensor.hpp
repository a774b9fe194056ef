#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "refface/errors.hpp"
#include "refface/rng.hpp"

namespace refface {

// Dense row-major double tensor. All model math runs in double: the test
// tolerances (1e-6 guidance algebra, finite-difference gradient checks)
// leave no headroom for float32.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != count(shape))
            throw ShapeError("tensor data size does not match shape");
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor randn(std::vector<int64_t> s, Rng& rng) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = rng.normal();
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    size_t ndim() const { return shape.size(); }
    int64_t dim(size_t i) const { return shape[i]; }

    double& operator[](int64_t i) { return data[i]; }
    double operator[](int64_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const;
};

// FNV-1a over the raw bytes of a double buffer; used for parameter freeze
// checks and checkpoint integrity.
uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xCBF29CE484222325ULL);
uint64_t hash_tensor(const Tensor& t, uint64_t h = 0xCBF29CE484222325ULL);

}  // namespace refface
