#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "capseg/error.hpp"

namespace capseg::nn {

/// Dense row-major double tensor with a dynamic shape.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)), data(count(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape)) throw InvalidInput("tensor data does not match shape");
    }

    static std::size_t count(const std::vector<int>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }

    std::size_t numel() const noexcept { return data.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const noexcept { return shape.size(); }
    double* ptr() noexcept { return data.data(); }
    const double* ptr() const noexcept { return data.data(); }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, 0.0); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
        return s + "]";
    }
};

}  // namespace capseg::nn
