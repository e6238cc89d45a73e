#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "graphecho/error.hpp"

namespace graphecho {

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Scalar type is a template parameter: float for
// training runs, double for gradient checks.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    ArrayX<S> data;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(std::vector<int> sh, ArrayX<S> d) : shape(std::move(sh)), data(std::move(d)) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data size " +
                             std::to_string(data.size()));
        for (int e : shape)
            if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
    }

    int64_t numel() const { return data.size(); }
    int dim(size_t i) const { return shape[i]; }
    int rank() const { return int(shape.size()); }

    S& operator[](int64_t i) { return data[i]; }
    S operator[](int64_t i) const { return data[i]; }

    bool all_finite() const { return data.isFinite().all(); }

    // flat view as a rows x cols row-major matrix
    Eigen::Map<MatRM<S>> mat(int rows, int cols) {
        return Eigen::Map<MatRM<S>>(data.data(), rows, cols);
    }
    Eigen::Map<const MatRM<S>> mat(int rows, int cols) const {
        return Eigen::Map<const MatRM<S>>(data.data(), rows, cols);
    }

    static Tensor zeros(std::vector<int> shape) {
        const int64_t n = shape_numel(shape);
        return Tensor(std::move(shape), ArrayX<S>::Zero(n));
    }
    static Tensor full(std::vector<int> shape, S v) {
        const int64_t n = shape_numel(shape);
        return Tensor(std::move(shape), ArrayX<S>::Constant(n, v));
    }
    static Tensor scalar(S v) { return full({1}, v); }
    static Tensor from(std::vector<int> shape, std::initializer_list<S> vals) {
        ArrayX<S> d(int64_t(vals.size()));
        int64_t i = 0;
        for (S v : vals) d[i++] = v;
        return Tensor(std::move(shape), std::move(d));
    }
    static Tensor from_vec(std::vector<int> shape, const std::vector<S>& vals) {
        ArrayX<S> d(int64_t(vals.size()));
        for (size_t i = 0; i < vals.size(); ++i) d[int64_t(i)] = vals[i];
        return Tensor(std::move(shape), std::move(d));
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data = data.template cast<T>();
        out.requires_grad = requires_grad;
        return out;
    }
};

template <typename S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
    return a.shape == b.shape;
}

}  // namespace graphecho
