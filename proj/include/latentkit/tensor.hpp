#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "latentkit/error.hpp"

namespace latentkit {

// Dense row-major tensor of 64-bit reals. Values are immutable by convention
// once handed to another thread; every kernel below produces a fresh tensor
// and accumulates reductions in a fixed left-to-right order, so results are
// bit-identical for a given input regardless of thread count.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<int64_t>(data.size())) {
            throw DimensionError("tensor: shape " + shape_str() + " holds " +
                                 std::to_string(numel_of(shape)) + " elements, got " +
                                 std::to_string(data.size()));
        }
    }

    static int64_t numel_of(const std::vector<int64_t>& s);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    // 2-D element access.
    double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    // Row view of a 2-D tensor.
    double* row(int64_t i) { return data.data() + i * shape[1]; }
    const double* row(int64_t i) const { return data.data() + i * shape[1]; }

    bool all_finite() const;
    std::string shape_str() const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

Tensor zeros(std::vector<int64_t> shape);
Tensor identity(int64_t n);

// c[m,n] = sum_k a[m,k] b[k,n], accumulated k = 0..K-1 in order.
Tensor matmul(const Tensor& a, const Tensor& b);
// a^T b and a b^T without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

// y_j = gain_j * x_j / sqrt(mean(x^2) + eps) along the last axis.
// A zero vector with eps == 0 normalizes to zero instead of dividing by zero.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

// -log softmax(logits)[target]; logits is 1-D.
double cross_entropy(const Tensor& logits, int64_t target);

// log softmax(logits)[target] for a row of a 2-D logits tensor.
double row_log_softmax_at(const Tensor& logits, int64_t r, int64_t target);

void add_inplace(Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// dlogits[row] += coef * (softmax(logits[row]) - onehot(target))
void add_cross_entropy_grad(const Tensor& logits, int64_t row, int64_t target, double coef,
                            Tensor& dlogits);

} // namespace latentkit
