#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace cap {

// Dense row-major tensor of 64-bit floats. Shape product must equal the data
// length at all times.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor row(std::initializer_list<double> values); // 1 x n
    static Tensor vec(std::initializer_list<double> values); // rank 1

    std::size_t numel() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }

    std::size_t rows() const { assert(rank() == 2); return shape[0]; }
    std::size_t cols() const { assert(rank() == 2); return shape[1]; }

    double& at(std::size_t i) { assert(i < data.size()); return data[i]; }
    double at(std::size_t i) const { assert(i < data.size()); return data[i]; }
    double& at(std::size_t i, std::size_t j) {
        assert(rank() == 2 && i < shape[0] && j < shape[1]);
        return data[i * shape[1] + j];
    }
    double at(std::size_t i, std::size_t j) const {
        assert(rank() == 2 && i < shape[0] && j < shape[1]);
        return data[i * shape[1] + j];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        assert(rank() == 3 && i < shape[0] && j < shape[1] && k < shape[2]);
        return data[(i * shape[1] + j) * shape[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        assert(rank() == 3 && i < shape[0] && j < shape[1] && k < shape[2]);
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    // Same data, new shape; product of extents must match.
    Tensor reshaped(std::vector<std::size_t> new_shape) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const noexcept;
};

std::string shape_str(const Tensor& t);

// C (m x n) += A (m x k) * B (k x n). The accumulate form is the kernel all
// products below are built on.
void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n);

Tensor matmul(const Tensor& a, const Tensor& b);    // (m,k)x(k,n)
Tensor matmul_nt(const Tensor& a, const Tensor& b); // (m,k)x(n,k)^T -> (m,n)
Tensor matmul_tn(const Tensor& a, const Tensor& b); // (k,m)^T x(k,n) -> (m,n)

// Numerically stable softmax over a flat vector; shift-invariant. Rejects
// non-finite input.
std::vector<double> softmax(const std::vector<double>& v);

// Normalizes v to zero mean and unit variance (population), then applies
// gamma and beta elementwise. gamma/beta lengths must match v; eps >= 0.
std::vector<double> layer_norm(const std::vector<double>& v,
                               const std::vector<double>& gamma,
                               const std::vector<double>& beta,
                               double eps);

// -log softmax(logits)[label]; stable against large logits.
double cross_entropy(const std::vector<double>& logits, std::size_t label);

double gelu(double x);

} // namespace cap
