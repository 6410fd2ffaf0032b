#include "cap/tensor.hpp"
#include "cap/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cap {

double RngStream::next_normal() noexcept {
    for (;;) {
        double u = 2.0 * next_double() - 1.0;
        double v = 2.0 * next_double() - 1.0;
        double s = u * u + v * v;
        if (s > 0.0 && s < 1.0) {
            return u * std::sqrt(-2.0 * std::log(s) / s);
        }
    }
}

double RngStream::next_trunc_normal(double stddev) noexcept {
    for (;;) {
        double z = next_normal();
        if (std::abs(z) <= 2.0) {
            return z * stddev;
        }
    }
}

namespace {

std::size_t shape_product(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape_product(shape) != data.size()) {
        throw std::invalid_argument("tensor: shape does not match data length");
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::row(std::initializer_list<double> values) {
    return Tensor({1, values.size()}, std::vector<double>(values));
}

Tensor Tensor::vec(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
    if (shape_product(new_shape) != data.size()) {
        throw std::invalid_argument("tensor: reshape changes element count");
    }
    return Tensor(std::move(new_shape), data);
}

bool Tensor::all_finite() const noexcept {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + ")";
}

void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a) +
                                    " x " + shape_str(b));
    }
    Tensor c = Tensor::zeros({a.rows(), b.cols()});
    matmul_acc(a.data.data(), b.data.data(), c.data.data(), a.rows(), a.cols(), b.cols());
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a) +
                                    " x " + shape_str(b) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor c = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * k;
        double* crow = c.data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.data.data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = s;
        }
    }
    return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
        throw std::invalid_argument("matmul_tn: incompatible shapes " + shape_str(a) +
                                    "^T x " + shape_str(b));
    }
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    Tensor c = Tensor::zeros({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a.data.data() + p * m;
        const double* brow = b.data.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c.data.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

std::vector<double> softmax(const std::vector<double>& v) {
    if (v.empty()) {
        throw std::invalid_argument("softmax: empty input");
    }
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument("softmax: non-finite input value");
        }
    }
    const double m = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        denom += out[i];
    }
    for (double& x : out) x /= denom;
    return out;
}

std::vector<double> layer_norm(const std::vector<double>& v,
                               const std::vector<double>& gamma,
                               const std::vector<double>& beta,
                               double eps) {
    if (v.empty() || gamma.size() != v.size() || beta.size() != v.size()) {
        throw std::invalid_argument("layer_norm: gamma/beta length mismatch");
    }
    if (eps < 0.0) {
        throw std::invalid_argument("layer_norm: negative eps");
    }
    const std::size_t n = v.size();
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (v[i] - mean) * inv * gamma[i] + beta[i];
    }
    return out;
}

double cross_entropy(const std::vector<double>& logits, std::size_t label) {
    if (label >= logits.size()) {
        throw std::out_of_range("cross_entropy: label out of range");
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double x : logits) denom += std::exp(x - m);
    return std::log(denom) - (logits[label] - m);
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

} // namespace cap
