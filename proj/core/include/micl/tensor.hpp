#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "micl/common.hpp"

namespace micl {

// Dense row-major tensor of 64-bit reals. Shapes are immutable after
// construction; data length always equals the product of the extents.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_[axis]; }
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool all_finite() const;
    // Throws NumericalError naming `what` if any entry is NaN/Inf.
    void require_finite(const char* what) const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    std::uint64_t checksum() const { return fnv1a(values()); }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }

  private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// c = a . b for a[m x k], b[k x n]. Accumulation runs in the fixed i-k-j loop
// order (for each row i, partial products are added in increasing k, and the
// inner j loop fills the row); terms whose left factor is exactly 0 are
// skipped, which leaves every remaining addition in the same fixed order.
// Results are therefore bit-reproducible for identical inputs. Shape
// mismatches report both shapes.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax with per-row max subtraction; rows sum to 1 within 1e-12.
Tensor row_softmax(const Tensor& m);

Tensor transpose(const Tensor& m);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
double frobenius_norm(const Tensor& m);
double max_abs_diff(const Tensor& a, const Tensor& b);

namespace kernels {

// out[m x n] += a[m x k] . b[k x n]; i-k-j order as documented for matmul.
void mm_acc(double* out, const double* a, const double* b, std::size_t m, std::size_t k,
            std::size_t n);

// out[m x n] += a[m x k] . b[n x k]^T; rows of `a` dotted with rows of `b`.
void mm_bt_acc(double* out, const double* a, const double* b, std::size_t m, std::size_t k,
               std::size_t n);

// out[k x n] += a[m x k]^T . b[m x n]; outer-product accumulation over m.
void mm_at_acc(double* out, const double* a, const double* b, std::size_t m, std::size_t k,
               std::size_t n);

}  // namespace kernels

}  // namespace micl
