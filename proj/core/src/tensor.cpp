#include "micl/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace micl {

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::require_finite(const char* what) const {
    if (!all_finite()) {
        throw NumericalError(std::string(what) + ": non-finite entry in tensor " +
                             shape_string(shape_));
    }
}

namespace kernels {

void mm_acc(double* out, const double* a, const double* b, std::size_t m, std::size_t k,
            std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

void mm_bt_acc(double* out, const double* a, const double* b, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] += acc;
        }
    }
}

void mm_at_acc(double* out, const double* a, const double* b, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t r = 0; r < m; ++r) {
        const double* arow = a + r * k;
        const double* brow = b + r * n;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
    }
    Tensor c({a.rows(), b.cols()});
    kernels::mm_acc(c.data(), a.data(), b.data(), a.rows(), a.cols(), b.cols());
    c.require_finite("matmul");
    return c;
}

Tensor row_softmax(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("row_softmax: expected matrix, got " + shape_string(m.shape()));
    m.require_finite("row_softmax input");
    const std::size_t r = m.rows(), c = m.cols();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        double mx = m(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, m(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = std::exp(m(i, j) - mx);
            out(i, j) = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < c; ++j) out(i, j) *= inv;
    }
    return out;
}

Tensor transpose(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("transpose: expected matrix, got " + shape_string(m.shape()));
    Tensor t({m.cols(), m.rows()});
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("add: shapes " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("sub: shapes " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s;
    return c;
}

double frobenius_norm(const Tensor& m) {
    double acc = 0.0;
    for (double v : m.values()) acc += v * v;
    return std::sqrt(acc);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("max_abs_diff: shapes " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    double mx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a[i] - b[i]));
    return mx;
}

}  // namespace micl
