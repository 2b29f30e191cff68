#pragma once

#include "micl/rng.hpp"
#include "micl/tensor.hpp"

namespace micl {

struct SvdResult {
    Tensor u;      // p x k, orthonormal columns (k = min(p, q))
    Tensor sigma;  // k, non-negative, non-increasing
    Tensor v;      // q x k, orthonormal columns
};

// Thin SVD of m (p x q, p and q at most 256) by one-sided Jacobi rotations
// with sweep tolerance 1e-14. Columns of u/v are orthonormal within 1e-10
// Gram deviation; reconstruction residual is at most 1e-10 relative.
SvdResult svd(const Tensor& m);

// Moore-Penrose pseudoinverse via svd; singular values below 1e-12 * sigma_max
// are treated as zero.
Tensor pinv(const Tensor& m);

// sigma_max / sigma_min_positive; returns +inf for a rank-deficient matrix.
double condition_number(const Tensor& m);

// Largest and smallest singular values.
std::pair<double, double> singular_extents(const Tensor& m);

// Random orthogonal d x d matrix (polar factor u.v^T of a Gaussian matrix).
Tensor random_orthogonal(std::size_t d, Rng& rng);

// max |(A^T A - I)_ij| for a matrix with nominally orthonormal columns.
double gram_deviation(const Tensor& a);

}  // namespace micl
