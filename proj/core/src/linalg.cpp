#include "micl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace micl {

namespace {

constexpr std::size_t kMaxSvdExtent = 256;
constexpr double kSweepTol = 1e-14;
constexpr int kMaxSweeps = 64;

double col_dot(const Tensor& a, std::size_t rows, std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) acc += a(r, i) * a(r, j);
    return acc;
}

// Orthonormal completion for columns whose singular value vanished: pick the
// canonical basis vector with the largest residual against the already-built
// columns, orthogonalize, normalize.
void complete_column(Tensor& u, std::size_t rows, std::size_t col) {
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < rows; ++e) {
        std::vector<double> cand(rows, 0.0);
        cand[e] = 1.0;
        for (std::size_t c = 0; c < u.cols(); ++c) {
            if (c == col) continue;
            double proj = 0.0;
            for (std::size_t r = 0; r < rows; ++r) proj += cand[r] * u(r, c);
            if (proj == 0.0) continue;
            for (std::size_t r = 0; r < rows; ++r) cand[r] -= proj * u(r, c);
        }
        double nrm = 0.0;
        for (double v : cand) nrm += v * v;
        if (nrm > best_norm) {
            best_norm = nrm;
            best = std::move(cand);
        }
    }
    const double inv = 1.0 / std::sqrt(best_norm);
    for (std::size_t r = 0; r < rows; ++r) u(r, col) = best[r] * inv;
}

SvdResult svd_tall(const Tensor& m) {
    const std::size_t p = m.rows(), q = m.cols();
    Tensor a = m;
    Tensor v = Tensor::identity(q);

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i + 1 < q; ++i) {
            for (std::size_t j = i + 1; j < q; ++j) {
                const double alpha = col_dot(a, p, i, i);
                const double beta = col_dot(a, p, j, j);
                const double gamma = col_dot(a, p, i, j);
                if (gamma == 0.0) continue;
                const double denom = std::sqrt(alpha * beta);
                if (denom == 0.0) continue;
                off = std::max(off, std::abs(gamma) / denom);
                if (std::abs(gamma) <= kSweepTol * denom) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < p; ++r) {
                    const double ai = a(r, i), aj = a(r, j);
                    a(r, i) = c * ai - s * aj;
                    a(r, j) = s * ai + c * aj;
                }
                for (std::size_t r = 0; r < q; ++r) {
                    const double vi = v(r, i), vj = v(r, j);
                    v(r, i) = c * vi - s * vj;
                    v(r, j) = s * vi + c * vj;
                }
            }
        }
        if (off <= kSweepTol) break;
    }

    std::vector<double> sig(q);
    for (std::size_t j = 0; j < q; ++j) sig[j] = std::sqrt(col_dot(a, p, j, j));

    std::vector<std::size_t> order(q);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

    SvdResult out{Tensor({p, q}), Tensor({q}), Tensor({q, q})};
    for (std::size_t k = 0; k < q; ++k) {
        const std::size_t src = order[k];
        out.sigma[k] = sig[src];
        for (std::size_t r = 0; r < q; ++r) out.v(r, k) = v(r, src);
        if (sig[src] > 0.0) {
            const double inv = 1.0 / sig[src];
            for (std::size_t r = 0; r < p; ++r) out.u(r, k) = a(r, src) * inv;
        }
    }
    for (std::size_t k = 0; k < q; ++k) {
        if (out.sigma[k] == 0.0) complete_column(out.u, p, k);
    }
    return out;
}

}  // namespace

SvdResult svd(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("svd: expected matrix, got " + shape_string(m.shape()));
    if (m.rows() > kMaxSvdExtent || m.cols() > kMaxSvdExtent) {
        throw PreconditionError("svd: extents " + shape_string(m.shape()) + " exceed the " +
                                std::to_string(kMaxSvdExtent) + " small-matrix limit");
    }
    m.require_finite("svd input");
    if (m.rows() >= m.cols()) return svd_tall(m);
    SvdResult t = svd_tall(transpose(m));
    return SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

Tensor pinv(const Tensor& m) {
    const SvdResult s = svd(m);
    const std::size_t k = s.sigma.size();
    const double cutoff = 1e-12 * (k > 0 ? s.sigma[0] : 0.0);
    // m+ = v . diag(1/sigma) . u^T with small singular values zeroed
    Tensor vs = s.v;
    for (std::size_t c = 0; c < k; ++c) {
        const double inv = s.sigma[c] > cutoff ? 1.0 / s.sigma[c] : 0.0;
        for (std::size_t r = 0; r < vs.rows(); ++r) vs(r, c) *= inv;
    }
    return matmul(vs, transpose(s.u));
}

double condition_number(const Tensor& m) {
    const auto [mx, mn] = singular_extents(m);
    if (mn <= 0.0 || mx <= 0.0) return std::numeric_limits<double>::infinity();
    return mx / mn;
}

std::pair<double, double> singular_extents(const Tensor& m) {
    const SvdResult s = svd(m);
    const std::size_t k = s.sigma.size();
    if (k == 0) return {0.0, 0.0};
    return {s.sigma[0], s.sigma[k - 1]};
}

Tensor random_orthogonal(std::size_t d, Rng& rng) {
    Tensor g({d, d});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.normal();
    const SvdResult s = svd(g);
    return matmul(s.u, transpose(s.v));
}

double gram_deviation(const Tensor& a) {
    const std::size_t k = a.cols();
    double dev = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double dot = 0.0;
            for (std::size_t r = 0; r < a.rows(); ++r) dot += a(r, i) * a(r, j);
            dev = std::max(dev, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
    }
    return dev;
}

}  // namespace micl
