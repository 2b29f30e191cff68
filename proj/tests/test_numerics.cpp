#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "micl/grad_check.hpp"
#include "micl/linalg.hpp"
#include "micl/rng.hpp"
#include "micl/tensor.hpp"

using namespace micl;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor m({r, c});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(lo, hi);
    return m;
}

// Independent inverse oracle: Gaussian elimination with partial pivoting.
Tensor gauss_inverse(const Tensor& m) {
    const std::size_t n = m.rows();
    Tensor a = m;
    Tensor inv = Tensor::identity(n);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(a(col, j), a(piv, j));
                std::swap(inv(col, j), inv(piv, j));
            }
        }
        const double d = a(col, col);
        for (std::size_t j = 0; j < n; ++j) {
            a(col, j) /= d;
            inv(col, j) /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a(r, col);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                a(r, j) -= f * a(col, j);
                inv(r, j) -= f * inv(col, j);
            }
        }
    }
    return inv;
}

double rel_fro(const Tensor& got, const Tensor& want) {
    return frobenius_norm(sub(got, want)) / std::max(1e-30, frobenius_norm(want));
}

}  // namespace

TEST_CASE("matmul hand-computed 2x2") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c(0, 0) == 19.0);
    CHECK(c(0, 1) == 22.0);
    CHECK(c(1, 0) == 43.0);
    CHECK(c(1, 1) == 50.0);
}

TEST_CASE("matmul identity and annihilator") {
    Rng rng(7);
    Tensor a = random_matrix(4, 4, rng);
    CHECK(max_abs_diff(matmul(a, Tensor::identity(4)), a) == 0.0);
    Tensor z({4, 4});
    Tensor az = matmul(a, z);
    for (std::size_t i = 0; i < az.size(); ++i) CHECK(az[i] == 0.0);
}

TEST_CASE("matmul shape mismatch reports both shapes") {
    Tensor a({2, 3});
    Tensor b({2, 3});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul associativity within 1e-9 relative") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = random_matrix(5, 7, rng);
        Tensor b = random_matrix(7, 6, rng);
        Tensor c = random_matrix(6, 4, rng);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        CHECK(rel_fro(left, right) < 1e-9);
    }
}

TEST_CASE("matmul is bit-reproducible") {
    Rng rng(13);
    Tensor a = random_matrix(9, 17, rng);
    Tensor b = random_matrix(17, 5, rng);
    Tensor c1 = matmul(a, b);
    Tensor c2 = matmul(a, b);
    CHECK(c1.checksum() == c2.checksum());
}

TEST_CASE("row_softmax uniform row") {
    Tensor m({1, 3}, {0, 0, 0});
    Tensor s = row_softmax(m);
    for (std::size_t j = 0; j < 3; ++j) CHECK(s(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("row_softmax large-gap row does not overflow") {
    Tensor m({1, 2}, {1000.0, 0.0});
    Tensor s = row_softmax(m);
    CHECK(s(0, 0) == doctest::Approx(1.0));
    CHECK(s(0, 1) == 0.0);  // exp(-1000) underflows cleanly
    CHECK(s.all_finite());
}

TEST_CASE("row_softmax closed form ln(1),ln(2),ln(3)") {
    Tensor m({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor s = row_softmax(m);
    CHECK(s(0, 0) == doctest::Approx(1.0 / 6.0).epsilon(1e-13));
    CHECK(s(0, 1) == doctest::Approx(2.0 / 6.0).epsilon(1e-13));
    CHECK(s(0, 2) == doctest::Approx(3.0 / 6.0).epsilon(1e-13));
}

TEST_CASE("row_softmax rows sum to 1 and shift invariance is exact") {
    Rng rng(3);
    Tensor m = random_matrix(6, 9, rng, -5.0, 5.0);
    Tensor s = row_softmax(m);
    for (std::size_t i = 0; i < 6; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 9; ++j) sum += s(i, j);
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    Tensor shifted = m;
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 9; ++j) shifted(i, j) += 17.25;
    // shift by a constant is removed exactly by max subtraction (power of two offset)
    CHECK(max_abs_diff(row_softmax(shifted), s) <= 1e-12);
}

TEST_CASE("svd of identity and diagonal") {
    SvdResult s = svd(Tensor::identity(3));
    for (std::size_t i = 0; i < 3; ++i) CHECK(s.sigma[i] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor d({3, 3});
    d(0, 0) = 3.0;
    d(1, 1) = 2.0;
    d(2, 2) = 1.0;
    SvdResult sd = svd(d);
    CHECK(sd.sigma[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(sd.sigma[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(sd.sigma[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("svd reconstruction, orthogonality, ordering on random shapes") {
    Rng rng(42);
    for (auto [r, c] : std::vector<std::pair<std::size_t, std::size_t>>{
             {8, 5}, {5, 8}, {12, 12}, {3, 1}, {1, 4}}) {
        Tensor m = random_matrix(r, c, rng);
        SvdResult s = svd(m);
        CHECK(gram_deviation(s.u) <= 1e-10);
        CHECK(gram_deviation(s.v) <= 1e-10);
        for (std::size_t i = 0; i + 1 < s.sigma.size(); ++i) CHECK(s.sigma[i] >= s.sigma[i + 1]);
        for (std::size_t i = 0; i < s.sigma.size(); ++i) CHECK(s.sigma[i] >= 0.0);
        Tensor us = s.u;
        for (std::size_t cc = 0; cc < s.sigma.size(); ++cc)
            for (std::size_t rr = 0; rr < us.rows(); ++rr) us(rr, cc) *= s.sigma[cc];
        Tensor recon = matmul(us, transpose(s.v));
        CHECK(rel_fro(recon, m) <= 1e-10);
    }
}

TEST_CASE("svd singular values agree between M and M^T") {
    Rng rng(5);
    Tensor m = random_matrix(7, 4, rng);
    SvdResult a = svd(m);
    SvdResult b = svd(transpose(m));
    REQUIRE(a.sigma.size() == b.sigma.size());
    for (std::size_t i = 0; i < a.sigma.size(); ++i)
        CHECK(std::abs(a.sigma[i] - b.sigma[i]) <= 1e-10 * std::max(1.0, a.sigma[0]));
}

TEST_CASE("svd rejects oversize input") {
    CHECK_THROWS_AS(svd(Tensor({257, 2})), PreconditionError);
}

TEST_CASE("svd of zero matrix keeps orthonormal factors") {
    SvdResult s = svd(Tensor({4, 3}));
    CHECK(gram_deviation(s.u) <= 1e-10);
    CHECK(gram_deviation(s.v) <= 1e-10);
    for (std::size_t i = 0; i < 3; ++i) CHECK(s.sigma[i] == 0.0);
}

TEST_CASE("pinv matches Gaussian-elimination inverse on invertible 3x3") {
    Rng rng(9);
    Tensor m = random_matrix(3, 3, rng, 0.5, 2.0);
    m(0, 0) += 3.0;  // keep it comfortably non-singular
    m(1, 1) += 3.0;
    m(2, 2) += 3.0;
    CHECK(rel_fro(pinv(m), gauss_inverse(m)) <= 1e-10);
}

TEST_CASE("pinv right-inverse on full-row-rank 3x8") {
    Rng rng(10);
    Tensor x = random_matrix(3, 8, rng);
    Tensor prod = matmul(x, pinv(x));
    CHECK(rel_fro(prod, Tensor::identity(3)) <= 1e-10);
}

TEST_CASE("pinv of zero matrix is zero") {
    Tensor p = pinv(Tensor({3, 5}));
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == 0.0);
}

TEST_CASE("pinv satisfies Moore-Penrose identities on rank-deficient input") {
    Rng rng(21);
    Tensor u = random_matrix(6, 2, rng);
    Tensor v = random_matrix(2, 5, rng);
    Tensor m = matmul(u, v);  // rank <= 2
    Tensor p = pinv(m);
    CHECK(rel_fro(matmul(matmul(m, p), m), m) <= 1e-9);
    CHECK(rel_fro(matmul(matmul(p, m), p), p) <= 1e-9);
}

TEST_CASE("grad_check on quadratic") {
    Rng rng(2);
    std::vector<double> p(10);
    for (auto& x : p) x = rng.uniform(-2.0, 2.0);
    auto loss = [](std::span<const double> q) {
        double acc = 0.0;
        for (double v : q) acc += 0.5 * v * v;
        return acc;
    };
    GradCheckReport rep = grad_check(loss, p, p);
    CHECK(rep.checked == 10);
    CHECK(rep.max_rel_err <= 1e-9);
}

TEST_CASE("grad_check on softmax cross-entropy layer") {
    // loss(z) = logsumexp(z) - z[target]; analytic grad = softmax(z) - onehot
    Rng rng(4);
    std::vector<double> z(8);
    for (auto& x : z) x = rng.uniform(-2.0, 2.0);
    const std::size_t target = 3;
    auto loss = [&](std::span<const double> q) {
        double mx = q[0];
        for (double v : q) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : q) sum += std::exp(v - mx);
        return mx + std::log(sum) - q[target];
    };
    Tensor zt({1, 8}, std::vector<double>(z.begin(), z.end()));
    Tensor sm = row_softmax(zt);
    std::vector<double> grad(8);
    for (std::size_t i = 0; i < 8; ++i) grad[i] = sm(0, i) - (i == target ? 1.0 : 0.0);
    GradCheckReport rep = grad_check(loss, z, grad);
    CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("grad_check constant loss") {
    std::vector<double> p(5, 1.0);
    std::vector<double> g(5, 0.0);
    GradCheckReport rep = grad_check([](std::span<const double>) { return 4.0; }, p, g);
    CHECK(rep.max_rel_err == 0.0);
}

TEST_CASE("grad_check reports non-finite perturbed losses per coordinate") {
    std::vector<double> p = {0.5, 2.0};
    std::vector<double> g = {0.0, 1.0};
    auto loss = [](std::span<const double> q) {
        return q[0] > 0.5 ? std::numeric_limits<double>::quiet_NaN() : q[1];
    };
    GradCheckReport rep = grad_check(loss, p, g);
    REQUIRE(rep.non_finite.size() == 1);
    CHECK(rep.non_finite[0] == 0);
    CHECK(rep.checked == 1);
}

TEST_CASE("rng stream is reproducible and matches frozen reference values") {
    // splitmix64(0) reference head, from the published algorithm
    std::uint64_t s = 0;
    CHECK(Rng::splitmix64(s) == 0xe220a8397b1dcdafull);
    CHECK(Rng::splitmix64(s) == 0x6e789e6aa1b965f4ull);

    Rng a(3407), b(3407);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(1), d(2);
    bool differs = false;
    for (int i = 0; i < 8; ++i) differs |= (c.next_u64() != d.next_u64());
    CHECK(differs);
}

TEST_CASE("rng below() stays in range and covers values") {
    Rng rng(77);
    std::vector<int> seen(10, 0);
    for (int i = 0; i < 2000; ++i) {
        const auto v = rng.below(10);
        REQUIRE(v < 10);
        ++seen[static_cast<std::size_t>(v)];
    }
    for (int cnt : seen) CHECK(cnt > 100);
}

TEST_CASE("random_orthogonal has unit condition number") {
    Rng rng(15);
    Tensor r = random_orthogonal(8, rng);
    CHECK(gram_deviation(r) <= 1e-10);
    CHECK(condition_number(r) == doctest::Approx(1.0).epsilon(1e-9));
}
