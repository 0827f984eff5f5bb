#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "qdf/matrix.hpp"
#include "qdf/rng.hpp"

using namespace qdf;

TEST_CASE("Matrix constructor checks data length", "[matrix]") {
    CHECK_THROWS_AS(Matrix(2, 2, {1.0, 2.0, 3.0}), ContractViolation);
    const Matrix m(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(m(1, 2) == 6.0);
}

TEST_CASE("matmul identity and annihilator", "[matrix]") {
    Rng rng(7);
    const Matrix a = test::random_matrix(3, 5, rng);
    CHECK(matmul(Matrix::identity(3), a) == a);
    const Matrix zero(5, 4);
    const Matrix prod = matmul(a, zero);
    for (double v : prod.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul hand-computed product", "[matrix]") {
    // [[1,2],[3,4]] * [[5],[6]] = [[1*5+2*6],[3*5+4*6]] = [[17],[39]]
    const Matrix a(2, 2, {1, 2, 3, 4});
    const Matrix b(2, 1, {5, 6});
    const Matrix c = matmul(a, b);
    CHECK(c(0, 0) == 17.0);
    CHECK(c(1, 0) == 39.0);
}

TEST_CASE("matmul rejects mismatched shapes", "[matrix]") {
    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ContractViolation);
}

TEST_CASE("matmul transposed variants agree with explicit transpose", "[matrix]") {
    Rng rng(11);
    const Matrix a = test::random_matrix(4, 6, rng);
    const Matrix b = test::random_matrix(5, 6, rng);
    CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) < 1e-14);
    const Matrix c = test::random_matrix(4, 3, rng);
    CHECK(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)) < 1e-14);
}

TEST_CASE("matmul associativity on random triples", "[matrix][property]") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 1 + rng.below(6);
        const std::size_t k = 1 + rng.below(6);
        const std::size_t l = 1 + rng.below(6);
        const std::size_t n = 1 + rng.below(6);
        const Matrix a = test::random_matrix(m, k, rng);
        const Matrix b = test::random_matrix(k, l, rng);
        const Matrix c = test::random_matrix(l, n, rng);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        Matrix diff = left;
        for (std::size_t i = 0; i < diff.size(); ++i) diff.data()[i] -= right.data()[i];
        const double denom = std::max(frobenius_norm(left), 1e-30);
        CHECK(frobenius_norm(diff) / denom < 1e-9);
    }
}

TEST_CASE("softmax of equal values is uniform", "[matrix]") {
    const Matrix row(1, 4, {2.5, 2.5, 2.5, 2.5});
    const Matrix out = softmax_rows(row);
    for (std::size_t j = 0; j < 4; ++j) CHECK(out(0, j) == 0.25);
}

TEST_CASE("softmax of a single element is one", "[matrix]") {
    const Matrix out = softmax_rows(Matrix(1, 1, {0.0}));
    CHECK(out(0, 0) == 1.0);
}

TEST_CASE("softmax closed-form two-way split", "[matrix]") {
    // softmax(ln 3, 0) = (3, 1)/4 = (0.75, 0.25)
    const Matrix out = softmax_rows(Matrix(1, 2, {std::log(3.0), 0.0}));
    CHECK(out(0, 0) == Catch::Approx(0.75).margin(1e-12));
    CHECK(out(0, 1) == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("softmax rows sum to one on fuzzed input", "[matrix][property]") {
    Rng rng(17);
    std::size_t rows_checked = 0;
    while (rows_checked < 10000) {
        const std::size_t rows = 1 + rng.below(16);
        const std::size_t cols = 1 + rng.below(16);
        const Matrix a = test::random_matrix(rows, cols, rng, 20.0);
        const Matrix out = softmax_rows(a);
        for (std::size_t i = 0; i < rows; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                CHECK(out(i, j) >= 0.0);
                sum += out(i, j);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
        rows_checked += rows;
    }
}

TEST_CASE("row_l2_norms basics", "[matrix]") {
    const Matrix a(3, 2, {3, 4, 0, 0, 1, 1});
    const auto norms = row_l2_norms(a);
    CHECK(norms[0] == 5.0);
    CHECK(norms[1] == 0.0);
    const Matrix b(1, 4, {1, 1, 1, 1});
    CHECK(row_l2_norms(b)[0] == 2.0);
}

TEST_CASE("sym_eig on diagonal input", "[matrix]") {
    const SymEig eig = sym_eig(Matrix(2, 2, {4, 0, 0, 1}));
    CHECK(eig.eigenvalues[0] == Catch::Approx(4.0).margin(1e-12));
    CHECK(eig.eigenvalues[1] == Catch::Approx(1.0).margin(1e-12));
    // eigenvectors are signed unit basis columns
    CHECK(std::abs(eig.eigenvectors(0, 0)) == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::abs(eig.eigenvectors(1, 1)) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("sym_eig of identity", "[matrix]") {
    const SymEig eig = sym_eig(Matrix::identity(5));
    for (double v : eig.eigenvalues) CHECK(v == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("sym_eig matches characteristic polynomial", "[matrix]") {
    // det([[2−λ,1],[1,2−λ]]) = (2−λ)² − 1 → λ = 3, 1
    const SymEig eig = sym_eig(Matrix(2, 2, {2, 1, 1, 2}));
    CHECK(eig.eigenvalues[0] == Catch::Approx(3.0).margin(1e-12));
    CHECK(eig.eigenvalues[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("sym_eig rejects non-symmetric input", "[matrix]") {
    CHECK_THROWS_AS(sym_eig(Matrix(2, 2, {1, 2, 0, 1})), ContractViolation);
    CHECK_THROWS_AS(sym_eig(Matrix(2, 3)), ContractViolation);
}

TEST_CASE("sym_eig reconstructs random symmetric matrices", "[matrix][property]") {
    Rng rng(19);
    for (std::size_t n : {2ul, 5ul, 16ul, 33ul, 64ul}) {
        const Matrix a = test::random_symmetric(n, rng);
        const SymEig eig = sym_eig(a);
        for (std::size_t j = 1; j < n; ++j)
            CHECK(eig.eigenvalues[j - 1] >= eig.eigenvalues[j]);
        // V diag(λ) Vᵀ within 1e-8 Frobenius
        Matrix scaled = eig.eigenvectors;
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < n; ++i) scaled(i, j) *= eig.eigenvalues[j];
        const Matrix recon = matmul_nt(scaled, eig.eigenvectors);
        Matrix diff = recon;
        for (std::size_t i = 0; i < diff.size(); ++i) diff.data()[i] -= a.data()[i];
        CHECK(frobenius_norm(diff) <= 1e-8);
        // V orthonormal
        const Matrix gram = matmul_tn(eig.eigenvectors, eig.eigenvectors);
        CHECK(max_abs_diff(gram, Matrix::identity(n)) < 1e-10);
    }
}

TEST_CASE("qr_orthonormalize keeps orthonormal input", "[matrix]") {
    const Matrix id = Matrix::identity(4);
    CHECK(max_abs_diff(qr_orthonormalize(id), id) <= 1e-12);
    const double c = std::cos(0.7);
    const double s = std::sin(0.7);
    const Matrix rot(2, 2, {c, -s, s, c});
    CHECK(max_abs_diff(qr_orthonormalize(rot), rot) <= 1e-12);
}

TEST_CASE("qr_orthonormalize normalizes positive diagonal scaling", "[matrix]") {
    const Matrix q = qr_orthonormalize(Matrix(2, 2, {2, 0, 0, 3}));
    CHECK(max_abs_diff(q, Matrix::identity(2)) == 0.0);
}

TEST_CASE("qr_orthonormalize produces orthonormal columns", "[matrix]") {
    Rng rng(23);
    const Matrix a = test::random_matrix(4, 4, rng);
    const Matrix q = qr_orthonormalize(a);
    CHECK(max_abs_diff(matmul_tn(q, q), Matrix::identity(4)) <= 1e-10);
    // span preserved: projecting a onto span(q) recovers a
    const Matrix recon = matmul(q, matmul_tn(q, a));
    CHECK(max_abs_diff(recon, a) <= 1e-10);
}

TEST_CASE("qr_orthonormalize flags rank deficiency", "[matrix]") {
    Matrix a(3, 2);
    a(0, 0) = 1.0;
    a(1, 0) = 2.0;
    a(2, 0) = 3.0;
    a(0, 1) = 2.0;
    a(1, 1) = 4.0;
    a(2, 1) = 6.0; // second column is a multiple of the first
    CHECK_THROWS_AS(qr_orthonormalize(a), DegenerateInput);
    CHECK_THROWS_AS(qr_orthonormalize(Matrix(2, 3)), ContractViolation);
}

TEST_CASE("qr_orthonormalize is deterministic", "[matrix]") {
    Rng rng(29);
    const Matrix a = test::random_matrix(6, 4, rng);
    const Matrix q1 = qr_orthonormalize(a);
    const Matrix q2 = qr_orthonormalize(a);
    CHECK(q1.data() == q2.data());
}
