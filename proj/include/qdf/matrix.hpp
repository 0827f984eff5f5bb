#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "qdf/error.hpp"

namespace qdf {

/// Dense row-major matrix of 64-bit reals. The single storage type used
/// across the library: feature-map slices, token banks and projection
/// weights all live in one of these.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ContractViolation("Matrix: data length " + std::to_string(data_.size()) +
                                    " does not equal rows*cols " +
                                    std::to_string(rows_ * cols_));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline bool all_finite(const Matrix& m) {
    for (double v : m.data())
        if (!std::isfinite(v)) return false;
    return true;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

/// out = a * b. Loop order i-k-j keeps the inner loop on contiguous rows.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ContractViolation("matmul: inner dimensions differ (" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k);
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

/// out = a * bᵀ. Row-by-row dot products; both operands stream contiguously.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw ContractViolation("matmul_nt: inner dimensions differ (" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.cols()) + ")");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* brow = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
            orow[j] = acc;
        }
    }
    return out;
}

/// out = aᵀ * b.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ContractViolation("matmul_tn: inner dimensions differ (" +
                                std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()) + ")");
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* arow = a.row(k);
        const double* brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            double* orow = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

/// Row-wise softmax with max-subtraction. Total on finite input; each output
/// row is non-negative and sums to 1.
inline Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        double maxv = arow[0];
        for (std::size_t j = 1; j < a.cols(); ++j) maxv = std::max(maxv, arow[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            orow[j] = std::exp(arow[j] - maxv);
            sum += orow[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < a.cols(); ++j) orow[j] *= inv;
    }
    return out;
}

/// Euclidean norm of each row.
inline std::vector<double> row_l2_norms(const Matrix& a) {
    std::vector<double> norms(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) acc += arow[j] * arow[j];
        norms[i] = std::sqrt(acc);
    }
    return norms;
}

struct SymEig {
    std::vector<double> eigenvalues; // descending
    Matrix eigenvectors;             // columns paired with eigenvalues
};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Sized for the small (≤ 64×64) problems this library needs.
inline SymEig sym_eig(const Matrix& a) {
    if (a.rows() != a.cols())
        throw ContractViolation("sym_eig: matrix is not square");
    const std::size_t n = a.rows();
    double max_abs = 0.0;
    for (double v : a.data()) max_abs = std::max(max_abs, std::abs(v));
    const double sym_tol = 1e-10 * std::max(1.0, max_abs);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(a(i, j) - a(j, i)) > sym_tol)
                throw ContractViolation("sym_eig: matrix is not symmetric at (" +
                                        std::to_string(i) + "," + std::to_string(j) + ")");

    Matrix work = a;
    // symmetrize exactly so rotations stay consistent
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = 0.5 * (work(i, j) + work(j, i));
            work(i, j) = v;
            work(j, i) = v;
        }
    Matrix vecs = Matrix::identity(n);

    const double off_tol = 1e-14 * std::max(1.0, max_abs);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += work(p, q) * work(p, q);
        if (std::sqrt(off) <= off_tol) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = work(p, q);
                if (std::abs(apq) <= off_tol * 1e-2) continue;
                const double app = work(p, p);
                const double aqq = work(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0)
                                     ? 1.0 / (theta + std::sqrt(1.0 + theta * theta))
                                     : 1.0 / (theta - std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double wkp = work(k, p);
                    const double wkq = work(k, q);
                    work(k, p) = c * wkp - s * wkq;
                    work(k, q) = s * wkp + c * wkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double wpk = work(p, k);
                    const double wqk = work(q, k);
                    work(p, k) = c * wpk - s * wqk;
                    work(q, k) = s * wpk + c * wqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vecs(k, p);
                    const double vkq = vecs(k, q);
                    vecs(k, p) = c * vkp - s * vkq;
                    vecs(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return work(x, x) > work(y, y);
    });

    SymEig result;
    result.eigenvalues.resize(n);
    result.eigenvectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        result.eigenvalues[j] = work(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i)
            result.eigenvectors(i, j) = vecs(i, order[j]);
    }
    return result;
}

/// Orthonormalizes the columns of a (rows ≥ cols, full column rank) by
/// modified Gram-Schmidt with one re-orthogonalization pass. The triangular
/// factor's diagonal is positive by construction, which fixes the sign
/// convention and makes the result deterministic.
inline Matrix qr_orthonormalize(const Matrix& a) {
    if (a.rows() < a.cols())
        throw ContractViolation("qr_orthonormalize: need rows >= cols, got " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    Matrix q = a;
    for (std::size_t j = 0; j < n; ++j) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t k = 0; k < j; ++k) {
                double proj = 0.0;
                for (std::size_t i = 0; i < m; ++i) proj += q(i, k) * q(i, j);
                for (std::size_t i = 0; i < m; ++i) q(i, j) -= proj * q(i, k);
            }
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < m; ++i) norm += q(i, j) * q(i, j);
        norm = std::sqrt(norm);
        if (norm < 1e-12)
            throw DegenerateInput("qr_orthonormalize: pivot " + std::to_string(norm) +
                                  " below 1e-12 at column " + std::to_string(j));
        const double inv = 1.0 / norm;
        for (std::size_t i = 0; i < m; ++i) q(i, j) *= inv;
    }
    return q;
}

// --- small helpers shared by tests and modules ---

inline double frobenius_norm(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v * v;
    return std::sqrt(acc);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

} // namespace qdf
