#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "qdf/dmqa.hpp"
#include "qdf/error.hpp"
#include "qdf/feature_map.hpp"
#include "qdf/matrix.hpp"
#include "qdf/mlp.hpp"

namespace qdf {

/// Cross-orthogonal projection pair. One 2C×2C orthogonal matrix Q is split
/// column-wise: the first C columns (scaled by 1/√C) project the first
/// modality, the last C the second. By construction w_rᵀ·w_s = 0 and
/// ‖w_r‖_F = ‖w_s‖_F = 1.
struct OrthoProjector {
    Matrix joint; // Q, 2C × 2C
    Matrix w_r;   // 2C × C
    Matrix w_s;   // 2C × C
    std::size_t channels_in = 0;
    std::size_t channels_out = 0;

    static OrthoProjector from_joint(Matrix q) {
        if (q.rows() != q.cols() || q.rows() % 2 != 0)
            throw ContractViolation("OrthoProjector: joint matrix must be square with even size");
        OrthoProjector p;
        p.channels_out = q.rows();
        p.channels_in = q.rows() / 2;
        const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(p.channels_in));
        p.w_r = Matrix(p.channels_out, p.channels_in);
        p.w_s = Matrix(p.channels_out, p.channels_in);
        for (std::size_t i = 0; i < p.channels_out; ++i)
            for (std::size_t j = 0; j < p.channels_in; ++j) {
                p.w_r(i, j) = q(i, j) * inv_sqrt_c;
                p.w_s(i, j) = q(i, j + p.channels_in) * inv_sqrt_c;
            }
        p.joint = std::move(q);
        return p;
    }
};

/// Whitening initialization: Q = raw·(rawᵀraw)^(−1/2), computed through the
/// eigendecomposition of the (uncentered) covariance. raw must be full rank.
inline OrthoProjector init_projector(const Matrix& raw) {
    if (raw.rows() != raw.cols())
        throw ContractViolation("init_projector: raw matrix must be square");
    const Matrix cov = matmul_tn(raw, raw);
    const SymEig eig = sym_eig(cov);
    const double smallest = eig.eigenvalues.back();
    if (smallest < 1e-10)
        throw DegenerateInput("init_projector: covariance eigenvalue " +
                              std::to_string(smallest) + " below 1e-10, raw is rank-deficient");
    const std::size_t n = raw.rows();
    // (rawᵀraw)^(−1/2) = V diag(λ^(−1/2)) Vᵀ
    Matrix scaled = eig.eigenvectors; // n × n, columns scaled by λ^(−1/2)
    for (std::size_t j = 0; j < n; ++j) {
        const double inv_sqrt = 1.0 / std::sqrt(eig.eigenvalues[j]);
        for (std::size_t i = 0; i < n; ++i) scaled(i, j) *= inv_sqrt;
    }
    const Matrix inv_sqrt_cov = matmul_nt(scaled, eig.eigenvectors);
    return OrthoProjector::from_joint(matmul(raw, inv_sqrt_cov));
}

/// Maps pooled reliability to channel-wise fusion evidence. Input is the
/// scalar mean of a sample's combined reliability map; output has one entry
/// per fused channel.
struct FusionParams {
    Mlp reliability_mlp; // 1 → hidden → 2C
};

/// Pools each sample's reliability map to its mean and runs it through the
/// fusion MLP. combined is B × N; the result is B × 2C.
inline Matrix channel_reliability(const Matrix& combined, const FusionParams& params) {
    const std::size_t b = combined.rows();
    const std::size_t n = combined.cols();
    Matrix pooled(b, 1);
    for (std::size_t s = 0; s < b; ++s) {
        double acc = 0.0;
        const double* row = combined.row(s);
        for (std::size_t i = 0; i < n; ++i) acc += row[i];
        pooled(s, 0) = acc / static_cast<double>(n);
    }
    return params.reliability_mlp.forward(pooled);
}

/// Two-way channel softmax, computed stably; γ_r + γ_s = 1 per channel.
inline std::pair<Matrix, Matrix> fusion_weights(const Matrix& r_tilde_r,
                                                const Matrix& r_tilde_s) {
    if (!r_tilde_r.same_shape(r_tilde_s))
        throw ContractViolation("fusion_weights: shape mismatch");
    Matrix gamma_r(r_tilde_r.rows(), r_tilde_r.cols());
    Matrix gamma_s(r_tilde_r.rows(), r_tilde_r.cols());
    for (std::size_t i = 0; i < r_tilde_r.size(); ++i) {
        const double a = r_tilde_r.data()[i];
        const double b = r_tilde_s.data()[i];
        const double m = std::max(a, b);
        const double ea = std::exp(a - m);
        const double eb = std::exp(b - m);
        const double g = ea / (ea + eb);
        gamma_r.data()[i] = g;
        gamma_s.data()[i] = 1.0 - g;
    }
    return {std::move(gamma_r), std::move(gamma_s)};
}

/// Projects both modalities into their orthogonal subspaces and blends them
/// channel-wise: fused(i,c) = γ_r(c)·(w_r F_r(i))(c) + γ_s(c)·(w_s F_s(i))(c).
/// Gammas are per sample and broadcast across positions.
inline FeatureMap ocnf_fuse(const FeatureMap& f_r, const FeatureMap& f_s,
                            const OrthoProjector& proj, const Matrix& gamma_r,
                            const Matrix& gamma_s) {
    if (f_r.samples != f_s.samples || f_r.positions != f_s.positions ||
        f_r.channels != f_s.channels)
        throw ContractViolation("ocnf_fuse: feature maps differ in shape");
    if (f_r.channels != proj.channels_in)
        throw ContractViolation("ocnf_fuse: projector expects " +
                                std::to_string(proj.channels_in) + " input channels");
    if (gamma_r.rows() != f_r.samples || gamma_r.cols() != proj.channels_out ||
        !gamma_r.same_shape(gamma_s))
        throw ContractViolation("ocnf_fuse: gamma shape mismatch");

    FeatureMap fused(f_r.samples, f_r.positions, proj.channels_out);
    for (std::size_t s = 0; s < f_r.samples; ++s) {
        const Matrix fr = f_r.slice(s);
        const Matrix fs = f_s.slice(s);
        const Matrix pr = matmul_nt(fr, proj.w_r); // N × 2C
        const Matrix ps = matmul_nt(fs, proj.w_s);
        const double* gr = gamma_r.row(s);
        const double* gs = gamma_s.row(s);
        double* out = fused.sample(s);
        for (std::size_t i = 0; i < f_r.positions; ++i) {
            const double* pri = pr.row(i);
            const double* psi = ps.row(i);
            double* orow = out + i * proj.channels_out;
            for (std::size_t c = 0; c < proj.channels_out; ++c)
                orow[c] = gr[c] * pri[c] + gs[c] * psi[c];
        }
    }
    return fused;
}

} // namespace qdf
