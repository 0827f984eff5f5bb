#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "qdf/error.hpp"
#include "qdf/feature_map.hpp"
#include "qdf/matrix.hpp"
#include "qdf/mlp.hpp"
#include "qdf/rng.hpp"

namespace qdf {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// K learnable reference tokens, one bank per modality. Rows are kept away
/// from zero (norm >= 1e-8) so cosine similarities stay defined.
struct TokenBank {
    Matrix tokens; // K × C
    std::size_t iteration_index = 0;

    std::size_t count() const { return tokens.rows(); }
    std::size_t channels() const { return tokens.cols(); }

    /// Seeded init: spherically distributed rows scaled to unit norm, so the
    /// expected-magnitude reference starts well conditioned.
    static TokenBank init(std::size_t k, std::size_t c, Rng& rng) {
        if (k < 1) throw ContractViolation("TokenBank: K must be >= 1");
        TokenBank bank;
        bank.tokens = Matrix(k, c);
        for (std::size_t i = 0; i < k; ++i) {
            double norm = 0.0;
            while (norm < 1e-8) {
                double* row = bank.tokens.row(i);
                norm = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    row[j] = rng.normal();
                    norm += row[j] * row[j];
                }
                norm = std::sqrt(norm);
            }
            double* row = bank.tokens.row(i);
            for (std::size_t j = 0; j < c; ++j) row[j] /= norm;
        }
        return bank;
    }

    void check_rows_nonzero() const {
        const auto norms = row_l2_norms(tokens);
        for (std::size_t k = 0; k < norms.size(); ++k)
            if (norms[k] < 1e-8)
                throw NumericError("TokenBank: token row " + std::to_string(k) +
                                   " collapsed below 1e-8");
    }
};

struct DmqaParams {
    double alpha_raw = 0.0; // α = logistic(alpha_raw), in-loop combination
    double beta_raw = 0.0;  // β = logistic(beta_raw), final combination
    double epsilon = 1e-6;  // deviation-normalization stabilizer
    std::size_t iterations = 4;
    Mlp token_mlp; // C → hidden → C, output layer zero-initialized

    double alpha() const { return logistic(alpha_raw); }
    double beta() const { return logistic(beta_raw); }
};

/// Per-position reliability scores for a feature map, plus the per-sample
/// token banks after the final refinement iteration.
struct ReliabilityResult {
    Matrix magnitude; // B × N, L in [0,1]
    Matrix direction; // B × N, D in [0,1]
    Matrix combined;  // B × N, R in [0,1]
    std::vector<TokenBank> final_tokens; // one evolved bank per sample

    // per-iteration history, filled only when tracing is enabled
    std::vector<Matrix> iter_magnitude;
    std::vector<Matrix> iter_direction;
    std::vector<Matrix> iter_combined;
};

// ---------------------------------------------------------------------------
// per-slice operations
// ---------------------------------------------------------------------------

/// Scaled dot-product attention of each position against the token bank:
/// softmax over the K tokens of F(i)·T_kᵀ/√C. Rows sum to 1.
inline Matrix token_attention(const Matrix& f, const TokenBank& bank) {
    if (f.cols() != bank.channels())
        throw ContractViolation("token_attention: channel dims disagree");
    Matrix logits = matmul_nt(f, bank.tokens); // N × K
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.cols()));
    for (double& v : logits.data()) v *= scale;
    return softmax_rows(logits);
}

/// Magnitude reliability: complement of the per-slice max-normalized
/// deviation between each feature norm and its attention-weighted expected
/// token norm. The normalization max is taken per slice (per sample, per
/// modality).
inline std::vector<double> magnitude_reliability(const Matrix& f, const TokenBank& bank,
                                                 const Matrix& attn, double epsilon) {
    const std::size_t n = f.rows();
    const auto token_norms = row_l2_norms(bank.tokens);
    const auto feature_norms = row_l2_norms(f);
    std::vector<double> deviation(n);
    for (std::size_t i = 0; i < n; ++i) {
        double expected = 0.0;
        const double* arow = attn.row(i);
        for (std::size_t k = 0; k < token_norms.size(); ++k)
            expected += arow[k] * token_norms[k];
        deviation[i] = std::abs(feature_norms[i] - expected);
    }
    double max_dev = 0.0;
    for (double d : deviation) max_dev = std::max(max_dev, d);
    std::vector<double> reliability(n);
    for (std::size_t i = 0; i < n; ++i)
        reliability[i] = 1.0 - deviation[i] / (max_dev + epsilon);
    return reliability;
}

/// Directional reliability: max cosine similarity against the bank, clamped
/// to [0,1]. An exactly-zero feature vector has no direction and scores 0.
inline std::vector<double> directional_reliability(const Matrix& f, const TokenBank& bank) {
    if (f.cols() != bank.channels())
        throw ContractViolation("directional_reliability: channel dims disagree");
    const std::size_t n = f.rows();
    const std::size_t k_count = bank.count();
    const auto token_norms = row_l2_norms(bank.tokens);
    const auto feature_norms = row_l2_norms(f);
    const Matrix dots = matmul_nt(f, bank.tokens); // N × K
    std::vector<double> reliability(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (feature_norms[i] == 0.0) continue;
        double best = -std::numeric_limits<double>::infinity();
        const double* drow = dots.row(i);
        for (std::size_t k = 0; k < k_count; ++k)
            best = std::max(best, drow[k] / (feature_norms[i] * token_norms[k]));
        reliability[i] = std::clamp(best, 0.0, 1.0);
    }
    return reliability;
}

/// Convex combination R = weight·l + (1−weight)·d.
inline std::vector<double> combine_reliability(const std::vector<double>& l,
                                               const std::vector<double>& d, double weight) {
    if (l.size() != d.size())
        throw ContractViolation("combine_reliability: length mismatch");
    std::vector<double> r(l.size());
    for (std::size_t i = 0; i < l.size(); ++i)
        r[i] = weight * l[i] + (1.0 - weight) * d[i];
    return r;
}

/// One refinement step: reliability-modulated spatial attention per token,
/// convex aggregation over positions, MLP residual update of the bank.
/// Softmax here runs along the N positions of each token row.
inline TokenBank token_update(const Matrix& f, const TokenBank& bank,
                              const std::vector<double>& reliability,
                              const DmqaParams& params) {
    if (reliability.size() != f.rows())
        throw ContractViolation("token_update: reliability length mismatch");
    Matrix logits = matmul_nt(bank.tokens, f); // K × N
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.cols()));
    for (std::size_t k = 0; k < logits.rows(); ++k) {
        double* row = logits.row(k);
        for (std::size_t n = 0; n < logits.cols(); ++n) row[n] *= scale * reliability[n];
    }
    const Matrix attn = softmax_rows(logits); // K × N, rows sum to 1
    const Matrix aggregated = matmul(attn, f); // K × C
    Matrix updated = params.token_mlp.forward(aggregated);
    for (std::size_t i = 0; i < updated.size(); ++i)
        updated.data()[i] += bank.tokens.data()[i];
    TokenBank next;
    next.tokens = std::move(updated);
    next.iteration_index = bank.iteration_index + 1;
    next.check_rows_nonzero();
    return next;
}

// ---------------------------------------------------------------------------
// traced assessment (consumed by the gradient module)
// ---------------------------------------------------------------------------

/// Everything the reverse pass needs from one refinement iteration.
struct DmqaIterTrace {
    Matrix tokens_in;                // K × C
    std::vector<double> token_norms; // K
    Matrix attn;                     // N × K, position→token weights
    std::vector<double> feature_norms;
    std::vector<double> expected;  // attention-weighted token norms, N
    std::vector<double> deviation; // N
    std::size_t max_dev_index = 0;
    std::vector<double> mag; // L, N
    std::vector<double> cos_raw;        // winning cosine before clamp, N
    std::vector<std::size_t> cos_index; // winning token per position
    std::vector<double> dir;            // D, N
    std::vector<double> combined;       // R, N
    Matrix dots;                        // N × K, unscaled F·Tᵀ inner products
    Matrix spatial_attn;                // K × N
    Mlp::Trace mlp;                     // input holds the aggregated features
};

/// Final recompute with the evolved tokens (no token update afterwards).
struct DmqaFinalTrace {
    Matrix tokens;
    std::vector<double> token_norms;
    Matrix attn;
    std::vector<double> feature_norms;
    std::vector<double> expected;
    std::vector<double> deviation;
    std::size_t max_dev_index = 0;
    std::vector<double> mag;
    std::vector<double> cos_raw;
    std::vector<std::size_t> cos_index;
    std::vector<double> dir;
};

/// Full per-sample trace plus the smallest distance to any nondifferentiable
/// boundary met during the forward pass (abs kink, argmax tie, clamp edge,
/// zero feature norm). Finite-difference checks re-seed configs that land too
/// close to one of those.
struct AssessTrace {
    std::vector<DmqaIterTrace> iters;
    DmqaFinalTrace final_pass;
    double boundary_margin = std::numeric_limits<double>::infinity();
};

namespace detail {

struct MagDirOut {
    std::vector<double> token_norms;
    Matrix dots; // N × K, unscaled F·Tᵀ; reused by attention, cosines, update
    Matrix attn;
    std::vector<double> feature_norms;
    std::vector<double> expected;
    std::vector<double> deviation;
    std::size_t max_dev_index;
    std::vector<double> mag;
    std::vector<double> cos_raw;
    std::vector<std::size_t> cos_index;
    std::vector<double> dir;
};

/// Shared magnitude+direction evaluation for one slice against one bank.
/// Tracks boundary proximity while it scans.
inline MagDirOut mag_dir_pass(const Matrix& f, const Matrix& tokens, double epsilon,
                              double& margin) {
    MagDirOut out;
    const std::size_t n = f.rows();
    const std::size_t k_count = tokens.rows();
    out.token_norms = row_l2_norms(tokens);
    out.feature_norms = row_l2_norms(f);

    out.dots = matmul_nt(f, tokens); // N × K
    const Matrix& logits = out.dots;
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.cols()));
    Matrix scaled = logits;
    for (double& v : scaled.data()) v *= scale;
    out.attn = softmax_rows(scaled);

    out.expected.resize(n);
    out.deviation.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double expected = 0.0;
        const double* arow = out.attn.row(i);
        for (std::size_t k = 0; k < k_count; ++k) expected += arow[k] * out.token_norms[k];
        out.expected[i] = expected;
        const double raw = out.feature_norms[i] - expected;
        out.deviation[i] = std::abs(raw);
        margin = std::min(margin, std::abs(raw)); // |·| kink at 0
    }
    // argmax of the deviations; gradient flows through the winner only
    out.max_dev_index = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (out.deviation[i] > out.deviation[out.max_dev_index]) out.max_dev_index = i;
    if (n > 1) {
        double second = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i)
            if (i != out.max_dev_index) second = std::max(second, out.deviation[i]);
        margin = std::min(margin, out.deviation[out.max_dev_index] - second);
    }
    const double max_dev = out.deviation[out.max_dev_index];
    out.mag.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        out.mag[i] = 1.0 - out.deviation[i] / (max_dev + epsilon);

    out.cos_raw.assign(n, 0.0);
    out.cos_index.assign(n, 0);
    out.dir.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double fnorm = out.feature_norms[i];
        margin = std::min(margin, fnorm); // zero-feature branch boundary
        if (fnorm == 0.0) continue;
        const double* lrow = logits.row(i);
        double best = -std::numeric_limits<double>::infinity();
        double second = -std::numeric_limits<double>::infinity();
        std::size_t best_k = 0;
        for (std::size_t k = 0; k < k_count; ++k) {
            const double c = lrow[k] / (fnorm * out.token_norms[k]);
            if (c > best) {
                second = best;
                best = c;
                best_k = k;
            } else {
                second = std::max(second, c);
            }
        }
        if (k_count > 1) margin = std::min(margin, best - second);
        margin = std::min(margin, std::abs(best));       // clamp edge at 0
        margin = std::min(margin, std::abs(best - 1.0)); // clamp edge at 1
        out.cos_raw[i] = best;
        out.cos_index[i] = best_k;
        out.dir[i] = std::clamp(best, 0.0, 1.0);
    }
    return out;
}

struct AssessSampleOut {
    std::vector<double> mag;
    std::vector<double> dir;
    std::vector<double> combined;
    TokenBank final_tokens;
    // per-iteration copies, only kept when iter_history is requested
    std::vector<std::vector<double>> iter_mag, iter_dir, iter_combined;
};

/// Runs the full iterative assessment on one slice. Tokens evolve privately
/// for this sample starting from the shared learnable bank.
inline AssessSampleOut assess_sample(const Matrix& f, const TokenBank& t0,
                                     const DmqaParams& params, AssessTrace* trace,
                                     bool iter_history = false) {
    if (params.iterations < 1)
        throw ContractViolation("dmqa_assess: iterations must be >= 1");
    const double alpha = params.alpha();
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.cols()));
    double margin = std::numeric_limits<double>::infinity();

    AssessSampleOut out;
    TokenBank bank = t0;
    for (std::size_t iter = 0; iter < params.iterations; ++iter) {
        MagDirOut md = mag_dir_pass(f, bank.tokens, params.epsilon, margin);
        std::vector<double> combined = combine_reliability(md.mag, md.dir, alpha);

        // reliability-modulated spatial attention and the residual MLP update;
        // the modulated logits are the transposed inner products from the
        // magnitude pass, scaled per position by the combined reliability
        const std::size_t k_count = bank.tokens.rows();
        const std::size_t n_count = f.rows();
        Matrix mod(k_count, n_count);
        for (std::size_t k = 0; k < k_count; ++k) {
            double* row = mod.row(k);
            for (std::size_t n = 0; n < n_count; ++n)
                row[n] = md.dots(n, k) * (scale * combined[n]);
        }
        Matrix spatial = softmax_rows(mod);
        Matrix aggregated = matmul(spatial, f);
        Mlp::Trace mlp_trace;
        Matrix delta = params.token_mlp.forward(aggregated, trace ? &mlp_trace : nullptr);
        Matrix next_tokens = bank.tokens;
        for (std::size_t i = 0; i < next_tokens.size(); ++i)
            next_tokens.data()[i] += delta.data()[i];

        if (iter_history) {
            out.iter_mag.push_back(md.mag);
            out.iter_dir.push_back(md.dir);
            out.iter_combined.push_back(combined);
        }
        if (trace) {
            DmqaIterTrace it;
            it.tokens_in = bank.tokens;
            it.token_norms = std::move(md.token_norms);
            it.attn = std::move(md.attn);
            it.feature_norms = std::move(md.feature_norms);
            it.expected = std::move(md.expected);
            it.deviation = std::move(md.deviation);
            it.max_dev_index = md.max_dev_index;
            it.mag = std::move(md.mag);
            it.cos_raw = std::move(md.cos_raw);
            it.cos_index = std::move(md.cos_index);
            it.dir = std::move(md.dir);
            it.combined = combined;
            it.dots = std::move(md.dots);
            it.spatial_attn = std::move(spatial);
            it.mlp = std::move(mlp_trace);
            trace->iters.push_back(std::move(it));
        }

        bank.tokens = std::move(next_tokens);
        bank.iteration_index += 1;
        bank.check_rows_nonzero();
    }

    // reliability from the final bank
    MagDirOut md = mag_dir_pass(f, bank.tokens, params.epsilon, margin);
    const double beta = params.beta();
    out.combined = combine_reliability(md.mag, md.dir, beta);
    out.mag = md.mag;
    out.dir = md.dir;
    if (trace) {
        trace->final_pass.tokens = bank.tokens;
        trace->final_pass.token_norms = std::move(md.token_norms);
        trace->final_pass.attn = std::move(md.attn);
        trace->final_pass.feature_norms = std::move(md.feature_norms);
        trace->final_pass.expected = std::move(md.expected);
        trace->final_pass.deviation = std::move(md.deviation);
        trace->final_pass.max_dev_index = md.max_dev_index;
        trace->final_pass.mag = md.mag;
        trace->final_pass.cos_raw = std::move(md.cos_raw);
        trace->final_pass.cos_index = std::move(md.cos_index);
        trace->final_pass.dir = md.dir;
        trace->boundary_margin = margin;
    }
    out.final_tokens = std::move(bank);
    return out;
}

} // namespace detail

/// Iterative token-based reliability assessment of a whole feature map.
/// Runs `iterations` refinement rounds per sample, then recomputes magnitude
/// and direction scores with the evolved tokens and blends them with β.
inline ReliabilityResult dmqa_assess(const FeatureMap& f, const TokenBank& t0,
                                     const DmqaParams& params, bool with_iteration_trace = false) {
    ReliabilityResult result;
    const std::size_t b = f.samples;
    const std::size_t n = f.positions;
    result.magnitude = Matrix(b, n);
    result.direction = Matrix(b, n);
    result.combined = Matrix(b, n);
    result.final_tokens.reserve(b);
    if (with_iteration_trace) {
        result.iter_magnitude.assign(params.iterations, Matrix(b, n));
        result.iter_direction.assign(params.iterations, Matrix(b, n));
        result.iter_combined.assign(params.iterations, Matrix(b, n));
    }
    for (std::size_t s = 0; s < b; ++s) {
        auto sample_out =
            detail::assess_sample(f.slice(s), t0, params, nullptr, with_iteration_trace);
        for (std::size_t i = 0; i < n; ++i) {
            result.magnitude(s, i) = sample_out.mag[i];
            result.direction(s, i) = sample_out.dir[i];
            result.combined(s, i) = sample_out.combined[i];
        }
        if (with_iteration_trace) {
            for (std::size_t t = 0; t < params.iterations; ++t)
                for (std::size_t i = 0; i < n; ++i) {
                    result.iter_magnitude[t](s, i) = sample_out.iter_mag[t][i];
                    result.iter_direction[t](s, i) = sample_out.iter_dir[t][i];
                    result.iter_combined[t](s, i) = sample_out.iter_combined[t][i];
                }
        }
        result.final_tokens.push_back(std::move(sample_out.final_tokens));
    }
    return result;
}

} // namespace qdf
