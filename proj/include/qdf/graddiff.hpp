#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "qdf/config.hpp"
#include "qdf/dmqa.hpp"
#include "qdf/error.hpp"
#include "qdf/feature_map.hpp"
#include "qdf/matrix.hpp"
#include "qdf/mlp.hpp"
#include "qdf/ocnf.hpp"
#include "qdf/rng.hpp"

namespace qdf {

enum class Variant { MeanBaseline, DmqaOnly, OcnfOnly, Full };

inline const char* variant_name(Variant v) {
    switch (v) {
    case Variant::MeanBaseline: return "mean_baseline";
    case Variant::DmqaOnly: return "dmqa_only";
    case Variant::OcnfOnly: return "ocnf_only";
    case Variant::Full: return "full";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& name) {
    if (name == "mean_baseline") return Variant::MeanBaseline;
    if (name == "dmqa_only") return Variant::DmqaOnly;
    if (name == "ocnf_only") return Variant::OcnfOnly;
    if (name == "full") return Variant::Full;
    throw ConfigError("unknown variant '" + name + "'");
}

/// Every learnable tensor of the pipeline, plus the fixed orthonormal lift
/// used by the non-projector variants. All sub-streams are drawn during init
/// regardless of variant so that shared pieces (probe, tokens, ...) start
/// identically across variants for a given seed.
struct ParamSet {
    Variant variant = Variant::Full;
    std::size_t channels = 0;
    std::size_t num_classes = 0;

    TokenBank tokens_r, tokens_s;
    DmqaParams dmqa;     // shared token MLP, alpha, beta
    FusionParams fusion; // shared reliability MLP
    Matrix projector_q;  // 2C × 2C, orthogonal between steps
    Matrix probe_w;      // classes × 2C
    std::vector<double> probe_b;
    Matrix baseline_lift; // 2C × C, fixed orthonormal columns; never trained

    static ParamSet init(const RunConfig& cfg, Variant variant, std::uint64_t seed) {
        ParamSet p;
        p.variant = variant;
        p.channels = cfg.channels;
        p.num_classes = cfg.num_classes;
        const std::size_t c = cfg.channels;
        const std::size_t c2 = 2 * c;

        Rng tokens_rng_r = Rng::substream(seed, 101);
        Rng tokens_rng_s = Rng::substream(seed, 102);
        p.tokens_r = TokenBank::init(cfg.tokens, c, tokens_rng_r);
        p.tokens_s = TokenBank::init(cfg.tokens, c, tokens_rng_s);

        Rng mlp_rng = Rng::substream(seed, 103);
        p.dmqa.token_mlp = Mlp::init(c, cfg.hidden(), c, mlp_rng);
        p.dmqa.alpha_raw = std::log(cfg.alpha_init / (1.0 - cfg.alpha_init));
        p.dmqa.beta_raw = std::log(cfg.beta_init / (1.0 - cfg.beta_init));
        p.dmqa.epsilon = cfg.epsilon;
        p.dmqa.iterations = cfg.iterations;

        Rng fusion_rng = Rng::substream(seed, 104);
        p.fusion.reliability_mlp = Mlp::init(1, c, c2, fusion_rng);

        Rng proj_rng = Rng::substream(seed, 105);
        Matrix raw(c2, c2);
        for (double& v : raw.data()) v = proj_rng.normal();
        p.projector_q = init_projector(raw).joint;

        Rng probe_rng = Rng::substream(seed, 106);
        p.probe_w = Matrix(cfg.num_classes, c2);
        for (double& v : p.probe_w.data()) v = 0.01 * probe_rng.normal();
        p.probe_b.assign(cfg.num_classes, 0.0);

        Rng lift_rng = Rng::substream(seed, 107);
        Matrix lift_raw(c2, c);
        for (double& v : lift_raw.data()) v = lift_rng.normal();
        p.baseline_lift = qr_orthonormalize(lift_raw);
        return p;
    }
};

/// Gradient accumulator mirroring ParamSet's trainable tensors.
struct ParamGrads {
    Matrix tokens_r, tokens_s;
    Mlp::Grads dmqa_mlp;
    double alpha_raw = 0.0;
    double beta_raw = 0.0;
    Mlp::Grads fusion_mlp;
    Matrix projector_q;
    Matrix probe_w;
    std::vector<double> probe_b;

    static ParamGrads zeros_like(const ParamSet& p) {
        ParamGrads g;
        g.tokens_r = Matrix(p.tokens_r.tokens.rows(), p.tokens_r.tokens.cols());
        g.tokens_s = Matrix(p.tokens_s.tokens.rows(), p.tokens_s.tokens.cols());
        g.dmqa_mlp = Mlp::Grads::zeros_like(p.dmqa.token_mlp);
        g.fusion_mlp = Mlp::Grads::zeros_like(p.fusion.reliability_mlp);
        g.projector_q = Matrix(p.projector_q.rows(), p.projector_q.cols());
        g.probe_w = Matrix(p.probe_w.rows(), p.probe_w.cols());
        g.probe_b.assign(p.probe_b.size(), 0.0);
        return g;
    }
};

enum class ParamGroup { TokensR, TokensS, DmqaMlp, AlphaBeta, FusionMlp, ProjectorQ, Probe };

inline const char* group_name(ParamGroup g) {
    switch (g) {
    case ParamGroup::TokensR: return "tokens_r";
    case ParamGroup::TokensS: return "tokens_s";
    case ParamGroup::DmqaMlp: return "dmqa_mlp";
    case ParamGroup::AlphaBeta: return "alpha_beta";
    case ParamGroup::FusionMlp: return "fusion_mlp";
    case ParamGroup::ProjectorQ: return "projector_q";
    case ParamGroup::Probe: return "probe";
    }
    return "?";
}

/// Parameter groups actually trained by a variant. The baseline lift is fixed
/// by design and never appears here.
inline std::vector<ParamGroup> trained_groups(Variant v) {
    switch (v) {
    case Variant::MeanBaseline:
        return {ParamGroup::Probe};
    case Variant::DmqaOnly:
        return {ParamGroup::TokensR, ParamGroup::TokensS, ParamGroup::DmqaMlp,
                ParamGroup::AlphaBeta, ParamGroup::Probe};
    case Variant::OcnfOnly:
        return {ParamGroup::FusionMlp, ParamGroup::ProjectorQ, ParamGroup::Probe};
    case Variant::Full:
        return {ParamGroup::TokensR,   ParamGroup::TokensS,    ParamGroup::DmqaMlp,
                ParamGroup::AlphaBeta, ParamGroup::FusionMlp,  ParamGroup::ProjectorQ,
                ParamGroup::Probe};
    }
    return {};
}

namespace detail {

inline void collect_mlp(Mlp& m, std::vector<double*>& out) {
    for (double& v : m.w1.data()) out.push_back(&v);
    for (double& v : m.b1) out.push_back(&v);
    for (double& v : m.w2.data()) out.push_back(&v);
    for (double& v : m.b2) out.push_back(&v);
}

inline void collect_mlp_grads(Mlp::Grads& g, std::vector<double*>& out) {
    for (double& v : g.w1.data()) out.push_back(&v);
    for (double& v : g.b1) out.push_back(&v);
    for (double& v : g.w2.data()) out.push_back(&v);
    for (double& v : g.b2) out.push_back(&v);
}

} // namespace detail

/// Pointers to the scalars of one parameter group, in a fixed documented
/// order (matching group_grad_values below).
inline std::vector<double*> group_values(ParamSet& p, ParamGroup g) {
    std::vector<double*> out;
    switch (g) {
    case ParamGroup::TokensR:
        for (double& v : p.tokens_r.tokens.data()) out.push_back(&v);
        break;
    case ParamGroup::TokensS:
        for (double& v : p.tokens_s.tokens.data()) out.push_back(&v);
        break;
    case ParamGroup::DmqaMlp:
        detail::collect_mlp(p.dmqa.token_mlp, out);
        break;
    case ParamGroup::AlphaBeta:
        out.push_back(&p.dmqa.alpha_raw);
        out.push_back(&p.dmqa.beta_raw);
        break;
    case ParamGroup::FusionMlp:
        detail::collect_mlp(p.fusion.reliability_mlp, out);
        break;
    case ParamGroup::ProjectorQ:
        for (double& v : p.projector_q.data()) out.push_back(&v);
        break;
    case ParamGroup::Probe:
        for (double& v : p.probe_w.data()) out.push_back(&v);
        for (double& v : p.probe_b) out.push_back(&v);
        break;
    }
    return out;
}

inline std::vector<double*> group_grad_values(ParamGrads& g, ParamGroup group) {
    std::vector<double*> out;
    switch (group) {
    case ParamGroup::TokensR:
        for (double& v : g.tokens_r.data()) out.push_back(&v);
        break;
    case ParamGroup::TokensS:
        for (double& v : g.tokens_s.data()) out.push_back(&v);
        break;
    case ParamGroup::DmqaMlp:
        detail::collect_mlp_grads(g.dmqa_mlp, out);
        break;
    case ParamGroup::AlphaBeta:
        out.push_back(&g.alpha_raw);
        out.push_back(&g.beta_raw);
        break;
    case ParamGroup::FusionMlp:
        detail::collect_mlp_grads(g.fusion_mlp, out);
        break;
    case ParamGroup::ProjectorQ:
        for (double& v : g.projector_q.data()) out.push_back(&v);
        break;
    case ParamGroup::Probe:
        for (double& v : g.probe_w.data()) out.push_back(&v);
        for (double& v : g.probe_b) out.push_back(&v);
        break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// local derivatives
// ---------------------------------------------------------------------------

/// Reverse of softmax_rows: dx_j = y_j·(dy_j − Σ_k dy_k·y_k) per row.
inline Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
    Matrix dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        const double* yrow = y.row(i);
        const double* drow = dy.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) dot += drow[j] * yrow[j];
        double* out = dx.row(i);
        for (std::size_t j = 0; j < y.cols(); ++j) out[j] = yrow[j] * (drow[j] - dot);
    }
    return dx;
}

namespace detail {

inline const Matrix& segment_tokens(const DmqaIterTrace& seg) { return seg.tokens_in; }
inline const Matrix& segment_tokens(const DmqaFinalTrace& seg) { return seg.tokens; }

/// Shared piece of one magnitude+direction segment's reverse pass. Routes
/// gradients from dL (magnitude) and dD (direction) back to the segment's
/// token matrix. The deviation max and the cosine max are subgradients
/// through the recorded winners; the clamp passes gradient only strictly
/// inside (0,1).
template <typename Segment>
inline Matrix mag_dir_backward(const Matrix& f, const Segment& seg,
                               const std::vector<double>& d_mag,
                               const std::vector<double>& d_dir, double epsilon) {
    const std::size_t n = f.rows();
    const std::size_t k_count = seg.token_norms.size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.cols()));
    const Matrix& tokens = segment_tokens(seg);
    Matrix d_tokens(k_count, f.cols());

    // magnitude: L_i = 1 − δ_i/(M+ε) with M = δ at the recorded argmax
    const double max_dev = seg.deviation[seg.max_dev_index];
    const double denom = max_dev + epsilon;
    std::vector<double> d_dev(n, 0.0);
    double d_max = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d_dev[i] += -d_mag[i] / denom;
        d_max += d_mag[i] * seg.deviation[i] / (denom * denom);
    }
    d_dev[seg.max_dev_index] += d_max;

    // δ_i = |fnorm_i − expected_i|; features are data, so only the expected
    // magnitude path carries parameter gradient
    std::vector<double> d_expected(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double sign = (seg.feature_norms[i] - seg.expected[i]) >= 0.0 ? 1.0 : -1.0;
        d_expected[i] = -sign * d_dev[i];
    }

    // expected_i = Σ_k attn_ik·τ_k
    Matrix d_attn(n, k_count);
    std::vector<double> d_token_norm(k_count, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double* darow = d_attn.row(i);
        const double* arow = seg.attn.row(i);
        for (std::size_t k = 0; k < k_count; ++k) {
            darow[k] = d_expected[i] * seg.token_norms[k];
            d_token_norm[k] += d_expected[i] * arow[k];
        }
    }

    // attn = softmax(F·Tᵀ·scale) per row
    const Matrix d_scaled = softmax_rows_backward(seg.attn, d_attn);
    Matrix d_from_attn = matmul_tn(d_scaled, f); // K × C
    for (std::size_t i = 0; i < d_from_attn.size(); ++i)
        d_tokens.data()[i] += scale * d_from_attn.data()[i];

    // τ_k = ‖T_k‖
    for (std::size_t k = 0; k < k_count; ++k) {
        if (d_token_norm[k] == 0.0) continue;
        const double inv = d_token_norm[k] / seg.token_norms[k];
        const double* trow = tokens.row(k);
        double* drow = d_tokens.row(k);
        for (std::size_t c = 0; c < f.cols(); ++c) drow[c] += inv * trow[c];
    }

    // direction: winner-only cosine, clamp active strictly inside (0,1)
    for (std::size_t i = 0; i < n; ++i) {
        if (d_dir[i] == 0.0) continue;
        const double raw = seg.cos_raw[i];
        if (!(raw > 0.0 && raw < 1.0)) continue;
        const double fnorm = seg.feature_norms[i];
        if (fnorm == 0.0) continue;
        const std::size_t k = seg.cos_index[i];
        const double tnorm = seg.token_norms[k];
        const double* frow = f.row(i);
        const double* trow = tokens.row(k);
        double* drow = d_tokens.row(k);
        const double inv_ft = 1.0 / (fnorm * tnorm);
        const double cos_over_t2 = raw / (tnorm * tnorm);
        for (std::size_t c = 0; c < f.cols(); ++c)
            drow[c] += d_dir[i] * (frow[c] * inv_ft - cos_over_t2 * trow[c]);
    }
    return d_tokens;
}

/// Full reverse pass of one sample's assessment: d(combined reliability) →
/// gradients for the shared token bank, the token MLP and α, β.
inline void dmqa_backward_sample(const Matrix& f, const AssessTrace& trace,
                                 const DmqaParams& params, const std::vector<double>& d_combined,
                                 Matrix& d_tokens0, Mlp::Grads& d_mlp, double& d_alpha_raw,
                                 double& d_beta_raw) {
    const std::size_t n = f.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(f.cols()));
    const double alpha = params.alpha();
    const double beta = params.beta();

    // final segment: R = β·L + (1−β)·D with the evolved tokens
    const DmqaFinalTrace& fin = trace.final_pass;
    std::vector<double> d_mag(n), d_dir(n);
    double d_beta = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d_beta += d_combined[i] * (fin.mag[i] - fin.dir[i]);
        d_mag[i] = d_combined[i] * beta;
        d_dir[i] = d_combined[i] * (1.0 - beta);
    }
    d_beta_raw += d_beta * beta * (1.0 - beta);
    Matrix d_tokens = mag_dir_backward(f, fin, d_mag, d_dir, params.epsilon);

    // iterations in reverse; d_tokens carries ∂loss/∂T^(t+1)
    for (std::size_t idx = trace.iters.size(); idx-- > 0;) {
        const DmqaIterTrace& it = trace.iters[idx];
        const std::size_t k_count = it.tokens_in.rows();

        // T^(t+1) = MLP(agg) + T^(t)
        Matrix d_agg = params.token_mlp.backward(d_tokens, it.mlp, d_mlp);
        Matrix d_tokens_in = d_tokens; // residual branch

        // agg = A·F
        Matrix d_spatial = matmul_nt(d_agg, f); // K × N
        // A = softmax over positions of the modulated logits
        Matrix d_mod = softmax_rows_backward(it.spatial_attn, d_spatial);
        // mod(k,n) = dots(n,k)·scale·R_n
        std::vector<double> d_combined_iter(n, 0.0);
        Matrix d_raw(k_count, n);
        for (std::size_t k = 0; k < k_count; ++k) {
            const double* dmrow = d_mod.row(k);
            double* drrow = d_raw.row(k);
            for (std::size_t j = 0; j < n; ++j) {
                d_combined_iter[j] += dmrow[j] * it.dots(j, k) * scale;
                drrow[j] = dmrow[j] * scale * it.combined[j];
            }
        }
        // dots(n,k) = Σ_c T(k,c)·F(n,c)
        Matrix d_from_mod = matmul(d_raw, f); // K × C
        for (std::size_t i = 0; i < d_from_mod.size(); ++i)
            d_tokens_in.data()[i] += d_from_mod.data()[i];

        // R^(t) = α·L + (1−α)·D
        double d_alpha = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d_alpha += d_combined_iter[i] * (it.mag[i] - it.dir[i]);
            d_mag[i] = d_combined_iter[i] * alpha;
            d_dir[i] = d_combined_iter[i] * (1.0 - alpha);
        }
        d_alpha_raw += d_alpha * alpha * (1.0 - alpha);

        Matrix d_seg = mag_dir_backward(f, it, d_mag, d_dir, params.epsilon);
        for (std::size_t i = 0; i < d_seg.size(); ++i)
            d_tokens_in.data()[i] += d_seg.data()[i];

        d_tokens = std::move(d_tokens_in);
    }

    for (std::size_t i = 0; i < d_tokens.size(); ++i)
        d_tokens0.data()[i] += d_tokens.data()[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// per-sample pipeline forward
// ---------------------------------------------------------------------------

namespace detail {

/// Forward state for one sample; holds whatever the variant's reverse pass
/// will need when tracing is on.
struct SampleForward {
    Matrix fused; // N × 2C
    std::vector<double> rel_r, rel_s;

    AssessTrace trace_r, trace_s;
    Mlp::Trace fusion_trace_r, fusion_trace_s;
    Matrix proj_r, proj_s; // N × 2C projected features (ocnf paths)
    std::vector<double> gamma_r, gamma_s;
    Matrix gated;                   // N × C (dmqa_only path)
    std::vector<double> wr, ws;     // gating weights (dmqa_only path)
    double boundary_margin = std::numeric_limits<double>::infinity();
    bool has_reliability = false;
};

inline std::vector<double> fusion_mlp_row(const ParamSet& p, double pooled, Mlp::Trace* trace) {
    Matrix input(1, 1);
    input(0, 0) = pooled;
    Matrix out = p.fusion.reliability_mlp.forward(input, trace);
    return out.data();
}

inline SampleForward forward_sample(const ParamSet& p, const OrthoProjector& proj,
                                    const Matrix& fr, const Matrix& fs, bool with_trace) {
    const std::size_t n = fr.rows();
    const std::size_t c2 = 2 * p.channels;
    SampleForward out;

    const bool needs_dmqa = p.variant == Variant::DmqaOnly || p.variant == Variant::Full;
    if (needs_dmqa) {
        auto res_r = assess_sample(fr, p.tokens_r, p.dmqa, with_trace ? &out.trace_r : nullptr);
        auto res_s = assess_sample(fs, p.tokens_s, p.dmqa, with_trace ? &out.trace_s : nullptr);
        out.rel_r = std::move(res_r.combined);
        out.rel_s = std::move(res_s.combined);
        out.has_reliability = true;
        if (with_trace)
            out.boundary_margin =
                std::min(out.trace_r.boundary_margin, out.trace_s.boundary_margin);
    }

    switch (p.variant) {
    case Variant::MeanBaseline: {
        Matrix mean(n, fr.cols());
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean.data()[i] = 0.5 * (fr.data()[i] + fs.data()[i]);
        out.fused = matmul_nt(mean, p.baseline_lift); // N × 2C
        break;
    }
    case Variant::DmqaOnly: {
        // reliability-normalized weighted mean, then the fixed lift
        out.wr.resize(n);
        out.ws.resize(n);
        out.gated = Matrix(n, fr.cols());
        for (std::size_t i = 0; i < n; ++i) {
            const double denom = out.rel_r[i] + out.rel_s[i] + p.dmqa.epsilon;
            out.wr[i] = out.rel_r[i] / denom;
            out.ws[i] = out.rel_s[i] / denom;
            const double* frow = fr.row(i);
            const double* srow = fs.row(i);
            double* grow = out.gated.row(i);
            for (std::size_t c = 0; c < fr.cols(); ++c)
                grow[c] = out.wr[i] * frow[c] + out.ws[i] * srow[c];
        }
        out.fused = matmul_nt(out.gated, p.baseline_lift);
        break;
    }
    case Variant::OcnfOnly:
    case Variant::Full: {
        double pooled_r = 0.5;
        double pooled_s = 0.5;
        if (p.variant == Variant::Full) {
            pooled_r = 0.0;
            pooled_s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                pooled_r += out.rel_r[i];
                pooled_s += out.rel_s[i];
            }
            pooled_r /= static_cast<double>(n);
            pooled_s /= static_cast<double>(n);
        }
        const auto rt_r =
            fusion_mlp_row(p, pooled_r, with_trace ? &out.fusion_trace_r : nullptr);
        const auto rt_s =
            fusion_mlp_row(p, pooled_s, with_trace ? &out.fusion_trace_s : nullptr);
        out.gamma_r.resize(c2);
        out.gamma_s.resize(c2);
        for (std::size_t c = 0; c < c2; ++c) {
            const double m = std::max(rt_r[c], rt_s[c]);
            const double ea = std::exp(rt_r[c] - m);
            const double eb = std::exp(rt_s[c] - m);
            const double g = ea / (ea + eb);
            out.gamma_r[c] = g;
            out.gamma_s[c] = 1.0 - g;
        }
        out.proj_r = matmul_nt(fr, proj.w_r); // N × 2C
        out.proj_s = matmul_nt(fs, proj.w_s);
        out.fused = Matrix(n, c2);
        for (std::size_t i = 0; i < n; ++i) {
            const double* pr = out.proj_r.row(i);
            const double* ps = out.proj_s.row(i);
            double* frow = out.fused.row(i);
            for (std::size_t c = 0; c < c2; ++c)
                frow[c] = out.gamma_r[c] * pr[c] + out.gamma_s[c] * ps[c];
        }
        break;
    }
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// objective
// ---------------------------------------------------------------------------

struct BackwardResult {
    double objective = 0.0;
    ParamGrads grads;
    /// Smallest distance to a nondifferentiable boundary met in the batch.
    double boundary_margin = std::numeric_limits<double>::infinity();
};

namespace detail {

struct ProbeOut {
    std::vector<double> pooled; // 2C
    std::vector<double> probs;  // classes
    double loss = 0.0;
    std::size_t predicted = 0;
};

inline ProbeOut probe_forward(const ParamSet& p, const Matrix& fused, int label) {
    ProbeOut out;
    const std::size_t c2 = fused.cols();
    out.pooled.assign(c2, 0.0);
    for (std::size_t i = 0; i < fused.rows(); ++i) {
        const double* row = fused.row(i);
        for (std::size_t c = 0; c < c2; ++c) out.pooled[c] += row[c];
    }
    const double inv_n = 1.0 / static_cast<double>(fused.rows());
    for (double& v : out.pooled) v *= inv_n;

    const std::size_t classes = p.probe_w.rows();
    std::vector<double> logits(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        const double* wrow = p.probe_w.row(k);
        double acc = p.probe_b[k];
        for (std::size_t c = 0; c < c2; ++c) acc += wrow[c] * out.pooled[c];
        logits[k] = acc;
    }
    double max_logit = logits[0];
    out.predicted = 0;
    for (std::size_t k = 1; k < classes; ++k)
        if (logits[k] > max_logit) {
            max_logit = logits[k];
            out.predicted = k;
        }
    double sum = 0.0;
    out.probs.resize(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        out.probs[k] = std::exp(logits[k] - max_logit);
        sum += out.probs[k];
    }
    for (double& v : out.probs) v /= sum;
    if (label >= 0) out.loss = -std::log(out.probs[static_cast<std::size_t>(label)]);
    return out;
}

} // namespace detail

/// Cross-entropy of the linear probe over fused features, averaged over the
/// batch; optionally accumulates exact reverse-mode gradients for every
/// trainable group of the variant.
inline double loss_and_grad(const ParamSet& p, const FeatureMap& f_r, const FeatureMap& f_s,
                            const std::vector<int>& labels, ParamGrads* grads,
                            double* boundary_margin = nullptr) {
    if (f_r.samples != f_s.samples || f_r.samples != labels.size())
        throw ContractViolation("loss_and_grad: batch sizes disagree");
    const std::size_t batch = f_r.samples;
    const std::size_t n = f_r.positions;
    const std::size_t c2 = 2 * p.channels;
    const OrthoProjector proj = OrthoProjector::from_joint(p.projector_q);
    const bool with_trace = grads != nullptr;
    const double inv_batch = 1.0 / static_cast<double>(batch);

    double total_loss = 0.0;
    double margin = std::numeric_limits<double>::infinity();

    for (std::size_t s = 0; s < batch; ++s) {
        const Matrix fr = f_r.slice(s);
        const Matrix fs = f_s.slice(s);
        detail::SampleForward fwd = detail::forward_sample(p, proj, fr, fs, with_trace);
        margin = std::min(margin, fwd.boundary_margin);

        const int label = labels[s];
        if (label < 0 || static_cast<std::size_t>(label) >= p.num_classes)
            throw ContractViolation("loss_and_grad: label out of range at sample " +
                                    std::to_string(s));
        detail::ProbeOut probe = detail::probe_forward(p, fwd.fused, label);
        total_loss += probe.loss;
        if (!grads) continue;

        // probe backward
        std::vector<double> d_logits = probe.probs;
        d_logits[static_cast<std::size_t>(label)] -= 1.0;
        for (double& v : d_logits) v *= inv_batch;
        std::vector<double> d_pooled(c2, 0.0);
        for (std::size_t k = 0; k < p.num_classes; ++k) {
            const double dk = d_logits[k];
            grads->probe_b[k] += dk;
            double* gw = grads->probe_w.row(k);
            const double* wrow = p.probe_w.row(k);
            for (std::size_t c = 0; c < c2; ++c) {
                gw[c] += dk * probe.pooled[c];
                d_pooled[c] += dk * wrow[c];
            }
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        // d_fused(i,c) = d_pooled(c)/N for every position; kept implicit below

        switch (p.variant) {
        case Variant::MeanBaseline:
            break; // only the probe is trainable
        case Variant::DmqaOnly: {
            // fused = gated·liftᵀ → d_gated = d_fused·lift
            std::vector<double> d_gated_row(fr.cols(), 0.0); // same for every position
            for (std::size_t c2i = 0; c2i < c2; ++c2i) {
                const double d = d_pooled[c2i] * inv_n;
                for (std::size_t c = 0; c < fr.cols(); ++c)
                    d_gated_row[c] += d * p.baseline_lift(c2i, c);
            }
            std::vector<double> d_rel_r(n), d_rel_s(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double* frow = fr.row(i);
                const double* srow = fs.row(i);
                double d_wr = 0.0;
                double d_ws = 0.0;
                for (std::size_t c = 0; c < fr.cols(); ++c) {
                    d_wr += d_gated_row[c] * frow[c];
                    d_ws += d_gated_row[c] * srow[c];
                }
                const double denom = fwd.rel_r[i] + fwd.rel_s[i] + p.dmqa.epsilon;
                const double inv_d2 = 1.0 / (denom * denom);
                d_rel_r[i] = (d_wr * (denom - fwd.rel_r[i]) - d_ws * fwd.rel_s[i]) * inv_d2;
                d_rel_s[i] = (d_ws * (denom - fwd.rel_s[i]) - d_wr * fwd.rel_r[i]) * inv_d2;
            }
            detail::dmqa_backward_sample(fr, fwd.trace_r, p.dmqa, d_rel_r, grads->tokens_r,
                                         grads->dmqa_mlp, grads->alpha_raw, grads->beta_raw);
            detail::dmqa_backward_sample(fs, fwd.trace_s, p.dmqa, d_rel_s, grads->tokens_s,
                                         grads->dmqa_mlp, grads->alpha_raw, grads->beta_raw);
            break;
        }
        case Variant::OcnfOnly:
        case Variant::Full: {
            // fused(i,c) = γ_r(c)·pr(i,c) + γ_s(c)·ps(i,c). d_fused rows are
            // identical (mean pooling), so the projection gradient collapses
            // to an outer product with the feature column sums.
            std::vector<double> d_gamma_r(c2), d_gamma_s(c2);
            for (std::size_t c = 0; c < c2; ++c) {
                const double d = d_pooled[c] * inv_n;
                double sum_pr = 0.0;
                double sum_ps = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    sum_pr += fwd.proj_r(i, c);
                    sum_ps += fwd.proj_s(i, c);
                }
                d_gamma_r[c] = d * sum_pr;
                d_gamma_s[c] = d * sum_ps;
            }
            std::vector<double> col_sum_r(fr.cols(), 0.0), col_sum_s(fr.cols(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double* frow = fr.row(i);
                const double* srow = fs.row(i);
                for (std::size_t c = 0; c < fr.cols(); ++c) {
                    col_sum_r[c] += frow[c];
                    col_sum_s[c] += srow[c];
                }
            }
            // pr = fr·w_rᵀ → d_w_r(o,c) = d_pr_row(o)·Σ_i fr(i,c); dQ = d_w/√C
            const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(p.channels));
            for (std::size_t o = 0; o < c2; ++o) {
                const double d_pr_row = d_pooled[o] * inv_n * fwd.gamma_r[o];
                const double d_ps_row = d_pooled[o] * inv_n * fwd.gamma_s[o];
                double* qrow = grads->projector_q.row(o);
                for (std::size_t j = 0; j < p.channels; ++j) {
                    qrow[j] += d_pr_row * col_sum_r[j] * inv_sqrt_c;
                    qrow[j + p.channels] += d_ps_row * col_sum_s[j] * inv_sqrt_c;
                }
            }
            // channel softmax pair
            Matrix d_rt_r(1, c2), d_rt_s(1, c2);
            for (std::size_t c = 0; c < c2; ++c) {
                const double gg = fwd.gamma_r[c] * fwd.gamma_s[c];
                const double d = (d_gamma_r[c] - d_gamma_s[c]) * gg;
                d_rt_r(0, c) = d;
                d_rt_s(0, c) = -d;
            }
            const Matrix d_pooled_r =
                p.fusion.reliability_mlp.backward(d_rt_r, fwd.fusion_trace_r, grads->fusion_mlp);
            const Matrix d_pooled_s =
                p.fusion.reliability_mlp.backward(d_rt_s, fwd.fusion_trace_s, grads->fusion_mlp);
            if (p.variant == Variant::Full) {
                // pooled = mean of the combined reliability map
                std::vector<double> d_rel_r(n, d_pooled_r(0, 0) * inv_n);
                std::vector<double> d_rel_s(n, d_pooled_s(0, 0) * inv_n);
                detail::dmqa_backward_sample(fr, fwd.trace_r, p.dmqa, d_rel_r, grads->tokens_r,
                                             grads->dmqa_mlp, grads->alpha_raw,
                                             grads->beta_raw);
                detail::dmqa_backward_sample(fs, fwd.trace_s, p.dmqa, d_rel_s, grads->tokens_s,
                                             grads->dmqa_mlp, grads->alpha_raw,
                                             grads->beta_raw);
            }
            break;
        }
        }
    }

    if (boundary_margin) *boundary_margin = margin;
    const double mean_loss = total_loss * inv_batch;
    if (!std::isfinite(mean_loss))
        throw NumericError("loss_and_grad: non-finite objective");
    return mean_loss;
}

/// Exact reverse-mode derivatives of the batch objective for every parameter
/// group the variant trains.
inline BackwardResult backward(const ParamSet& p, const FeatureMap& f_r, const FeatureMap& f_s,
                               const std::vector<int>& labels) {
    BackwardResult result;
    result.grads = ParamGrads::zeros_like(p);
    result.objective =
        loss_and_grad(p, f_r, f_s, labels, &result.grads, &result.boundary_margin);
    for (ParamGroup g : trained_groups(p.variant)) {
        for (double* v : group_grad_values(result.grads, g))
            if (!std::isfinite(*v))
                throw NumericError(std::string("backward: non-finite gradient in group ") +
                                   group_name(g));
    }
    return result;
}

// ---------------------------------------------------------------------------
// finite-difference verification
// ---------------------------------------------------------------------------

struct GradReport {
    struct Group {
        std::string name;
        double max_rel_err = 0.0;
        std::size_t coords_checked = 0;
    };
    double h = 0.0;
    double objective = 0.0;
    std::vector<Group> groups;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& g : groups) m = std::max(m, g.max_rel_err);
        return m;
    }
};

/// Central differences (f(θ+h)−f(θ−h))/2h per coordinate against the analytic
/// gradient. Coordinates may be subsampled (seeded) per group; 0 = all.
inline GradReport fd_check(const ParamSet& params, const FeatureMap& f_r, const FeatureMap& f_s,
                           const std::vector<int>& labels, double h,
                           std::size_t max_coords_per_group = 0, std::uint64_t subsample_seed = 0) {
    if (h <= 0.0) throw ContractViolation("fd_check: h must be > 0");
    GradReport report;
    report.h = h;

    BackwardResult analytic = backward(params, f_r, f_s, labels);
    report.objective = analytic.objective;

    ParamSet work = params;
    for (ParamGroup group : trained_groups(params.variant)) {
        auto values = group_values(work, group);
        auto grad_ptrs = group_grad_values(analytic.grads, group);

        std::vector<std::size_t> coords(values.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (max_coords_per_group > 0 && coords.size() > max_coords_per_group) {
            // seeded Fisher-Yates prefix
            Rng rng = Rng::substream(subsample_seed, static_cast<std::uint64_t>(group));
            for (std::size_t i = 0; i < max_coords_per_group; ++i) {
                const std::size_t j = i + rng.below(coords.size() - i);
                std::swap(coords[i], coords[j]);
            }
            coords.resize(max_coords_per_group);
        }

        GradReport::Group group_report;
        group_report.name = group_name(group);
        group_report.coords_checked = coords.size();
        for (std::size_t idx : coords) {
            const double saved = *values[idx];
            *values[idx] = saved + h;
            const double plus = loss_and_grad(work, f_r, f_s, labels, nullptr);
            *values[idx] = saved - h;
            const double minus = loss_and_grad(work, f_r, f_s, labels, nullptr);
            *values[idx] = saved;
            const double numeric = (plus - minus) / (2.0 * h);
            const double analytic_v = *grad_ptrs[idx];
            const double rel = std::abs(analytic_v - numeric) /
                               std::max({std::abs(analytic_v), std::abs(numeric), 1e-8});
            group_report.max_rel_err = std::max(group_report.max_rel_err, rel);
        }
        report.groups.push_back(std::move(group_report));
    }
    return report;
}

// ---------------------------------------------------------------------------
// constraint-preserving optimization
// ---------------------------------------------------------------------------

/// One Riemannian descent step on the orthogonal manifold: project the
/// Euclidean gradient onto the tangent space at q, step, and retract with QR.
inline Matrix retract_projector(const Matrix& q, const Matrix& euclid_grad, double lr) {
    if (q.rows() != q.cols() || !q.same_shape(euclid_grad))
        throw ContractViolation("retract_projector: shape mismatch");
    {
        const Matrix gram = matmul_tn(q, q);
        double drift = 0.0;
        for (std::size_t i = 0; i < gram.rows(); ++i)
            for (std::size_t j = 0; j < gram.cols(); ++j)
                drift = std::max(drift, std::abs(gram(i, j) - (i == j ? 1.0 : 0.0)));
        if (drift > 1e-8)
            throw ContractViolation("retract_projector: input drifted off the manifold (" +
                                    std::to_string(drift) + ")");
    }
    // G_tan = G − Q·sym(QᵀG)
    const Matrix qtg = matmul_tn(q, euclid_grad);
    Matrix sym(qtg.rows(), qtg.cols());
    for (std::size_t i = 0; i < qtg.rows(); ++i)
        for (std::size_t j = 0; j < qtg.cols(); ++j)
            sym(i, j) = 0.5 * (qtg(i, j) + qtg(j, i));
    const Matrix correction = matmul(q, sym);
    Matrix stepped = q;
    for (std::size_t i = 0; i < stepped.size(); ++i)
        stepped.data()[i] -= lr * (euclid_grad.data()[i] - correction.data()[i]);
    try {
        return qr_orthonormalize(stepped);
    } catch (const DegenerateInput& e) {
        throw DegenerateStep(std::string("retract_projector: ") + e.what());
    }
}

/// Plain gradient descent on the Euclidean groups; the projector is routed
/// through the manifold retraction. On a degenerate retraction the step size
/// for the projector is halved a few times before giving up.
inline void sgd_step(ParamSet& p, ParamGrads& grads, double lr) {
    for (ParamGroup group : trained_groups(p.variant)) {
        if (group == ParamGroup::ProjectorQ) {
            double step = lr;
            for (int attempt = 0;; ++attempt) {
                try {
                    p.projector_q = retract_projector(p.projector_q, grads.projector_q, step);
                    break;
                } catch (const DegenerateStep&) {
                    if (attempt >= 8) throw;
                    step *= 0.5;
                }
            }
            continue;
        }
        auto values = group_values(p, group);
        auto gptrs = group_grad_values(grads, group);
        for (std::size_t i = 0; i < values.size(); ++i) *values[i] -= lr * *gptrs[i];
    }
}

} // namespace qdf
