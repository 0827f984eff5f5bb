#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "qdf/error.hpp"
#include "qdf/matrix.hpp"
#include "qdf/rng.hpp"

namespace qdf {

/// Two affine layers with a tanh in between. The output layer is
/// zero-initialized so residual updates built on top of this block start as
/// exact identities.
struct Mlp {
    Matrix w1;              // hidden × in
    std::vector<double> b1; // hidden
    Matrix w2;              // out × hidden
    std::vector<double> b2; // out

    std::size_t in_dim() const { return w1.cols(); }
    std::size_t hidden_dim() const { return w1.rows(); }
    std::size_t out_dim() const { return w2.rows(); }

    static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
        Mlp mlp;
        mlp.w1 = Matrix(hidden, in);
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : mlp.w1.data()) v = scale * rng.normal();
        mlp.b1.assign(hidden, 0.0);
        mlp.w2 = Matrix(out, hidden); // zeros
        mlp.b2.assign(out, 0.0);
        return mlp;
    }

    struct Trace {
        Matrix input;  // rows × in
        Matrix hidden; // rows × hidden, post-tanh
    };

    /// Applies the block to each row of x independently; records the
    /// intermediates needed by backward() when trace is non-null.
    Matrix forward(const Matrix& x, Trace* trace = nullptr) const {
        if (x.cols() != in_dim())
            throw ContractViolation("Mlp::forward: input width mismatch");
        Matrix hidden = matmul_nt(x, w1); // rows × hidden
        for (std::size_t i = 0; i < hidden.rows(); ++i) {
            double* hrow = hidden.row(i);
            for (std::size_t j = 0; j < hidden.cols(); ++j)
                hrow[j] = std::tanh(hrow[j] + b1[j]);
        }
        Matrix out = matmul_nt(hidden, w2); // rows × out
        for (std::size_t i = 0; i < out.rows(); ++i) {
            double* orow = out.row(i);
            for (std::size_t j = 0; j < out.cols(); ++j) orow[j] += b2[j];
        }
        if (trace) {
            trace->input = x;
            trace->hidden = std::move(hidden);
            return out;
        }
        return out;
    }

    struct Grads {
        Matrix w1;
        std::vector<double> b1;
        Matrix w2;
        std::vector<double> b2;

        static Grads zeros_like(const Mlp& mlp) {
            Grads g;
            g.w1 = Matrix(mlp.w1.rows(), mlp.w1.cols());
            g.b1.assign(mlp.b1.size(), 0.0);
            g.w2 = Matrix(mlp.w2.rows(), mlp.w2.cols());
            g.b2.assign(mlp.b2.size(), 0.0);
            return g;
        }
    };

    /// Reverse pass for one forward() call. Accumulates parameter gradients
    /// into g and returns the gradient with respect to the input rows.
    Matrix backward(const Matrix& d_out, const Trace& trace, Grads& g) const {
        // output layer: out = hidden·w2ᵀ + b2
        for (std::size_t i = 0; i < d_out.rows(); ++i) {
            const double* drow = d_out.row(i);
            for (std::size_t j = 0; j < d_out.cols(); ++j) g.b2[j] += drow[j];
        }
        Matrix d_w2 = matmul_tn(d_out, trace.hidden); // out × hidden
        for (std::size_t i = 0; i < d_w2.size(); ++i) g.w2.data()[i] += d_w2.data()[i];

        Matrix d_hidden = matmul(d_out, w2); // rows × hidden
        // tanh backward: d_pre = d_hidden ⊙ (1 − h²)
        for (std::size_t i = 0; i < d_hidden.rows(); ++i) {
            double* drow = d_hidden.row(i);
            const double* hrow = trace.hidden.row(i);
            for (std::size_t j = 0; j < d_hidden.cols(); ++j)
                drow[j] *= 1.0 - hrow[j] * hrow[j];
        }
        for (std::size_t i = 0; i < d_hidden.rows(); ++i) {
            const double* drow = d_hidden.row(i);
            for (std::size_t j = 0; j < d_hidden.cols(); ++j) g.b1[j] += drow[j];
        }
        Matrix d_w1 = matmul_tn(d_hidden, trace.input); // hidden × in
        for (std::size_t i = 0; i < d_w1.size(); ++i) g.w1.data()[i] += d_w1.data()[i];

        return matmul(d_hidden, w1); // rows × in
    }
};

} // namespace qdf
