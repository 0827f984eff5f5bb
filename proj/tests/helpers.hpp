#pragma once

#include "qdf/matrix.hpp"
#include "qdf/rng.hpp"

namespace qdf::test {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = scale * rng.normal();
    return m;
}

inline Matrix random_symmetric(std::size_t n, Rng& rng) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const double v = rng.normal();
            m(i, j) = v;
            m(j, i) = v;
        }
    return m;
}

} // namespace qdf::test
