#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qdf/error.hpp"
#include "qdf/matrix.hpp"

namespace qdf {

/// Per-modality feature tensor, samples × positions × channels, row-major.
struct FeatureMap {
    std::size_t samples = 0;
    std::size_t positions = 0;
    std::size_t channels = 0;
    std::vector<double> values;

    FeatureMap() = default;
    FeatureMap(std::size_t b, std::size_t n, std::size_t c)
        : samples(b), positions(n), channels(c), values(b * n * c, 0.0) {
        if (n < 1 || c < 1)
            throw ContractViolation("FeatureMap: positions and channels must be >= 1");
    }

    std::size_t slice_size() const noexcept { return positions * channels; }

    double* sample(std::size_t s) { return values.data() + s * slice_size(); }
    const double* sample(std::size_t s) const { return values.data() + s * slice_size(); }

    /// Copy of one sample as a positions × channels matrix.
    Matrix slice(std::size_t s) const {
        Matrix m(positions, channels);
        const double* src = sample(s);
        std::copy(src, src + slice_size(), m.data().begin());
        return m;
    }

    void set_slice(std::size_t s, const Matrix& m) {
        if (m.rows() != positions || m.cols() != channels)
            throw ContractViolation("FeatureMap::set_slice: shape mismatch");
        std::copy(m.data().begin(), m.data().end(), sample(s));
    }

    bool finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

} // namespace qdf
