#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qdf/error.hpp"
#include "qdf/feature_map.hpp"
#include "qdf/rng.hpp"

namespace qdf {

/// Per-sample modality availability. At least one modality is always kept,
/// so the missing rate cannot exceed (M−1)/M = 0.5 for two modalities.
struct AvailabilitySchedule {
    struct Entry {
        bool optical_available = true;
        bool sar_available = true;
    };
    std::vector<Entry> entries;
    std::uint64_t seed = 0;
    double target_mr = 0.0;
};

enum class DegradationKind { ZeroFill, GaussianNoise, PatchOcclusion };

/// Stand-in for imperfect modality reconstruction: either drop to zeros, add
/// seeded Gaussian noise, or occlude a contiguous block of positions.
struct DegradationSpec {
    DegradationKind kind = DegradationKind::ZeroFill;
    double severity = 0.0; // noise std, or occluded-position fraction
    std::uint64_t seed = 0;

    void validate() const {
        if (severity < 0.0)
            throw ContractViolation("DegradationSpec: severity must be >= 0");
        if (kind == DegradationKind::PatchOcclusion && severity > 1.0)
            throw ContractViolation("DegradationSpec: occlusion fraction must be <= 1");
    }
};

/// Draws one availability pattern per sample. Each sample independently
/// drops the optical modality with probability p, the SAR modality with
/// probability p, and stays complete with probability 1−2p, where
/// p = target_mr. Expected missing rate equals p: a dropped sample loses one
/// of its two modality slots, so E[MR] = 1 − (2−2p·1)/2 = p.
inline AvailabilitySchedule sample_availability(std::size_t num_samples, double target_mr,
                                                std::uint64_t seed) {
    if (target_mr < 0.0 || target_mr > 0.5)
        throw ProtocolBound("sample_availability: target_mr " + std::to_string(target_mr) +
                            " outside [0, 0.5]");
    AvailabilitySchedule schedule;
    schedule.seed = seed;
    schedule.target_mr = target_mr;
    schedule.entries.resize(num_samples);
    for (std::size_t i = 0; i < num_samples; ++i) {
        Rng rng = Rng::substream(seed, i);
        const double u = rng.uniform();
        auto& entry = schedule.entries[i];
        if (u < target_mr) {
            entry.optical_available = false;
        } else if (u < 2.0 * target_mr) {
            entry.sar_available = false;
        }
    }
    return schedule;
}

/// MR = 1 − (Σ a_i)/(L·M) with M = 2 modalities.
inline double measured_mr(const AvailabilitySchedule& schedule) {
    if (schedule.entries.empty())
        throw ContractViolation("measured_mr: schedule is empty");
    std::size_t available = 0;
    for (const auto& entry : schedule.entries)
        available += static_cast<std::size_t>(entry.optical_available) +
                     static_cast<std::size_t>(entry.sar_available);
    const double total = 2.0 * static_cast<double>(schedule.entries.size());
    return 1.0 - static_cast<double>(available) / total;
}

/// Applies a degradation to one slice, deterministically in the spec's seed.
inline Matrix degrade(const Matrix& slice, const DegradationSpec& spec) {
    spec.validate();
    Matrix out = slice;
    switch (spec.kind) {
    case DegradationKind::ZeroFill:
        for (double& v : out.data()) v = 0.0;
        break;
    case DegradationKind::GaussianNoise: {
        Rng rng(spec.seed);
        for (double& v : out.data()) v += spec.severity * rng.normal();
        break;
    }
    case DegradationKind::PatchOcclusion: {
        const std::size_t n = out.rows();
        const auto occluded =
            static_cast<std::size_t>(std::llround(spec.severity * static_cast<double>(n)));
        if (occluded == 0) break;
        Rng rng(spec.seed);
        const std::size_t start = (occluded >= n) ? 0 : rng.below(n - occluded + 1);
        for (std::size_t i = start; i < std::min(n, start + occluded); ++i)
            for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) = 0.0;
        break;
    }
    }
    return out;
}

/// Replaces each unavailable modality slice according to the policy:
/// zero-filling, or a degraded copy of the clean slice standing in for an
/// imperfect reconstruction. Available slices pass through untouched.
inline std::pair<FeatureMap, FeatureMap> apply_missing(const FeatureMap& f_r,
                                                       const FeatureMap& f_s,
                                                       const AvailabilitySchedule& schedule,
                                                       const DegradationSpec& policy) {
    if (schedule.entries.size() != f_r.samples || f_r.samples != f_s.samples)
        throw ContractViolation("apply_missing: schedule length does not match sample count");
    policy.validate();
    FeatureMap out_r = f_r;
    FeatureMap out_s = f_s;
    for (std::size_t i = 0; i < schedule.entries.size(); ++i) {
        const auto& entry = schedule.entries[i];
        if (!entry.optical_available) {
            DegradationSpec sub = policy;
            sub.seed = splitmix64(policy.seed ^ (2 * i));
            out_r.set_slice(i, degrade(f_r.slice(i), sub));
        }
        if (!entry.sar_available) {
            DegradationSpec sub = policy;
            sub.seed = splitmix64(policy.seed ^ (2 * i + 1));
            out_s.set_slice(i, degrade(f_s.slice(i), sub));
        }
    }
    return {std::move(out_r), std::move(out_s)};
}

} // namespace qdf
