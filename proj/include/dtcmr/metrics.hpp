#pragma once

#include <array>
#include <optional>
#include <utility>
#include <vector>

#include "dtcmr/image.hpp"
#include "dtcmr/series.hpp"

namespace dtcmr {

struct EigenSystem {
    std::array<double, 3> values;       // descending
    std::array<Direction, 3> vectors;   // orthonormal, vectors[k] pairs with values[k]
};

/// Closed-form eigen-decomposition of a symmetric 3x3 tensor (trigonometric roots, the
/// best-separated eigenvector from cross products, the other two from the exact 2x2
/// problem in its orthogonal complement). The primary eigenvector is oriented so its
/// component along `circumferential` is non-negative; without one, so its largest-magnitude
/// component is positive.
EigenSystem eig3_symmetric(const Sym3& d, const std::optional<Direction>& circumferential = std::nullopt);

struct NeReport {
    double ne_percent = 0.0;
    std::size_t counted_pixels = 0;
    std::vector<std::pair<std::size_t, std::size_t>> flagged_pixels;  // (row, col)
};

/// Share of masked pixels whose smallest eigenvalue is negative.
NeReport negative_eigen_percent(const TensorField& tensor, const MyocardiumMask& mask);

/// Helix angle in degrees within [-90, 90]; NaN outside the mask and at the centroid.
Image helix_angle_map(const TensorField& tensor, const MyocardiumMask& mask);

struct HagProfile {
    double angle_deg = 0.0;
    double slope = 0.0;  // deg per % depth
    double intercept = 0.0;
    double r2 = 0.0;
    double rmse = 0.0;   // deg
    bool included = false;
    bool too_short = false;  // fewer than 3 samples; never included
    std::vector<std::pair<double, double>> samples;  // (depth %, HA deg)
};

struct HagReport {
    std::vector<HagProfile> profiles;
    double mean_r2 = 0.0;    // NaN when nothing is included
    double mean_rmse = 0.0;  // NaN when nothing is included
    std::size_t included_count = 0;
    std::size_t short_count = 0;
};

/// Radial rays from the mask centroid at uniform angles. Each ray takes the masked pixels
/// it passes through (nearest pixel, each once), maps pixel-centre radius to depth
/// 0..100 % between its first and last sample, and fits HA against depth by least squares.
/// A profile is included when its slope is negative and its R^2 exceeds 0.3.
HagReport hag_line_profiles(const Image& ha_map, const MyocardiumMask& mask, int n_profiles = 72);

struct FieldErrorStats {
    double median = 0.0;
    double mean = 0.0;
    double p95 = 0.0;
    std::size_t pixels = 0;
};

/// Endpoint-error statistics over the mask (all pixels when mask is null).
FieldErrorStats field_error(const DenseField& recovered, const DenseField& truth, const MyocardiumMask* mask = nullptr);
/// Same statistics pooled over the masked pixels of every frame.
FieldErrorStats field_error(const std::vector<DenseField>& recovered, const std::vector<DenseField>& truth,
                            const MyocardiumMask* mask = nullptr);

}  // namespace dtcmr
