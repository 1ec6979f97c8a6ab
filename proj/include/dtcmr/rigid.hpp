#pragma once

#include "dtcmr/image.hpp"

namespace dtcmr {

enum class CrossPowerNormalization { phase, none };

struct RigidOptions {
    int upsample_factor = 10;
    CrossPowerNormalization normalization = CrossPowerNormalization::phase;
};

/// Translation t with moving(p + t) ~ reference(p): phase correlation for the integer
/// peak, then an upsampled-DFT search (1/upsample_factor px) and a parabolic vertex fit.
/// Flat inputs return zero with a warning.
Vec2 estimate_shift(const Image& moving, const Image& reference, const RigidOptions& options = {});

/// estimate_shift packaged as a uniform correcting field.
DenseField rigid_baseline(const Image& moving, const Image& reference, const RigidOptions& options = {});

/// Gauss-Newton refinement of t minimizing sum w(p) (a moving(p + t) + c - reference(p))^2
/// over t, gain a and offset c, starting from `initial`. Returns `initial` with a warning
/// when the system is singular.
Vec2 refine_shift_weighted(const Image& moving, const Image& reference, const Image& weights,
                           Vec2 initial = {}, int max_iterations = 30);

/// Circular sub-pixel translation by Fourier phase ramp: out(p) = image(p - shift).
Image fourier_shift(const Image& image, Vec2 shift);

}  // namespace dtcmr
