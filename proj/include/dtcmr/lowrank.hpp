#pragma once

#include <vector>

#include "dtcmr/image.hpp"
#include "dtcmr/series.hpp"

namespace dtcmr {

/// Rank-R outer-product model of the (H*W) x N frame matrix.
/// spatial_basis[r] has unit Frobenius norm; dynamic_factors[r] carries the singular value.
struct ImplicitTemplate {
    std::vector<Image> spatial_basis;
    std::vector<std::vector<double>> dynamic_factors;
    std::vector<double> singular_values;
    int iterations = 0;

    std::size_t rank() const { return spatial_basis.size(); }

    /// Frame i of the rank-`components` reconstruction (all components by default).
    Image reconstruct_frame(std::size_t frame, std::size_t components = static_cast<std::size_t>(-1)) const;
};

struct FactorizeOptions {
    double tolerance = 1e-10;
    int max_iterations = 500;
};

/// Best rank-R approximation (truncated SVD semantics) by orthogonal iteration with
/// Rayleigh-Ritz on the frame Gram matrix, started from the per-frame means.
/// Sign convention: each dynamic factor's largest-magnitude entry is positive.
ImplicitTemplate factorize(const std::vector<Image>& frames, int rank, const FactorizeOptions& options = {});
ImplicitTemplate factorize(const DiffusionSeries& series, int rank, const FactorizeOptions& options = {});

/// spatial_basis[0] scaled by the mean of dynamic_factors[0]: the groupwise reference image.
Image rank1_projection(const std::vector<Image>& frames);
Image rank1_projection(const DiffusionSeries& series);

/// Rank-1 projection of the b = 0 frames, clamped at zero. Falls back (with a warning)
/// to the single b = 0 frame when only one exists.
Image s0_reference(const DiffusionSeries& series);

/// Lag-1 autocorrelation; a constant sequence counts as perfectly correlated (1).
double lag1_autocorrelation(const std::vector<double>& values);

/// Frame order used for component selection: all repetitions of the first encoding,
/// then all of the second, and so on (b = 0 frames form one encoding).
std::vector<std::size_t> encoding_major_order(const DiffusionSeries& series);

/// Number of leading Gram eigenvalues above the Marchenko-Pastur noise bulk
/// (eigenvalues sorted descending, `pixels` rows in the frame matrix).
int marchenko_pastur_signal_rank(const std::vector<double>& gram_eigenvalues, std::size_t pixels);

struct DenoiseOptions {
    int max_rank = 8;
    double autocorr_threshold = 0.3;
    /// Also keep components whose energy sits above the estimated noise bulk.
    bool keep_above_noise = true;
};

struct DenoiseResult {
    DiffusionSeries series;
    std::vector<int> kept;
    std::vector<double> autocorrelation;
    int noise_rank = 0;
};

/// Low-rank denoising. Component r is kept when r == 0, when its dynamic factor has lag-1
/// autocorrelation above the threshold in encoding-major order, or (optionally) when it
/// lies above the noise bulk. The input series is not modified.
DenoiseResult denoise_frames(const DiffusionSeries& series, const DenoiseOptions& options = {});

}  // namespace dtcmr
