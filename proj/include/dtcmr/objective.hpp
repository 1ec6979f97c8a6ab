#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dtcmr/image.hpp"

namespace dtcmr {

/// Gaussian Parzen window over `bins` bins spanning intensities [0, 1]. Intensity v maps
/// to bin coordinate v * (bins - 1); the kernel exp(-d^2 / 2 sigma^2) is shifted down
/// by its value at |d| = 4 sigma and is zero beyond, so it is continuous and compact.
struct ParzenConfig {
    int bins = 32;
    double sigma = 1.0;  // in bin units

    void validate() const;
    double support() const { return 4.0 * sigma; }
};

struct LossWeights {
    double lambda_mi = 1.0;
    double lambda_smooth = 0.05;
    double lambda_dice = 0.0;

    void validate() const;
};

/// Parzen kernel value and derivative with respect to the offset d (bin units).
double parzen_kernel(double d, const ParzenConfig& cfg);
double parzen_kernel_derivative(double d, const ParzenConfig& cfg);

/// Soft joint histogram, rows indexed by a's bin, columns by b's bin; sums to 1.
Grid<double> joint_histogram(const Image& a, const Image& b, const ParzenConfig& cfg);

/// Normalized mutual information (H(a) + H(b)) / H(a, b) under a fixed reference image `a`.
/// Keeps the reference's kernel weights so repeated evaluations against new `b` are cheap.
class ParzenNmi {
public:
    ParzenNmi(const Image& reference, const ParzenConfig& cfg);

    double value(const Image& b) const;

    /// Returns NMI and writes d NMI / d b(p) into `gradient`.
    double value_and_gradient(const Image& b, Image& gradient) const;

private:
    double evaluate(const Image& b, Image* gradient) const;

    ParzenConfig cfg_;
    std::size_t height_, width_;
    int taps_;
    std::vector<int> ref_lo_;
    std::vector<double> ref_w_;
    std::vector<double> ref_sum_;
};

/// Returns 2 (with a warning) when the joint entropy vanishes.
double nmi(const Image& a, const Image& b, const ParzenConfig& cfg);

/// d nmi(a, b) / d b, per pixel.
Image nmi_gradient(const Image& a, const Image& b, const ParzenConfig& cfg);

/// Mean over pixels of squared forward differences of both displacement components
/// (differences past the last row/column count as zero).
double smoothness(const DenseField& field);
DenseField smoothness_gradient(const DenseField& field);

/// 2 sum(a b) / (sum a^2 + sum b^2 + 1e-7); two empty masks give 1 with a warning.
double soft_dice(const Image& mask_a, const Image& mask_b);
Image soft_dice_gradient(const Image& mask_a, const Image& mask_b);  // w.r.t. mask_b

double mean_squared_error(const Image& a, const Image& b);
Image mean_squared_error_gradient(const Image& a, const Image& b);  // w.r.t. b

enum class Similarity { nmi, mse };

struct MaskGuidance {
    Image template_mask;
    std::vector<Image> warped_masks;
};

/// Weighted terms; per-frame vectors hold the weighted contribution of each frame.
struct LossBreakdown {
    double total = 0.0;
    double similarity = 0.0;
    double smooth = 0.0;
    double dice = 0.0;
    std::vector<double> similarity_per_frame;
    std::vector<double> smooth_per_frame;
    std::vector<double> dice_per_frame;
};

/// lambda_mi * sum_i (-nmi(pseudo_i, warped_i))  [or + mse for Similarity::mse]
///   + lambda_smooth * sum_i smoothness(field_i)
///   + lambda_dice * sum_i (1 - soft_dice(template_mask, warped_mask_i)).
LossBreakdown total_loss(std::span<const Image> warped, std::span<const Image> pseudo,
                         std::span<const DenseField> fields, const MaskGuidance* masks, const LossWeights& weights,
                         const ParzenConfig& cfg, Similarity similarity = Similarity::nmi);

}  // namespace dtcmr
