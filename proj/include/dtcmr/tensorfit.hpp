#pragma once

#include <array>
#include <optional>
#include <vector>

#include "dtcmr/image.hpp"
#include "dtcmr/objective.hpp"
#include "dtcmr/series.hpp"

namespace dtcmr {

using EncodingRow = std::array<double, 7>;

/// Linear map from (ln S0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) to ln S, one row per frame:
/// (1, -b gx^2, -2b gx gy, -2b gx gz, -b gy^2, -2b gy gz, -b gz^2).
struct EncodingMatrix {
    std::vector<EncodingRow> rows;

    static EncodingMatrix from(const std::vector<double>& bvalues, const std::vector<Direction>& directions);
    static EncodingRow row(double bvalue, const Direction& g);
};

/// Throws Error naming the directions when the encoding cannot determine the tensor
/// (and S0 unless it is pinned).
void check_encoding(const DiffusionSeries& series, bool fixed_s0 = false);
bool encoding_is_full_rank(const DiffusionSeries& series, bool fixed_s0 = false);

/// Per-pixel weighted log-linear least squares (weights S^2). Samples below
/// 1e-6 * max(series) are clamped to that floor before the log. With fixed_s0, ln S0 is
/// pinned and only the six tensor components are solved. Pixels outside the mask are zero.
/// Negative eigenvalues are left as fitted.
TensorField fit_tensor(const DiffusionSeries& series, const std::optional<Image>& fixed_s0 = std::nullopt,
                       const MyocardiumMask* mask = nullptr);

/// Nonlinear least squares on S directly (Gauss-Newton from the log-linear start).
TensorField fit_tensor_nonlinear(const DiffusionSeries& series, int max_iterations = 20);

/// frame_k(p) = s0(p) exp(-b_k g_k^T D(p) g_k)
std::vector<Image> generate_pseudo_frames(const TensorField& tensor, const std::vector<double>& bvalues,
                                          const std::vector<Direction>& directions);

double pseudo_signal(const Sym3& d, double s0, double bvalue, const Direction& g);

/// d S / d (s0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) at one pixel.
std::array<double, 7> pseudo_signal_gradient(const Sym3& d, double s0, double bvalue, const Direction& g);

struct TensorStepConfig {
    double learning_rate = 1e-7;
    ParzenConfig parzen;
};

struct TensorStepResult {
    TensorField tensor;
    bool skipped = false;  // gradient was not finite; tensor returned unchanged
};

/// d/dD of sum_k -nmi(pseudo_k, warped_k), per pixel and component (s0 held fixed).
std::vector<Sym3> tensor_loss_gradient(const TensorField& tensor, const DiffusionSeries& warped,
                                       const ParzenConfig& parzen);

/// One gradient-descent step on the tensor components.
TensorStepResult tensor_gradient_step(const TensorField& tensor, const DiffusionSeries& warped,
                                      const TensorStepConfig& cfg);

}  // namespace dtcmr
