#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dtcmr/image.hpp"
#include "dtcmr/objective.hpp"
#include "dtcmr/rigid.hpp"
#include "dtcmr/series.hpp"
#include "dtcmr/transform.hpp"

namespace dtcmr {

enum class RegistrationMode { proposed, no_denoise, mse_loss, semi_supervised, rigid_only };

RegistrationMode parse_registration_mode(const std::string& name);
std::string to_string(RegistrationMode mode);
std::vector<RegistrationMode> all_registration_modes();

/// How the tensor follows the fields: closed-form refits every K iterations, or a
/// gradient step on the tensor components after every field update.
enum class TensorUpdate { refit, gradient };

struct RegistrationConfig {
    int max_outer_iters = 200;
    double field_lr = 0.25;  // initial per-iteration control-velocity step (px) after preconditioning
    int tensor_refit_interval = 10;
    LossWeights weights;
    ParzenConfig parzen;
    double spacing = 8.0;
    int integration_steps = 6;
    int denoise_rank = 0;  // 0 picks min(20, frame count)
    double autocorr_threshold = 0.3;
    double convergence_tol = 1e-5;
    RegistrationMode mode = RegistrationMode::proposed;
    TensorUpdate tensor_update = TensorUpdate::refit;
    double tensor_lr = 1e-7;
    int rigid_iterations = 3;
    double semi_supervised_dice = 0.5;  // lambda_dice used when mode is semi_supervised
    double gauge_smoothing = 1e-3;      // smoothness weight of shell_gauge_warps
    int gauge_iterations = 200;         // 0 pins every group's mean deformation to zero

    void validate() const;

    /// Sets one key from its text form; throws Error naming the key on bad values.
    void set(const std::string& key, const std::string& value);

    /// Flat key=value text; '#' starts a comment. Errors carry the line number.
    static RegistrationConfig parse(const std::string& text);
    static RegistrationConfig parse(const std::string& text, RegistrationConfig base);
    static RegistrationConfig load(const std::filesystem::path& file);
    static RegistrationConfig load(const std::filesystem::path& file, RegistrationConfig base);
    std::string to_text() const;
};

struct LossRecord {
    int iteration = 0;
    double total = 0.0;
    double similarity = 0.0;
    double smooth = 0.0;
    double dice = 0.0;
};

struct RegistrationResult {
    RegistrationMode mode = RegistrationMode::proposed;
    std::vector<Vec2> rigid_shifts;
    std::vector<BSplineWarp> warps;
    /// Total correcting field per frame (rigid shift plus deformable part).
    std::vector<DenseField> fields;
    DiffusionSeries corrected_series;
    TensorField final_tensor;
    std::vector<LossRecord> loss_trace;
    int iterations = 0;
    int refits_accepted = 0;
    bool converged = false;
    bool diverged = false;
    /// Set when corrected_series was resampled from the input frames rather than denoised ones.
    bool corrected_from_original = false;
    double intensity_scale = 1.0;
};

/// Zero-mean groupwise translations: frame i is aligned by reading it at p + shifts[i].
/// Coarse phase-correlation passes against the rank-1 template of the whole stack run to
/// convergence, then correlation passes refine against the rank-1 template of the aligned
/// frames sharing the frame's encoding. Groups of fewer than three frames keep the whole-stack
/// template. A final weighted Lucas-Kanade step with gain and offset, restricted to pixels
/// whose contrast does not depend on direction, ties every group to the b = 0 frames.
/// Shifts are re-centred on their mean after every pass.
std::vector<Vec2> groupwise_rigid_shifts(const DiffusionSeries& series, int iterations,
                                         const RigidOptions& options = {});

/// Smooth deformation of each encoding group's mean image onto the mean of all groups with
/// the same b-value, fitted (weighted least squares with gain and offset, plus smoothing *
/// smoothness) only where those group means agree, so direction-dependent tissue contrast does
/// not bias it. Returned per frame, shared within a group; the mean over each b-shell is zero.
/// b = 0 frames, small groups and single-group shells get zero velocities. `aligned` should
/// already be rigidly aligned.
std::vector<BSplineWarp> shell_gauge_warps(const DiffusionSeries& aligned, double spacing, int integration_steps,
                                           double smoothing, int iterations);

/// Groupwise motion correction. `frame_masks` (myocardium as seen in each input frame) and
/// `mask` (template space) are required in semi_supervised mode.
RegistrationResult register_groupwise(const DiffusionSeries& series, const MyocardiumMask* mask,
                                      const RegistrationConfig& cfg,
                                      const std::vector<MyocardiumMask>* frame_masks = nullptr);

struct AblationRow {
    RegistrationMode mode = RegistrationMode::proposed;
    double ne_percent = 0.0;
    double mean_r2 = 0.0;
    double mean_rmse = 0.0;
    std::size_t included_profiles = 0;
    std::optional<double> median_epe;
};

struct AblationResult {
    std::vector<RegistrationResult> results;
    std::vector<AblationRow> table;
};

/// Runs every mode on the same input and scores each final tensor on `mask`.
/// With truth fields, the median endpoint error over the mask is reported too.
AblationResult run_ablation(const DiffusionSeries& series, const MyocardiumMask& mask,
                            const std::vector<RegistrationMode>& modes, const RegistrationConfig& cfg = {},
                            const std::vector<MyocardiumMask>* frame_masks = nullptr,
                            const std::vector<DenseField>* truth_fields = nullptr);

/// Fixed-width text rendering of an ablation table.
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace dtcmr
