#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtcmr/image.hpp"
#include "dtcmr/series.hpp"

namespace dtcmr {

enum class MotionKind { none, translate, deform };

MotionKind parse_motion_kind(const std::string& name);
std::string to_string(MotionKind kind);

/// Synthetic short-axis slice: blood cavity, annular myocardium with a transmural
/// helix-angle ramp, textured surrounding tissue and air.
struct PhantomConfig {
    std::size_t height = 96;
    std::size_t width = 96;
    int n_directions = 7;  // one b = 0 encoding plus n_directions - 1 diffusion directions
    int n_repetitions = 10;
    double bvalue = 600.0;
    double endo_radius = 12.0;
    double epi_radius = 28.0;
    double body_radius = 40.0;
    double ha_endo_deg = 60.0;
    double ha_epi_deg = -60.0;
    std::array<double, 3> eigenvalues{1.5e-3, 0.9e-3, 0.6e-3};
    /// When set, every tissue class uses d * I.
    std::optional<double> isotropic_diffusivity;
    MotionKind motion = MotionKind::none;
    double shift_amplitude = 0.0;   // per-axis bound on the random in-plane shift (px)
    double deform_amplitude = 0.0;  // max smooth-deformation magnitude over all frames (px)
    double noise_sigma = 0.0;       // Rician, relative to myocardial S0 = 1
    double intensity_jitter = 0.0;  // per-frame multiplicative factor drawn from 1 +- jitter
    std::uint64_t seed = 1;
};

struct PhantomTruth {
    TensorField true_tensor;
    /// Per-frame correcting fields: warping frame i by true_warps[i] restores the reference anatomy.
    std::vector<DenseField> true_warps;
    std::vector<Vec2> true_shifts;
    double deform_amplitude = 0.0;
    /// Pixels lying wholly inside the wall (the blended border ring is excluded).
    MyocardiumMask true_mask;
    /// Myocardium as seen in each acquired (moving) frame.
    std::vector<MyocardiumMask> frame_masks;
    double noise_sigma = 0.0;
    /// Noiseless, motion-free stack (pixel values before motion, jitter and noise).
    std::vector<Image> clean_frames;
};

struct Phantom {
    DiffusionSeries series;
    PhantomTruth truth;
};

/// Six-direction icosahedral scheme for n == 6, otherwise a deterministic hemispherical spiral.
std::vector<Direction> encoding_directions(int n);

Phantom make_phantom(const PhantomConfig& config);

/// Helix angle (deg) built into the phantom at a normalized wall depth in [0, 1].
double phantom_helix_angle(const PhantomConfig& config, double depth);

}  // namespace dtcmr
