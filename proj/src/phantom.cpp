#include "dtcmr/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace {

constexpr double kEdgeHalfWidth = 1.0;  // px, C1 ramp across each tissue border
constexpr int kDeformModes = 8;
constexpr double kMinWavelength = 64.0;
constexpr double kMaxWavelength = 128.0;

// 0 outside, 1 inside, smooth ramp over |signed_distance| < kEdgeHalfWidth.
double inside(double signed_distance) {
    const double t = std::clamp((signed_distance + kEdgeHalfWidth) / (2.0 * kEdgeHalfWidth), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

struct Blob {
    Vec2 center;
    double amplitude;
    double width;
};

struct DeformMode {
    double kx, ky, phase;
    Vec2 direction;
};

class Anatomy {
public:
    Anatomy(const PhantomConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
        center_ = {0.5 * static_cast<double>(cfg.width - 1), 0.5 * static_cast<double>(cfg.height - 1)};
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        myo_phase_ = 2.0 * std::numbers::pi * u01(rng);
        const double inner = cfg.epi_radius + 3.0;
        const double outer = cfg.body_radius - 3.0;
        for (int i = 0; i < 14; ++i) {
            const double r = inner + (outer - inner) * u01(rng);
            const double a = 2.0 * std::numbers::pi * u01(rng);
            blobs_.push_back({{center_.x + r * std::cos(a), center_.y + r * std::sin(a)},
                              (u01(rng) < 0.5 ? -1.0 : 1.0) * (0.1 + 0.15 * u01(rng)),
                              2.5 + 2.5 * u01(rng)});
        }
    }

    Vec2 center() const { return center_; }

    /// S0 and tensor of the undeformed anatomy at continuous position q.
    void sample(Vec2 q, double& s0, Sym3& d) const {
        const Vec2 rel = q - center_;
        const double r = rel.norm();
        const double in_endo = inside(cfg_.endo_radius - r);
        const double in_epi = inside(cfg_.epi_radius - r);
        const double in_body = inside(cfg_.body_radius - r);
        const double w_cav = in_endo;
        const double w_myo = in_epi - in_endo;
        const double w_body = in_body - in_epi;
        if (in_body <= 0.0) {
            s0 = 0.0;
            d = Sym3{};
            return;
        }
        const double theta = std::atan2(rel.y, rel.x);
        const double s_myo = 1.0 + 0.08 * std::cos(2.0 * theta + myo_phase_);
        double s_body = 0.55;
        for (const Blob& b : blobs_) {
            const Vec2 dq = q - b.center;
            s_body += b.amplitude * std::exp(-(dq.x * dq.x + dq.y * dq.y) / (2.0 * b.width * b.width));
        }
        s_body = std::max(s_body, 0.1);
        // Stored frames are float32; keeping S0 representable makes b = 0 frames match it exactly.
        s0 = static_cast<double>(static_cast<float>(w_cav * 0.4 + w_myo * s_myo + w_body * s_body));

        const Sym3 d_cav = isotropic(cfg_.isotropic_diffusivity.value_or(2.5e-3));
        const Sym3 d_body = isotropic(cfg_.isotropic_diffusivity.value_or(1.2e-3));
        const Sym3 d_myo = w_myo > 0.0 ? myocardial_tensor(rel, r) : Sym3{};
        for (int k = 0; k < 6; ++k)
            d[k] = (w_cav * d_cav[k] + w_myo * d_myo[k] + w_body * d_body[k]) / in_body;
    }

    Sym3 myocardial_tensor(Vec2 rel, double r) const {
        if (cfg_.isotropic_diffusivity) return isotropic(*cfg_.isotropic_diffusivity);
        if (r < 1e-12) return isotropic(cfg_.eigenvalues[1]);
        const double depth = (r - cfg_.endo_radius) / (cfg_.epi_radius - cfg_.endo_radius);
        const double ha = phantom_helix_angle(cfg_, depth) * std::numbers::pi / 180.0;
        const double rx = rel.x / r, ry = rel.y / r;
        const std::array<double, 3> radial{rx, ry, 0.0};
        const std::array<double, 3> circ{-ry, rx, 0.0};
        const std::array<double, 3> e1{std::cos(ha) * circ[0], std::cos(ha) * circ[1], std::sin(ha)};
        const std::array<double, 3> e2 = radial;
        const std::array<double, 3> e3{e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                                       e1[0] * e2[1] - e1[1] * e2[0]};
        const std::array<std::array<double, 3>, 3> e{e1, e2, e3};
        Mat3 m{};
        for (int k = 0; k < 3; ++k)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) m[i][j] += cfg_.eigenvalues[k] * e[k][i] * e[k][j];
        return from_matrix(m);
    }

private:
    static Sym3 isotropic(double v) { return {v, 0.0, 0.0, v, 0.0, v}; }

    const PhantomConfig& cfg_;
    Vec2 center_;
    double myo_phase_ = 0.0;
    std::vector<Blob> blobs_;
};

Vec2 evaluate_modes(const std::vector<DeformMode>& modes, const std::vector<double>& coeffs, Vec2 p) {
    Vec2 out;
    for (std::size_t m = 0; m < modes.size(); ++m) {
        const double c = coeffs[m] * std::cos(modes[m].kx * p.x + modes[m].ky * p.y + modes[m].phase);
        out.x += c * modes[m].direction.x;
        out.y += c * modes[m].direction.y;
    }
    return out;
}

}  // namespace

MotionKind parse_motion_kind(const std::string& name) {
    if (name == "none") return MotionKind::none;
    if (name == "translate") return MotionKind::translate;
    if (name == "deform") return MotionKind::deform;
    throw Error("unknown motion kind '" + name + "' (expected none|translate|deform)");
}

std::string to_string(MotionKind kind) {
    switch (kind) {
        case MotionKind::none: return "none";
        case MotionKind::translate: return "translate";
        case MotionKind::deform: return "deform";
    }
    return "none";
}

std::vector<Direction> encoding_directions(int n) {
    if (n < 1) throw Error("need at least one diffusion direction");
    std::vector<Direction> dirs;
    if (n == 6) {
        const double s = 1.0 / std::sqrt(2.0);
        dirs = {{s, 0, s}, {-s, 0, s}, {0, s, s}, {0, s, -s}, {s, s, 0}, {-s, s, 0}};
        return dirs;
    }
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
        const double z = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        const double rho = std::sqrt(1.0 - z * z);
        const double a = golden * static_cast<double>(i);
        dirs.push_back({rho * std::cos(a), rho * std::sin(a), z});
    }
    return dirs;
}

double phantom_helix_angle(const PhantomConfig& config, double depth) {
    const double t = std::clamp(depth, 0.0, 1.0);
    return config.ha_endo_deg + (config.ha_epi_deg - config.ha_endo_deg) * t;
}

Phantom make_phantom(const PhantomConfig& cfg) {
    if (cfg.height < 8 || cfg.width < 8) throw Error("phantom must be at least 8x8");
    const double half_extent = 0.5 * static_cast<double>(std::min(cfg.height, cfg.width));
    if (!(cfg.endo_radius > kEdgeHalfWidth) || !(cfg.epi_radius > cfg.endo_radius + 2.0 * kEdgeHalfWidth) ||
        !(cfg.body_radius > cfg.epi_radius + 2.0 * kEdgeHalfWidth) || cfg.body_radius + kEdgeHalfWidth > half_extent)
        throw Error("radii out of bounds");
    if (cfg.noise_sigma < 0.0) throw Error("noise sigma must be non-negative");
    if (cfg.n_directions < 2 || cfg.n_repetitions < 1) throw Error("need >= 2 encodings and >= 1 repetition");
    if (!(cfg.bvalue > 0.0)) throw Error("b-value must be positive");
    if (cfg.shift_amplitude < 0.0 || cfg.deform_amplitude < 0.0 || cfg.intensity_jitter < 0.0 ||
        cfg.intensity_jitter >= 1.0)
        throw Error("invalid motion or jitter amplitude");

    std::mt19937_64 rng(cfg.seed);
    const Anatomy anatomy(cfg, rng);
    const std::size_t H = cfg.height, W = cfg.width;

    // Acquisition order: every repetition cycles through b0 then the diffusion directions.
    const auto dirs = encoding_directions(cfg.n_directions - 1);
    DiffusionSeries series;
    series.height = H;
    series.width = W;
    for (int rep = 0; rep < cfg.n_repetitions; ++rep) {
        series.bvalues.push_back(0.0);
        series.directions.push_back({0.0, 0.0, 0.0});
        series.rep_index.push_back(rep);
        for (const auto& g : dirs) {
            series.bvalues.push_back(cfg.bvalue);
            series.directions.push_back(g);
            series.rep_index.push_back(rep);
        }
    }
    const std::size_t n = series.bvalues.size();

    Phantom out;
    PhantomTruth& truth = out.truth;
    truth.noise_sigma = cfg.noise_sigma;
    truth.true_tensor = TensorField(H, W);
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c)
            anatomy.sample({static_cast<double>(c), static_cast<double>(r)}, truth.true_tensor.s0(r, c),
                           truth.true_tensor.at(r, c));

    // Only pixels that are entirely myocardium; the blended border ring is left out.
    const Vec2 ctr = anatomy.center();
    auto in_wall = [&](Vec2 q) {
        const double rad = (q - ctr).norm();
        return rad >= cfg.endo_radius + kEdgeHalfWidth && rad <= cfg.epi_radius - kEdgeHalfWidth;
    };
    Grid<std::uint8_t> labels(H, W);
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c)
            labels(r, c) = in_wall({static_cast<double>(c), static_cast<double>(r)}) ? 1 : 0;
    truth.true_mask = MyocardiumMask::from_labels(std::move(labels));
    truth.true_mask.centroid = ctr;
    for (int k = 0; k < 72; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 72.0;
        truth.true_mask.endo_contour.push_back(
            {ctr.x + cfg.endo_radius * std::cos(a), ctr.y + cfg.endo_radius * std::sin(a)});
        truth.true_mask.epi_contour.push_back(
            {ctr.x + cfg.epi_radius * std::cos(a), ctr.y + cfg.epi_radius * std::sin(a)});
    }

    // Correcting motion: zero-mean shifts and zero-mean smooth modes across frames.
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Vec2> shifts(n);
    std::vector<std::vector<double>> coeffs(n, std::vector<double>(kDeformModes, 0.0));
    std::vector<DeformMode> modes;
    for (int m = 0; m < kDeformModes; ++m) {
        const double wavelength = kMinWavelength + (kMaxWavelength - kMinWavelength) * u01(rng);
        const double a = 2.0 * std::numbers::pi * u01(rng);
        const double b = 2.0 * std::numbers::pi * u01(rng);
        const double k = 2.0 * std::numbers::pi / wavelength;
        modes.push_back({k * std::cos(a), k * std::sin(a), 2.0 * std::numbers::pi * u01(rng),
                         {std::cos(b), std::sin(b)}});
    }
    if (cfg.motion != MotionKind::none && cfg.shift_amplitude > 0.0) {
        Vec2 mean;
        for (auto& s : shifts) {
            s = {cfg.shift_amplitude * (2.0 * u01(rng) - 1.0), cfg.shift_amplitude * (2.0 * u01(rng) - 1.0)};
            mean = mean + s;
        }
        mean = (1.0 / static_cast<double>(n)) * mean;
        for (auto& s : shifts) s = s - mean;
    }
    double deform_scale = 0.0;
    if (cfg.motion == MotionKind::deform && cfg.deform_amplitude > 0.0) {
        std::vector<double> mean(kDeformModes, 0.0);
        for (auto& row : coeffs)
            for (int m = 0; m < kDeformModes; ++m) {
                row[m] = normal(rng);
                mean[m] += row[m] / static_cast<double>(n);
            }
        double peak = 0.0;
        for (auto& row : coeffs) {
            for (int m = 0; m < kDeformModes; ++m) row[m] -= mean[m];
            for (std::size_t r = 0; r < H; ++r)
                for (std::size_t c = 0; c < W; ++c)
                    peak = std::max(peak, evaluate_modes(modes, row, {static_cast<double>(c), static_cast<double>(r)}).norm());
        }
        deform_scale = peak > 0.0 ? cfg.deform_amplitude / peak : 0.0;
        for (auto& row : coeffs)
            for (double& v : row) v *= deform_scale;
        truth.deform_amplitude = cfg.deform_amplitude;
    }
    truth.true_shifts = shifts;

    auto correcting = [&](std::size_t i, Vec2 p) { return shifts[i] + evaluate_modes(modes, coeffs[i], p); };

    std::vector<double> gains(n, 1.0);
    if (cfg.intensity_jitter > 0.0)
        for (double& g : gains) g = 1.0 + cfg.intensity_jitter * (2.0 * u01(rng) - 1.0);

    std::vector<Grid<std::uint8_t>> frame_labels(n, Grid<std::uint8_t>(H, W));
    truth.true_warps.assign(n, DenseField(H, W));
    truth.clean_frames.assign(n, Image(H, W));
    series.frames.assign(n, Image(H, W));
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0.0 ? cfg.noise_sigma : 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double b = series.bvalues[i];
        const Direction& g = series.directions[i];
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t c = 0; c < W; ++c) {
                const Vec2 p{static_cast<double>(c), static_cast<double>(r)};
                truth.true_warps[i](r, c) = correcting(i, p);
                truth.clean_frames[i](r, c) =
                    truth.true_tensor.s0(r, c) * std::exp(-b * quadratic_form(truth.true_tensor.at(r, c), g));

                // Acquired frame shows the anatomy at the inverse map: q + correcting(q) = p.
                Vec2 q = p - correcting(i, p);
                for (int it = 0; it < 200; ++it) {
                    const Vec2 next = p - correcting(i, q);
                    const double change = (next - q).norm();
                    q = next;
                    if (change < 1e-13) break;
                }
                frame_labels[i](r, c) = in_wall(q) ? 1 : 0;
                double s0 = 0.0;
                Sym3 d{};
                anatomy.sample(q, s0, d);
                double value = gains[i] * s0 * std::exp(-b * quadratic_form(d, g));
                if (cfg.noise_sigma > 0.0) {
                    const double re = value + noise(rng);
                    const double im = noise(rng);
                    value = std::hypot(re, im);
                }
                series.frames[i](r, c) = static_cast<double>(static_cast<float>(value));
            }
    }
    for (auto& labels_i : frame_labels) truth.frame_masks.push_back(MyocardiumMask::from_labels(std::move(labels_i)));
    out.series = std::move(series);
    return out;
}

}  // namespace dtcmr
