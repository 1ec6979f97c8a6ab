#include "dtcmr/registration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>

#include "dtcmr/diagnostics.hpp"
#include "dtcmr/lowrank.hpp"
#include "dtcmr/metrics.hpp"
#include "dtcmr/tensorfit.hpp"

namespace dtcmr {
namespace {

constexpr int kMaxHalvings = 10;
constexpr double kRmsDecay = 0.9;
constexpr double kStepGrowth = 1.5;
constexpr std::size_t kMinGroupFrames = 3;
constexpr int kMaxCoarsePasses = 10;
constexpr std::size_t kDefaultDenoiseRank = 20;
constexpr double kCoarseTolerance = 0.05;
constexpr double kAnisotropyTolerance = 0.1;
constexpr std::ptrdiff_t kAnisotropyMargin = 2;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    int out = 0;
    try {
        out = std::stoi(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw Error("invalid integer for '" + key + "': " + v);
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw Error("invalid number for '" + key + "': " + v);
    return out;
}

Image scaled_copy(const Image& img, double s) {
    Image out = img;
    for (double& v : out) v *= s;
    return out;
}

struct FrameTerms {
    double similarity = 0.0;
    double smooth = 0.0;
    double dice = 0.0;
    double total() const { return similarity + smooth + dice; }
};

struct FrameState {
    BSplineWarp warp;
    DenseField u;
    Image warped;
    Image warped_mask;
    FrameTerms terms;
    std::vector<Vec2> rms;
    bool rms_started = false;
};

// Everything a per-frame evaluation reads; shared read-only between barriers.
struct Problem {
    const std::vector<Image>* sources = nullptr;       // rigidly aligned (denoised) frames
    const std::vector<Image>* mask_sources = nullptr;  // rigidly aligned frame masks, optional
    const Image* template_mask = nullptr;
    std::vector<Image> pseudo;
    std::vector<ParzenNmi> nmi;
    LossWeights weights;
    Similarity similarity = Similarity::nmi;
    std::size_t height = 0, width = 0;

    bool use_dice() const { return mask_sources && weights.lambda_dice > 0.0; }

    void set_pseudo(std::vector<Image> frames, const ParzenConfig& cfg) {
        pseudo = std::move(frames);
        nmi.clear();
        if (similarity == Similarity::nmi)
            for (const Image& p : pseudo) nmi.emplace_back(p, cfg);
    }

    FrameTerms terms(std::size_t i, const Image& warped, const DenseField& u, const Image* warped_mask) const {
        FrameTerms t;
        if (weights.lambda_mi > 0.0)
            t.similarity = weights.lambda_mi * (similarity == Similarity::nmi ? -nmi[i].value(warped)
                                                                               : mean_squared_error(pseudo[i], warped));
        if (weights.lambda_smooth > 0.0) t.smooth = weights.lambda_smooth * smoothness(u);
        if (use_dice()) t.dice = weights.lambda_dice * (1.0 - soft_dice(*template_mask, *warped_mask));
        return t;
    }

    void refresh(std::size_t i, FrameState& s) const {
        s.u = integrate(s.warp, height, width);
        s.warped = warp_image((*sources)[i], s.u);
        if (use_dice()) s.warped_mask = warp_image((*mask_sources)[i], s.u);
        s.terms = terms(i, s.warped, s.u, use_dice() ? &s.warped_mask : nullptr);
    }

    // Gradient of the frame's loss w.r.t. its control velocities (small-deformation chain rule).
    std::vector<Vec2> control_gradient(std::size_t i, const FrameState& s) const {
        DenseField dense(height, width);
        if (weights.lambda_mi > 0.0) {
            Image g;
            if (similarity == Similarity::nmi) {
                nmi[i].value_and_gradient(s.warped, g);
                for (double& v : g) v *= -weights.lambda_mi;
            } else {
                g = scaled_copy(mean_squared_error_gradient(pseudo[i], s.warped), weights.lambda_mi);
            }
            DenseField sg;
            warp_image((*sources)[i], s.u, sg);
            for (std::size_t p = 0; p < dense.size(); ++p) dense[p] = dense[p] + g[p] * sg[p];
        }
        if (use_dice()) {
            const Image g = soft_dice_gradient(*template_mask, s.warped_mask);
            DenseField sg;
            warp_image((*mask_sources)[i], s.u, sg);
            for (std::size_t p = 0; p < dense.size(); ++p) dense[p] = dense[p] + (-weights.lambda_dice * g[p]) * sg[p];
        }
        if (weights.lambda_smooth > 0.0) {
            const DenseField g = smoothness_gradient(s.u);
            for (std::size_t p = 0; p < dense.size(); ++p) dense[p] = dense[p] + weights.lambda_smooth * g[p];
        }
        return bspline_adjoint(s.warp, dense);
    }
};

// Frames sharing b-value and direction (any direction at b = 0) have the same contrast.
std::vector<std::vector<std::size_t>> encoding_groups(const DiffusionSeries& series) {
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < series.frame_count(); ++i) {
        std::size_t g = 0;
        for (; g < members.size(); ++g) {
            const std::size_t j = members[g].front();
            if (series.bvalues[j] == series.bvalues[i] &&
                (series.bvalues[i] == 0.0 || series.directions[j] == series.directions[i]))
                break;
        }
        if (g == members.size()) members.emplace_back();
        members[g].push_back(i);
    }
    return members;
}

// Frames whose deformations are constrained to zero mean. The tensor fit reproduces the mean
// of every encoding group, so a deformation shared by a whole group is invisible to the loss;
// pinning each group's mean removes that null space. Frames in small groups form one set.
std::vector<std::vector<std::size_t>> gauge_sets(const DiffusionSeries& series) {
    std::vector<std::vector<std::size_t>> members = encoding_groups(series);
    std::vector<std::vector<std::size_t>> sets;
    std::vector<std::size_t> rest;
    for (auto& m : members) {
        if (m.size() >= kMinGroupFrames) sets.push_back(std::move(m));
        else rest.insert(rest.end(), m.begin(), m.end());
    }
    if (!rest.empty()) {
        std::sort(rest.begin(), rest.end());
        sets.push_back(std::move(rest));
    }
    return sets;
}

// Preconditioned direction for one frame (RMS-scaled gradient).
std::vector<Vec2> frame_direction(const Problem& prob, std::size_t i, FrameState& s) {
    const std::vector<Vec2> g = prob.control_gradient(i, s);
    if (!s.rms_started) {
        s.rms.resize(g.size());
        for (std::size_t j = 0; j < g.size(); ++j) s.rms[j] = {g[j].x * g[j].x, g[j].y * g[j].y};
        s.rms_started = true;
    } else {
        for (std::size_t j = 0; j < g.size(); ++j)
            s.rms[j] = {kRmsDecay * s.rms[j].x + (1 - kRmsDecay) * g[j].x * g[j].x,
                        kRmsDecay * s.rms[j].y + (1 - kRmsDecay) * g[j].y * g[j].y};
    }
    double mean_v = 0.0;
    for (const Vec2& v : s.rms) mean_v += v.x + v.y;
    mean_v /= static_cast<double>(2 * s.rms.size());
    std::vector<Vec2> dir(g.size());
    if (!(mean_v > 0.0) || !std::isfinite(mean_v)) return dir;
    for (std::size_t j = 0; j < g.size(); ++j)
        dir[j] = {-g[j].x / std::sqrt(s.rms[j].x + mean_v), -g[j].y / std::sqrt(s.rms[j].y + mean_v)};
    return dir;
}

// One descent step for a gauge set with a shared step and backtracking on the set's loss.
// Directions are projected to zero mean over the set (when it has more than one frame), so
// the set's mean control velocity stays at zero. Returns true when the loss dropped.
bool descend(const Problem& prob, const std::vector<std::size_t>& set, std::vector<FrameState>& states,
             double& step, double max_step) {
    const std::size_t m = set.size();
    const auto count = static_cast<std::ptrdiff_t>(m);
    std::vector<std::vector<Vec2>> dirs(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t kk = 0; kk < count; ++kk) {
        const auto k = static_cast<std::size_t>(kk);
        dirs[k] = frame_direction(prob, set[k], states[set[k]]);
    }
    const std::size_t nc = dirs.front().size();
    if (m > 1) {
        for (std::size_t j = 0; j < nc; ++j) {
            Vec2 mean;
            for (const auto& d : dirs) mean = mean + d[j];
            mean = (1.0 / static_cast<double>(m)) * mean;
            for (auto& d : dirs) d[j] = d[j] - mean;
        }
    }
    double peak = 0.0;
    for (const auto& d : dirs)
        for (const Vec2& v : d) peak = std::max({peak, std::abs(v.x), std::abs(v.y)});
    if (!(peak > 0.0) || !std::isfinite(peak)) return false;

    double current = 0.0;
    for (std::size_t i : set) current += states[i].terms.total();
    std::vector<FrameState> trial(m);
    for (int h = 0; h <= kMaxHalvings; ++h) {
        const double scale = step / peak;
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t kk = 0; kk < count; ++kk) {
            const auto k = static_cast<std::size_t>(kk);
            const FrameState& s = states[set[k]];
            trial[k].warp = s.warp;
            for (std::size_t j = 0; j < nc; ++j)
                trial[k].warp.control_velocities[j] = s.warp.control_velocities[j] + scale * dirs[k][j];
            prob.refresh(set[k], trial[k]);
        }
        double total = 0.0;
        for (const FrameState& t : trial) total += t.terms.total();
        if (total < current) {
            for (std::size_t k = 0; k < m; ++k) {
                FrameState& s = states[set[k]];
                s.warp = std::move(trial[k].warp);
                s.u = std::move(trial[k].u);
                s.warped = std::move(trial[k].warped);
                s.warped_mask = std::move(trial[k].warped_mask);
                s.terms = trial[k].terms;
            }
            step = std::min(max_step, step * kStepGrowth);
            return true;
        }
        step *= 0.5;
    }
    step = std::max(step, max_step * std::ldexp(1.0, -kMaxHalvings));
    return false;
}

LossRecord summarize(int iteration, const std::vector<FrameState>& states) {
    LossRecord r;
    r.iteration = iteration;
    for (const FrameState& s : states) {
        r.similarity += s.terms.similarity;
        r.smooth += s.terms.smooth;
        r.dice += s.terms.dice;
    }
    r.total = r.similarity + r.smooth + r.dice;
    return r;
}

std::vector<Image> rigidly_aligned(const std::vector<Image>& frames, const std::vector<Vec2>& shifts) {
    std::vector<Image> out(frames.size());
    const auto n = static_cast<std::ptrdiff_t>(frames.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        out[i] = warp_image(frames[i], uniform_field(frames[i].height(), frames[i].width(), shifts[i]));
    }
    return out;
}

// 1 where the blurred group templates of every b-shell agree to within kAnisotropyTolerance
// (relative spread), eroded by kAnisotropyMargin pixels; all ones when no shell has two groups.
Image isotropic_weights(const DiffusionSeries& series, const std::vector<std::vector<std::size_t>>& members,
                        const std::vector<std::optional<Image>>& templates) {
    const std::size_t h = series.frames.front().height(), w = series.frames.front().width();
    Grid<std::uint8_t> rejected(h, w);
    bool any_shell = false;
    std::vector<bool> done(members.size(), false);
    for (std::size_t g = 0; g < members.size(); ++g) {
        if (done[g] || !templates[g]) continue;
        const double b = series.bvalues[members[g].front()];
        std::vector<const Image*> shell;
        for (std::size_t k = g; k < members.size(); ++k)
            if (templates[k] && series.bvalues[members[k].front()] == b) {
                shell.push_back(&*templates[k]);
                done[k] = true;
            }
        if (b == 0.0 || shell.size() < 2) continue;
        any_shell = true;
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                double m = 0.0, m2 = 0.0;
                for (const Image* t : shell) {
                    m += (*t)(r, c);
                    m2 += (*t)(r, c) * (*t)(r, c);
                }
                m /= static_cast<double>(shell.size());
                const double sd = std::sqrt(std::max(0.0, m2 / static_cast<double>(shell.size()) - m * m));
                if (sd > kAnisotropyTolerance * m) rejected(r, c) = 1;
            }
    }
    Image weights(h, w);
    const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);
    for (std::ptrdiff_t r = 0; r < hh; ++r)
        for (std::ptrdiff_t c = 0; c < ww; ++c) {
            bool keep = true;
            if (any_shell)
                for (std::ptrdiff_t dr = -kAnisotropyMargin; dr <= kAnisotropyMargin && keep; ++dr)
                    for (std::ptrdiff_t dc = -kAnisotropyMargin; dc <= kAnisotropyMargin; ++dc) {
                        const std::ptrdiff_t rr = r + dr, cc = c + dc;
                        if (rr >= 0 && cc >= 0 && rr < hh && cc < ww &&
                            rejected(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc))) {
                            keep = false;
                            break;
                        }
                    }
            weights(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = keep ? 1.0 : 0.0;
        }
    return weights;
}

// Weighted least squares of gain * moving(p + u(p)) + offset against target, plus a
// smoothness penalty on u, minimized over the control velocities by backtracking descent.
BSplineWarp fit_group_warp(const Image& moving, const Image& target, const Image& weights, double weight_sum,
                           BSplineWarp warp, double smoothing, int iterations) {
    const std::size_t h = target.height(), w = target.width();
    struct Eval {
        DenseField u;
        Image warped;
        DenseField sample_grad;
        double gain = 1.0, offset = 0.0, energy = 0.0;
    };
    auto evaluate = [&](const BSplineWarp& wp) {
        Eval e;
        e.u = integrate(wp, h, w);
        e.warped = warp_image(moving, e.u, e.sample_grad);
        double sw = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
        for (std::size_t p = 0; p < target.size(); ++p) {
            const double wt = weights[p];
            sw += wt;
            sx += wt * e.warped[p];
            sy += wt * target[p];
            sxx += wt * e.warped[p] * e.warped[p];
            sxy += wt * e.warped[p] * target[p];
        }
        const double var = sxx - sx * sx / sw;
        e.gain = var > 0.0 ? (sxy - sx * sy / sw) / var : 1.0;
        e.offset = (sy - e.gain * sx) / sw;
        double data = 0.0;
        for (std::size_t p = 0; p < target.size(); ++p) {
            const double r = e.gain * e.warped[p] + e.offset - target[p];
            data += weights[p] * r * r;
        }
        e.energy = data / weight_sum + smoothing * smoothness(e.u);
        return e;
    };
    Eval cur = evaluate(warp);
    double step = 0.25;
    for (int it = 0; it < iterations; ++it) {
        DenseField dense = smoothness_gradient(cur.u);
        for (std::size_t p = 0; p < dense.size(); ++p) {
            const double r = cur.gain * cur.warped[p] + cur.offset - target[p];
            dense[p] = smoothing * dense[p] + (2.0 * weights[p] * r * cur.gain / weight_sum) * cur.sample_grad[p];
        }
        const std::vector<Vec2> g = bspline_adjoint(warp, dense);
        double peak = 0.0;
        for (const Vec2& v : g) peak = std::max({peak, std::abs(v.x), std::abs(v.y)});
        if (!(peak > 0.0) || !std::isfinite(peak)) break;
        bool improved = false;
        for (int k = 0; k <= kMaxHalvings; ++k) {
            BSplineWarp trial = warp;
            for (std::size_t j = 0; j < g.size(); ++j)
                trial.control_velocities[j] = warp.control_velocities[j] - (step / peak) * g[j];
            Eval e = evaluate(trial);
            if (e.energy < cur.energy) {
                warp = std::move(trial);
                cur = std::move(e);
                step = std::min(1.0, step * kStepGrowth);
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if (!improved) break;
    }
    return warp;
}

}  // namespace

std::vector<BSplineWarp> shell_gauge_warps(const DiffusionSeries& aligned, double spacing, int integration_steps,
                                           double smoothing, int iterations) {
    validate_series(aligned);
    const std::size_t h = aligned.height, w = aligned.width, n = aligned.frame_count();
    std::vector<BSplineWarp> out(n, BSplineWarp::zero(h, w, spacing, integration_steps));
    const std::vector<std::vector<std::size_t>> members = encoding_groups(aligned);
    std::vector<std::optional<Image>> templates(members.size());
    for (std::size_t g = 0; g < members.size(); ++g) {
        if (members[g].size() < kMinGroupFrames) continue;
        std::vector<Image> stack;
        for (std::size_t i : members[g]) stack.push_back(aligned.frames[i]);
        templates[g] = binomial_blur(rank1_projection(stack));
    }
    const Image weights = isotropic_weights(aligned, members, templates);
    double weight_sum = 0.0;
    for (double v : weights) weight_sum += v;
    if (!(weight_sum > 0.0)) return out;

    std::vector<bool> done(members.size(), false);
    for (std::size_t g0 = 0; g0 < members.size(); ++g0) {
        if (done[g0] || !templates[g0]) continue;
        const double b = aligned.bvalues[members[g0].front()];
        std::vector<std::size_t> shell;
        for (std::size_t g = g0; g < members.size(); ++g)
            if (templates[g] && aligned.bvalues[members[g].front()] == b) {
                shell.push_back(g);
                done[g] = true;
            }
        if (b == 0.0 || shell.size() < 2) continue;

        Image target(h, w);
        for (std::size_t g : shell)
            for (std::size_t p = 0; p < target.size(); ++p) target[p] += (*templates[g])[p];
        for (double& v : target) v /= static_cast<double>(shell.size());

        std::vector<BSplineWarp> warps(shell.size(), BSplineWarp::zero(h, w, spacing, integration_steps));
        const auto count = static_cast<std::ptrdiff_t>(shell.size());
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t kk = 0; kk < count; ++kk) {
            const auto k = static_cast<std::size_t>(kk);
            warps[k] = fit_group_warp(*templates[shell[k]], target, weights, weight_sum, warps[k], smoothing, iterations);
        }
        // The shell's mean deformation is not observable; pin it to zero.
        const std::size_t nc = warps.front().control_velocities.size();
        for (std::size_t j = 0; j < nc; ++j) {
            Vec2 mean;
            for (const BSplineWarp& wp : warps) mean = mean + wp.control_velocities[j];
            mean = (1.0 / static_cast<double>(warps.size())) * mean;
            for (BSplineWarp& wp : warps) wp.control_velocities[j] = wp.control_velocities[j] - mean;
        }
        for (std::size_t k = 0; k < shell.size(); ++k)
            for (std::size_t i : members[shell[k]]) out[i] = warps[k];
    }
    return out;
}

RegistrationMode parse_registration_mode(const std::string& name) {
    for (RegistrationMode m : all_registration_modes())
        if (to_string(m) == name) return m;
    throw Error("unknown mode '" + name + "' (expected proposed|no_denoise|mse_loss|semi_supervised|rigid_only)");
}

std::string to_string(RegistrationMode mode) {
    switch (mode) {
        case RegistrationMode::proposed: return "proposed";
        case RegistrationMode::no_denoise: return "no_denoise";
        case RegistrationMode::mse_loss: return "mse_loss";
        case RegistrationMode::semi_supervised: return "semi_supervised";
        case RegistrationMode::rigid_only: return "rigid_only";
    }
    return "proposed";
}

std::vector<RegistrationMode> all_registration_modes() {
    return {RegistrationMode::proposed, RegistrationMode::no_denoise, RegistrationMode::mse_loss,
            RegistrationMode::semi_supervised, RegistrationMode::rigid_only};
}

void RegistrationConfig::validate() const {
    if (max_outer_iters < 1) throw Error("max_outer_iters must be positive");
    if (!(field_lr > 0.0)) throw Error("field_lr must be positive");
    if (tensor_refit_interval < 1) throw Error("tensor_refit_interval must be positive");
    if (!(spacing > 0.0)) throw Error("spacing must be positive");
    if (integration_steps < 0) throw Error("integration_steps must be >= 0");
    if (denoise_rank < 0) throw Error("denoise_rank must be >= 0");
    if (!(convergence_tol > 0.0)) throw Error("convergence_tol must be positive");
    if (!(tensor_lr > 0.0)) throw Error("tensor_lr must be positive");
    if (rigid_iterations < 1) throw Error("rigid_iterations must be positive");
    if (semi_supervised_dice < 0.0) throw Error("semi_supervised_dice must be non-negative");
    if (gauge_smoothing < 0.0) throw Error("gauge_smoothing must be non-negative");
    if (gauge_iterations < 0) throw Error("gauge_iterations must be non-negative");
    weights.validate();
    parzen.validate();
}

void RegistrationConfig::set(const std::string& key, const std::string& value) {
    if (key == "max_outer_iters") max_outer_iters = to_int(key, value);
    else if (key == "field_lr") field_lr = to_double(key, value);
    else if (key == "tensor_refit_interval") tensor_refit_interval = to_int(key, value);
    else if (key == "lambda_mi") weights.lambda_mi = to_double(key, value);
    else if (key == "lambda_smooth") weights.lambda_smooth = to_double(key, value);
    else if (key == "lambda_dice") weights.lambda_dice = to_double(key, value);
    else if (key == "parzen_bins") parzen.bins = to_int(key, value);
    else if (key == "parzen_sigma") parzen.sigma = to_double(key, value);
    else if (key == "spacing") spacing = to_double(key, value);
    else if (key == "integration_steps") integration_steps = to_int(key, value);
    else if (key == "denoise_rank") denoise_rank = to_int(key, value);
    else if (key == "autocorr_threshold") autocorr_threshold = to_double(key, value);
    else if (key == "convergence_tol") convergence_tol = to_double(key, value);
    else if (key == "mode") mode = parse_registration_mode(value);
    else if (key == "tensor_update") {
        if (value == "refit") tensor_update = TensorUpdate::refit;
        else if (value == "gradient") tensor_update = TensorUpdate::gradient;
        else throw Error("invalid tensor_update '" + value + "' (expected refit|gradient)");
    } else if (key == "tensor_lr") tensor_lr = to_double(key, value);
    else if (key == "rigid_iterations") rigid_iterations = to_int(key, value);
    else if (key == "semi_supervised_dice") semi_supervised_dice = to_double(key, value);
    else if (key == "gauge_smoothing") gauge_smoothing = to_double(key, value);
    else if (key == "gauge_iterations") gauge_iterations = to_int(key, value);
    else throw Error("unknown key '" + key + "'");
}

RegistrationConfig RegistrationConfig::parse(const std::string& text, RegistrationConfig base) {
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("config line " + std::to_string(number) + ": expected key=value");
        try {
            base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const Error& e) {
            throw Error("config line " + std::to_string(number) + ": " + e.what());
        }
    }
    base.validate();
    return base;
}

RegistrationConfig RegistrationConfig::load(const std::filesystem::path& file, RegistrationConfig base) {
    std::ifstream in(file);
    if (!in) throw Error("cannot read config " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), base);
}

RegistrationConfig RegistrationConfig::parse(const std::string& text) { return parse(text, RegistrationConfig{}); }

RegistrationConfig RegistrationConfig::load(const std::filesystem::path& file) {
    return load(file, RegistrationConfig{});
}

std::string RegistrationConfig::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "mode=" << to_string(mode) << "\n"
       << "max_outer_iters=" << max_outer_iters << "\n"
       << "field_lr=" << field_lr << "\n"
       << "tensor_refit_interval=" << tensor_refit_interval << "\n"
       << "lambda_mi=" << weights.lambda_mi << "\n"
       << "lambda_smooth=" << weights.lambda_smooth << "\n"
       << "lambda_dice=" << weights.lambda_dice << "\n"
       << "parzen_bins=" << parzen.bins << "\n"
       << "parzen_sigma=" << parzen.sigma << "\n"
       << "spacing=" << spacing << "\n"
       << "integration_steps=" << integration_steps << "\n"
       << "denoise_rank=" << denoise_rank << "\n"
       << "autocorr_threshold=" << autocorr_threshold << "\n"
       << "convergence_tol=" << convergence_tol << "\n"
       << "tensor_update=" << (tensor_update == TensorUpdate::refit ? "refit" : "gradient") << "\n"
       << "tensor_lr=" << tensor_lr << "\n"
       << "rigid_iterations=" << rigid_iterations << "\n"
       << "semi_supervised_dice=" << semi_supervised_dice << "\n"
       << "gauge_smoothing=" << gauge_smoothing << "\n"
       << "gauge_iterations=" << gauge_iterations << "\n";
    return os.str();
}

std::vector<Vec2> groupwise_rigid_shifts(const DiffusionSeries& series, int iterations,
                                         const RigidOptions& options) {
    validate_series(series);
    if (iterations < 1) throw Error("groupwise_rigid_shifts: need at least one iteration");
    const std::size_t n = series.frame_count();
    const std::vector<Image>& frames = series.frames;

    const std::vector<std::vector<std::size_t>> members = encoding_groups(series);
    std::vector<std::size_t> group(n);
    for (std::size_t g = 0; g < members.size(); ++g)
        for (std::size_t i : members[g]) group[i] = g;

    const auto count = static_cast<std::ptrdiff_t>(n);
    auto recentre = [&](std::vector<Vec2>& v) {
        Vec2 mean;
        for (const Vec2& s : v) mean = mean + s;
        mean = (1.0 / static_cast<double>(n)) * mean;
        for (Vec2& s : v) s = s - mean;
    };

    // Coarse passes: phase correlation tolerates the contrast mismatch against the
    // whole-stack template; repeat until the template stops moving.
    RigidOptions coarse = options;
    coarse.normalization = CrossPowerNormalization::phase;
    std::vector<Vec2> shifts(n);
    for (int pass = 0; pass < kMaxCoarsePasses; ++pass) {
        const Image reference = rank1_projection(pass == 0 ? frames : rigidly_aligned(frames, shifts));
        std::vector<Vec2> next(n);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            next[i] = estimate_shift(frames[i], reference, coarse);
        }
        recentre(next);
        double change = 0.0;
        for (std::size_t i = 0; i < n; ++i) change = std::max(change, (next[i] - shifts[i]).norm());
        shifts = std::move(next);
        if (pass > 0 && change < kCoarseTolerance) break;
    }

    // Refinement passes against contrast-matched templates.
    RigidOptions fine = options;
    fine.normalization = CrossPowerNormalization::none;
    for (int it = 0; it < iterations; ++it) {
        const std::vector<Image> aligned = rigidly_aligned(frames, shifts);
        const Image overall = rank1_projection(aligned);
        std::vector<Image> references(members.size(), overall);
        for (std::size_t g = 0; g < members.size(); ++g) {
            if (members[g].size() < kMinGroupFrames) continue;
            std::vector<Image> stack;
            for (std::size_t i : members[g]) stack.push_back(aligned[i]);
            references[g] = rank1_projection(stack);
        }
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            shifts[i] = estimate_shift(frames[i], references[group[i]], fine);
        }
        recentre(shifts);
    }

    // Each group is now consistent internally but carries its own offset from the
    // contrast-mismatched coarse passes. Tie every group to the b = 0 group, ignoring
    // pixels whose intensity depends on the encoding direction (anisotropic tissue).
    const std::vector<Image> aligned = rigidly_aligned(frames, shifts);
    std::vector<std::optional<Image>> templates(members.size());
    std::optional<std::size_t> anchor;
    for (std::size_t g = 0; g < members.size(); ++g) {
        if (members[g].size() < kMinGroupFrames) continue;
        std::vector<Image> stack;
        for (std::size_t i : members[g]) stack.push_back(aligned[i]);
        templates[g] = binomial_blur(rank1_projection(stack));
        if (!anchor && series.bvalues[members[g].front()] == 0.0) anchor = g;
    }
    if (!anchor) return shifts;
    const Image weights = isotropic_weights(series, members, templates);
    for (std::size_t g = 0; g < members.size(); ++g) {
        if (g == *anchor || !templates[g]) continue;
        const Vec2 offset = refine_shift_weighted(*templates[g], *templates[*anchor], weights);
        for (std::size_t i : members[g]) shifts[i] = shifts[i] + offset;
    }
    recentre(shifts);
    return shifts;
}

RegistrationResult register_groupwise(const DiffusionSeries& series, const MyocardiumMask* mask,
                                      const RegistrationConfig& cfg,
                                      const std::vector<MyocardiumMask>* frame_masks) {
    validate_series(series);
    cfg.validate();
    const std::size_t h = series.height, w = series.width, n = series.frame_count();
    const bool semi = cfg.mode == RegistrationMode::semi_supervised;
    if (semi) {
        if (!mask) throw Error("semi_supervised mode needs a template-space mask");
        if (!frame_masks || frame_masks->size() != n) throw Error("semi_supervised mode needs one mask per frame");
    }
    if (mask && (mask->height() != h || mask->width() != w)) throw Error("mask dimension mismatch");

    RegistrationResult result;
    result.mode = cfg.mode;

    // (1) intensities into the Parzen range
    const NormalizedSeries normalized = normalize_intensities(series);
    result.intensity_scale = normalized.scale;
    const std::vector<Image>& frames = normalized.series.frames;

    // (2) groupwise translations first
    result.rigid_shifts = groupwise_rigid_shifts(normalized.series, cfg.rigid_iterations);
    std::vector<Image> aligned = rigidly_aligned(frames, result.rigid_shifts);

    result.warps.assign(n, BSplineWarp::zero(h, w, cfg.spacing, cfg.integration_steps));
    std::vector<DenseField> deformable(n, DenseField(h, w));

    if (cfg.mode != RegistrationMode::rigid_only) {
        // (3) low-rank denoising of the aligned stack
        DiffusionSeries working = normalized.series.with_frames(aligned);
        if (cfg.mode != RegistrationMode::no_denoise) {
            DenoiseOptions dopt;
            dopt.max_rank = cfg.denoise_rank > 0 ? cfg.denoise_rank : static_cast<int>(std::min<std::size_t>(kDefaultDenoiseRank, n));
            dopt.autocorr_threshold = cfg.autocorr_threshold;
            working = denoise_frames(working, dopt).series;
        }
        // (4) S0 reference, (5) initial tensor
        const Image s0 = s0_reference(working);
        TensorField tensor = fit_tensor(working, s0);

        std::vector<Image> mask_sources;
        Image template_mask;
        Problem prob;
        prob.sources = &working.frames;
        prob.height = h;
        prob.width = w;
        prob.weights = cfg.weights;
        prob.similarity = cfg.mode == RegistrationMode::mse_loss ? Similarity::mse : Similarity::nmi;
        if (semi) {
            std::vector<Image> raw;
            for (const MyocardiumMask& m : *frame_masks) raw.push_back(m.as_image());
            mask_sources = rigidly_aligned(raw, result.rigid_shifts);
            template_mask = mask->as_image();
            prob.mask_sources = &mask_sources;
            prob.template_mask = &template_mask;
            if (prob.weights.lambda_dice == 0.0) prob.weights.lambda_dice = cfg.semi_supervised_dice;
        } else {
            prob.weights.lambda_dice = 0.0;
        }
        prob.set_pseudo(generate_pseudo_frames(tensor, working.bvalues, working.directions), cfg.parzen);

        // Group-mean deformations start from the shell gauge and stay there.
        if (cfg.gauge_iterations > 0)
            result.warps = shell_gauge_warps(normalized.series.with_frames(aligned), cfg.spacing,
                                             cfg.integration_steps, cfg.gauge_smoothing, cfg.gauge_iterations);
        std::vector<FrameState> states(n);
        for (std::size_t i = 0; i < n; ++i) {
            states[i].warp = result.warps[i];
            prob.refresh(i, states[i]);
        }
        const std::vector<std::vector<std::size_t>> sets = gauge_sets(working);
        std::vector<double> steps(sets.size(), cfg.field_lr);
        result.loss_trace.push_back(summarize(0, states));

        const auto count = static_cast<std::ptrdiff_t>(n);
        int rising = 0;
        // (6) alternate field updates and tensor updates
        for (int it = 1; it <= cfg.max_outer_iters; ++it) {
            const double before = result.loss_trace.back().total;
            for (std::size_t k = 0; k < sets.size(); ++k) descend(prob, sets[k], states, steps[k], cfg.field_lr);
            LossRecord rec = summarize(it, states);

            const bool refit_now =
                cfg.tensor_update == TensorUpdate::gradient || it % cfg.tensor_refit_interval == 0;
            if (refit_now) {
                std::vector<Image> current(n);
                for (std::size_t i = 0; i < n; ++i) current[i] = states[i].warped;
                const DiffusionSeries warped_series = working.with_frames(std::move(current));
                TensorField candidate;
                if (cfg.tensor_update == TensorUpdate::refit) {
                    candidate = fit_tensor(warped_series, s0);
                } else {
                    TensorStepConfig tcfg;
                    tcfg.learning_rate = cfg.tensor_lr;
                    tcfg.parzen = cfg.parzen;
                    TensorStepResult step = tensor_gradient_step(tensor, warped_series, tcfg);
                    candidate = std::move(step.tensor);
                }
                Problem trial = prob;
                trial.set_pseudo(generate_pseudo_frames(candidate, working.bvalues, working.directions), cfg.parzen);
                std::vector<FrameTerms> terms(n);
#pragma omp parallel for schedule(static)
                for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
                    const auto i = static_cast<std::size_t>(ii);
                    terms[i] = trial.terms(i, states[i].warped, states[i].u,
                                           trial.use_dice() ? &states[i].warped_mask : nullptr);
                }
                double total = 0.0;
                for (const FrameTerms& t : terms) total += t.total();
                // A refit is kept only when it does not raise the objective.
                if (total <= rec.total) {
                    prob = std::move(trial);
                    tensor = std::move(candidate);
                    for (std::size_t i = 0; i < n; ++i) states[i].terms = terms[i];
                    rec = summarize(it, states);
                    ++result.refits_accepted;
                }
            }
            result.loss_trace.push_back(rec);
            result.iterations = it;

            rising = rec.total > before ? rising + 1 : 0;
            if (rising >= 20) {
                warn("register_groupwise: loss rose for 20 consecutive iterations, aborting");
                result.diverged = true;
                break;
            }
            const double rel = (before - rec.total) / std::max(std::abs(rec.total), 1e-12);
            if (it >= cfg.tensor_refit_interval && rel >= 0.0 && rel < cfg.convergence_tol) {
                result.converged = true;
                break;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            result.warps[i] = states[i].warp;
            deformable[i] = std::move(states[i].u);
        }
    } else {
        result.converged = true;
    }

    // (7) fields act on the input frames, never the denoised ones
    result.fields.resize(n);
    std::vector<Image> corrected(n);
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        result.fields[i] = add_fields(deformable[i], uniform_field(h, w, result.rigid_shifts[i]));
        corrected[i] = warp_image(series.frames[i], result.fields[i]);
    }
    result.corrected_series = series.with_frames(std::move(corrected));
    result.corrected_from_original = true;
    result.final_tensor = fit_tensor(result.corrected_series);
    return result;
}

AblationResult run_ablation(const DiffusionSeries& series, const MyocardiumMask& mask,
                            const std::vector<RegistrationMode>& modes, const RegistrationConfig& cfg,
                            const std::vector<MyocardiumMask>* frame_masks,
                            const std::vector<DenseField>* truth_fields) {
    if (modes.empty()) throw Error("run_ablation: no modes given");
    if (truth_fields && truth_fields->size() != series.frame_count())
        throw Error("run_ablation: truth field count differs from frame count");
    AblationResult out;
    for (RegistrationMode mode : modes) {
        RegistrationConfig c = cfg;
        c.mode = mode;
        RegistrationResult r = register_groupwise(series, &mask, c, frame_masks);
        AblationRow row;
        row.mode = mode;
        row.ne_percent = negative_eigen_percent(r.final_tensor, mask).ne_percent;
        const HagReport hag = hag_line_profiles(helix_angle_map(r.final_tensor, mask), mask);
        row.mean_r2 = hag.mean_r2;
        row.mean_rmse = hag.mean_rmse;
        row.included_profiles = hag.included_count;
        if (truth_fields) row.median_epe = field_error(r.fields, *truth_fields, &mask).median;
        out.table.push_back(row);
        out.results.push_back(std::move(r));
    }
    return out;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "mode" << std::right << std::setw(10) << "NE%" << std::setw(10) << "R2"
       << std::setw(10) << "RMSE" << std::setw(10) << "profiles" << std::setw(12) << "median_epe" << "\n";
    os << std::fixed;
    for (const AblationRow& r : rows) {
        os << std::left << std::setw(16) << to_string(r.mode) << std::right << std::setprecision(3) << std::setw(10)
           << r.ne_percent << std::setw(10) << r.mean_r2 << std::setw(10) << r.mean_rmse << std::setw(10)
           << r.included_profiles << std::setw(12);
        if (r.median_epe) os << *r.median_epe;
        else os << "-";
        os << "\n";
    }
    return os.str();
}

}  // namespace dtcmr
