#include "dtcmr/objective.hpp"

#include <algorithm>
#include <cmath>

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace {

constexpr double kDiceEpsilon = 1e-7;
constexpr double kEntropyFloor = 1e-15;

double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }
double safe_log(double p) { return p > 0.0 ? std::log(p) : 0.0; }

}  // namespace

void ParzenConfig::validate() const {
    if (bins < 8) throw Error("Parzen window needs at least 8 bins");
    if (!(sigma > 0.0)) throw Error("Parzen sigma must be positive");
}

void LossWeights::validate() const {
    if (lambda_mi < 0.0 || lambda_smooth < 0.0 || lambda_dice < 0.0) throw Error("loss weights must be non-negative");
    if (!(lambda_mi > 0.0 || lambda_smooth > 0.0 || lambda_dice > 0.0)) throw Error("at least one loss weight must be positive");
}

double parzen_kernel(double d, const ParzenConfig& cfg) {
    const double r = cfg.support();
    if (std::abs(d) >= r) return 0.0;
    const double s2 = 2.0 * cfg.sigma * cfg.sigma;
    return std::exp(-d * d / s2) - std::exp(-r * r / s2);
}

double parzen_kernel_derivative(double d, const ParzenConfig& cfg) {
    if (std::abs(d) >= cfg.support()) return 0.0;
    const double s2 = cfg.sigma * cfg.sigma;
    return -d / s2 * std::exp(-d * d / (2.0 * s2));
}

namespace {

struct PixelTaps {
    int lo = 0;
    bool clamped = false;
    double coord = 0.0;
};

PixelTaps locate(double v, const ParzenConfig& cfg, int taps) {
    PixelTaps t;
    const double span = static_cast<double>(cfg.bins - 1);
    if (!(v >= 0.0)) {
        v = 0.0;
        t.clamped = true;
    } else if (v > 1.0) {
        v = 1.0;
        t.clamped = true;
    }
    t.coord = v * span;
    const int lo = static_cast<int>(std::ceil(t.coord - cfg.support()));
    t.lo = std::clamp(lo, 0, cfg.bins - taps);
    return t;
}

int tap_count(const ParzenConfig& cfg) {
    return std::min(cfg.bins, static_cast<int>(std::floor(2.0 * cfg.support())) + 1);
}

}  // namespace

ParzenNmi::ParzenNmi(const Image& reference, const ParzenConfig& cfg)
    : cfg_(cfg), height_(reference.height()), width_(reference.width()) {
    cfg_.validate();
    taps_ = tap_count(cfg_);
    const std::size_t n = reference.size();
    ref_lo_.resize(n);
    ref_w_.resize(n * static_cast<std::size_t>(taps_));
    ref_sum_.resize(n);
    for (std::size_t p = 0; p < n; ++p) {
        const PixelTaps t = locate(reference[p], cfg_, taps_);
        ref_lo_[p] = t.lo;
        double s = 0.0;
        for (int k = 0; k < taps_; ++k) {
            const double w = parzen_kernel(t.coord - (t.lo + k), cfg_);
            ref_w_[p * static_cast<std::size_t>(taps_) + static_cast<std::size_t>(k)] = w;
            s += w;
        }
        ref_sum_[p] = s;
    }
}

double ParzenNmi::value(const Image& b) const { return evaluate(b, nullptr); }

double ParzenNmi::value_and_gradient(const Image& b, Image& gradient) const { return evaluate(b, &gradient); }

double ParzenNmi::evaluate(const Image& b, Image* gradient) const {
    if (b.height() != height_ || b.width() != width_) throw Error("nmi: dimension mismatch");
    const int bins = cfg_.bins;
    const auto k = static_cast<std::size_t>(taps_);
    const std::size_t n = b.size();
    const double span = static_cast<double>(bins - 1);

    std::vector<int> lo_b(n);
    std::vector<double> wb(n * k), dwb(gradient ? n * k : 0);
    std::vector<double> hist(static_cast<std::size_t>(bins * bins), 0.0);
    for (std::size_t p = 0; p < n; ++p) {
        const PixelTaps t = locate(b[p], cfg_, taps_);
        lo_b[p] = t.lo;
        double* w = &wb[p * k];
        for (std::size_t j = 0; j < k; ++j) w[j] = parzen_kernel(t.coord - (t.lo + static_cast<int>(j)), cfg_);
        if (gradient) {
            double* dw = &dwb[p * k];
            for (std::size_t j = 0; j < k; ++j)
                dw[j] = t.clamped ? 0.0
                                  : parzen_kernel_derivative(t.coord - (t.lo + static_cast<int>(j)), cfg_) * span;
        }
        const double* wa = &ref_w_[p * k];
        for (std::size_t i = 0; i < k; ++i) {
            if (wa[i] == 0.0) continue;
            double* row = &hist[static_cast<std::size_t>(ref_lo_[p] + static_cast<int>(i)) * static_cast<std::size_t>(bins) +
                                static_cast<std::size_t>(t.lo)];
            for (std::size_t j = 0; j < k; ++j) row[j] += wa[i] * w[j];
        }
    }

    double z = 0.0;
    for (double h : hist) z += h;
    std::vector<double> pa(static_cast<std::size_t>(bins), 0.0), pb(static_cast<std::size_t>(bins), 0.0);
    double hab = 0.0;
    for (int i = 0; i < bins; ++i)
        for (int j = 0; j < bins; ++j) {
            double& p = hist[static_cast<std::size_t>(i * bins + j)];
            p /= z;
            pa[static_cast<std::size_t>(i)] += p;
            pb[static_cast<std::size_t>(j)] += p;
            hab -= xlogx(p);
        }
    double ha = 0.0, hb = 0.0;
    for (int i = 0; i < bins; ++i) {
        ha -= xlogx(pa[static_cast<std::size_t>(i)]);
        hb -= xlogx(pb[static_cast<std::size_t>(i)]);
    }
    if (hab < kEntropyFloor) {
        warn("nmi: zero joint entropy, returning 2");
        if (gradient) *gradient = Image(height_, width_);
        return 2.0;
    }
    const double value = (ha + hb) / hab;
    if (!gradient) return value;

    // G_ij = d NMI / d p_ij; constant offsets cancel through the normalization term.
    std::vector<double> g(hist.size());
    double c = 0.0;
    for (int i = 0; i < bins; ++i)
        for (int j = 0; j < bins; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i * bins + j);
            g[idx] = (-(safe_log(pa[static_cast<std::size_t>(i)]) + 1.0) - (safe_log(pb[static_cast<std::size_t>(j)]) + 1.0) +
                      value * (safe_log(hist[idx]) + 1.0)) /
                     hab;
            c += g[idx] * hist[idx];
        }
    *gradient = Image(height_, width_);
    for (std::size_t p = 0; p < n; ++p) {
        const double* wa = &ref_w_[p * k];
        const double* dw = &dwb[p * k];
        double s1 = 0.0, dsb = 0.0;
        for (std::size_t j = 0; j < k; ++j) dsb += dw[j];
        for (std::size_t i = 0; i < k; ++i) {
            if (wa[i] == 0.0) continue;
            const double* grow = &g[static_cast<std::size_t>(ref_lo_[p] + static_cast<int>(i)) * static_cast<std::size_t>(bins) +
                                    static_cast<std::size_t>(lo_b[p])];
            double inner = 0.0;
            for (std::size_t j = 0; j < k; ++j) inner += grow[j] * dw[j];
            s1 += wa[i] * inner;
        }
        (*gradient)[p] = (s1 - c * ref_sum_[p] * dsb) / z;
    }
    return value;
}

Grid<double> joint_histogram(const Image& a, const Image& b, const ParzenConfig& cfg) {
    cfg.validate();
    if (!a.same_shape(b)) throw Error("joint_histogram: dimension mismatch");
    const int taps = tap_count(cfg);
    Grid<double> hist(static_cast<std::size_t>(cfg.bins), static_cast<std::size_t>(cfg.bins));
    std::vector<double> wa(static_cast<std::size_t>(taps)), wb(static_cast<std::size_t>(taps));
    for (std::size_t p = 0; p < a.size(); ++p) {
        const PixelTaps ta = locate(a[p], cfg, taps), tb = locate(b[p], cfg, taps);
        for (int k = 0; k < taps; ++k) {
            wa[static_cast<std::size_t>(k)] = parzen_kernel(ta.coord - (ta.lo + k), cfg);
            wb[static_cast<std::size_t>(k)] = parzen_kernel(tb.coord - (tb.lo + k), cfg);
        }
        for (int i = 0; i < taps; ++i)
            for (int j = 0; j < taps; ++j)
                hist(static_cast<std::size_t>(ta.lo + i), static_cast<std::size_t>(tb.lo + j)) +=
                    wa[static_cast<std::size_t>(i)] * wb[static_cast<std::size_t>(j)];
    }
    double z = 0.0;
    for (double h : hist) z += h;
    for (double& h : hist) h /= z;
    return hist;
}

double nmi(const Image& a, const Image& b, const ParzenConfig& cfg) {
    if (!a.same_shape(b)) throw Error("nmi: dimension mismatch");
    return ParzenNmi(a, cfg).value(b);
}

Image nmi_gradient(const Image& a, const Image& b, const ParzenConfig& cfg) {
    if (!a.same_shape(b)) throw Error("nmi: dimension mismatch");
    Image g;
    ParzenNmi(a, cfg).value_and_gradient(b, g);
    return g;
}

double smoothness(const DenseField& f) {
    const std::size_t h = f.height(), w = f.width();
    if (h < 2 || w < 2) throw Error("smoothness needs at least 2x2");
    double s = 0.0;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            if (c + 1 < w) {
                const Vec2 d = f(r, c + 1) - f(r, c);
                s += d.x * d.x + d.y * d.y;
            }
            if (r + 1 < h) {
                const Vec2 d = f(r + 1, c) - f(r, c);
                s += d.x * d.x + d.y * d.y;
            }
        }
    return s / static_cast<double>(h * w);
}

DenseField smoothness_gradient(const DenseField& f) {
    const std::size_t h = f.height(), w = f.width();
    if (h < 2 || w < 2) throw Error("smoothness needs at least 2x2");
    const double k = 2.0 / static_cast<double>(h * w);
    DenseField g(h, w);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            if (c + 1 < w) {
                const Vec2 d = k * (f(r, c + 1) - f(r, c));
                g(r, c + 1) = g(r, c + 1) + d;
                g(r, c) = g(r, c) - d;
            }
            if (r + 1 < h) {
                const Vec2 d = k * (f(r + 1, c) - f(r, c));
                g(r + 1, c) = g(r + 1, c) + d;
                g(r, c) = g(r, c) - d;
            }
        }
    return g;
}

double soft_dice(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw Error("soft_dice: dimension mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += a[i] * b[i];
        den += a[i] * a[i] + b[i] * b[i];
    }
    if (den == 0.0) {
        warn("soft_dice: both masks empty, returning 1");
        return 1.0;
    }
    return 2.0 * num / (den + kDiceEpsilon);
}

Image soft_dice_gradient(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw Error("soft_dice: dimension mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += a[i] * b[i];
        den += a[i] * a[i] + b[i] * b[i];
    }
    Image g(a.height(), a.width());
    if (den == 0.0) return g;
    den += kDiceEpsilon;
    for (std::size_t i = 0; i < a.size(); ++i) g[i] = 2.0 * (a[i] * den - num * 2.0 * b[i]) / (den * den);
    return g;
}

double mean_squared_error(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw Error("mse: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

Image mean_squared_error_gradient(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw Error("mse: dimension mismatch");
    Image g(a.height(), a.width());
    const double k = 2.0 / static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) g[i] = k * (b[i] - a[i]);
    return g;
}

LossBreakdown total_loss(std::span<const Image> warped, std::span<const Image> pseudo,
                         std::span<const DenseField> fields, const MaskGuidance* masks, const LossWeights& weights,
                         const ParzenConfig& cfg, Similarity similarity) {
    weights.validate();
    const std::size_t n = warped.size();
    if (pseudo.size() != n || fields.size() != n) throw Error("total_loss: frame counts differ");
    if (masks && masks->warped_masks.size() != n) throw Error("total_loss: mask count differs");

    LossBreakdown out;
    out.similarity_per_frame.assign(n, 0.0);
    out.smooth_per_frame.assign(n, 0.0);
    out.dice_per_frame.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (weights.lambda_mi > 0.0)
            out.similarity_per_frame[i] =
                weights.lambda_mi * (similarity == Similarity::nmi ? -nmi(pseudo[i], warped[i], cfg)
                                                                   : mean_squared_error(pseudo[i], warped[i]));
        if (weights.lambda_smooth > 0.0) out.smooth_per_frame[i] = weights.lambda_smooth * smoothness(fields[i]);
        if (masks && weights.lambda_dice > 0.0)
            out.dice_per_frame[i] = weights.lambda_dice * (1.0 - soft_dice(masks->template_mask, masks->warped_masks[i]));
    }
    // Fixed summation order keeps results reproducible.
    for (std::size_t i = 0; i < n; ++i) {
        out.similarity += out.similarity_per_frame[i];
        out.smooth += out.smooth_per_frame[i];
        out.dice += out.dice_per_frame[i];
    }
    out.total = out.similarity + out.smooth + out.dice;
    return out;
}

}  // namespace dtcmr
