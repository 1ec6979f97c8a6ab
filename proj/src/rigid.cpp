#include "dtcmr/rigid.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <vector>

#include <Eigen/Dense>
#include <fftw3.h>

#include "dtcmr/diagnostics.hpp"
#include "dtcmr/transform.hpp"

namespace dtcmr {
namespace {

using cplx = std::complex<double>;

std::mutex g_plan_mutex;  // FFTW planning is not thread-safe

std::vector<cplx> fft2(const std::vector<cplx>& in, std::size_t h, std::size_t w, int sign) {
    std::vector<cplx> out(in.size());
    fftw_plan plan;
    {
        std::lock_guard lock(g_plan_mutex);
        // ESTIMATE plans are reproducible run to run.
        plan = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w),
                                reinterpret_cast<fftw_complex*>(const_cast<cplx*>(in.data())),
                                reinterpret_cast<fftw_complex*>(out.data()), sign, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard lock(g_plan_mutex);
        fftw_destroy_plan(plan);
    }
    return out;
}

std::vector<cplx> to_complex(const Image& img, bool remove_mean) {
    double mean = 0.0;
    if (remove_mean) {
        for (double v : img) mean += v;
        mean /= static_cast<double>(img.size());
    }
    std::vector<cplx> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = img[i] - mean;
    return out;
}

double signed_frequency(std::size_t k, std::size_t n) {
    return k < (n + 1) / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(n);
}

bool is_flat(const Image& img) {
    const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
    return !(*hi - *lo > 1e-12 * std::max(1.0, std::abs(*hi)));
}

// Real part of the inverse DFT of `spectrum` at arbitrary positions ys x xs.
std::vector<double> dft_at(const std::vector<cplx>& spectrum, std::size_t h, std::size_t w,
                           const std::vector<double>& ys, const std::vector<double>& xs) {
    const double two_pi = 2.0 * std::numbers::pi;
    // Contract columns: tmp(ky, j) = sum_kx S(ky, kx) e^{i 2pi kx x_j / w}
    std::vector<cplx> tmp(h * xs.size());
    for (std::size_t kx = 0; kx < w; ++kx) {
        const double f = signed_frequency(kx, w) / static_cast<double>(w);
        for (std::size_t j = 0; j < xs.size(); ++j) {
            const cplx e = std::polar(1.0, two_pi * f * xs[j]);
            for (std::size_t ky = 0; ky < h; ++ky) tmp[ky * xs.size() + j] += spectrum[ky * w + kx] * e;
        }
    }
    std::vector<double> out(ys.size() * xs.size());
    for (std::size_t i = 0; i < ys.size(); ++i)
        for (std::size_t ky = 0; ky < h; ++ky) {
            const cplx e = std::polar(1.0, two_pi * signed_frequency(ky, h) / static_cast<double>(h) * ys[i]);
            for (std::size_t j = 0; j < xs.size(); ++j) out[i * xs.size() + j] += (tmp[ky * xs.size() + j] * e).real();
        }
    return out;
}

double parabolic_offset(double left, double centre, double right) {
    const double denom = left - 2.0 * centre + right;
    if (!(denom < 0.0)) return 0.0;
    return std::clamp(0.5 * (left - right) / denom, -0.5, 0.5);
}

}  // namespace

Vec2 estimate_shift(const Image& moving, const Image& reference, const RigidOptions& options) {
    if (!moving.same_shape(reference)) throw Error("rigid_baseline: dimension mismatch");
    if (options.upsample_factor < 1) throw Error("upsample factor must be >= 1");
    if (moving.empty()) throw Error("rigid_baseline: empty image");
    if (is_flat(moving) || is_flat(reference)) {
        warn("rigid_baseline: flat image, returning zero shift");
        return {};
    }
    const std::size_t h = moving.height(), w = moving.width();
    const auto fm = fft2(to_complex(moving, true), h, w, FFTW_FORWARD);
    const auto fr = fft2(to_complex(reference, true), h, w, FFTW_FORWARD);

    std::vector<cplx> cross(fm.size());
    double peak_mag = 0.0;
    for (std::size_t i = 0; i < cross.size(); ++i) {
        cross[i] = std::conj(fr[i]) * fm[i];
        peak_mag = std::max(peak_mag, std::abs(cross[i]));
    }
    if (options.normalization == CrossPowerNormalization::phase) {
        const double eps = 1e-12 * peak_mag;
        for (cplx& c : cross) c /= (std::abs(c) + eps);
    }

    const auto corr = fft2(cross, h, w, FFTW_BACKWARD);
    std::size_t best = 0;
    for (std::size_t i = 1; i < corr.size(); ++i)
        if (corr[i].real() > corr[best].real()) best = i;
    const double y0 = signed_frequency(best / w, h);
    const double x0 = signed_frequency(best % w, w);

    // Upsampled search over +-0.75 px around the integer peak.
    const int f = options.upsample_factor;
    const int half = static_cast<int>(std::ceil(0.75 * f));
    std::vector<double> ys, xs;
    for (int k = -half; k <= half; ++k) {
        ys.push_back(y0 + static_cast<double>(k) / f);
        xs.push_back(x0 + static_cast<double>(k) / f);
    }
    const auto up = dft_at(cross, h, w, ys, xs);
    const std::size_t n = xs.size();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (up[i * n + j] > up[bi * n + bj]) {
                bi = i;
                bj = j;
            }
    double dy = 0.0, dx = 0.0;
    if (bi > 0 && bi + 1 < n) dy = parabolic_offset(up[(bi - 1) * n + bj], up[bi * n + bj], up[(bi + 1) * n + bj]);
    if (bj > 0 && bj + 1 < n) dx = parabolic_offset(up[bi * n + bj - 1], up[bi * n + bj], up[bi * n + bj + 1]);
    return {xs[bj] + dx / f, ys[bi] + dy / f};
}

Vec2 refine_shift_weighted(const Image& moving, const Image& reference, const Image& weights, Vec2 initial,
                           int max_iterations) {
    if (moving.height() != reference.height() || moving.width() != reference.width() ||
        weights.height() != reference.height() || weights.width() != reference.width())
        throw Error("refine_shift_weighted: image sizes differ");
    const std::size_t h = moving.height(), w = moving.width();
    Vec2 t = initial;
    double gain = 1.0, offset = 0.0;
    for (int it = 0; it < max_iterations; ++it) {
        DenseField grad;
        const Image warped = warp_image(moving, uniform_field(h, w, t), grad);
        Eigen::Matrix4d normal = Eigen::Matrix4d::Zero();
        Eigen::Vector4d rhs = Eigen::Vector4d::Zero();
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                const double wt = weights(r, c);
                if (wt <= 0.0) continue;
                const double res = gain * warped(r, c) + offset - reference(r, c);
                const Eigen::Vector4d j(gain * grad(r, c).x, gain * grad(r, c).y, warped(r, c), 1.0);
                normal.noalias() += wt * j * j.transpose();
                rhs.noalias() += wt * res * j;
            }
        const Eigen::LDLT<Eigen::Matrix4d> ldlt(normal);
        if (ldlt.info() != Eigen::Success || !(std::abs(ldlt.vectorD().minCoeff()) > 1e-12 * normal.trace())) {
            warn("refine_shift_weighted: singular system, keeping the initial shift");
            return initial;
        }
        const Eigen::Vector4d step = -ldlt.solve(rhs);
        t = t + Vec2{step[0], step[1]};
        gain += step[2];
        offset += step[3];
        if (std::hypot(step[0], step[1]) < 1e-7) break;
    }
    return t;
}

DenseField rigid_baseline(const Image& moving, const Image& reference, const RigidOptions& options) {
    return uniform_field(moving.height(), moving.width(), estimate_shift(moving, reference, options));
}

Image fourier_shift(const Image& image, Vec2 shift) {
    const std::size_t h = image.height(), w = image.width();
    auto spec = fft2(to_complex(image, false), h, w, FFTW_FORWARD);
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t ky = 0; ky < h; ++ky)
        for (std::size_t kx = 0; kx < w; ++kx) {
            double fy = signed_frequency(ky, h) / static_cast<double>(h);
            double fx = signed_frequency(kx, w) / static_cast<double>(w);
            // Nyquist bins carry no well-defined phase direction; keep them real.
            if (h % 2 == 0 && ky == h / 2) fy = 0.0;
            if (w % 2 == 0 && kx == w / 2) fx = 0.0;
            spec[ky * w + kx] *= std::polar(1.0, -two_pi * (fx * shift.x + fy * shift.y));
        }
    const auto back = fft2(spec, h, w, FFTW_BACKWARD);
    Image out(h, w);
    const double norm = 1.0 / static_cast<double>(h * w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = back[i].real() * norm;
    return out;
}

}  // namespace dtcmr
