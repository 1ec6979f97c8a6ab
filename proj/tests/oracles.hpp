#pragma once
// Independent reference implementations used by the tests. None of these call into the
// library routine they are checking.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "dtcmr/image.hpp"
#include "dtcmr/series.hpp"

namespace oracle {

using dtcmr::DenseField;
using dtcmr::Image;

inline Image random_image(std::size_t h, std::size_t w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(h, w);
    for (double& v : img) v = u(rng);
    return img;
}

inline DenseField random_field(std::size_t h, std::size_t w, std::mt19937_64& rng, double amp) {
    std::uniform_real_distribution<double> u(-amp, amp);
    DenseField f(h, w);
    for (auto& v : f) v = {u(rng), u(rng)};
    return f;
}

// Singular values of an m x n matrix (m >= n) by one-sided Jacobi rotations.
inline std::vector<double> jacobi_singular_values(std::vector<std::vector<double>> cols) {
    const std::size_t n = cols.size();
    const std::size_t m = n ? cols[0].size() : 0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                double a = 0.0, b = 0.0, c = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    a += cols[p][i] * cols[p][i];
                    b += cols[q][i] * cols[q][i];
                    c += cols[p][i] * cols[q][i];
                }
                if (std::abs(c) <= 1e-300) continue;
                off = std::max(off, std::abs(c) / std::sqrt(a * b));
                const double zeta = (b - a) / (2.0 * c);
                const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t), sn = cs * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = cols[p][i], y = cols[q][i];
                    cols[p][i] = cs * x - sn * y;
                    cols[q][i] = sn * x + cs * y;
                }
            }
        if (off < 1e-15) break;
    }
    std::vector<double> s;
    for (const auto& c : cols) {
        double sum = 0.0;
        for (double v : c) sum += v * v;
        s.push_back(std::sqrt(sum));
    }
    std::sort(s.rbegin(), s.rend());
    return s;
}

// Frobenius error of the best rank-r approximation: sqrt of the tail singular energy.
inline double best_rank_error(const std::vector<Image>& frames, std::size_t r) {
    std::vector<std::vector<double>> cols;
    for (const Image& f : frames) cols.emplace_back(f.begin(), f.end());
    const auto s = jacobi_singular_values(cols);
    double tail = 0.0;
    for (std::size_t k = r; k < s.size(); ++k) tail += s[k] * s[k];
    return std::sqrt(tail);
}

// Symmetric 3x3 eigenvalues (descending) by cyclic Jacobi rotations.
inline std::array<double, 3> jacobi_eigenvalues(const dtcmr::Sym3& d) {
    double a[3][3] = {{d[0], d[1], d[2]}, {d[1], d[3], d[4]}, {d[2], d[4], d[5]}};
    for (int sweep = 0; sweep < 100; ++sweep) {
        const double off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if (off < 1e-300) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (a[p][q] == 0.0) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < 3; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (int k = 0; k < 3; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
    }
    std::array<double, 3> ev{a[0][0], a[1][1], a[2][2]};
    std::sort(ev.rbegin(), ev.rend());
    return ev;
}

// Truncated, shifted Gaussian bump (same definition as the documented Parzen window).
inline double bump(double d, double sigma) {
    const double r = 4.0 * sigma;
    if (std::abs(d) >= r) return 0.0;
    return std::exp(-d * d / (2 * sigma * sigma)) - std::exp(-r * r / (2 * sigma * sigma));
}

// Naive per-pixel accumulation of the soft joint histogram over all bin pairs.
inline std::vector<std::vector<double>> naive_histogram(const Image& a, const Image& b, int bins, double sigma) {
    std::vector<std::vector<double>> h(bins, std::vector<double>(bins, 0.0));
    double total = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        const double ca = std::clamp(a[p], 0.0, 1.0) * (bins - 1);
        const double cb = std::clamp(b[p], 0.0, 1.0) * (bins - 1);
        for (int i = 0; i < bins; ++i)
            for (int j = 0; j < bins; ++j) {
                const double v = bump(ca - i, sigma) * bump(cb - j, sigma);
                h[i][j] += v;
                total += v;
            }
    }
    for (auto& row : h)
        for (double& v : row) v /= total;
    return h;
}

inline double naive_nmi(const Image& a, const Image& b, int bins, double sigma) {
    const auto h = naive_histogram(a, b, bins, sigma);
    std::vector<double> pa(bins, 0.0), pb(bins, 0.0);
    double hab = 0.0;
    for (int i = 0; i < bins; ++i)
        for (int j = 0; j < bins; ++j) {
            pa[i] += h[i][j];
            pb[j] += h[i][j];
            if (h[i][j] > 0) hab -= h[i][j] * std::log(h[i][j]);
        }
    double ha = 0.0, hb = 0.0;
    for (int i = 0; i < bins; ++i) {
        if (pa[i] > 0) ha -= pa[i] * std::log(pa[i]);
        if (pb[i] > 0) hb -= pb[i] * std::log(pb[i]);
    }
    return (ha + hb) / hab;
}

// Mean squared forward differences, differences past the far border count as zero.
inline double naive_smoothness(const DenseField& f) {
    double s = 0.0;
    for (std::size_t r = 0; r < f.height(); ++r)
        for (std::size_t c = 0; c < f.width(); ++c) {
            if (c + 1 < f.width()) {
                const auto d = f(r, c + 1) - f(r, c);
                s += d.x * d.x + d.y * d.y;
            }
            if (r + 1 < f.height()) {
                const auto d = f(r + 1, c) - f(r, c);
                s += d.x * d.x + d.y * d.y;
            }
        }
    return s / static_cast<double>(f.size());
}

// Largest relative deviation, with the denominator floored so near-zero entries compare absolutely.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
    }
    return worst;
}

// Central differences of f over a flat parameter vector.
inline std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> x, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// Unweighted Gauss-Newton on S = s0 exp(-b g^T D g), started from the isotropic guess.
inline std::array<double, 7> gauss_newton_tensor(const std::vector<double>& signal, const std::vector<double>& bvals,
                                                 const std::vector<dtcmr::Direction>& dirs) {
    Eigen::Matrix<double, 7, 1> x = Eigen::Matrix<double, 7, 1>::Zero();
    double s0 = 0.0;
    for (std::size_t k = 0; k < signal.size(); ++k)
        if (bvals[k] == 0.0) s0 = std::max(s0, signal[k]);
    x(0) = s0;
    x(1) = x(4) = x(6) = 1e-3;
    for (int it = 0; it < 100; ++it) {
        Eigen::MatrixXd J(signal.size(), 7);
        Eigen::VectorXd res(signal.size());
        for (std::size_t k = 0; k < signal.size(); ++k) {
            const auto& g = dirs[k];
            const double b = bvals[k];
            const std::array<double, 6> q{g[0] * g[0], 2 * g[0] * g[1], 2 * g[0] * g[2],
                                          g[1] * g[1], 2 * g[1] * g[2], g[2] * g[2]};
            double form = 0.0;
            for (int c = 0; c < 6; ++c) form += q[c] * x(1 + c);
            const double e = std::exp(-b * form);
            res(k) = signal[k] - x(0) * e;
            J(k, 0) = e;
            for (int c = 0; c < 6; ++c) J(k, 1 + c) = -b * q[c] * x(0) * e;
        }
        // Column scaling keeps the normal equations well conditioned (s0 ~ 1, D ~ 1e-3).
        Eigen::Matrix<double, 7, 1> scale;
        for (int c = 0; c < 7; ++c) scale(c) = std::max(J.col(c).norm(), 1e-300);
        const Eigen::MatrixXd Js = J * scale.cwiseInverse().asDiagonal();
        const Eigen::VectorXd step = Js.colPivHouseholderQr().solve(res).cwiseQuotient(scale);
        x += step;
        if (step.tail<6>().cwiseAbs().maxCoeff() < 1e-16 && std::abs(step(0)) < 1e-14) break;
    }
    return {x(0), x(1), x(2), x(3), x(4), x(5), x(6)};
}

}  // namespace oracle
