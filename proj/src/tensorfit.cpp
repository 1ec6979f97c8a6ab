#include "dtcmr/tensorfit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace {

constexpr double kFloorFraction = 1e-6;

double series_max(const DiffusionSeries& s) {
    double m = 0.0;
    for (const Image& f : s.frames)
        for (double v : f) m = std::max(m, v);
    return m;
}

std::string describe(const Direction& g) {
    std::ostringstream os;
    os << "(" << g[0] << ", " << g[1] << ", " << g[2] << ")";
    return os.str();
}

// Rejects encoding sets that cannot determine the unknowns.
void check_rank(const EncodingMatrix& enc, const DiffusionSeries& s, bool fixed_s0) {
    const auto n = static_cast<Eigen::Index>(enc.rows.size());
    const Eigen::Index cols = fixed_s0 ? 6 : 7;
    Eigen::MatrixXd a(n, cols);
    for (Eigen::Index k = 0; k < n; ++k)
        for (Eigen::Index j = 0; j < cols; ++j)
            a(k, j) = enc.rows[static_cast<std::size_t>(k)][static_cast<std::size_t>(j + (fixed_s0 ? 1 : 0))];
    // Column scaling keeps the rank threshold independent of b.
    for (Eigen::Index j = 0; j < cols; ++j) {
        const double norm = a.col(j).norm();
        if (norm > 0.0) a.col(j) /= norm;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    qr.setThreshold(1e-10);
    if (qr.rank() >= cols) return;

    std::vector<Direction> distinct;
    for (std::size_t k = 0; k < s.directions.size(); ++k) {
        if (s.bvalues[k] <= 0.0) continue;
        const Direction& g = s.directions[k];
        const bool seen = std::any_of(distinct.begin(), distinct.end(), [&](const Direction& d) {
            const double dot = d[0] * g[0] + d[1] * g[1] + d[2] * g[2];
            return std::abs(std::abs(dot) - 1.0) < 1e-9;
        });
        if (!seen) distinct.push_back(g);
    }
    std::ostringstream os;
    os << "rank-deficient encoding matrix (rank " << qr.rank() << " < " << cols << "); directions:";
    for (const Direction& g : distinct) os << " " << describe(g);
    if (distinct.empty()) os << " none with b > 0";
    throw Error(os.str());
}

}  // namespace

void check_encoding(const DiffusionSeries& series, bool fixed_s0) {
    check_rank(EncodingMatrix::from(series.bvalues, series.directions), series, fixed_s0);
}

bool encoding_is_full_rank(const DiffusionSeries& series, bool fixed_s0) {
    try {
        check_encoding(series, fixed_s0);
    } catch (const Error&) {
        return false;
    }
    return true;
}

EncodingRow EncodingMatrix::row(double b, const Direction& g) {
    return {1.0,           -b * g[0] * g[0], -2.0 * b * g[0] * g[1], -2.0 * b * g[0] * g[2],
            -b * g[1] * g[1], -2.0 * b * g[1] * g[2], -b * g[2] * g[2]};
}

EncodingMatrix EncodingMatrix::from(const std::vector<double>& bvalues, const std::vector<Direction>& directions) {
    if (bvalues.size() != directions.size()) throw Error("b-value and direction counts differ");
    EncodingMatrix m;
    m.rows.reserve(bvalues.size());
    for (std::size_t k = 0; k < bvalues.size(); ++k) m.rows.push_back(row(bvalues[k], directions[k]));
    return m;
}

TensorField fit_tensor(const DiffusionSeries& series, const std::optional<Image>& fixed_s0,
                       const MyocardiumMask* mask) {
    validate_series(series);
    const std::size_t h = series.height, w = series.width, n = series.frame_count();
    if (fixed_s0 && (fixed_s0->height() != h || fixed_s0->width() != w)) throw Error("fixed s0 dimension mismatch");
    if (mask && (mask->height() != h || mask->width() != w)) throw Error("mask dimension mismatch");
    const EncodingMatrix enc = EncodingMatrix::from(series.bvalues, series.directions);
    check_rank(enc, series, fixed_s0.has_value());

    const double peak = series_max(series);
    const double floor = peak > 0.0 ? kFloorFraction * peak : kFloorFraction;
    const bool pinned = fixed_s0.has_value();
    const int unknowns = pinned ? 6 : 7;
    const int offset = pinned ? 1 : 0;

    TensorField out(h, w);
    const auto pixels = static_cast<std::ptrdiff_t>(h * w);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t pi = 0; pi < pixels; ++pi) {
        const auto p = static_cast<std::size_t>(pi);
        if (mask && mask->labels[p] == 0) continue;
        double wmax = 0.0;
        std::vector<double> y(n), wt(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double s = std::max(series.frames[k][p], floor);
            y[k] = std::log(s);
            wt[k] = s * s;
            wmax = std::max(wmax, wt[k]);
        }
        double log_s0 = 0.0;
        if (pinned) log_s0 = std::log(std::max((*fixed_s0)[p], floor));

        Eigen::Matrix<double, 7, 7> ata = Eigen::Matrix<double, 7, 7>::Zero();
        Eigen::Matrix<double, 7, 1> aty = Eigen::Matrix<double, 7, 1>::Zero();
        for (std::size_t k = 0; k < n; ++k) {
            const EncodingRow& r = enc.rows[k];
            const double wk = wt[k] / wmax;
            const double rhs = y[k] - (pinned ? log_s0 : 0.0);
            for (int i = 0; i < unknowns; ++i) {
                const double ri = r[static_cast<std::size_t>(i + offset)] * wk;
                aty(i) += ri * rhs;
                for (int j = 0; j <= i; ++j) ata(i, j) += ri * r[static_cast<std::size_t>(j + offset)];
            }
        }
        for (int i = 0; i < unknowns; ++i)
            for (int j = 0; j < i; ++j) ata(j, i) = ata(i, j);
        const Eigen::VectorXd x = ata.topLeftCorner(unknowns, unknowns).ldlt().solve(aty.head(unknowns));
        Sym3& d = out.d[p];
        for (int j = 0; j < 6; ++j) d[static_cast<std::size_t>(j)] = x(j + 1 - offset);
        out.s0[p] = pinned ? std::exp(log_s0) : std::exp(x(0));
        if (pinned && (*fixed_s0)[p] <= 0.0) out.s0[p] = 0.0;
    }
    return out;
}

TensorField fit_tensor_nonlinear(const DiffusionSeries& series, int max_iterations) {
    TensorField out = fit_tensor(series);
    const std::size_t n = series.frame_count();
    const EncodingMatrix enc = EncodingMatrix::from(series.bvalues, series.directions);
    const auto pixels = static_cast<std::ptrdiff_t>(out.s0.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t pi = 0; pi < pixels; ++pi) {
        const auto p = static_cast<std::size_t>(pi);
        if (!(out.s0[p] > 0.0)) continue;
        Eigen::Matrix<double, 7, 1> x;
        x(0) = std::log(out.s0[p]);
        for (int j = 0; j < 6; ++j) x(j + 1) = out.d[p][static_cast<std::size_t>(j)];
        auto cost = [&](const Eigen::Matrix<double, 7, 1>& v) {
            double c = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                double e = 0.0;
                for (int j = 0; j < 7; ++j) e += enc.rows[k][static_cast<std::size_t>(j)] * v(j);
                const double r = series.frames[k][p] - std::exp(e);
                c += r * r;
            }
            return c;
        };
        double current = cost(x);
        for (int it = 0; it < max_iterations; ++it) {
            Eigen::Matrix<double, 7, 7> jtj = Eigen::Matrix<double, 7, 7>::Zero();
            Eigen::Matrix<double, 7, 1> jtr = Eigen::Matrix<double, 7, 1>::Zero();
            for (std::size_t k = 0; k < n; ++k) {
                Eigen::Matrix<double, 7, 1> row;
                for (int j = 0; j < 7; ++j) row(j) = enc.rows[k][static_cast<std::size_t>(j)];
                const double model = std::exp(row.dot(x));
                const Eigen::Matrix<double, 7, 1> jac = model * row;
                jtj += jac * jac.transpose();
                jtr += jac * (series.frames[k][p] - model);
            }
            const Eigen::Matrix<double, 7, 1> step = jtj.ldlt().solve(jtr);
            if (!step.allFinite()) break;
            double t = 1.0;
            bool improved = false;
            for (int halving = 0; halving < 20; ++halving, t *= 0.5) {
                const Eigen::Matrix<double, 7, 1> trial = x + t * step;
                const double c = cost(trial);
                if (c <= current) {
                    x = trial;
                    improved = c < current;
                    current = c;
                    break;
                }
            }
            if (!improved || step.lpNorm<Eigen::Infinity>() < 1e-14) break;
        }
        out.s0[p] = std::exp(x(0));
        for (int j = 0; j < 6; ++j) out.d[p][static_cast<std::size_t>(j)] = x(j + 1);
    }
    return out;
}

double pseudo_signal(const Sym3& d, double s0, double b, const Direction& g) {
    return s0 * std::exp(-b * quadratic_form(d, g));
}

std::array<double, 7> pseudo_signal_gradient(const Sym3& d, double s0, double b, const Direction& g) {
    const double e = std::exp(-b * quadratic_form(d, g));
    const EncodingRow r = EncodingMatrix::row(b, g);
    std::array<double, 7> out{};
    out[0] = e;
    for (std::size_t j = 1; j < 7; ++j) out[j] = s0 * e * r[j];
    return out;
}

std::vector<Image> generate_pseudo_frames(const TensorField& tensor, const std::vector<double>& bvalues,
                                          const std::vector<Direction>& directions) {
    if (bvalues.size() != directions.size()) throw Error("b-value and direction counts differ");
    std::vector<Image> out(bvalues.size(), Image(tensor.height, tensor.width));
    const auto count = static_cast<std::ptrdiff_t>(bvalues.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ki = 0; ki < count; ++ki) {
        const auto k = static_cast<std::size_t>(ki);
        Image& f = out[k];
        if (bvalues[k] == 0.0) {
            f = tensor.s0;
            continue;
        }
        for (std::size_t p = 0; p < f.size(); ++p)
            f[p] = pseudo_signal(tensor.d[p], tensor.s0[p], bvalues[k], directions[k]);
    }
    return out;
}

std::vector<Sym3> tensor_loss_gradient(const TensorField& tensor, const DiffusionSeries& warped,
                                       const ParzenConfig& parzen) {
    if (warped.height != tensor.height || warped.width != tensor.width) throw Error("tensor/series dimension mismatch");
    const std::size_t n = warped.frame_count();
    const auto pseudo = generate_pseudo_frames(tensor, warped.bvalues, warped.directions);
    // nmi is symmetric, so the derivative in its first slot comes from swapping the roles.
    std::vector<Image> grads(n);
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ki = 0; ki < count; ++ki) {
        const auto k = static_cast<std::size_t>(ki);
        ParzenNmi(warped.frames[k], parzen).value_and_gradient(pseudo[k], grads[k]);
    }
    std::vector<Sym3> out(tensor.d.size(), Sym3{});
    for (std::size_t k = 0; k < n; ++k) {
        if (warped.bvalues[k] == 0.0) continue;
        for (std::size_t p = 0; p < out.size(); ++p) {
            const auto dS = pseudo_signal_gradient(tensor.d[p], tensor.s0[p], warped.bvalues[k], warped.directions[k]);
            for (std::size_t j = 0; j < 6; ++j) out[p][j] -= grads[k][p] * dS[j + 1];
        }
    }
    return out;
}

TensorStepResult tensor_gradient_step(const TensorField& tensor, const DiffusionSeries& warped,
                                      const TensorStepConfig& cfg) {
    if (!(cfg.learning_rate >= 0.0)) throw Error("tensor learning rate must be non-negative");
    TensorStepResult result{tensor, false};
    if (cfg.learning_rate == 0.0) return result;
    const auto grad = tensor_loss_gradient(tensor, warped, cfg.parzen);
    for (const Sym3& g : grad)
        for (double v : g)
            if (!std::isfinite(v)) {
                warn("tensor_gradient_step: non-finite gradient, step skipped");
                result.skipped = true;
                return result;
            }
    for (std::size_t p = 0; p < grad.size(); ++p)
        for (std::size_t j = 0; j < 6; ++j) result.tensor.d[p][j] -= cfg.learning_rate * grad[p][j];
    return result;
}

}  // namespace dtcmr
