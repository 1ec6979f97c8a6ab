#include "dtcmr/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <Eigen/Dense>

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd frame_matrix(const std::vector<Image>& frames) {
    if (frames.empty()) throw Error("no frames");
    const std::size_t pixels = frames.front().size();
    MatrixXd x(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(frames.size()));
    for (std::size_t j = 0; j < frames.size(); ++j) {
        if (frames[j].size() != pixels) throw Error("dimension mismatch in frame " + std::to_string(j));
        for (std::size_t i = 0; i < pixels; ++i)
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = frames[j][i];
    }
    return x;
}

// Orthonormal start block: per-frame means, then Krylov vectors, padded with unit vectors.
MatrixXd initial_block(const MatrixXd& gram, const VectorXd& means, Eigen::Index rank) {
    const Eigen::Index n = gram.rows();
    MatrixXd q(n, rank);
    Eigen::Index filled = 0;
    Eigen::Index next_unit = 0;
    VectorXd candidate = means;
    while (filled < rank) {
        for (int pass = 0; pass < 2; ++pass)
            for (Eigen::Index k = 0; k < filled; ++k) candidate -= q.col(k).dot(candidate) * q.col(k);
        const double norm = candidate.norm();
        if (norm > 1e-8 * std::max(1.0, means.norm())) {
            q.col(filled) = candidate / norm;
            candidate = gram * q.col(filled);
            ++filled;
        } else {
            candidate = VectorXd::Unit(n, next_unit % n);
            ++next_unit;
        }
    }
    return q;
}

}  // namespace

Image ImplicitTemplate::reconstruct_frame(std::size_t frame, std::size_t components) const {
    Image out(spatial_basis.front().height(), spatial_basis.front().width());
    const std::size_t n = std::min(components, rank());
    for (std::size_t r = 0; r < n; ++r) {
        const double w = dynamic_factors[r][frame];
        const Image& b = spatial_basis[r];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * b[i];
    }
    return out;
}

ImplicitTemplate factorize(const std::vector<Image>& frames, int rank, const FactorizeOptions& options) {
    const MatrixXd x = frame_matrix(frames);
    const Eigen::Index pixels = x.rows();
    const Eigen::Index n = x.cols();
    if (rank < 1 || rank > std::min(pixels, n))
        throw Error("rank " + std::to_string(rank) + " out of range [1, " + std::to_string(std::min(pixels, n)) + "]");
    if (x.cwiseAbs().maxCoeff() == 0.0) throw Error("degenerate all-zero frame stack");

    const MatrixXd gram = x.transpose() * x;
    const double gram_norm = gram.norm();
    MatrixXd q = initial_block(gram, x.colwise().mean().transpose(), rank);
    VectorXd ritz(rank);

    ImplicitTemplate tpl;
    for (int it = 1; it <= options.max_iterations; ++it) {
        tpl.iterations = it;
        Eigen::HouseholderQR<MatrixXd> qr(gram * q);
        q = qr.householderQ() * MatrixXd::Identity(n, rank);
        const MatrixXd t = q.transpose() * gram * q;
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(t);
        // Eigen sorts ascending; flip to descending.
        const MatrixXd v = eig.eigenvectors().rowwise().reverse();
        ritz = eig.eigenvalues().reverse();
        q = q * v;
        const double residual = (gram * q - q * ritz.asDiagonal()).norm();
        if (residual <= options.tolerance * gram_norm) break;
    }

    const double sigma_max = std::sqrt(std::max(ritz(0), 0.0));
    const std::size_t height = frames.front().height(), width = frames.front().width();
    for (Eigen::Index r = 0; r < rank; ++r) {
        VectorXd vr = q.col(r);
        Eigen::Index arg = 0;
        vr.cwiseAbs().maxCoeff(&arg);
        if (vr(arg) < 0.0) vr = -vr;

        const double sigma = std::sqrt(std::max(ritz(r), 0.0));
        VectorXd u;
        if (sigma > 1e-12 * sigma_max) {
            u = x * vr;
        } else {
            // Null direction: any unit image orthogonal to the previous basis.
            u = VectorXd::Unit(pixels, r % pixels);
        }
        for (int pass = 0; pass < 2; ++pass)
            for (Eigen::Index k = 0; k < r; ++k) {
                const Image& prev = tpl.spatial_basis[static_cast<std::size_t>(k)];
                double dot = 0.0;
                for (Eigen::Index i = 0; i < pixels; ++i) dot += prev[static_cast<std::size_t>(i)] * u(i);
                for (Eigen::Index i = 0; i < pixels; ++i) u(i) -= dot * prev[static_cast<std::size_t>(i)];
            }
        u.normalize();

        Image basis(height, width);
        for (Eigen::Index i = 0; i < pixels; ++i) basis[static_cast<std::size_t>(i)] = u(i);
        tpl.spatial_basis.push_back(std::move(basis));
        std::vector<double> dyn(static_cast<std::size_t>(n));
        for (Eigen::Index j = 0; j < n; ++j) dyn[static_cast<std::size_t>(j)] = sigma * vr(j);
        tpl.dynamic_factors.push_back(std::move(dyn));
        tpl.singular_values.push_back(sigma);
    }
    return tpl;
}

ImplicitTemplate factorize(const DiffusionSeries& series, int rank, const FactorizeOptions& options) {
    return factorize(series.frames, rank, options);
}

Image rank1_projection(const std::vector<Image>& frames) {
    const ImplicitTemplate tpl = factorize(frames, 1);
    const auto& dyn = tpl.dynamic_factors[0];
    const double mean = std::accumulate(dyn.begin(), dyn.end(), 0.0) / static_cast<double>(dyn.size());
    if (std::abs(mean) <= 1e-12 * tpl.singular_values[0])
        warn("rank-1 dynamic factor averages to zero; rank-1 projection is the zero image");
    Image out = tpl.spatial_basis[0];
    for (double& v : out) v *= mean;
    return out;
}

Image rank1_projection(const DiffusionSeries& series) { return rank1_projection(series.frames); }

Image s0_reference(const DiffusionSeries& series) {
    const auto b0 = series.b0_indices();
    if (b0.empty()) throw Error("no b0 frame");
    if (b0.size() < 2) {
        warn("only one b0 frame; using it directly as the S0 reference");
        Image out = series.frames[b0.front()];
        for (double& v : out) v = std::max(v, 0.0);
        return out;
    }
    std::vector<Image> frames;
    for (std::size_t i : b0) frames.push_back(series.frames[i]);
    Image out = rank1_projection(frames);
    for (double& v : out) v = std::max(v, 0.0);
    return out;
}

double lag1_autocorrelation(const std::vector<double>& values) {
    const std::size_t n = values.size();
    if (n < 2) return 1.0;
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
    double denom = 0.0, scale = 0.0;
    for (double v : values) {
        denom += (v - mean) * (v - mean);
        scale += v * v;
    }
    if (denom <= 1e-24 * std::max(scale, 1e-300)) return 1.0;
    double num = 0.0;
    for (std::size_t t = 0; t + 1 < n; ++t) num += (values[t] - mean) * (values[t + 1] - mean);
    return num / denom;
}

std::vector<std::size_t> encoding_major_order(const DiffusionSeries& series) {
    // Encoding id by first appearance of the (b, g) pair; all b = 0 frames share one id.
    std::map<std::array<double, 4>, std::size_t> ids;
    std::vector<std::size_t> encoding(series.frame_count());
    for (std::size_t i = 0; i < series.frame_count(); ++i) {
        std::array<double, 4> key{series.bvalues[i], 0.0, 0.0, 0.0};
        if (series.bvalues[i] > 0.0) key = {series.bvalues[i], series.directions[i][0], series.directions[i][1],
                                            series.directions[i][2]};
        const auto [it, inserted] = ids.try_emplace(key, ids.size());
        encoding[i] = it->second;
    }
    std::vector<std::size_t> order(series.frame_count());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (encoding[a] != encoding[b]) return encoding[a] < encoding[b];
        return series.rep_index[a] < series.rep_index[b];
    });
    return order;
}

int marchenko_pastur_signal_rank(const std::vector<double>& eigenvalues, std::size_t pixels) {
    const std::size_t n = eigenvalues.size();
    const double m = static_cast<double>(pixels);
    for (std::size_t p = 0; p + 1 < n; ++p) {
        const double count = static_cast<double>(n - p);
        double tail = 0.0;
        for (std::size_t k = p; k < n; ++k) tail += std::max(eigenvalues[k], 0.0);
        const double sigma2_mean = tail / count / m;
        const double range = (std::max(eigenvalues[p], 0.0) - std::max(eigenvalues[n - 1], 0.0)) / m;
        const double sigma2_range = range / (4.0 * std::sqrt(count / m));
        if (sigma2_mean >= sigma2_range) return static_cast<int>(p);
    }
    return static_cast<int>(n) - 1;
}

DenoiseResult denoise_frames(const DiffusionSeries& series, const DenoiseOptions& options) {
    if (options.max_rank < 1) throw Error("max_rank must be >= 1");
    const std::size_t n = series.frame_count();
    const int rank = std::min<int>(options.max_rank, static_cast<int>(std::min(n, series.height * series.width)));
    const ImplicitTemplate tpl = factorize(series, rank);
    const auto order = encoding_major_order(series);

    DenoiseResult result;
    if (options.keep_above_noise) {
        const MatrixXd x = frame_matrix(series.frames);
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(x.transpose() * x, Eigen::EigenvaluesOnly);
        const VectorXd ev = eig.eigenvalues().reverse();
        result.noise_rank = marchenko_pastur_signal_rank(std::vector<double>(ev.data(), ev.data() + ev.size()),
                                                         series.height * series.width);
    }

    const double sigma0 = tpl.singular_values[0];
    for (int r = 0; r < rank; ++r) {
        std::vector<double> ordered(n);
        for (std::size_t t = 0; t < n; ++t) ordered[t] = tpl.dynamic_factors[static_cast<std::size_t>(r)][order[t]];
        const double ac = lag1_autocorrelation(ordered);
        result.autocorrelation.push_back(ac);
        // Gram-based singular values resolve only to about sqrt(eps) * sigma0.
        const bool numerically_null = tpl.singular_values[static_cast<std::size_t>(r)] <= 1e-6 * sigma0;
        const bool keep = r == 0 || (!numerically_null && (ac > options.autocorr_threshold || r < result.noise_rank));
        if (keep) result.kept.push_back(r);
    }

    std::vector<Image> frames(n, Image(series.height, series.width));
    for (std::size_t i = 0; i < n; ++i)
        for (int r : result.kept) {
            const double w = tpl.dynamic_factors[static_cast<std::size_t>(r)][i];
            const Image& b = tpl.spatial_basis[static_cast<std::size_t>(r)];
            for (std::size_t k = 0; k < b.size(); ++k) frames[i][k] += w * b[k];
        }
    result.series = series.with_frames(std::move(frames));
    return result;
}

}  // namespace dtcmr
