#include <doctest.h>

#include <cmath>
#include <random>

#include "dtcmr/diagnostics.hpp"
#include "dtcmr/phantom.hpp"
#include "dtcmr/tensorfit.hpp"
#include "oracles.hpp"

using namespace dtcmr;

namespace {

// Small series whose tensor varies per pixel: b0 + six directions, `reps` repetitions.
DiffusionSeries synthetic_series(const TensorField& t, int reps) {
    const auto dirs = encoding_directions(6);
    std::vector<double> b;
    std::vector<Direction> g;
    for (int r = 0; r < reps; ++r) {
        b.push_back(0.0);
        g.push_back({0, 0, 0});
        for (const auto& d : dirs) {
            b.push_back(600.0);
            g.push_back(d);
        }
    }
    DiffusionSeries s;
    s.height = t.height;
    s.width = t.width;
    s.bvalues = b;
    s.directions = g;
    for (std::size_t i = 0; i < b.size(); ++i) s.rep_index.push_back(static_cast<int>(i / 7));
    s.frames = generate_pseudo_frames(t, b, g);
    return s;
}

TensorField random_tensor(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> ev(0.4e-3, 2.0e-3), ang(0.0, 2 * M_PI), s0(0.5, 1.5);
    TensorField t(h, w);
    for (std::size_t p = 0; p < t.d.size(); ++p) {
        const double a = ang(rng), b = ang(rng);
        const Direction e1{std::cos(a) * std::cos(b), std::sin(a) * std::cos(b), std::sin(b)};
        const double l1 = ev(rng), l2 = ev(rng), l3 = ev(rng);
        // D = l3 I + (l1 - l3) e1 e1^T + small off-axis term keeps every component non-zero.
        Mat3 m{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) m[i][j] = (i == j ? l3 : 0.0) + (l1 - l3) * e1[i] * e1[j];
        m[0][1] = m[1][0] = m[0][1] + 0.1 * (l2 - l3);
        t.d[p] = from_matrix(m);
        t.s0[p] = s0(rng);
    }
    return t;
}

}  // namespace

TEST_CASE("encoding matrix rows") {
    const Direction g{0.6, 0.0, 0.8};
    const EncodingRow row = EncodingMatrix::row(600.0, g);
    CHECK(row[0] == 1.0);
    CHECK(row[1] == doctest::Approx(-600 * 0.36));
    CHECK(row[3] == doctest::Approx(-2 * 600 * 0.48));
    CHECK(row[6] == doctest::Approx(-600 * 0.64));
    const EncodingRow zero = EncodingMatrix::row(0.0, {0, 0, 0});
    CHECK(zero == EncodingRow{1, 0, 0, 0, 0, 0, 0});
}

TEST_CASE("fit_tensor") {
    std::mt19937_64 rng(1);
    SUBCASE("isotropic pixel") {
        TensorField t(2, 2);
        for (std::size_t p = 0; p < 4; ++p) {
            t.d[p] = {1.3e-3, 0, 0, 1.3e-3, 0, 1.3e-3};
            t.s0[p] = 2.0;
        }
        const TensorField fit = fit_tensor(synthetic_series(t, 1));
        for (std::size_t p = 0; p < 4; ++p)
            for (int k = 0; k < 6; ++k) CHECK(std::abs(fit.d[p][k] - t.d[p][k]) < 1e-10);
    }
    SUBCASE("noiseless anisotropic tensors and the Gauss-Newton oracle") {
        const TensorField t = random_tensor(4, 4, rng);
        const DiffusionSeries s = synthetic_series(t, 2);
        const TensorField fit = fit_tensor(s);
        for (std::size_t p = 0; p < t.d.size(); ++p) {
            std::vector<double> signal;
            for (const Image& f : s.frames) signal.push_back(f[p]);
            const auto gn = oracle::gauss_newton_tensor(signal, s.bvalues, s.directions);
            for (int k = 0; k < 6; ++k) {
                CHECK(std::abs(fit.d[p][k] - t.d[p][k]) < 1e-8);
                CHECK(std::abs(fit.d[p][k] - gn[1 + k]) < 1e-8);
            }
            CHECK(fit.s0[p] == doctest::Approx(t.s0[p]).epsilon(1e-10));
        }
        const TensorField nl = fit_tensor_nonlinear(s);
        for (std::size_t p = 0; p < t.d.size(); ++p)
            for (int k = 0; k < 6; ++k) CHECK(std::abs(nl.d[p][k] - t.d[p][k]) < 1e-8);
    }
    SUBCASE("fixed s0 and mask") {
        const TensorField t = random_tensor(3, 3, rng);
        const DiffusionSeries s = synthetic_series(t, 1);
        Grid<std::uint8_t> labels(3, 3);
        labels(1, 1) = 1;
        const MyocardiumMask mask = MyocardiumMask::from_labels(labels);
        const TensorField fit = fit_tensor(s, t.s0, &mask);
        for (int k = 0; k < 6; ++k) {
            CHECK(std::abs(fit.at(1, 1)[k] - t.at(1, 1)[k]) < 1e-10);
            CHECK(fit.at(0, 0)[k] == 0.0);
        }
        CHECK(fit.s0(1, 1) == doctest::Approx(t.s0(1, 1)));
        CHECK(fit.s0(0, 0) == 0.0);
    }
    SUBCASE("intensity scaling changes only s0") {
        const TensorField t = random_tensor(3, 3, rng);
        DiffusionSeries s = synthetic_series(t, 1);
        std::uniform_real_distribution<double> noise(-0.02, 0.02);
        for (auto& f : s.frames)
            for (double& v : f) v *= 1.0 + noise(rng);
        const TensorField a = fit_tensor(s);
        for (auto& f : s.frames)
            for (double& v : f) v *= 3.5;
        const TensorField b = fit_tensor(s);
        for (std::size_t p = 0; p < a.d.size(); ++p) {
            CHECK(b.s0[p] == doctest::Approx(3.5 * a.s0[p]).epsilon(1e-10));
            for (int k = 0; k < 6; ++k) CHECK(std::abs(a.d[p][k] - b.d[p][k]) < 1e-10);
        }
    }
    SUBCASE("fit, generate, fit is idempotent") {
        const TensorField t = random_tensor(3, 3, rng);
        const DiffusionSeries s = synthetic_series(t, 1);
        const TensorField a = fit_tensor(s);
        const auto again = s.with_frames(generate_pseudo_frames(a, s.bvalues, s.directions));
        for (std::size_t i = 0; i < s.frame_count(); ++i)
            for (std::size_t p = 0; p < 9; ++p) CHECK(std::abs(again.frames[i][p] - s.frames[i][p]) < 1e-7);
        const TensorField b = fit_tensor(again);
        for (std::size_t p = 0; p < 9; ++p)
            for (int k = 0; k < 6; ++k) CHECK(std::abs(a.d[p][k] - b.d[p][k]) < 1e-8);
    }
    SUBCASE("rank-deficient encoding names the directions") {
        TensorField t = random_tensor(2, 2, rng);
        DiffusionSeries s = synthetic_series(t, 1);
        s = s.subset({1, 2, 3, 4, 5, 6});
        CHECK_THROWS_AS(fit_tensor(s), Error);
        CHECK_FALSE(encoding_is_full_rank(s));
        CHECK(encoding_is_full_rank(s, true));
        for (std::size_t i = 2; i < s.frame_count(); ++i) s.directions[i] = s.directions[1];
        try {
            check_encoding(s, true);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("direction") != std::string::npos);
        }
    }
    SUBCASE("noiseless static phantom") {
        PhantomConfig cfg;
        const Phantom ph = make_phantom(cfg);
        const TensorField fit = fit_tensor(ph.series);
        double worst = 0.0;
        for (std::size_t p = 0; p < fit.d.size(); ++p)
            for (int k = 0; k < 6; ++k) worst = std::max(worst, std::abs(fit.d[p][k] - ph.truth.true_tensor.d[p][k]));
        CHECK(worst < 1e-8);
    }
}

TEST_CASE("generate_pseudo_frames") {
    std::mt19937_64 rng(2);
    const TensorField t = random_tensor(3, 3, rng);
    const auto frames = generate_pseudo_frames(t, {0.0, 600.0}, {{0, 0, 0}, {1, 0, 0}});
    CHECK(frames[0] == t.s0);
    for (std::size_t p = 0; p < 9; ++p)
        CHECK(frames[1][p] == doctest::Approx(t.s0[p] * std::exp(-600.0 * t.d[p][0])).epsilon(1e-14));

    TensorField zero = t;
    for (auto& d : zero.d) d = {};
    for (const Image& f : generate_pseudo_frames(zero, {600.0, 1000.0}, {{1, 0, 0}, {0, 0.6, 0.8}})) CHECK(f == t.s0);

    TensorField negative = t;
    negative.d[0] = {-1e-3, 0, 0, 1e-3, 0, 1e-3};
    const auto grown = generate_pseudo_frames(negative, {600.0}, {{1, 0, 0}});
    CHECK(grown[0][0] > negative.s0[0]);

    SUBCASE("signal gradient matches finite differences") {
        for (int trial = 0; trial < 20; ++trial) {
            const Sym3 d = random_tensor(1, 1, rng).d[0];
            const Direction g = encoding_directions(6)[trial % 6];
            const double s0 = 1.2;
            const auto grad = pseudo_signal_gradient(d, s0, 600.0, g);
            std::vector<double> x{s0, d[0], d[1], d[2], d[3], d[4], d[5]};
            auto f = [&](const std::vector<double>& v) {
                return pseudo_signal({v[1], v[2], v[3], v[4], v[5], v[6]}, v[0], 600.0, g);
            };
            // Tensor entries are ~1e-3, so use a step matched to their scale.
            std::vector<double> fd(7);
            for (int k = 0; k < 7; ++k) {
                const double h = k == 0 ? 1e-6 : 1e-9;
                auto up = x, dn = x;
                up[k] += h;
                dn[k] -= h;
                fd[k] = (f(up) - f(dn)) / (2 * h);
            }
            CHECK(oracle::max_rel_error({grad.begin(), grad.end()}, fd, 1e-6) < 1e-6);
        }
    }
}

TEST_CASE("tensor gradient step") {
    std::mt19937_64 rng(3);
    ParzenConfig parzen;
    const TensorField t = random_tensor(8, 8, rng);
    DiffusionSeries s = synthetic_series(t, 1);
    // Normalize to the unit intensity range used by the Parzen window.
    double peak = 0.0;
    for (const auto& f : s.frames) peak = std::max(peak, max_abs(f));
    TensorField tn = t;
    for (double& v : tn.s0) v /= peak;
    s = s.with_frames(generate_pseudo_frames(tn, s.bvalues, s.directions));

    SUBCASE("stationary when warped frames equal the pseudo frames") {
        PhantomConfig pc;
        pc.n_repetitions = 1;
        const Phantom ph = make_phantom(pc);
        TensorField truth = ph.truth.true_tensor;
        double pk = 0.0;
        for (double v : truth.s0) pk = std::max(pk, v);
        for (double& v : truth.s0) v /= pk;
        const DiffusionSeries same = ph.series.with_frames(generate_pseudo_frames(truth, ph.series.bvalues, ph.series.directions));
        TensorStepConfig cfg;
        const TensorStepResult r = tensor_gradient_step(truth, same, cfg);
        CHECK_FALSE(r.skipped);
        double worst = 0.0;
        for (std::size_t p = 0; p < truth.d.size(); ++p)
            for (int k = 0; k < 6; ++k) worst = std::max(worst, std::abs(r.tensor.d[p][k] - truth.d[p][k]));
        CHECK(worst < 1e-6);
    }
    SUBCASE("zero learning rate leaves the tensor unchanged") {
        TensorStepConfig cfg;
        cfg.learning_rate = 0.0;
        std::mt19937_64 r2(4);
        DiffusionSeries noisy = s;
        for (auto& f : noisy.frames)
            for (double& v : f) v = std::clamp(v + 0.05 * (oracle::random_image(1, 1, r2)[0] - 0.5), 0.0, 1.0);
        const TensorStepResult r = tensor_gradient_step(tn, noisy, cfg);
        CHECK(r.tensor.d == tn.d);
        CHECK(r.tensor.s0 == tn.s0);
    }
    SUBCASE("loss gradient matches finite differences on a 4x4 block") {
        const TensorField small = random_tensor(4, 4, rng);
        TensorField sn = small;
        double pk = 0.0;
        for (double v : sn.s0) pk = std::max(pk, v);
        for (double& v : sn.s0) v /= 1.3 * pk;
        DiffusionSeries target = synthetic_series(sn, 1);
        std::mt19937_64 r2(5);
        for (auto& f : target.frames)
            for (double& v : f) v = std::clamp(v * (1.0 + 0.3 * (oracle::random_image(1, 1, r2)[0] - 0.5)), 0.0, 1.0);
        const auto grad = tensor_loss_gradient(sn, target, parzen);
        auto loss = [&](const TensorField& tf) {
            const auto pseudo = generate_pseudo_frames(tf, target.bvalues, target.directions);
            double l = 0.0;
            for (std::size_t i = 0; i < pseudo.size(); ++i) l -= oracle::naive_nmi(pseudo[i], target.frames[i], 32, 1.0);
            return l;
        };
        std::vector<double> analytic, numeric;
        const double h = 1e-8;
        for (std::size_t p = 0; p < 16; ++p)
            for (int k = 0; k < 6; ++k) {
                TensorField up = sn, dn = sn;
                up.d[p][k] += h;
                dn.d[p][k] -= h;
                analytic.push_back(grad[p][k]);
                numeric.push_back((loss(up) - loss(dn)) / (2 * h));
            }
        double scale = 0.0;
        for (double v : analytic) scale = std::max(scale, std::abs(v));
        CHECK(oracle::max_rel_error(analytic, numeric, 1e-3 * scale) < 1e-3);
    }
}
