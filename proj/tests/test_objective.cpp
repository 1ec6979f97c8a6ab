#include <doctest.h>

#include <cmath>
#include <random>

#include "dtcmr/diagnostics.hpp"
#include "dtcmr/objective.hpp"
#include "dtcmr/transform.hpp"
#include "oracles.hpp"

using namespace dtcmr;

namespace {

std::vector<double> flat(const Image& img) { return {img.begin(), img.end()}; }

Image from_flat(const std::vector<double>& v, std::size_t h, std::size_t w) {
    Image img(h, w);
    std::copy(v.begin(), v.end(), img.begin());
    return img;
}

// Smooth image in (0.15, 0.85) so Parzen coordinates stay off the clamp.
Image smooth_image(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 2.0 * M_PI);
    const double a = u(rng), b = u(rng), c = u(rng);
    Image img(n, n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t col = 0; col < n; ++col)
            img(r, col) = 0.5 + 0.2 * std::sin(0.3 * col + a) * std::cos(0.25 * r + b) + 0.1 * std::sin(0.1 * (r + col) + c);
    return img;
}

}  // namespace

TEST_CASE("joint histogram") {
    ParzenConfig cfg;
    SUBCASE("constant images give one centred bump") {
        const Image a(6, 6, 0.5);
        const Grid<double> h = joint_histogram(a, a, cfg);
        double sum = 0.0;
        std::size_t arg = 0;
        for (std::size_t i = 0; i < h.size(); ++i) {
            sum += h[i];
            if (h[i] > h[arg]) arg = i;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        // Coordinate 0.5 * 31 = 15.5 sits between bins 15 and 16; the bump is symmetric about it.
        CHECK(h(15, 15) == doctest::Approx(h(16, 16)).epsilon(1e-12));
        CHECK(h(15, 16) == doctest::Approx(h(16, 15)).epsilon(1e-12));
        CHECK((arg / 32 == 15 || arg / 32 == 16));
    }
    SUBCASE("matches a brute-force accumulation") {
        std::mt19937_64 rng(1);
        ParzenConfig small{8, 0.5};
        const Image a = oracle::random_image(4, 4, rng), b = oracle::random_image(4, 4, rng);
        const Grid<double> h = joint_histogram(a, b, small);
        const auto naive = oracle::naive_histogram(a, b, 8, 0.5);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) CHECK(h(i, j) == doctest::Approx(naive[i][j]).epsilon(1e-12));
    }
    SUBCASE("mass conservation and transpose symmetry") {
        std::mt19937_64 rng(2);
        const Image a = oracle::random_image(20, 20, rng), b = oracle::random_image(20, 20, rng);
        const Grid<double> hab = joint_histogram(a, b, cfg), hba = joint_histogram(b, a, cfg);
        double sum = 0.0;
        for (double v : hab) sum += v;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j) CHECK(hab(i, j) == doctest::Approx(hba(j, i)).epsilon(1e-12));
    }
}

TEST_CASE("nmi values") {
    ParzenConfig cfg;
    std::mt19937_64 rng(3);
    SUBCASE("matches the naive entropy oracle") {
        const Image a = oracle::random_image(12, 12, rng), b = oracle::random_image(12, 12, rng);
        CHECK(nmi(a, b, cfg) == doctest::Approx(oracle::naive_nmi(a, b, 32, 1.0)).epsilon(1e-12));
    }
    SUBCASE("identical images approach 2") {
        const Image a = oracle::random_image(32, 32, rng);
        const double v = nmi(a, a, cfg);
        CHECK(v == doctest::Approx(oracle::naive_nmi(a, a, 32, 1.0)).epsilon(1e-12));
        CHECK(v < 2.0);
        CHECK(v > 1.0);
    }
    SUBCASE("independent images are near 1") {
        for (int k = 0; k < 10; ++k) {
            const Image a = oracle::random_image(96, 96, rng), b = oracle::random_image(96, 96, rng);
            CHECK(nmi(a, b, cfg) < 1.1);
        }
    }
    SUBCASE("symmetric") {
        const Image a = oracle::random_image(16, 16, rng), b = oracle::random_image(16, 16, rng);
        CHECK(nmi(a, b, cfg) == doctest::Approx(nmi(b, a, cfg)).epsilon(1e-12));
    }
    SUBCASE("bin-aligned remapping") {
        // v -> 1 - v reverses the bin order exactly, a relabelling of histogram rows.
        const Image a = oracle::random_image(16, 16, rng), b = oracle::random_image(16, 16, rng);
        Image flipped = b;
        for (double& v : flipped) v = 1.0 - v;
        CHECK(std::abs(nmi(a, flipped, cfg) - nmi(a, b, cfg)) < 1e-9);
    }
    SUBCASE("degenerate pair") {
        ParzenConfig narrow{8, 0.2};
        Image a(4, 4, 0.0);
        WarningCapture warnings;
        const double v = nmi(a, a, narrow);
        CHECK(v == 2.0);
        CHECK_FALSE(warnings.messages().empty());
    }
    SUBCASE("config validation") {
        CHECK_THROWS_AS((ParzenConfig{4, 1.0}.validate()), Error);
        CHECK_THROWS_AS((ParzenConfig{32, 0.0}.validate()), Error);
    }
}

TEST_CASE("nmi gradient") {
    ParzenConfig cfg;
    std::mt19937_64 rng(4);
    SUBCASE("constant pair is stationary") {
        const Image a(8, 8, 0.4);
        const Image g = nmi_gradient(a, a, cfg);
        CHECK(max_abs(g) < 1e-12);
    }
    SUBCASE("finite differences") {
        const Image a = oracle::random_image(8, 8, rng, 0.05, 0.95), b = oracle::random_image(8, 8, rng, 0.05, 0.95);
        const Image g = nmi_gradient(a, b, cfg);
        const auto fd = oracle::central_differences(
            [&](const std::vector<double>& x) { return oracle::naive_nmi(a, from_flat(x, 8, 8), 32, 1.0); }, flat(b), 1e-6);
        CHECK(oracle::max_rel_error(flat(g), fd, 1e-3 * max_abs(g)) < 1e-3);
    }
    SUBCASE("symmetric in the argument roles") {
        const Image a = oracle::random_image(8, 8, rng), b = oracle::random_image(8, 8, rng);
        const Image g1 = nmi_gradient(a, b, cfg);
        const auto fd = oracle::central_differences(
            [&](const std::vector<double>& x) { return nmi(from_flat(x, 8, 8), a, cfg); }, flat(b), 1e-6);
        CHECK(oracle::max_rel_error(flat(g1), fd, 1e-3 * max_abs(g1)) < 1e-3);
    }
}

TEST_CASE("smoothness") {
    std::mt19937_64 rng(5);
    CHECK(smoothness(uniform_field(9, 7, {2.0, -3.0})) == 0.0);
    DenseField ramp(9, 7);
    for (std::size_t r = 0; r < 9; ++r)
        for (std::size_t c = 0; c < 7; ++c) ramp(r, c) = {static_cast<double>(c), 0.0};
    // Unit steps on all but the last column: 9 * 6 of them over 63 pixels.
    CHECK(smoothness(ramp) == doctest::Approx(54.0 / 63.0).epsilon(1e-15));
    const DenseField f = oracle::random_field(11, 13, rng, 2.0);
    CHECK(smoothness(f) == doctest::Approx(oracle::naive_smoothness(f)).epsilon(1e-12));

    const DenseField g = smoothness_gradient(f);
    std::vector<double> x, analytic;
    for (std::size_t p = 0; p < f.size(); ++p) {
        x.push_back(f[p].x);
        x.push_back(f[p].y);
        analytic.push_back(g[p].x);
        analytic.push_back(g[p].y);
    }
    auto eval = [&](const std::vector<double>& v) {
        DenseField h(11, 13);
        for (std::size_t p = 0; p < h.size(); ++p) h[p] = {v[2 * p], v[2 * p + 1]};
        return oracle::naive_smoothness(h);
    };
    CHECK(oracle::max_rel_error(analytic, oracle::central_differences(eval, x, 1e-5), 1e-8) < 1e-6);
}

TEST_CASE("soft dice") {
    Image a(8, 8), b(8, 8);
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 4; ++c) a(r, c) = 1.0;
    SUBCASE("identical") { CHECK(soft_dice(a, a) == doctest::Approx(1.0).epsilon(1e-8)); }
    SUBCASE("disjoint") {
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 4; c < 8; ++c) b(r, c) = 1.0;
        CHECK(soft_dice(a, b) < 1e-12);
    }
    SUBCASE("half overlap") {
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 2; c < 6; ++c) b(r, c) = 1.0;
        CHECK(soft_dice(a, b) == doctest::Approx(0.5).epsilon(1e-6));
    }
    SUBCASE("both empty") {
        WarningCapture warnings;
        CHECK(soft_dice(b, b) == 1.0);
        CHECK_FALSE(warnings.messages().empty());
    }
    SUBCASE("gradient") {
        std::mt19937_64 rng(6);
        const Image m = oracle::random_image(8, 8, rng), n = oracle::random_image(8, 8, rng);
        const auto fd = oracle::central_differences(
            [&](const std::vector<double>& x) { return soft_dice(m, from_flat(x, 8, 8)); }, flat(n), 1e-6);
        CHECK(oracle::max_rel_error(flat(soft_dice_gradient(m, n)), fd, 1e-8) < 1e-6);
    }
}

TEST_CASE("total loss") {
    std::mt19937_64 rng(7);
    ParzenConfig cfg;
    std::vector<Image> warped, pseudo;
    std::vector<DenseField> fields;
    for (int i = 0; i < 3; ++i) {
        warped.push_back(oracle::random_image(16, 16, rng));
        pseudo.push_back(oracle::random_image(16, 16, rng));
        fields.push_back(oracle::random_field(16, 16, rng, 0.5));
    }
    LossWeights w;
    SUBCASE("identical pairs without regularization") {
        w.lambda_smooth = 0.0;
        const LossBreakdown l = total_loss(warped, warped, fields, nullptr, w, cfg);
        double expected = 0.0;
        for (const Image& f : warped) expected -= oracle::naive_nmi(f, f, 32, 1.0);
        CHECK(l.total == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("zero fields have zero smoothness") {
        const std::vector<DenseField> zero(3, DenseField(16, 16));
        CHECK(total_loss(warped, pseudo, zero, nullptr, w, cfg).smooth == 0.0);
    }
    SUBCASE("weights scale their terms") {
        const LossBreakdown l1 = total_loss(warped, pseudo, fields, nullptr, w, cfg);
        LossWeights w2 = w;
        w2.lambda_mi *= 2.0;
        const LossBreakdown l2 = total_loss(warped, pseudo, fields, nullptr, w2, cfg);
        CHECK(l2.similarity == 2.0 * l1.similarity);
        CHECK(l2.smooth == l1.smooth);
        double sum = 0.0;
        for (double v : l1.similarity_per_frame) sum += v;
        CHECK(sum == doctest::Approx(l1.similarity).epsilon(1e-14));
    }
    SUBCASE("dice term") {
        MaskGuidance masks;
        masks.template_mask = Image(16, 16, 1.0);
        masks.warped_masks.assign(3, Image(16, 16, 1.0));
        w.lambda_dice = 0.5;
        const LossBreakdown l = total_loss(warped, pseudo, fields, &masks, w, cfg);
        CHECK(std::abs(l.dice) < 1e-6);
        masks.warped_masks[1] = Image(16, 16, 0.0);
        CHECK(total_loss(warped, pseudo, fields, &masks, w, cfg).dice == doctest::Approx(0.5).epsilon(1e-6));
    }
    SUBCASE("mse similarity") {
        const LossBreakdown l = total_loss(warped, pseudo, fields, nullptr, w, cfg, Similarity::mse);
        double expected = 0.0;
        for (int i = 0; i < 3; ++i) expected += mean_squared_error(pseudo[i], warped[i]);
        CHECK(l.similarity == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("invalid weights") {
        w = {0.0, 0.0, 0.0};
        CHECK_THROWS_AS(total_loss(warped, pseudo, fields, nullptr, w, cfg), Error);
        w = {-1.0, 0.0, 0.0};
        CHECK_THROWS_AS(total_loss(warped, pseudo, fields, nullptr, w, cfg), Error);
    }
}

TEST_CASE("a small gradient step lowers the loss") {
    // Warped image = moving(p + u); chain rule gives d loss / d u from the sample gradient.
    ParzenConfig cfg;
    LossWeights w;
    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        const Image fixed = smooth_image(24, rng);
        const Image moving = warp_image(fixed, uniform_field(24, 24, {0.7, -0.4}));
        DenseField u = oracle::random_field(24, 24, rng, 0.05);
        auto loss = [&](const DenseField& f) {
            const Image wi = warp_image(moving, f);
            return total_loss(std::span(&wi, 1), std::span(&fixed, 1), std::span(&f, 1), nullptr, w, cfg).total;
        };
        DenseField sample_grad;
        const Image wi = warp_image(moving, u, sample_grad);
        const Image g_img = nmi_gradient(fixed, wi, cfg);
        const DenseField g_s = smoothness_gradient(u);
        DenseField step(24, 24);
        for (std::size_t p = 0; p < u.size(); ++p)
            step[p] = (-w.lambda_mi * g_img[p]) * sample_grad[p] + w.lambda_smooth * g_s[p];
        DenseField moved = u;
        for (std::size_t p = 0; p < u.size(); ++p) moved[p] = u[p] - 1e-3 * step[p];
        decreased += loss(moved) < loss(u);
    }
    CHECK(decreased == 20);
}
