#include <doctest.h>

#include <cmath>

#include "dtcmr/diagnostics.hpp"
#include "dtcmr/metrics.hpp"
#include "dtcmr/phantom.hpp"
#include "dtcmr/registration.hpp"
#include "dtcmr/transform.hpp"
#include "test_util.hpp"

using namespace dtcmr;

namespace {

PhantomConfig small_phantom(std::uint64_t seed) {
    PhantomConfig cfg;
    cfg.n_repetitions = 4;
    cfg.seed = seed;
    return cfg;
}

double max_tensor_error(const TensorField& a, const TensorField& b, const MyocardiumMask& mask) {
    double worst = 0.0;
    for (std::size_t p = 0; p < a.d.size(); ++p)
        if (mask.labels[p])
            for (int k = 0; k < 6; ++k) worst = std::max(worst, std::abs(a.d[p][k] - b.d[p][k]));
    return worst;
}

}  // namespace

TEST_CASE("registration config") {
    SUBCASE("parse overrides defaults and ignores comments") {
        const RegistrationConfig c = RegistrationConfig::parse(
            "# comment\nmax_outer_iters = 12\nfield_lr=0.5  # trailing\n\nmode=mse_loss\ntensor_update=gradient\n");
        CHECK(c.max_outer_iters == 12);
        CHECK(c.field_lr == 0.5);
        CHECK(c.mode == RegistrationMode::mse_loss);
        CHECK(c.tensor_update == TensorUpdate::gradient);
        CHECK(c.spacing == RegistrationConfig{}.spacing);
    }
    SUBCASE("round trip through text") {
        RegistrationConfig c;
        c.set("spacing", "6");
        c.set("denoise_rank", "5");
        c.set("mode", "semi_supervised");
        const RegistrationConfig back = RegistrationConfig::parse(c.to_text());
        CHECK(back.spacing == 6.0);
        CHECK(back.denoise_rank == 5);
        CHECK(back.mode == RegistrationMode::semi_supervised);
        CHECK(back.to_text() == c.to_text());
    }
    SUBCASE("errors carry the line number and key") {
        CHECK_THROWS_WITH_AS(RegistrationConfig::parse("spacing=8\nbogus=1\n"), doctest::Contains("line 2"), Error);
        CHECK_THROWS_WITH_AS(RegistrationConfig::parse("spacing=8\nbogus=1\n"), doctest::Contains("bogus"), Error);
        CHECK_THROWS_WITH_AS(RegistrationConfig::parse("spacing\n"), doctest::Contains("line 1"), Error);
        RegistrationConfig c;
        CHECK_THROWS_AS(c.set("mode", "affine"), Error);
        CHECK_THROWS_AS(c.set("max_outer_iters", "many"), Error);
    }
    SUBCASE("validation") {
        RegistrationConfig c;
        c.field_lr = 0.0;
        CHECK_THROWS_AS(c.validate(), Error);
        c = {};
        c.weights.lambda_smooth = -1.0;
        CHECK_THROWS_AS(c.validate(), Error);
        c = {};
        c.tensor_refit_interval = 0;
        CHECK_THROWS_AS(c.validate(), Error);
    }
    SUBCASE("mode names") {
        for (RegistrationMode m : all_registration_modes()) CHECK(parse_registration_mode(to_string(m)) == m);
        CHECK(all_registration_modes().size() == 5);
        CHECK_THROWS_AS(parse_registration_mode("nope"), Error);
    }
}

TEST_CASE("motion-free noiseless phantom stays put") {
    const Phantom ph = make_phantom(small_phantom(1));
    const RegistrationResult r = register_groupwise(ph.series, &ph.truth.true_mask, {});
    CHECK_FALSE(r.diverged);
    double worst = 0.0;
    for (const DenseField& f : r.fields) worst = std::max(worst, max_displacement(f));
    CHECK(worst < 0.1);
    // The blended wall border is not a single tensor, so identity is not exactly optimal and
    // sub-0.1 px residual motion leaves about 1% error in D (~1.5e-5 mm^2/s).
    CHECK(max_tensor_error(r.final_tensor, ph.truth.true_tensor, ph.truth.true_mask) < 5e-5);
    CHECK(r.corrected_from_original);
    CHECK(r.fields.size() == ph.series.frame_count());
    CHECK(r.warps.size() == ph.series.frame_count());
}

TEST_CASE("rigid stage recovers pure translations") {
    PhantomConfig cfg = small_phantom(2);
    cfg.motion = MotionKind::translate;
    cfg.shift_amplitude = 4.0;
    const Phantom ph = make_phantom(cfg);
    RegistrationConfig rc;
    rc.mode = RegistrationMode::rigid_only;
    const RegistrationResult r = register_groupwise(ph.series, nullptr, rc);
    double sum = 0.0;
    for (std::size_t i = 0; i < r.rigid_shifts.size(); ++i) sum += (r.rigid_shifts[i] - ph.truth.true_shifts[i]).norm();
    CHECK(sum / static_cast<double>(r.rigid_shifts.size()) < 0.1);
    for (std::size_t i = 0; i < r.fields.size(); ++i) CHECK(r.fields[i][0] == r.rigid_shifts[i]);
    CHECK(r.loss_trace.empty());
}

TEST_CASE("semi-supervised mode needs masks") {
    const Phantom ph = make_phantom(small_phantom(3));
    RegistrationConfig rc;
    rc.mode = RegistrationMode::semi_supervised;
    CHECK_THROWS_AS(register_groupwise(ph.series, nullptr, rc), Error);
    CHECK_THROWS_AS(register_groupwise(ph.series, &ph.truth.true_mask, rc), Error);
}

TEST_CASE("deformable run is deterministic and descends") {
    PhantomConfig cfg = small_phantom(4);
    cfg.motion = MotionKind::deform;
    cfg.deform_amplitude = 2.0;
    cfg.noise_sigma = 0.05;
    const Phantom ph = make_phantom(cfg);
    RegistrationConfig rc;
    rc.max_outer_iters = 15;
    const RegistrationResult a = register_groupwise(ph.series, &ph.truth.true_mask, rc);
    const RegistrationResult b = register_groupwise(ph.series, &ph.truth.true_mask, rc);
    REQUIRE(a.fields.size() == b.fields.size());
    for (std::size_t i = 0; i < a.fields.size(); ++i) CHECK(a.fields[i] == b.fields[i]);
    CHECK(a.final_tensor.d == b.final_tensor.d);
    REQUIRE(a.loss_trace.size() >= 2);
    CHECK(a.loss_trace.back().total < a.loss_trace.front().total);
    CHECK(a.iterations <= 15);
    for (const DenseField& f : a.fields) CHECK(min_interior_jacobian(f) > 0.0);
}

TEST_CASE("ablation table rows") {
    PhantomConfig cfg = small_phantom(5);
    cfg.motion = MotionKind::translate;
    cfg.shift_amplitude = 2.0;
    cfg.noise_sigma = 0.05;
    const Phantom ph = make_phantom(cfg);
    const AblationResult res = run_ablation(ph.series, ph.truth.true_mask, {RegistrationMode::rigid_only}, {}, nullptr,
                                            &ph.truth.true_warps);
    REQUIRE(res.table.size() == 1);
    const AblationRow& row = res.table[0];
    CHECK(row.mode == RegistrationMode::rigid_only);
    REQUIRE(row.median_epe.has_value());
    CHECK(*row.median_epe == doctest::Approx(field_error(res.results[0].fields, ph.truth.true_warps, &ph.truth.true_mask).median));
    const HagReport hag = hag_line_profiles(helix_angle_map(res.results[0].final_tensor, ph.truth.true_mask), ph.truth.true_mask);
    CHECK(row.mean_r2 == doctest::Approx(hag.mean_r2));
    CHECK(row.included_profiles == hag.included_count);
    const std::string text = format_ablation_table(res.table);
    CHECK(text.find("rigid_only") != std::string::npos);
}
