import numpy as np
import pytest

import dtcmr


def test_static_phantom_fit_is_exact():
    ph = dtcmr.make_phantom(size=48, nrep=1, endo=6, epi=14, body=20)
    s0, d = dtcmr.fit_tensor(ph["frames"], ph["bvalues"], ph["directions"])
    inside = ph["true_s0"] > 0
    assert np.max(np.abs(d - ph["true_tensor"])[inside]) < 1e-8
    frames = dtcmr.pseudo_frames(s0, d, ph["bvalues"], ph["directions"])
    assert np.allclose(frames[:, inside], ph["frames"][:, inside], rtol=1e-6, atol=1e-7)


def test_truth_metrics():
    ph = dtcmr.make_phantom(size=96, nrep=1)
    m = dtcmr.evaluate(ph["true_s0"], ph["true_tensor"], ph["mask"])
    assert m["ne_percent"] == 0.0
    assert m["mean_r2"] > 0.999
    assert m["included_profiles"] == 72
    assert m["ha_map"].shape == (96, 96)


def test_nmi_and_singular_values():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(16, 16))
    assert dtcmr.nmi(a, a) > dtcmr.nmi(a, rng.uniform(size=(16, 16)))
    stack = np.stack([a * k for k in (1.0, 2.0, 3.0)])
    sv = dtcmr.singular_values(stack, 2)
    assert sv[1] < 1e-6 * sv[0]


def test_rigid_registration_recovers_shifts():
    ph = dtcmr.make_phantom(motion="translate", shift_amp=3.0, noise=0.02, seed=3)
    r = dtcmr.register(ph["frames"], ph["bvalues"], ph["directions"], mode="rigid_only")
    assert r["fields"].shape == ph["true_fields"].shape
    err = dtcmr.field_error(r["fields"], ph["true_fields"], ph["mask"])
    assert err["median"] < 0.1


def test_errors_surface_as_exceptions(tmp_path):
    ph = dtcmr.make_phantom(size=32, nrep=1, endo=4, epi=9, body=13)
    with pytest.raises(dtcmr.Error):
        dtcmr.register(ph["frames"], ph["bvalues"], ph["directions"], mode="affine")
    with pytest.raises(dtcmr.Error):
        dtcmr.fit_tensor(ph["frames"][1:], ph["bvalues"][1:], ph["directions"][1:])
    dtcmr.save_series(ph["frames"], ph["bvalues"], ph["directions"], str(tmp_path / "s"))
    back = dtcmr.load_series(str(tmp_path / "s"))
    assert np.allclose(back["frames"], ph["frames"], atol=1e-6)
