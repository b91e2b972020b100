import math

import numpy as np
import pytest

from ear3d.data import PhantomSpec, generate_phantom, make_record
from ear3d.errors import EmptyCurveError, EmptyMaskError, ShapeError
from ear3d.velocity import (VelocityCurves, curve_comparison, curve_peak, frame_velocities,
                            global_velocity_curves, mask_centroid, peak_velocities, postprocess_mask,
                            velocity_report)


def _annulus(s=24, r_in=5, r_out=9):
    rows, cols = np.mgrid[0:s, 0:s]
    d = np.hypot(rows - s / 2, cols - s / 2)
    return ((d >= r_in) & (d <= r_out)).astype(np.uint8)


def _clean_phantom(frames=8, size=64, **kw):
    spec = PhantomSpec(sigma_n=0.0, magnitude_noise=0.0, **kw)
    return generate_phantom(1, frames, size, size, seed=2, spec=spec)[0], spec


def test_postprocess_removes_speck_and_keeps_ring():
    ring = _annulus()
    noisy = ring.copy()
    noisy[1, 1] = noisy[1, 2] = 1
    out = postprocess_mask(noisy)
    assert np.array_equal(out, ring)
    assert np.array_equal(postprocess_mask(out), out)


def test_postprocess_fills_wall_gaps_but_not_cavity():
    ring = _annulus()
    holey = ring.copy()
    holey[12, 19] = 0  # a pinhole inside the wall
    out = postprocess_mask(holey)
    assert np.array_equal(out, ring)
    assert out[12, 12] == 0


def test_postprocess_idempotent_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = (rng.random((3, 12, 12)) > 0.45).astype(np.uint8)
        once = postprocess_mask(m)
        assert np.array_equal(postprocess_mask(once), once)
    assert not postprocess_mask(np.zeros((4, 4))).any()
    with pytest.raises(ShapeError):
        postprocess_mask(np.zeros(4))


def test_centroid_examples():
    m = np.zeros((5, 5))
    m[1, 1] = m[3, 3] = 1
    assert mask_centroid(m) == (2.0, 2.0)
    assert mask_centroid(_annulus()) == pytest.approx((12.0, 12.0), abs=1e-12)
    with pytest.raises(EmptyMaskError):
        mask_centroid(np.zeros((3, 3)))


def test_zero_field_gives_zero_curves():
    rec, _ = _clean_phantom(frames=4, size=32, v_r=0.0, v_c=0.0, v_z=0.0)
    curves = global_velocity_curves(rec)
    for name in ("longitudinal", "radial", "circumferential"):
        assert not curves.curve(name).any()


def test_phantom_recovery_within_two_percent():
    rec, spec = _clean_phantom()
    curves = global_velocity_curves(rec)
    phase = 2 * np.pi * np.arange(8) / 8
    analytic = {"longitudinal": spec.v_z * np.cos(phase), "radial": spec.v_r * np.cos(phase),
                "circumferential": spec.v_c * np.sin(phase)}
    peaks = peak_velocities(curves)
    for name, truth in analytic.items():
        amp = np.abs(truth).max()
        assert np.max(np.abs(curves.curve(name) - truth)) <= 0.02 * amp
        assert abs(peaks[name].max_value - truth.max()) <= 0.02 * abs(truth.max())
        assert abs(peaks[name].min_value - truth.min()) <= 0.02 * abs(truth.min())


def test_uniform_translation_has_no_radial_or_circumferential_mean():
    ring = _annulus()
    vel = np.zeros((3,) + ring.shape)
    vel[0], vel[1] = 2.0, -1.5
    _, radial, circ = frame_velocities(vel, ring, (1.0, 1.0))
    assert abs(radial) < 1e-12 and abs(circ) < 1e-12


def test_curves_are_linear_in_the_field():
    rng = np.random.default_rng(3)
    ring = _annulus()
    a, b = rng.standard_normal((3,) + ring.shape), rng.standard_normal((3,) + ring.shape)
    fa = np.array(frame_velocities(a, ring, (0.85, 0.85)))
    fb = np.array(frame_velocities(b, ring, (0.85, 0.85)))
    fab = np.array(frame_velocities(2 * a - 3 * b, ring, (0.85, 0.85)))
    assert np.max(np.abs(fab - (2 * fa - 3 * fb))) < 1e-12


def test_physical_half_turn_preserves_curves():
    rec, _ = _clean_phantom(frames=4, size=32)
    image = np.rot90(rec.image, 2, axes=(2, 3)).copy()
    image[1:3] *= -1  # a physical 180 degree turn also flips the in-plane vectors
    turned = make_record(rec.subject_id, rec.slice_id, image, np.rot90(rec.mask, 2, axes=(1, 2)))
    a, b = global_velocity_curves(rec), global_velocity_curves(turned)
    for name in ("longitudinal", "radial", "circumferential"):
        assert np.max(np.abs(a.curve(name) - b.curve(name))) < 1e-5


def test_empty_frames_are_missing_not_zero():
    rec, _ = _clean_phantom(frames=4, size=32)
    mask = rec.mask.copy()
    mask[2] = 0
    curves = global_velocity_curves(rec, mask)
    assert curves.missing.tolist() == [False, False, True, False]
    assert math.isnan(curves.radial[2])
    assert "missing_frames" in velocity_report(curves)


def test_peak_examples():
    p = curve_peak([1.0, 3.0, 3.0, -2.0, np.nan])
    assert (p.max_value, p.max_frame, p.min_value, p.min_frame) == (3.0, 1, -2.0, 3)
    with pytest.raises(EmptyCurveError):
        curve_peak([np.nan, np.nan])


def test_comparison_of_offset_curves():
    base = np.sin(np.arange(6.0))
    a = VelocityCurves(base, base, base)
    b = VelocityCurves(base + 0.7, base + 0.7, base + 0.7)
    rep = curve_comparison(b, a)
    for name in rep:
        assert rep[name]["rms"] == pytest.approx(0.7, abs=1e-12)
        assert rep[name]["peak_max_delta"] == pytest.approx(0.7, abs=1e-12)
        assert rep[name]["peak_max_frame_delta"] == 0


def test_csv_round_trip():
    curves = VelocityCurves(np.array([1.5, np.nan, -2.0]), np.array([0.1, np.nan, 1e-9]),
                            np.array([0.0, np.nan, 3.25]))
    text = curves.to_csv()
    assert text.splitlines()[0] == "frame,longitudinal_cm_s,radial_cm_s,circumferential_cm_s"
    assert text.splitlines()[2] == "1,,,"
    back = VelocityCurves.from_csv(text)
    for name in ("longitudinal", "radial", "circumferential"):
        assert np.array_equal(back.curve(name), curves.curve(name), equal_nan=True)
    with pytest.raises(ValueError):
        VelocityCurves.from_csv("a,b\n")
