import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echoauth.errors import ConfigError, DataError
from echoauth.simchan import (DIRECT_PATH_GAIN, DIRECT_PATH_LATENCY, FaceProfile, MotionEvent,
                              MountJitter, Reflector, day_drift, make_face, random_blinks,
                              remount, simulate_rx)

from conftest import peaks, profile_of, single, streams


def test_face_is_deterministic():
    assert make_face(7) == make_face(7)
    assert make_face(7, "long_hair_variant") == make_face(7, "long_hair_variant")


def test_unknown_template():
    with pytest.raises(ConfigError):
        make_face(0, "beard")


def test_faces_differ_in_profile():
    a = profile_of(make_face(1)).values.astype(np.float64).ravel()
    b = profile_of(make_face(2)).values.astype(np.float64).ravel()
    # compare the echo part only, the shared direct path dominates raw profiles
    ref = profile_of(FaceProfile((), DIRECT_PATH_GAIN)).values.astype(np.float64).ravel()
    a, b = a - ref, b - ref
    cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert 1 - cos > 0.2


def test_long_hair_gain_variance_larger():
    def pooled_var(tmpl):
        return np.var(np.concatenate([make_face(s, tmpl).gains for s in range(200)]))
    assert pooled_var("long_hair_variant") > pooled_var("default")


def test_zero_jitter_is_identity():
    f = make_face(3)
    assert remount(f, MountJitter.none(), seed=9) == f


def test_remount_deterministic():
    f = make_face(3)
    j = MountJitter()
    assert remount(f, j, 5) == remount(f, j, 5)
    assert remount(f, j, 5) != remount(f, j, 6)


@pytest.mark.parametrize("seed", range(5))
def test_remount_shift_moves_peak_at_most_three_rows(seed):
    face = single(30.0)
    moved = remount(face, MountJitter(delay_shift=3.0, gain_scale=0.0, per_reflector_sigma=0.0), seed)
    before = np.median(peaks(face))
    after = np.median(peaks(moved))
    assert abs(after - before) <= 3


def test_drift_zero_is_identity():
    f = make_face(4)
    assert day_drift(f, 0.0, seed=1) == f


def test_drift_negative_rejected():
    with pytest.raises(ConfigError):
        day_drift(make_face(0), -1.0, 0)


def _band_response(face: FaceProfile) -> np.ndarray:
    """|H(f)| of the same-side paths over both sweep bands."""
    f = np.concatenate([np.linspace(18e3, 21e3, 64), np.linspace(21.5e3, 24.5e3, 64)]) / 50e3
    out = []
    for side in (0, 1):
        g = np.array([r.path_gain(side, side) for r in face.reflectors])
        out.append(np.abs(np.exp(-2j * np.pi * np.outer(f, face.delays)) @ g))
    return np.concatenate(out)


def test_larger_drift_moves_frequency_envelope_more():
    small, large = [], []
    for s in range(30):
        f = make_face(s)
        base = _band_response(f)
        small.append(np.linalg.norm(_band_response(day_drift(f, 0.2, s)) - base))
        large.append(np.linalg.norm(_band_response(day_drift(f, 2.0, s)) - base))
    assert np.mean(large) > np.mean(small)


def test_drift_deterministic():
    f = make_face(8)
    assert day_drift(f, 1.0, 3) == day_drift(f, 1.0, 3)


def test_direct_path_only_is_delayed_tx():
    txl, txr = streams(4)
    rec = simulate_rx(txl, txr, FaceProfile((), 1.0), None, 0)
    np.testing.assert_allclose(rec.right, np.roll(txr, DIRECT_PATH_LATENCY))
    np.testing.assert_allclose(rec.left, np.roll(txl, DIRECT_PATH_LATENCY))


def test_single_reflector_row():
    p = peaks(single(20.0), frames=20)
    assert np.all(np.abs(p - 20) <= 1)


def test_fractional_delay_exact_at_integer():
    # an integer delay must reproduce a circular shift of the stream
    txl, txr = streams(4)
    face = FaceProfile((Reflector(17.0, 1.0),), 0.0)
    rec = simulate_rx(txl, txr, face, None, 0)
    np.testing.assert_allclose(rec.right, np.roll(txr, 17) + 0.5 * np.roll(txl, 17), atol=1e-9)


def test_peak_error_grows_as_snr_falls():
    def err(snr):
        e = []
        for s in range(20):
            d = 12.0 + s * 2.1
            e.append(np.mean(np.abs(peaks(single(d, 0.5), snr, s, frames=10) - d)))
        return np.mean(e)
    assert err(0.0) >= err(40.0)


def test_noise_level_matches_snr():
    txl, txr = streams(50)
    face = make_face(0)
    clean = simulate_rx(txl, txr, face, None, 0)
    noisy = simulate_rx(txl, txr, face, 10.0, 0)
    noise = noisy.right - clean.right
    ratio = 10 * np.log10(np.mean(clean.right ** 2) / np.mean(noise ** 2))
    assert ratio == pytest.approx(10.0, abs=0.2)


def test_stream_shorter_than_frame_rejected():
    txl, txr = streams(1)
    with pytest.raises(DataError):
        simulate_rx(txl[:-1], txr[:-1], make_face(0), None, 0)


def test_partial_last_frame_keeps_periodic_echo():
    txl, txr = streams(10)
    face = make_face(3)
    full = simulate_rx(txl, txr, face, None, 0)
    cut = simulate_rx(txl[:5_700], txr[:5_700], face, None, 0)
    np.testing.assert_allclose(cut.right, full.right[:5_700], atol=1e-9)


def test_bad_reflector_delay():
    with pytest.raises(ConfigError):
        FaceProfile((Reflector(500.0, 1.0),))


def test_motion_event_only_inside_its_frames():
    txl, txr = streams(10)
    face = make_face(2)
    ev = MotionEvent(frame=4, n_frames=2, delay=30.0, gain=0.7)
    a = simulate_rx(txl, txr, face, None, 0)
    b = simulate_rx(txl, txr, face, None, 0, events=[ev])
    diff = np.abs(b.right - a.right).reshape(10, 600).max(axis=1)
    assert np.all(diff[[0, 1, 2, 3, 6, 7, 8, 9]] == 0)
    assert np.all(diff[4:6] > 0)


@given(st.integers(0, 2**32 - 1), st.floats(0, 5))
@settings(max_examples=25, deadline=None)
def test_blink_events_in_range(seed, rate):
    ev = random_blinks(np.random.default_rng(seed), 833, rate)
    for e in ev:
        assert 0 <= e.frame < 833 and 1 <= e.n_frames <= 3
        assert 10 <= e.delay <= 50 and 0.3 <= abs(e.gain) <= 0.8
