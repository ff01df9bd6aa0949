import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echoauth.echo import (DEFAULT_SPECS, EVAL_CROP, N_ROWS, WIDE_CROP, BandPassSpec, bandpass,
                           build_echo_profile, cross_correlate, cross_correlate_direct,
                           default_tx, n_profile_frames, sync_direct_path)
from echoauth.errors import ConfigError, DataError, SyncError
from echoauth.signal import SweepConfig, delay_to_range_m, tx_stream
from echoauth.simchan import Recording, make_face, simulate_rx

from conftest import peaks, single, streams

FS = 50_000


def _rms(x):
    return np.sqrt(np.mean(x ** 2))


def test_stopband_tone_attenuated():
    t = np.arange(20_000) / FS
    x = np.sin(2 * np.pi * 10_000 * t)
    y = bandpass(x, DEFAULT_SPECS[0])
    assert 20 * np.log10(_rms(y) / _rms(x)) <= -40


def test_passband_tone_kept():
    t = np.arange(20_000) / FS
    x = np.sin(2 * np.pi * 19_500 * t)
    y = bandpass(x, DEFAULT_SPECS[0])
    assert abs(20 * np.log10(_rms(y) / _rms(x))) <= 3


def test_dc_removed():
    y = bandpass(np.full(5_000, 3.0), DEFAULT_SPECS[1])
    assert np.max(np.abs(y)) <= 1e-6 * 3.0


def test_zero_phase():
    # forward-backward filtering leaves a passband chirp's correlation peak in place
    tx = default_tx()[0].samples
    x = np.tile(tx, 10)
    y = bandpass(x, DEFAULT_SPECS[0])
    c = cross_correlate(tx, y)
    body = c.values[c.zero_index + 600 * 4: c.zero_index + 600 * 5]
    assert np.argmax(np.abs(body)) in (0, 599)


def test_bad_band_spec():
    with pytest.raises(ConfigError):
        BandPassSpec(21_000, 18_000)
    with pytest.raises(ConfigError):
        BandPassSpec(18_000, 26_000)


def test_short_signal_rejected():
    with pytest.raises(DataError):
        bandpass(np.ones(10), DEFAULT_SPECS[0])


def test_delayed_copy_peaks_at_delay():
    tx = default_tx()[0].samples
    rx = np.concatenate([np.zeros(37), tx, np.zeros(200)])
    direct = cross_correlate_direct(tx, rx)
    assert int(np.argmax(direct)) == 37
    c = cross_correlate(tx, rx)
    assert int(np.argmax(c.values)) - c.zero_index == 37


def test_autocorrelation_peak_at_zero():
    tx = default_tx()[1].samples
    c = cross_correlate(tx, tx)
    assert int(np.argmax(c.values)) - c.zero_index == 0


@given(st.integers(0, 2**32 - 1), st.integers(600, 3_000))
@settings(max_examples=40, deadline=None)
def test_fft_matches_direct_sum(seed, n):
    rng = np.random.default_rng(seed)
    tx = rng.standard_normal(600)
    rx = rng.standard_normal(n)
    c = cross_correlate(tx, rx)
    d = cross_correlate_direct(tx, rx)
    fft = c.values[c.zero_index:c.zero_index + len(d)]
    assert np.max(np.abs(fft - d)) / np.max(np.abs(d)) <= 1e-6


def test_negative_lags_use_partial_windows():
    rng = np.random.default_rng(0)
    tx, rx = rng.standard_normal(600), rng.standard_normal(2_000)
    c = cross_correlate(tx, rx)
    # C(-k) = sum over the overlapping tail of tx
    for k in (1, 50, 599):
        want = np.dot(tx[k:], rx[:600 - k])
        assert c.lag(-k) == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_sync_offset_is_direct_path_latency():
    rec = simulate_rx(*streams(30), make_face(5), 20.0, 0)
    prof = build_echo_profile(rec)
    assert prof.offset == 0


def test_sync_follows_a_shift():
    txl, txr = streams(30)
    rec = simulate_rx(txl, txr, make_face(5), 20.0, 0)
    shifted = Recording(np.roll(rec.left, 100), np.roll(rec.right, 100))
    assert build_echo_profile(shifted).offset == 100


def test_sync_fails_on_noise():
    failures = 0
    tx = default_tx()
    for s in range(20):
        rng = np.random.default_rng(s)
        noise = rng.standard_normal((2, 30 * 600))
        corrs = [cross_correlate(tx[b], bandpass(noise[m], DEFAULT_SPECS[b]))
                 for m, b in ((0, 0), (1, 1))]
        try:
            sync_direct_path(corrs)
        except SyncError:
            failures += 1
    assert failures >= 19


def test_profile_shape_ten_seconds():
    txl, txr = streams(834)
    rec = simulate_rx(txl[:500_000], txr[:500_000], make_face(1), 20.0, 0)
    prof = build_echo_profile(rec)
    assert prof.values.shape == (4, 833, N_ROWS)
    assert prof.values.dtype == np.float32


def test_frame_count_arithmetic():
    assert n_profile_frames(500_000, 600, 0) == 833
    assert n_profile_frames(500_000, 600, 100) == 833
    assert n_profile_frames(500_000, 600, 400) == 832
    assert n_profile_frames(499_800, 600, 0) == 832


def test_profile_rows_are_correlation_lags():
    txl, txr = streams(20)
    rec = simulate_rx(txl, txr, make_face(2), None, 0)
    prof = build_echo_profile(rec)
    filt = bandpass(rec.right, DEFAULT_SPECS[0])
    c = cross_correlate(default_tx()[0], filt)
    k, r = 3, 17
    assert prof.values[0, k, r - WIDE_CROP[0]] == pytest.approx(c.lag(prof.offset + 600 * k + r), rel=1e-5)


def test_same_side_peak_within_one_row():
    p = peaks(single(20.0), snr=30.0, seed=3, frames=60)
    assert np.mean(np.abs(p - 20) <= 1) >= 0.9


def test_eval_crop_upper_bound_range():
    assert delay_to_range_m(EVAL_CROP[1]) == pytest.approx(0.187, abs=1e-12)


def test_recording_too_short():
    tx = tx_stream(SweepConfig.right(), 2)
    with pytest.raises(DataError):
        build_echo_profile(Recording(tx.copy(), tx.copy()))


def test_runtime_ten_second_session():
    txl, txr = streams(833)
    rec = simulate_rx(txl, txr, make_face(1), 20.0, 0)
    t = time.perf_counter()
    build_echo_profile(rec)
    assert time.perf_counter() - t <= 5.0
