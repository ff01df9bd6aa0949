"""Echo profiles: band-pass, Tx/Rx cross-correlation, direct-path sync, reshape, crop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, DataError, SyncError
from .signal import LEFT_BAND, RIGHT_BAND, SAMPLE_RATE, ChirpFrame, SweepConfig, generate_chirp
from .simchan import Recording, SessionMeta

# rows kept on disk, relative to the direct path: -35 .. 74
WIDE_CROP = (-35, 75)
# rows fed to the model at evaluation time: -15 .. 54
EVAL_CROP = (-15, 55)
N_ROWS = WIDE_CROP[1] - WIDE_CROP[0]
EVAL_ROWS = EVAL_CROP[1] - EVAL_CROP[0]
EVAL_START = EVAL_CROP[0] - WIDE_CROP[0]

CHANNEL_NAMES = ("right_mic/right_band", "right_mic/left_band",
                 "left_mic/right_band", "left_mic/left_band")
# (mic side, band side) per channel; side 0 = right, 1 = left
CHANNEL_PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))
SAME_SIDE_CHANNELS = (0, 3)


@dataclass(frozen=True)
class BandPassSpec:
    low_cut: float
    high_cut: float
    order: int = 4
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        if not (0 < self.low_cut < self.high_cut < self.sample_rate / 2):
            raise ConfigError(
                f"band ({self.low_cut}, {self.high_cut}) Hz must satisfy "
                f"0 < low < high < {self.sample_rate / 2}"
            )
        if self.order < 1:
            raise ConfigError("filter order must be positive")

    def sos(self) -> np.ndarray:
        return sps.butter(self.order, [self.low_cut, self.high_cut], btype="band",
                          fs=self.sample_rate, output="sos")


DEFAULT_SPECS = (BandPassSpec(*RIGHT_BAND), BandPassSpec(*LEFT_BAND))


def default_tx() -> tuple[ChirpFrame, ChirpFrame]:
    return generate_chirp(SweepConfig.right()), generate_chirp(SweepConfig.left())


@dataclass
class CorrelationSeries:
    """C(n) stored so that ``values[zero_index + n] == C(n)``."""

    values: np.ndarray
    zero_index: int
    frame_len: int = 600

    def __post_init__(self):
        if not (0 <= self.zero_index < len(self.values)):
            raise DataError("zero_index outside correlation array")

    def lag(self, n):
        return self.values[self.zero_index + np.asarray(n)]

    @property
    def max_lag(self) -> int:
        return len(self.values) - 1 - self.zero_index


@dataclass
class EchoProfile:
    values: np.ndarray  # (channels, frames, rows) float32
    meta: SessionMeta = field(default_factory=SessionMeta)
    offset: int = 0
    row_start: int = WIDE_CROP[0]
    channel_names: tuple[str, ...] = CHANNEL_NAMES

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DataError("echo profile must be channels x frames x rows")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def rows(self) -> int:
        return self.values.shape[2]

    def row_index(self, row: int) -> int:
        return row - self.row_start

    def window(self, start_row: int = EVAL_CROP[0], n_rows: int = EVAL_ROWS) -> np.ndarray:
        i = self.row_index(start_row)
        if i < 0 or i + n_rows > self.rows:
            raise DataError("requested rows outside stored crop")
        return self.values[:, :, i:i + n_rows]


def bandpass(x: np.ndarray, spec: BandPassSpec) -> np.ndarray:
    """Zero-phase (forward-backward) Butterworth band-pass."""
    x = np.asarray(x, dtype=np.float64)
    sos = spec.sos()
    padlen = 3 * (2 * len(sos) + 1)
    if len(x) <= padlen:
        raise DataError(f"signal of {len(x)} samples is shorter than the filter warm-up ({padlen})")
    return sps.sosfiltfilt(sos, x)


def cross_correlate(tx: ChirpFrame | np.ndarray, rx: np.ndarray) -> CorrelationSeries:
    """C(n) = sum_m tx[m] rx[m + n] via FFT (overlap-add).

    Lags run from -(N-1), where only the tail of the window overlaps ``rx``, up
    to L - N, the last lag with a full window.
    """
    t = np.asarray(getattr(tx, "samples", tx), dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    n = len(t)
    if len(rx) < n:
        raise DataError(f"rx has {len(rx)} samples, fewer than one frame ({n})")
    full = sps.oaconvolve(rx, t[::-1], mode="full")
    return CorrelationSeries(values=full[:len(rx)], zero_index=n - 1, frame_len=n)


def cross_correlate_direct(tx: ChirpFrame | np.ndarray, rx: np.ndarray) -> np.ndarray:
    """Reference sum over full windows only: C(n) for n = 0 .. L - N."""
    t = np.asarray(getattr(tx, "samples", tx), dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    n_lags = len(rx) - len(t) + 1
    if n_lags < 1:
        raise DataError("rx shorter than one frame")
    out = np.empty(n_lags)
    for lag in range(n_lags):
        out[lag] = np.dot(t, rx[lag:lag + len(t)])
    return out


def _frame_body(corr: CorrelationSeries) -> np.ndarray:
    n = corr.frame_len
    body = corr.values[corr.zero_index:]
    k = len(body) // n
    return body[:k * n].reshape(k, n)


def frame_peaks(corr: CorrelationSeries | Sequence[CorrelationSeries]) -> np.ndarray:
    """Lag (mod N) of the largest correlation energy inside each full frame.

    With several series the squared correlations are summed first. In a band
    close to Nyquist |C| at lags 0 and -1 nearly tie, so pooling with a lower
    band makes the per-frame peak unambiguous.
    """
    series = [corr] if isinstance(corr, CorrelationSeries) else list(corr)
    bodies = [_frame_body(c) for c in series]
    k = min(b.shape[0] for b in bodies)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    energy = sum(b[:k] ** 2 for b in bodies)
    return np.argmax(energy, axis=1)


def sync_direct_path(corr: CorrelationSeries | Sequence[CorrelationSeries],
                     min_fraction: float = 0.5) -> int:
    """Direct-path offset: the most common per-frame correlation peak position.

    Several series (e.g. both same-side channels) are pooled by summing their
    squared correlations frame by frame. Ties go to the smaller offset. The
    mode must hold in at least two frames and in ``min_fraction`` of them,
    otherwise the recording has no stable direct path.
    """
    peaks = frame_peaks(corr)
    if len(peaks) < 3:
        raise SyncError(f"need at least 3 frames to sync, got {len(peaks)}")
    n = corr.frame_len if isinstance(corr, CorrelationSeries) else corr[0].frame_len
    counts = np.bincount(peaks, minlength=n)
    best = int(np.argmax(counts))  # argmax returns the first, i.e. smallest, tie
    need = max(2, math.ceil(min_fraction * len(peaks)))
    if counts[best] < need:
        raise SyncError(
            f"no stable direct path: mode held in {counts[best]} of {len(peaks)} frames"
        )
    return best


def n_profile_frames(n_samples: int, frame_len: int, offset: int,
                     crop: tuple[int, int] = WIDE_CROP) -> int:
    last_lag = n_samples - frame_len
    return max(0, (last_lag - (crop[1] - 1) - offset) // frame_len + 1)


def reshape_crop(corr: CorrelationSeries, offset: int, n_frames: int,
                 crop: tuple[int, int] = WIDE_CROP) -> np.ndarray:
    """Frame k, row r  ->  C(offset + k*N + r)."""
    n = corr.frame_len
    rows = np.arange(crop[0], crop[1])
    idx = corr.zero_index + offset + n * np.arange(n_frames)[:, None] + rows[None, :]
    if n_frames and (idx.min() < 0 or idx.max() >= len(corr.values)):
        raise DataError("crop reaches outside the correlation series")
    return corr.values[idx]


def build_echo_profile(
    recording: Recording,
    specs: tuple[BandPassSpec, BandPassSpec] = DEFAULT_SPECS,
    tx: tuple[ChirpFrame, ChirpFrame] | None = None,
    crop: tuple[int, int] = WIDE_CROP,
) -> EchoProfile:
    """Four-channel echo profile of a two-microphone recording.

    ``specs`` and ``tx`` are ordered (right band, left band). Channels follow
    ``CHANNEL_NAMES``.
    """
    tx = tx if tx is not None else default_tx()
    if len(tx[0]) != len(tx[1]):
        raise DataError("transmit frames differ in length")
    frame_len = len(tx[0])
    if len(recording.left) != len(recording.right):
        raise DataError("microphone channels differ in length")
    if len(recording) < 3 * frame_len:
        raise DataError("recording shorter than three frames")

    corrs = []
    for mic_side, band in CHANNEL_PAIRS:
        filtered = bandpass(recording.mic(mic_side), specs[band])
        corrs.append(cross_correlate(tx[band], filtered))
    offset = sync_direct_path([corrs[i] for i in SAME_SIDE_CHANNELS])
    n_frames = n_profile_frames(len(recording), frame_len, offset, crop)
    if n_frames < 1:
        raise DataError("recording too short for a single cropped frame")
    values = np.stack([reshape_crop(c, offset, n_frames, crop) for c in corrs])
    return EchoProfile(values=values.astype(np.float32), meta=recording.meta,
                       offset=offset, row_start=crop[0])


def differential(profile: EchoProfile, reference: EchoProfile) -> np.ndarray:
    """Profile minus a reflector-free reference (direct path removed)."""
    ref = reference.values.mean(axis=1, keepdims=True)
    return profile.values.astype(np.float64) - ref


def envelope(values: np.ndarray) -> np.ndarray:
    """Analytic-signal magnitude along the row (lag) axis."""
    return np.abs(sps.hilbert(values, axis=-1))


def peak_rows(values: np.ndarray, row_start: int = WIDE_CROP[0],
              window: tuple[int, int] = EVAL_CROP) -> np.ndarray:
    """Row (relative to the direct path) of the envelope peak per channel and frame.

    Raw |C| oscillates at the carrier, so its argmax can sit a carrier period
    away from the true delay; the envelope does not.
    """
    lo, hi = window[0] - row_start, window[1] - row_start
    return np.argmax(envelope(values)[..., lo:hi], axis=-1) + window[0]
