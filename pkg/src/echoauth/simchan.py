"""Synthetic multipath channel standing in for a human face.

A face is a handful of point reflectors. Each reflector has a round-trip delay
(in samples), a signed gain, a per-band gain pair and a coupling pair that says
how strongly it is seen from the right and the left hinge. Remounting the
glasses and day-to-day changes are modelled as perturbations of those numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .signal import SAMPLE_RATE

MAX_DELAY = 120.0
CROSS_GAIN = 0.5
DIRECT_PATH_LATENCY = 0
# sound through the frame is far stronger than any facial echo
DIRECT_PATH_GAIN = 3.0
TEMPLATES = ("default", "long_hair_variant")
SIDES = ("right", "left")


@dataclass(frozen=True)
class Reflector:
    delay: float
    gain: float
    band_tilt: tuple[float, float] = (1.0, 1.0)  # (right band, left band)
    coupling: tuple[float, float] = (1.0, 1.0)  # (right side, left side)

    def path_gain(self, tx_side: int, mic_side: int) -> float:
        g = self.gain * self.band_tilt[tx_side]
        g *= math.sqrt(self.coupling[tx_side] * self.coupling[mic_side])
        if tx_side != mic_side:
            g *= CROSS_GAIN
        return g


@dataclass(frozen=True)
class FaceProfile:
    reflectors: tuple[Reflector, ...]
    direct_path_gain: float = 1.0
    id: str = "face"

    def __post_init__(self):
        for r in self.reflectors:
            if not (0 <= r.delay < MAX_DELAY):
                raise ConfigError(f"reflector delay {r.delay} outside [0, {MAX_DELAY})")
            vals = (r.gain, *r.band_tilt, *r.coupling)
            if not all(math.isfinite(v) for v in vals):
                raise ConfigError("non-finite reflector parameter")

    @property
    def delays(self) -> np.ndarray:
        return np.array([r.delay for r in self.reflectors])

    @property
    def gains(self) -> np.ndarray:
        return np.array([r.gain for r in self.reflectors])


@dataclass(frozen=True)
class MountJitter:
    delay_shift: float = 2.0
    gain_scale: float = 0.05
    per_reflector_sigma: float = 0.25

    @classmethod
    def none(cls) -> "MountJitter":
        return cls(0.0, 0.0, 0.0)

    def scaled(self, k: float) -> "MountJitter":
        return MountJitter(self.delay_shift * k, self.gain_scale * k, self.per_reflector_sigma * k)


@dataclass(frozen=True)
class MotionEvent:
    """A transient reflector active over a run of frames (blink, twitch)."""

    frame: int
    n_frames: int
    delay: float
    gain: float


@dataclass(frozen=True)
class SessionMeta:
    user: str = ""
    day: int = 0
    session: int = 0
    condition: str = "sitting"
    session_id: str = ""

    def to_dict(self) -> dict:
        return {"user": self.user, "day": self.day, "session": self.session,
                "condition": self.condition, "session_id": self.session_id}


@dataclass
class Recording:
    left: np.ndarray
    right: np.ndarray
    sample_rate: float = SAMPLE_RATE
    meta: SessionMeta = field(default_factory=SessionMeta)

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise DataError("microphone channels differ in length")

    def __len__(self):
        return len(self.left)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def mic(self, side: int) -> np.ndarray:
        return self.right if side == 0 else self.left


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# inclusive-exclusive range of facial reflectors per identity
REFLECTOR_COUNT = (6, 13)


def make_face(seed: int, template: str = "default", face_id: str | None = None) -> FaceProfile:
    if template not in TEMPLATES:
        raise ConfigError(f"unknown face template {template!r}")
    rng = _rng([seed, 0xFACE])
    n = int(rng.integers(*REFLECTOR_COUNT))
    delays = np.sort(rng.uniform(5.0, 55.0, n))
    if template == "default":
        mags = rng.uniform(0.15, 0.6, n)
    else:
        # hair in front of the hinge: a few strong, erratic reflections
        mags = rng.lognormal(np.log(0.3), 0.8, n).clip(0.02, 1.2)
    signs = rng.choice([-1.0, 1.0], n)
    tilts = rng.uniform(0.6, 1.4, (n, 2))
    coupling = rng.uniform(0.3, 1.0, (n, 2))
    refl = tuple(
        Reflector(float(d), float(s * m), (float(t[0]), float(t[1])), (float(c[0]), float(c[1])))
        for d, m, s, t, c in zip(delays, mags, signs, tilts, coupling)
    )
    return FaceProfile(refl, DIRECT_PATH_GAIN, face_id if face_id is not None else f"face{seed}")


def _clip_delay(d: float) -> float:
    return float(min(max(d, 0.0), MAX_DELAY - 1e-6))


# perturbed faces stay physically plausible: no echo outgrows the direct path
MAX_REFLECTOR_GAIN = 1.2
TILT_RANGE = (0.4, 1.6)


def _clip_gain(g: float) -> float:
    return float(np.clip(g, -MAX_REFLECTOR_GAIN, MAX_REFLECTOR_GAIN))


def remount(face: FaceProfile, jitter: MountJitter, seed) -> FaceProfile:
    """Take the glasses off and put them back on."""
    rng = _rng(seed)
    n = len(face.reflectors)
    shift = rng.uniform(-1.0, 1.0) * jitter.delay_shift
    per = rng.standard_normal(n) * jitter.per_reflector_sigma
    scale = np.exp(rng.standard_normal(n) * jitter.gain_scale)
    refl = tuple(
        replace(r, delay=_clip_delay(r.delay + shift + per[i]), gain=_clip_gain(r.gain * scale[i]))
        for i, r in enumerate(face.reflectors)
    )
    return replace(face, reflectors=refl)


# per unit magnitude; chosen so that magnitude 1 clearly exceeds default remount jitter
DRIFT_DELAY_SIGMA = 0.6
DRIFT_GAIN_SIGMA = 0.25
DRIFT_TILT_SIGMA = 0.2


def day_drift(face: FaceProfile, magnitude: float, seed) -> FaceProfile:
    """Persistent change of the reflection pattern for one day."""
    if magnitude < 0:
        raise ConfigError("drift magnitude must be non-negative")
    rng = _rng(seed)
    n = len(face.reflectors)
    dz = rng.standard_normal(n)
    gz = rng.standard_normal(n)
    tz = rng.standard_normal((n, 2))
    refl = []
    for i, r in enumerate(face.reflectors):
        tilt = np.clip(r.band_tilt * np.exp(magnitude * DRIFT_TILT_SIGMA * tz[i]), *TILT_RANGE)
        refl.append(replace(
            r,
            delay=_clip_delay(r.delay + magnitude * DRIFT_DELAY_SIGMA * dz[i]),
            gain=_clip_gain(r.gain * math.exp(magnitude * DRIFT_GAIN_SIGMA * gz[i])),
            band_tilt=(float(tilt[0]), float(tilt[1])),
        ))
    return replace(face, reflectors=tuple(refl))


def _delay_response(freqs_cyc: np.ndarray, delays: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """sum_i g_i exp(-j 2 pi f d_i) with f in cycles per sample."""
    if len(delays) == 0:
        return np.zeros(len(freqs_cyc), dtype=np.complex128)
    return np.exp(-2j * np.pi * np.outer(freqs_cyc, delays)) @ gains


def _period(x: np.ndarray, n: int) -> bool:
    return len(x) >= 2 * n and np.array_equal(x[n:], x[:-n])


def _tile(one: np.ndarray, length: int) -> np.ndarray:
    return np.tile(one, -(-length // len(one)))[:length]


def _apply_paths(tx: np.ndarray, delays: np.ndarray, gains: np.ndarray, period: int | None) -> np.ndarray:
    """Circularly delay ``tx`` by each fractional delay and sum the copies.

    Fractional delays are applied as exact band-limited phase ramps. When the
    transmit stream repeats with ``period`` only one period is transformed.
    """
    if period is not None:
        spec = np.fft.rfft(tx[:period])
        h = _delay_response(np.fft.rfftfreq(period), delays, gains)
        one = np.fft.irfft(spec * h, n=period)
        return _tile(one, len(tx))
    spec = np.fft.rfft(tx)
    h = _delay_response(np.fft.rfftfreq(len(tx)), delays, gains)
    return np.fft.irfft(spec * h, n=len(tx))


def simulate_rx(
    tx_left: np.ndarray,
    tx_right: np.ndarray,
    face: FaceProfile,
    noise_snr_db: float | None,
    seed,
    *,
    frame_len: int = 600,
    events: Sequence[MotionEvent] = (),
    sample_rate: float = SAMPLE_RATE,
    meta: SessionMeta | None = None,
) -> Recording:
    """Microphone signals for both hinges.

    Each microphone hears its own speaker through the frame (direct path,
    zero latency) and every reflector from both speakers, with cross-face
    paths attenuated by ``CROSS_GAIN``. ``noise_snr_db=None`` disables noise.
    """
    tx_right = np.asarray(tx_right, dtype=np.float64)
    tx_left = np.asarray(tx_left, dtype=np.float64)
    if tx_right.shape != tx_left.shape or tx_right.ndim != 1:
        raise DataError("tx streams must be 1-D and of equal length")
    if len(tx_right) < frame_len:
        raise DataError(f"tx length {len(tx_right)} is shorter than one frame ({frame_len})")
    if noise_snr_db is not None and not math.isfinite(noise_snr_db):
        raise ConfigError("SNR must be finite")
    periodic = _period(tx_right, frame_len) and _period(tx_left, frame_len)
    period = frame_len if periodic else None
    txs = (tx_right, tx_left)
    delays = face.delays
    n_total = len(tx_right)
    rng = _rng(seed)

    mics = []
    for mic_side in (0, 1):
        out = face.direct_path_gain * np.roll(txs[mic_side], DIRECT_PATH_LATENCY)
        for tx_side in (0, 1):
            gains = np.array([r.path_gain(tx_side, mic_side) for r in face.reflectors])
            if len(gains):
                out = out + _apply_paths(txs[tx_side], delays, gains, period)
            for ev in events:
                lo = ev.frame * frame_len
                hi = min(n_total, lo + ev.n_frames * frame_len)
                if lo >= n_total:
                    continue
                g = ev.gain * (1.0 if tx_side == mic_side else CROSS_GAIN)
                burst = _apply_paths(txs[tx_side], np.array([ev.delay]), np.array([g]), period)
                out[lo:hi] += burst[lo:hi]
        mics.append(out)

    if noise_snr_db is not None:
        for i, sig in enumerate(mics):
            p_sig = float(np.mean(sig**2))
            sigma = math.sqrt(p_sig / 10 ** (noise_snr_db / 10)) if p_sig > 0 else 0.0
            mics[i] = sig + sigma * rng.standard_normal(n_total)
    return Recording(left=mics[1], right=mics[0], sample_rate=sample_rate,
                     meta=meta if meta is not None else SessionMeta(user=face.id))


def random_blinks(rng: np.random.Generator, n_frames: int, rate_hz: float,
                  frame_seconds: float = 0.012) -> list[MotionEvent]:
    """Poisson-timed one-to-three-frame transients."""
    expected = rate_hz * n_frames * frame_seconds
    count = int(rng.poisson(expected))
    events = []
    for _ in range(count):
        events.append(MotionEvent(
            frame=int(rng.integers(0, n_frames)),
            n_frames=int(rng.integers(1, 4)),
            delay=float(rng.uniform(10.0, 50.0)),
            gain=float(rng.uniform(0.3, 0.8) * rng.choice([-1.0, 1.0])),
        ))
    return events
