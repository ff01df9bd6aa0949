"""FMCW transmit signals for the two glasses sides."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SAMPLE_RATE = 50_000
SWEEP_DURATION = 0.012
SPEED_OF_SOUND = 340.0

# right speaker sweeps the lower band, left speaker the upper one
RIGHT_BAND = (18_000.0, 21_000.0)
LEFT_BAND = (21_500.0, 24_500.0)


@dataclass(frozen=True)
class SweepConfig:
    f_lo: float
    f_hi: float
    sweep_duration: float = SWEEP_DURATION
    sample_rate: float = SAMPLE_RATE
    amplitude: float = 0.8

    def __post_init__(self):
        if not (0 < self.f_lo < self.f_hi):
            raise ConfigError(f"need 0 < f_lo < f_hi, got {self.f_lo}, {self.f_hi}")
        if self.f_hi >= self.sample_rate / 2:
            raise ConfigError(
                f"f_hi={self.f_hi} Hz is not below Nyquist ({self.sample_rate / 2} Hz)"
            )
        if not (0 < self.amplitude <= 1):
            raise ConfigError(f"amplitude must be in (0, 1], got {self.amplitude}")
        if self.samples_per_sweep < 2:
            raise ConfigError("sweep shorter than two samples")

    @property
    def samples_per_sweep(self) -> int:
        return int(round(self.sample_rate * self.sweep_duration))

    @property
    def bandwidth(self) -> float:
        return self.f_hi - self.f_lo

    @classmethod
    def right(cls, **kw) -> "SweepConfig":
        return cls(*RIGHT_BAND, **kw)

    @classmethod
    def left(cls, **kw) -> "SweepConfig":
        return cls(*LEFT_BAND, **kw)


@dataclass(frozen=True)
class ChirpFrame:
    samples: np.ndarray
    config: SweepConfig

    def __len__(self):
        return len(self.samples)


def generate_chirp(cfg: SweepConfig) -> ChirpFrame:
    """One linear up-chirp from ``cfg.f_lo`` to ``cfg.f_hi``.

    Closed form of a linear chirp with zero initial phase, t = n / fs and
    sweep rate k = B / T with T = N / fs::

        phi[n] = 2*pi * (f_lo * n / fs + B * n**2 / (2 * N * fs))

    so the instantaneous frequency ``f_lo + B * n / N`` reaches f_hi at n = N.
    No taper is applied.
    """
    n_samp = cfg.samples_per_sweep
    n = np.arange(n_samp, dtype=np.float64)
    fs = float(cfg.sample_rate)
    phase = 2 * np.pi * (cfg.f_lo * n / fs + cfg.bandwidth * n**2 / (2 * n_samp * fs))
    samples = cfg.amplitude * np.sin(phase)
    samples.setflags(write=False)
    return ChirpFrame(samples=samples, config=cfg)


def tx_stream(cfg: SweepConfig, frame_count: int) -> np.ndarray:
    """``frame_count`` identical chirps back to back."""
    if frame_count < 1:
        raise ConfigError("tx stream needs at least one frame")
    return np.tile(generate_chirp(cfg).samples, int(frame_count))


def delay_to_range_m(delay_samples: float, sample_rate: float = SAMPLE_RATE,
                     speed_of_sound: float = SPEED_OF_SOUND) -> float:
    """One-way distance for a round-trip delay expressed in samples."""
    return delay_samples / sample_rate * speed_of_sound / 2


def range_to_delay(range_m: float, sample_rate: float = SAMPLE_RATE,
                   speed_of_sound: float = SPEED_OF_SOUND) -> float:
    return range_m * 2 / speed_of_sound * sample_rate
