"""Instances: segmentation, static-instance selection and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .echo import EVAL_ROWS, EVAL_START, N_ROWS, EchoProfile
from .errors import ConfigError, DataError
from .simchan import SessionMeta

MAX_SHIFT = N_ROWS - EVAL_ROWS  # 40
NOISE_PROB = 0.8
NOISE_RANGE = (0.9, 1.1)
ZSCORE_PROB = 0.5


@dataclass(frozen=True)
class SelectionPolicy:
    instance_frames: int = 5
    instances_per_session: int = 10
    metric: str = "energy-change"

    def __post_init__(self):
        if self.instance_frames < 1 or self.instances_per_session < 1:
            raise ConfigError("instance policy counts must be positive")
        if self.metric != "energy-change":
            raise ConfigError(f"unknown motion metric {self.metric!r}")


@dataclass
class Instance:
    values: np.ndarray  # (channels, frames, 110)
    label: int | str | None = None
    meta: SessionMeta = field(default_factory=SessionMeta)
    position: int = 0

    @property
    def active(self) -> np.ndarray:
        return self.values[:, :, EVAL_START:EVAL_START + EVAL_ROWS]


def segment_array(values: np.ndarray, frames: int) -> np.ndarray:
    """(channels, n_frames, rows) -> (n_instances, channels, frames, rows)."""
    c, n, r = values.shape
    k = n // frames
    if k == 0:
        raise DataError(f"profile has {n} frames, fewer than one instance ({frames})")
    return values[:, :k * frames].reshape(c, k, frames, r).transpose(1, 0, 2, 3)


def segment(profile: EchoProfile, policy: SelectionPolicy = SelectionPolicy()) -> list[Instance]:
    """Consecutive non-overlapping blocks; trailing frames are dropped."""
    blocks = segment_array(profile.values, policy.instance_frames)
    return [Instance(values=b, label=profile.meta.user or None, meta=profile.meta, position=i)
            for i, b in enumerate(blocks)]


def motion_scores(blocks: np.ndarray) -> np.ndarray:
    """Adjacent-frame squared difference summed over the active window.

    ``blocks`` is (n, channels, frames, rows) in the stored wide-row layout.
    """
    act = blocks[..., EVAL_START:EVAL_START + EVAL_ROWS].astype(np.float64)
    return (np.diff(act, axis=2) ** 2).sum(axis=(1, 2, 3))


def motion_score(inst: Instance) -> float:
    return float(motion_scores(inst.values[None])[0])


def static_order(scores: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
    """Indices sorted by score, earlier session position first on ties."""
    positions = np.arange(len(scores)) if positions is None else np.asarray(positions)
    return np.lexsort((positions, scores))


def select_static(instances: list[Instance], k: int = 10) -> list[Instance]:
    if not instances:
        return []
    scores = np.array([motion_score(i) for i in instances])
    order = static_order(scores, np.array([i.position for i in instances]))
    return [instances[j] for j in order[:k]]


def select_static_array(values: np.ndarray, policy: SelectionPolicy = SelectionPolicy(),
                        max_frames: int | None = None, static_first: bool = False) -> np.ndarray:
    """Most static instances of a (channels, frames, rows) profile array.

    ``max_frames`` truncates the session first (shorter enrollment recordings).
    Blocks come back in session order, or most static first with ``static_first``.
    """
    if max_frames is not None:
        values = values[:, :max_frames]
    blocks = segment_array(values, policy.instance_frames)
    order = static_order(motion_scores(blocks))
    keep = order[:policy.instances_per_session]
    return blocks[keep if static_first else np.sort(keep)]


def zscore(x: np.ndarray, axes=None) -> np.ndarray:
    """Zero-mean, unit-std per instance; constant instances are left as they are."""
    x = np.asarray(x, dtype=np.float64)
    if axes is None:
        axes = tuple(range(1, x.ndim)) if x.ndim == 4 else None
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (x - mu) / safe, x)


def augment_batch(blocks: np.ndarray, rng: np.random.Generator, *, shift=None,
                  noise=None, normalize=None) -> np.ndarray:
    """Training-time view of (n, channels, frames, 110) blocks -> (n, c, f, 70).

    Random 70-row window out of 110, then with probability 0.8 an independent
    U(0.9, 1.1) factor on every element, then with probability 0.5 a z-score.
    ``shift``/``noise``/``normalize`` force the respective draw.
    """
    n = blocks.shape[0]
    starts = rng.integers(0, MAX_SHIFT + 1, n) if shift is None else np.full(n, int(shift))
    fire = rng.random(n) < NOISE_PROB if noise is None else np.full(n, bool(noise))
    zs = rng.random(n) < ZSCORE_PROB if normalize is None else np.full(n, bool(normalize))
    idx = starts[:, None] + np.arange(EVAL_ROWS)[None, :]
    out = np.take_along_axis(blocks.astype(np.float64), idx[:, None, None, :], axis=3)
    if fire.any():
        factors = rng.uniform(*NOISE_RANGE, size=out[fire].shape)
        out[fire] *= factors
    if zs.any():
        out[zs] = zscore(out[zs])
    return out


def augment(inst: Instance, rng: np.random.Generator, **force) -> Instance:
    out = augment_batch(inst.values[None], rng, **force)[0]
    return Instance(values=out, label=inst.label, meta=inst.meta, position=inst.position)


def eval_view(blocks: np.ndarray) -> np.ndarray:
    """Deterministic test-time input: default window, always z-scored."""
    blocks = np.asarray(blocks)
    single = blocks.ndim == 3
    if single:
        blocks = blocks[None]
    out = zscore(blocks[..., EVAL_START:EVAL_START + EVAL_ROWS])
    return out[0] if single else out
