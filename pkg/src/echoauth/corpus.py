"""Synthetic corpora and the processed per-session instance table.

A corpus mirrors a wearable collection campaign: each identity records a number
of short remount sessions per day over several days. Each session is reduced to
its most static instances, kept for the full recording and for time-truncated
prefixes (used for shorter enrollment budgets).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .echo import CHANNEL_PAIRS, build_echo_profile, default_tx, n_profile_frames
from .errors import ConfigError, DataError
from .instances import SelectionPolicy, select_static_array
from .signal import SweepConfig, tx_stream
from .simchan import (MountJitter, Recording, SessionMeta, day_drift, make_face, random_blinks,
                      remount, simulate_rx)
from .store import (DayEntry, Manifest, SessionEntry, UserEntry, check_unique_sessions,
                    digest_json, read_recording, read_tensor, write_recording, write_tensor)

# enrollment budgets are built from prefixes of every session; 10 s = whole session
DEFAULT_TRUNCATIONS = (2.5, 10.0)

# (extra remount jitter factor, motion-event rate factor) per wearing condition
CONDITIONS = {
    "sitting": (1.0, 1.0),
    "standing": (1.5, 1.0),
    "talking": (1.0, 8.0),
    "walking": (2.0, 4.0),
}


@dataclass(frozen=True)
class CorpusConfig:
    users: int = 30
    pretrain_users: int = 20
    days: int = 3
    sessions_per_day: int = 36
    session_seconds: float = 10.0
    jitter: MountJitter = MountJitter()
    drift: float = 0.35
    snr_db: float | None = 20.0
    blink_rate_hz: float = 0.5
    # every k-th identity uses the long-hair face template and drifts more per day
    long_hair_every: int = 5
    long_hair_drift: float = 4.0
    conditions: tuple[str, ...] = ()
    condition_sessions: int = 6
    seed: int = 0

    def __post_init__(self):
        if min(self.users, self.days, self.sessions_per_day) < 1:
            raise ConfigError("users, days and sessions per day must be at least 1")
        if not 0 <= self.pretrain_users <= self.users:
            raise ConfigError("pretrain_users must lie in [0, users]")
        if self.session_seconds < 3 * SweepConfig.right().sweep_duration:
            raise ConfigError("sessions must span at least three sweeps")
        if self.drift < 0 or self.blink_rate_hz < 0:
            raise ConfigError("drift and blink rate must be non-negative")
        unknown = set(self.conditions) - set(CONDITIONS)
        if unknown:
            raise ConfigError(f"unknown conditions {sorted(unknown)}")

    @property
    def samples_per_session(self) -> int:
        return int(round(self.session_seconds * SweepConfig.right().sample_rate))

    @property
    def frames_per_session(self) -> int:
        return self.samples_per_session // SweepConfig.right().samples_per_sweep

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditions"] = list(self.conditions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        d["jitter"] = MountJitter(**d["jitter"]) if isinstance(d.get("jitter"), dict) else d.get("jitter", MountJitter())
        d["conditions"] = tuple(d.get("conditions", ()))
        return cls(**d)

    def digest(self) -> str:
        return digest_json(self.to_dict())


def user_id(i: int) -> str:
    return f"u{i:02d}"


def session_id(user: str, day: int, index: int, condition: str = "sitting") -> str:
    base = f"{user}-d{day}-s{index:02d}"
    return base if condition == "sitting" else f"{base}-{condition}"


def user_role(cfg: CorpusConfig, i: int) -> str:
    return "pretrain" if i < cfg.pretrain_users else "enroll"


def user_template(cfg: CorpusConfig, i: int) -> str:
    lh = cfg.long_hair_every > 0 and i % cfg.long_hair_every == cfg.long_hair_every - 1
    return "long_hair_variant" if lh else "default"


def session_plan(cfg: CorpusConfig) -> Iterator[tuple[int, SessionMeta]]:
    """(user index, metadata) for every session, sitting sessions first each day."""
    for u in range(cfg.users):
        uid = user_id(u)
        for day in range(1, cfg.days + 1):
            for s in range(cfg.sessions_per_day):
                yield u, SessionMeta(uid, day, s, "sitting", session_id(uid, day, s))
            k = cfg.sessions_per_day
            for cond in cfg.conditions:
                for s in range(cfg.condition_sessions):
                    yield u, SessionMeta(uid, day, k, cond, session_id(uid, day, k, cond))
                    k += 1


class Synthesizer:
    """Draws recordings for the sessions of a corpus configuration."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        # continuous emission cut to the session length, not to whole sweeps
        n = cfg.samples_per_session
        sweeps = -(-n // SweepConfig.right().samples_per_sweep)
        self.tx_right = tx_stream(SweepConfig.right(), sweeps)[:n]
        self.tx_left = tx_stream(SweepConfig.left(), sweeps)[:n]
        self._faces: dict[tuple[int, int], object] = {}

    def day_face(self, u: int, day: int):
        key = (u, day)
        if key not in self._faces:
            cfg = self.cfg
            tmpl = user_template(cfg, u)
            base = make_face(cfg.seed * 100_003 + u, tmpl, user_id(u))
            mag = cfg.drift * (cfg.long_hair_drift if tmpl == "long_hair_variant" else 1.0)
            self._faces[key] = day_drift(base, mag, [cfg.seed, u, day, 1])
        return self._faces[key]

    def recording(self, u: int, meta: SessionMeta) -> Recording:
        cfg = self.cfg
        jit_f, motion_f = CONDITIONS[meta.condition]
        jitter = cfg.jitter.scaled(jit_f)
        key = [cfg.seed, u, meta.day, meta.session]
        face = remount(self.day_face(u, meta.day), jitter, key + [2])
        rng = np.random.default_rng(key + [3])
        events = random_blinks(rng, cfg.frames_per_session, cfg.blink_rate_hz * motion_f)
        rec = simulate_rx(self.tx_left, self.tx_right, face, cfg.snr_db, key + [4],
                          events=events, meta=meta)
        # captured audio is float32; the in-memory path must see the stored samples
        rec.left, rec.right = rec.left.astype(np.float32), rec.right.astype(np.float32)
        return rec


# --------------------------------------------------------------- processing

def _tx_energy() -> np.ndarray:
    """Per-channel transmit frame energy, used to bring raw profiles to unit scale."""
    tx = default_tx()
    return np.array([float(np.sum(tx[band].samples ** 2)) for _, band in CHANNEL_PAIRS])


TX_ENERGY = _tx_energy()


@dataclass
class SessionInstances:
    """Static instances of one session for each time budget.

    ``blocks`` is (n_truncations, k, channels, frames, 110), most static first.
    """

    meta: SessionMeta
    role: str
    blocks: np.ndarray
    truncations: tuple[float, ...]

    def at(self, seconds: float) -> np.ndarray:
        for i, t in enumerate(self.truncations):
            if abs(t - seconds) < 1e-9:
                return self.blocks[i]
        raise ConfigError(f"session {self.meta.session_id} has no {seconds} s prefix "
                          f"(available: {self.truncations})")


def process_recording(rec: Recording, role: str = "enroll",
                      policy: SelectionPolicy = SelectionPolicy(),
                      truncations: tuple[float, ...] = DEFAULT_TRUNCATIONS) -> SessionInstances:
    profile = build_echo_profile(rec)
    values = profile.values / TX_ENERGY[:, None, None].astype(np.float32)
    frame_len = len(default_tx()[0])
    out = []
    for t in truncations:
        n_samp = min(len(rec), int(round(t * rec.sample_rate)))
        frames = min(profile.frames, n_profile_frames(n_samp, frame_len, profile.offset))
        if frames < policy.instance_frames * policy.instances_per_session:
            raise DataError(f"{rec.meta.session_id}: {t} s prefix holds {frames} frames, fewer "
                            f"than {policy.instances_per_session} instances of {policy.instance_frames}")
        out.append(select_static_array(values, policy, max_frames=frames, static_first=True))
    return SessionInstances(rec.meta, role, np.stack(out).astype(np.float32), tuple(truncations))


class InstanceTable:
    """Processed sessions indexed by user, day and condition."""

    def __init__(self, sessions: Iterable[SessionInstances], policy: SelectionPolicy,
                 truncations: tuple[float, ...], meta: dict | None = None):
        self.sessions = list(sessions)
        self.policy = policy
        self.truncations = tuple(truncations)
        self.meta = dict(meta or {})
        check_unique_sessions(s.meta.session_id for s in self.sessions)
        self._by_user: dict[str, list[SessionInstances]] = {}
        self.roles: dict[str, str] = {}
        for s in self.sessions:
            self._by_user.setdefault(s.meta.user, []).append(s)
            if self.roles.setdefault(s.meta.user, s.role) != s.role:
                raise DataError(f"user {s.meta.user} has sessions with different roles")

    def __len__(self):
        return len(self.sessions)

    def users(self, role: str | None = None) -> list[str]:
        return sorted(u for u, r in self.roles.items() if role is None or r == role)

    def days(self) -> list[int]:
        return sorted({s.meta.day for s in self.sessions})

    def select(self, user: str | None = None, day: int | None = None,
               condition: str | None = "sitting",
               index: Callable[[int], bool] | None = None) -> list[SessionInstances]:
        src = self.sessions if user is None else self._by_user.get(user, [])
        return [s for s in src
                if (day is None or s.meta.day == day)
                and (condition is None or s.meta.condition == condition)
                and (index is None or index(s.meta.session))]

    @staticmethod
    def stack(sessions: list[SessionInstances], seconds: float,
              per_session: int | None = None) -> tuple[np.ndarray, list[str]]:
        """Concatenated blocks and the session id of every block."""
        if not sessions:
            return np.zeros((0,)), []
        parts = [s.at(seconds)[:per_session] for s in sessions]
        ids = [s.meta.session_id for s, p in zip(sessions, parts) for _ in range(len(p))]
        return np.concatenate(parts), ids

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(digest_json({"policy": asdict(self.policy), "truncations": self.truncations}).encode())
        for s in sorted(self.sessions, key=lambda s: s.meta.session_id):
            h.update(digest_json({**s.meta.to_dict(), "role": s.role}).encode())
            h.update(np.ascontiguousarray(s.blocks).tobytes())
        return h.hexdigest()


def synthesize_table(cfg: CorpusConfig, policy: SelectionPolicy = SelectionPolicy(),
                     truncations: tuple[float, ...] = DEFAULT_TRUNCATIONS,
                     progress: Callable[[int, int], None] | None = None) -> InstanceTable:
    """Synthesize and process a corpus in memory without writing recordings."""
    syn = Synthesizer(cfg)
    plan = list(session_plan(cfg))
    out = []
    for i, (u, meta) in enumerate(plan):
        rec = syn.recording(u, meta)
        out.append(process_recording(rec, user_role(cfg, u), policy, truncations))
        if progress:
            progress(i + 1, len(plan))
    return InstanceTable(out, policy, truncations, {"corpus": cfg.to_dict()})


# ------------------------------------------------------------- on-disk flow

def write_corpus(cfg: CorpusConfig, out_dir, progress=None) -> Manifest:
    """Synthesize every session to ``out_dir/recordings`` and return the manifest."""
    out_dir = Path(out_dir)
    syn = Synthesizer(cfg)
    days: dict[int, dict[int, list[SessionEntry]]] = {}
    plan = list(session_plan(cfg))
    for i, (u, meta) in enumerate(plan):
        rel = f"recordings/{meta.user}/{meta.session_id}.rec"
        write_recording(out_dir / rel, syn.recording(u, meta))
        days.setdefault(u, {}).setdefault(meta.day, []).append(
            SessionEntry(meta.session_id, meta.condition, rel, cfg.session_seconds, meta.session))
        if progress:
            progress(i + 1, len(plan))
    users = [UserEntry(user_id(u), tuple(DayEntry(d, tuple(v)) for d, v in sorted(days[u].items())),
                       user_role(cfg, u))
             for u in sorted(days)]
    return Manifest(users=users, root=out_dir, meta={"corpus": cfg.to_dict(), "seed": cfg.seed})


def process_manifest(man: Manifest, out_dir=None, policy: SelectionPolicy = SelectionPolicy(),
                     truncations: tuple[float, ...] = DEFAULT_TRUNCATIONS,
                     progress=None) -> InstanceTable:
    """Process every recording; with ``out_dir`` also write one tensor file per session."""
    out = []
    entries = list(man.sessions())
    for i, (u, day, s) in enumerate(entries):
        rec = read_recording(man.resolve(s))
        rec.meta = man.session_meta(u, day, s)
        si = process_recording(rec, u.role, policy, truncations)
        if out_dir is not None:
            write_session_tensor(Path(out_dir) / f"{s.id}.ept", si, policy)
        out.append(si)
        if progress:
            progress(i + 1, len(entries))
    return InstanceTable(out, policy, truncations, {"manifest": man.digest()})


def write_session_tensor(path, si: SessionInstances, policy: SelectionPolicy) -> None:
    header = {"meta": si.meta.to_dict(), "role": si.role, "truncations": list(si.truncations),
              "policy": asdict(policy),
              "axes": ["truncation", "instance", "channel", "frame", "row"],
              "channels": ["right_mic/right_band", "right_mic/left_band",
                           "left_mic/right_band", "left_mic/left_band"]}
    write_tensor(path, si.blocks, header)


def read_session_tensor(path) -> tuple[SessionInstances, SelectionPolicy]:
    arr, h = read_tensor(path)
    si = SessionInstances(SessionMeta(**h["meta"]), h["role"], arr, tuple(h["truncations"]))
    return si, SelectionPolicy(**h["policy"])


def load_table(tensor_dir) -> InstanceTable:
    """Instance table from a directory of per-session tensor files."""
    files = sorted(Path(tensor_dir).glob("*.ept"))
    if not files:
        raise DataError(f"no instance tensors in {tensor_dir}")
    sessions, policies, truncs = [], set(), set()
    for f in files:
        si, pol = read_session_tensor(f)
        sessions.append(si)
        policies.add(pol)
        truncs.add(si.truncations)
    if len(policies) != 1 or len(truncs) != 1:
        raise DataError("instance tensors were processed with different policies")
    return InstanceTable(sessions, policies.pop(), truncs.pop(), {"source": str(tensor_dir)})


def label_table(table: InstanceTable) -> list[dict]:
    """One row per session: the labels that go with its tensor file."""
    return [{**s.meta.to_dict(), "role": s.role, "instances": int(s.blocks.shape[1])}
            for s in table.sessions]
