import functools

import numpy as np
import pytest

from echoauth.echo import build_echo_profile, differential, peak_rows
from echoauth.signal import SweepConfig, tx_stream
from echoauth.simchan import DIRECT_PATH_GAIN, FaceProfile, Reflector, simulate_rx


@functools.lru_cache(maxsize=8)
def streams(frames: int):
    return tx_stream(SweepConfig.left(), frames), tx_stream(SweepConfig.right(), frames)


def profile_of(face, snr=None, seed=0, frames=40, events=()):
    txl, txr = streams(frames)
    return build_echo_profile(simulate_rx(txl, txr, face, snr, seed, events=events))


@functools.lru_cache(maxsize=8)
def reference(frames=40):
    """Profile of a reflector-free face: direct path only."""
    return profile_of(FaceProfile((), DIRECT_PATH_GAIN), frames=frames)


def single(delay, gain=1.0):
    return FaceProfile((Reflector(delay, gain),), DIRECT_PATH_GAIN)


def peaks(face, snr=None, seed=0, frames=40, channels=(0, 3)):
    """Envelope peak rows of the reflector component, per channel and frame."""
    prof = profile_of(face, snr, seed, frames)
    diff = differential(prof, reference(frames))
    return peak_rows(diff)[list(channels)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_table(users=6, pretrain=3, days=(1, 2, 3), sessions=6, k=4, day_shift=0.0, seed=0):
    """Instance table built straight from per-user row patterns, no acoustics.

    Every user owns a sinusoid over the delay rows with per-channel gains. A day
    adds a phase shift of ``day_shift`` radians per day index.
    """
    from echoauth.corpus import InstanceTable, SessionInstances
    from echoauth.instances import SelectionPolicy
    from echoauth.simchan import SessionMeta

    rng = np.random.default_rng(seed)
    rows = np.arange(110)
    # pretrain and enrollment identities interleave in frequency
    freqs = rng.permutation(np.linspace(0.02, 0.12, users))
    out = []
    for u in range(users):
        uid = f"u{u:02d}"
        role = "pretrain" if u < pretrain else "enroll"
        freq = freqs[u]
        gain = rng.uniform(0.5, 1.5, (4, 1, 1))
        for d in days:
            pattern = np.sin(2 * np.pi * freq * rows + day_shift * d)[None, None, :] * gain
            for s in range(sessions):
                blocks = pattern + 0.3 * rng.standard_normal((2, k, 4, 5, 110))
                meta = SessionMeta(user=uid, day=d, session=s, condition="sitting",
                                   session_id=f"{uid}-d{d}-s{s:02d}")
                out.append(SessionInstances(meta, role, blocks.astype(np.float32), (2.5, 10.0)))
    return InstanceTable(out, SelectionPolicy(instances_per_session=k), (2.5, 10.0))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[n] = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
