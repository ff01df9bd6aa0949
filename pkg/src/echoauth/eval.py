"""Verification metrics and the evaluation protocols over an instance table."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from .corpus import InstanceTable, SessionInstances
from .echo import SAME_SIDE_CHANNELS
from .errors import ConfigError, DataError, LeakageError, UndefinedMetricError
from .instances import SelectionPolicy
from .model import (ModelConfig, ParameterSet, TrainConfig, enroll_user, fine_tune, pretrain_base,
                    scores)
from .store import digest_json

KINDS = ("cross_session", "cross_day", "leave_one_day_out", "channel_ablation",
         "instance_ablation", "finetune_trigger", "condition_generalization")
CHANNEL_SETS = {"all": None, "right": (SAME_SIDE_CHANNELS[0],), "left": (SAME_SIDE_CHANNELS[1],)}
SECONDS_PER_MINUTE_BUDGET = 2.5  # 24 sessions x 2.5 s = 1 minute
TRIGGER_TPR = 1 / 3


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) != v or v < 0:
                raise ConfigError(f"{k} must be a non-negative integer, got {v}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class MetricSet:
    tpr: float
    fpr: float
    bac: float

    @classmethod
    def from_rates(cls, tpr: float, fpr: float) -> "MetricSet":
        return cls(tpr, fpr, (tpr + (1 - fpr)) / 2)


def metrics(counts: ConfusionCounts, exact: bool = False) -> MetricSet:
    """TPR, FPR and balanced accuracy; ``exact`` computes in rationals first."""
    pos = counts.tp + counts.fn
    neg = counts.fp + counts.tn
    if pos == 0:
        raise UndefinedMetricError("TPR undefined: no positive test samples")
    if neg == 0:
        raise UndefinedMetricError("FPR undefined: no negative test samples")
    if exact:
        tpr, fpr = Fraction(counts.tp, pos), Fraction(counts.fp, neg)
        return MetricSet(float(tpr), float(fpr), float((tpr + 1 - fpr) / 2))
    return MetricSet.from_rates(counts.tp / pos, counts.fp / neg)


def attempts(accept: np.ndarray, session_ids: np.ndarray, k: int) -> np.ndarray:
    """Majority decision over runs of ``k`` consecutive instances of one session.

    A trailing partial run still forms an attempt; ties accept.
    """
    if k <= 1:
        return np.asarray(accept, dtype=bool)
    out = []
    for sid in dict.fromkeys(session_ids.tolist()):
        a = accept[session_ids == sid]
        out.extend(a[i:i + k].mean() >= 0.5 for i in range(0, len(a), k))
    return np.array(out, dtype=bool)


def count(pos_accept: np.ndarray, neg_accept: np.ndarray) -> ConfusionCounts:
    tp = int(np.sum(pos_accept))
    fp = int(np.sum(neg_accept))
    return ConfusionCounts(tp, fp, len(neg_accept) - fp, len(pos_accept) - tp)


def finetune_trigger(tpr: float, threshold: float = TRIGGER_TPR) -> bool:
    return tpr < threshold


# ---------------------------------------------------------------- protocols

@dataclass(frozen=True)
class ProtocolSpec:
    kind: str = "cross_day"
    train_day: int = 1
    train_minutes: int = 1
    drop_practice_sessions: int = 6
    train_sessions: int = 24
    channels: str = "all"
    instance_policy: SelectionPolicy | None = None
    pretrained: bool = True
    threshold: float = TRIGGER_TPR
    finetune_seconds: float = 15.0
    # instances per login attempt; 1 reports per-instance metrics
    attempt_instances: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown protocol {self.kind!r}; choose from {KINDS}")
        if self.train_minutes not in (1, 2, 3, 4):
            raise ConfigError("train_minutes must be 1, 2, 3 or 4")
        if self.channels not in CHANNEL_SETS:
            raise ConfigError(f"channels must be one of {tuple(CHANNEL_SETS)}")
        if self.drop_practice_sessions < 0 or self.train_sessions < 1:
            raise ConfigError("session counts must be positive")
        if self.finetune_seconds <= 0:
            raise ConfigError("fine-tune budget must be positive")
        if self.attempt_instances < 1:
            raise ConfigError("attempt_instances must be at least 1")

    @property
    def channel_index(self) -> tuple[int, ...] | None:
        return CHANNEL_SETS[self.channels]

    @property
    def train_seconds(self) -> float:
        return SECONDS_PER_MINUTE_BUDGET * self.train_minutes

    @property
    def finetune_seconds_per_session(self) -> float:
        return self.finetune_seconds / max(self.drop_practice_sessions, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instance_policy"] = asdict(self.instance_policy) if self.instance_policy else None
        return d


@dataclass
class ModelStack:
    """Shared pieces of every user model: the base extractor and training settings."""

    base: ParameterSet | None = None
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig.desk()
    pretrain_per_session: int | None = 4

    def digest(self) -> str:
        return digest_json({"base": self.base.digest() if self.base else None,
                            "train": self.train.to_dict(), "model": self.model.to_dict(),
                            "pretrain_per_session": self.pretrain_per_session})


@dataclass(frozen=True)
class CellResult:
    user: str
    train_day: int
    test_day: int
    condition: str
    stage: str  # enroll | finetune
    counts: ConfusionCounts
    metrics: MetricSet
    triggered: bool = False

    def row(self) -> dict:
        return {"user": self.user, "train_day": self.train_day, "test_day": self.test_day,
                "condition": self.condition, "stage": self.stage, **asdict(self.counts),
                **asdict(self.metrics), "triggered": self.triggered}


def _mean_std(xs) -> dict:
    a = np.asarray(xs, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(a.size)}


@dataclass
class Report:
    spec: ProtocolSpec
    cells: list[CellResult]
    seed: int
    config_digest: str
    data_digest: str = ""
    models: dict = field(default_factory=dict)

    def select(self, *, stage: str = "enroll", same_day: bool | None = None,
               condition: str | None = None) -> list[CellResult]:
        out = []
        for c in self.cells:
            if c.stage != stage:
                continue
            if same_day is not None and (c.train_day == c.test_day) != same_day:
                continue
            if condition is not None and c.condition != condition:
                continue
            out.append(c)
        return out

    def aggregate(self, cells: list[CellResult]) -> dict:
        """Mean and std across users of the per-user mean over the given cells."""
        if not cells:
            return {}
        per_user: dict[str, list[MetricSet]] = {}
        for c in cells:
            per_user.setdefault(c.user, []).append(c.metrics)
        out = {}
        for k in ("tpr", "fpr", "bac"):
            out[k] = _mean_std([np.mean([getattr(m, k) for m in ms]) for ms in per_user.values()])
        return out

    def table(self, stage: str = "enroll") -> dict:
        """Aggregates per (train day, test day, condition) cell."""
        keys = sorted({(c.train_day, c.test_day, c.condition) for c in self.cells if c.stage == stage})
        return {f"{a}->{b}:{cond}": self.aggregate([c for c in self.cells if c.stage == stage and
                                                    (c.train_day, c.test_day, c.condition) == (a, b, cond)])
                for a, b, cond in keys}

    def summary(self) -> dict:
        s = {"same_day": self.aggregate(self.select(same_day=True)),
             "cross_day": self.aggregate(self.select(same_day=False))}
        ft = {(c.user, c.train_day, c.test_day, c.condition): c for c in self.select(stage="finetune")}
        if ft:
            merged = [ft.get((c.user, c.train_day, c.test_day, c.condition), c)
                      for c in self.select(same_day=False)]
            s["cross_day_after_finetune"] = self.aggregate(merged)
            s["triggered_cells"] = len(ft)
        return s

    def to_dict(self) -> dict:
        return {"protocol": self.spec.to_dict(), "seed": self.seed,
                "config_digest": self.config_digest, "data_digest": self.data_digest,
                "models": self.models, "cells": [c.row() for c in self.cells],
                "table": self.table(), "summary": self.summary()}

    def digest(self) -> str:
        return digest_json(self.to_dict())

    def to_json(self) -> str:
        return json.dumps({**self.to_dict(), "digest": self.digest()}, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = [c.row() for c in self.cells]
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["user"])
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()


def assert_disjoint(train_ids, test_ids, context: str = "") -> None:
    both = set(train_ids) & set(test_ids)
    if both:
        raise LeakageError(f"{context}: {len(both)} sessions in both train and test, "
                           f"e.g. {sorted(both)[:3]}")


class _TestPool:
    """Evaluation instances of all enrollees on one day, scored once per model."""

    def __init__(self, sessions: list[SessionInstances]):
        self.sessions = sessions
        if sessions:
            self.blocks = np.concatenate([s.at(max(s.truncations)) for s in sessions])
        else:
            self.blocks = np.zeros((0,))
        self.owner = np.array([s.meta.user for s in sessions for _ in range(s.blocks.shape[1])])
        self.sid = np.array([s.meta.session_id for s in sessions for _ in range(s.blocks.shape[1])])
        self.cond = np.array([s.meta.condition for s in sessions for _ in range(s.blocks.shape[1])])


def _pretrain(table: InstanceTable, stack: ModelStack, channels) -> tuple[ParameterSet, set[str]]:
    users = table.users("pretrain")
    if len(users) < 2:
        raise DataError("pretraining needs at least two pretrain identities")
    sessions = [s for u in users for s in table.select(u, condition=None)]
    blocks, ids = table.stack(sessions, max(table.truncations), stack.pretrain_per_session)
    label_of = {u: i for i, u in enumerate(users)}
    owner = {s.meta.session_id: s.meta.user for s in sessions}
    labels = np.array([label_of[owner[i]] for i in ids])
    base = pretrain_base(blocks, labels, stack.train, stack.model, channels)
    return base, set(ids)


def _user_seed(spec: ProtocolSpec, train: TrainConfig, user_index: int, day: int) -> TrainConfig:
    return replace(train, seed=int(np.random.SeedSequence([spec.seed, train.seed, user_index, day])
                                   .generate_state(1)[0] % (2**31)))


def run_protocol(table: InstanceTable, spec: ProtocolSpec, stack: ModelStack | None = None,
                 progress=None) -> Report:
    """Enroll every target user and evaluate according to ``spec``.

    Targets are the enrollment identities. Training negatives come from the
    pretrain identities only; test negatives are the other targets, so no
    attacker is ever seen during training.
    """
    stack = stack or ModelStack()
    if spec.instance_policy is not None and spec.instance_policy != table.policy:
        raise ConfigError(f"table was processed with {table.policy}, protocol asks for "
                          f"{spec.instance_policy}")
    targets = table.users("enroll")
    pre_users = table.users("pretrain")
    if len(targets) + len(pre_users) < 3 or len(targets) < 2:
        raise DataError("need at least three users, two of them enrollment targets")
    if not pre_users:
        raise DataError("no pretrain identities to draw training negatives from")
    assert_disjoint(pre_users, targets, "pretrain identities vs attackers")
    days = table.days()
    if spec.train_day not in days and spec.kind != "leave_one_day_out":
        raise DataError(f"train day {spec.train_day} not in corpus days {days}")
    channels = spec.channel_index
    n_ch = 4 if channels is None else len(channels)

    base, pre_ids = None, set()
    pool_sessions = [s for u in pre_users for s in table.select(u, condition=None)]
    neg_blocks, neg_ids = table.stack(pool_sessions, max(table.truncations))
    if spec.pretrained:
        if stack.base is None:
            base, pre_ids = _pretrain(table, stack, channels)
        else:
            base = stack.base
            if base.config.in_channels != n_ch:
                raise ConfigError(f"base model takes {base.config.in_channels} channels, "
                                  f"protocol uses {n_ch}")
    neg_id_set = set(neg_ids) | pre_ids

    drop, n_train = spec.drop_practice_sessions, spec.train_sessions
    is_practice = lambda i: i < drop  # noqa: E731
    is_train = lambda i: drop <= i < drop + n_train  # noqa: E731
    is_eval = lambda i: i >= drop  # noqa: E731

    condition = None if spec.kind == "condition_generalization" else "sitting"
    pools = {d: _TestPool([s for u in targets for s in table.select(u, d, condition, is_eval)])
             for d in days}
    train_days = days if spec.kind == "leave_one_day_out" else [spec.train_day]
    test_days = {"cross_session": lambda d: [d]}.get(spec.kind, lambda d: days)

    cells: list[CellResult] = []
    model_digests = {}
    for ui, user in enumerate(targets):
        for d in train_days:
            train_sess = table.select(user, d, "sitting", is_train)
            if not train_sess:
                raise DataError(f"{user} has no training sessions on day {d}")
            pos, pos_ids = table.stack(train_sess, spec.train_seconds)
            cfg = _user_seed(spec, stack.train, ui, d)
            model = enroll_user(base, pos, neg_blocks, cfg, channels, model_cfg=stack.model)
            model_digests[f"{user}@{d}"] = model.digest()
            train_ids = set(pos_ids) | neg_id_set
            for t in test_days(d):
                pool = pools[t]
                if len(pool.sid) == 0:
                    raise DataError(f"empty test set on day {t}")
                held = ~np.isin(pool.sid, list(pos_ids))
                assert_disjoint(train_ids, pool.sid[held], f"{user} day {d}->{t}")
                s = scores(model, pool.blocks[held], channels)
                accept = s >= 0.5
                owner, cond, sid = pool.owner[held], pool.cond[held], pool.sid[held]
                vote = lambda acc, m: attempts(acc[m], sid[m], spec.attempt_instances)  # noqa: E731
                conds = sorted(set(cond[owner == user])) if condition is None else ["sitting"]
                cell_by_cond = {}
                for c in conds:
                    pmask = (owner == user) & (cond == c)
                    nmask = owner != user
                    if not pmask.any() or not nmask.any():
                        raise DataError(f"empty test set for {user} day {d}->{t} ({c})")
                    k = count(vote(accept, pmask), vote(accept, nmask))
                    m = metrics(k)
                    cell_by_cond[c] = CellResult(user, d, t, c, "enroll", k, m,
                                                 triggered=finetune_trigger(m.tpr, spec.threshold) and t != d)
                cells.extend(cell_by_cond.values())

                if spec.kind == "finetune_trigger" and t != d and cell_by_cond["sitting"].triggered:
                    ft_sess = table.select(user, t, "sitting", is_practice)
                    ft_pos, ft_ids = table.stack(ft_sess, spec.finetune_seconds_per_session)
                    if len(ft_pos) == 0:
                        raise DataError(f"{user} has no practice sessions on day {t} to fine-tune with")
                    tuned = fine_tune(model, ft_pos, replace(cfg, seed=cfg.seed + t), neg_blocks, channels)
                    assert_disjoint(train_ids | set(ft_ids), pool.sid[held], f"{user} fine-tune {t}")
                    s2 = scores(tuned, pool.blocks[held], channels) >= 0.5
                    pmask = (owner == user) & (cond == "sitting")
                    k2 = count(vote(s2, pmask), vote(s2, owner != user))
                    cells.append(CellResult(user, d, t, "sitting", "finetune", k2, metrics(k2), True))
            if progress:
                progress(user, d)

    config = {"spec": spec.to_dict(), "stack": stack.digest(),
              "base": base.digest() if base is not None else None}
    return Report(spec=spec, cells=cells, seed=spec.seed, config_digest=digest_json(config),
                  data_digest=table.meta.get("digest", ""), models=model_digests)
