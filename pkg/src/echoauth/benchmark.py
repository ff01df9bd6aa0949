"""End-to-end synthetic benchmark: main protocol, fine-tuning and the two ablations."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .corpus import CorpusConfig, InstanceTable, synthesize_table
from .eval import ModelStack, ProtocolSpec, Report, run_protocol
from .model import ModelConfig, TrainConfig, set_deterministic
from .store import digest_json


@dataclass(frozen=True)
class BenchmarkConfig:
    corpus: CorpusConfig = CorpusConfig()
    train: TrainConfig = TrainConfig()
    train_minutes: int = 1
    pretrain_per_session: int = 4
    ablations: bool = True
    deterministic: bool = True

    @property
    def seed(self) -> int:
        return self.corpus.seed

    def to_dict(self) -> dict:
        return {"corpus": self.corpus.to_dict(), "train": self.train.to_dict(),
                "train_minutes": self.train_minutes,
                "pretrain_per_session": self.pretrain_per_session,
                "ablations": self.ablations, "deterministic": self.deterministic}


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    reports: dict[str, Report]
    data_digest: str
    timings: dict[str, float] = field(default_factory=dict)

    def figures(self) -> dict:
        main = self.reports["main"].summary()
        out = {
            "same_day_bac": main["same_day"]["bac"]["mean"],
            "same_day_fpr": main["same_day"]["fpr"]["mean"],
            "cross_day_bac": main["cross_day"]["bac"]["mean"],
            "cross_day_bac_finetuned": main.get("cross_day_after_finetune", main["cross_day"])["bac"]["mean"],
            "triggered_cells": main.get("triggered_cells", 0),
        }
        if "scratch" in self.reports:
            out["scratch_cross_day_bac"] = self.reports["scratch"].summary()["cross_day"]["bac"]["mean"]
        if "right_channel" in self.reports:
            out["one_channel_same_day_bac"] = self.reports["right_channel"].summary()["same_day"]["bac"]["mean"]
        return out

    def digest(self) -> str:
        """Depends on configuration, data and every report, never on timings."""
        return digest_json({"config": self.config.to_dict(), "data": self.data_digest,
                            "reports": {k: r.digest() for k, r in sorted(self.reports.items())}})

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "data_digest": self.data_digest,
                "figures": self.figures(), "digest": self.digest(),
                "reports": {k: r.digest() for k, r in self.reports.items()},
                "timings": self.timings}


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), table: InstanceTable | None = None,
                  log=None) -> BenchmarkResult:
    """Synthesize (unless ``table`` is given), enroll, evaluate and ablate."""
    say = log or (lambda msg: None)
    if cfg.deterministic:
        set_deterministic(cfg.seed)
    timings = {}
    t0 = time.perf_counter()
    if table is None:
        say("synthesizing corpus")
        table = synthesize_table(cfg.corpus)
    data_digest = table.digest()
    table.meta["digest"] = data_digest
    timings["data"] = time.perf_counter() - t0

    stack = ModelStack(train=cfg.train, model=ModelConfig.desk(),
                       pretrain_per_session=cfg.pretrain_per_session)
    runs = {"main": ProtocolSpec(kind="finetune_trigger", train_minutes=cfg.train_minutes,
                                 seed=cfg.seed)}
    if cfg.ablations:
        runs["scratch"] = ProtocolSpec(kind="cross_day", train_minutes=cfg.train_minutes,
                                       pretrained=False, seed=cfg.seed)
        runs["right_channel"] = ProtocolSpec(kind="channel_ablation", channels="right",
                                             train_minutes=cfg.train_minutes, seed=cfg.seed)
    reports = {}
    for name, spec in runs.items():
        say(f"protocol {name}")
        t = time.perf_counter()
        reports[name] = run_protocol(table, spec, stack)
        timings[name] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    return BenchmarkResult(cfg, reports, data_digest, timings)
