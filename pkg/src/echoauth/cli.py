"""Command-line driver.

Every artifact-producing command writes ``run.json`` next to its outputs with the
seed, the configuration digest and the package version. Exit codes: 0 ok,
2 configuration error, 3 data error, 4 leakage or assertion failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import BenchmarkConfig, run_benchmark
from .corpus import (CorpusConfig, InstanceTable, label_table, load_table, process_manifest,
                     write_corpus)
from .errors import ConfigError, DataError, EchoAuthError, LeakageError
from .eval import CHANNEL_SETS, KINDS, ModelStack, ProtocolSpec, run_protocol
from .instances import SelectionPolicy
from .model import ModelConfig, TrainConfig, enroll_user, fine_tune, pretrain_base, set_deterministic
from .store import digest_json, read_checkpoint, read_manifest, write_checkpoint, write_manifest

log = logging.getLogger("echoauth")


def _prepare_out(out: Path, force: bool, is_dir: bool = True) -> Path:
    out = Path(out)
    target = out if is_dir else out.parent
    if is_dir and out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    if not is_dir and out.exists() and not force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    target.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out_dir: Path, command: str, config: dict, seed: int, extra: dict | None = None) -> str:
    digest = digest_json(config)
    doc = {"command": command, "seed": seed, "config": config, "config_digest": digest,
           "code_version": __version__, **(extra or {})}
    (Path(out_dir) / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return digest


def _policy(args) -> SelectionPolicy:
    return SelectionPolicy(instance_frames=args.instance_frames, instances_per_session=args.instances)


def _train_cfg(args) -> TrainConfig:
    cfg = TrainConfig(seed=args.seed)
    if getattr(args, "epochs", None):
        cfg = replace(cfg, epochs_base=args.epochs, epochs_enroll=args.epochs,
                      epochs_scratch=args.epochs)
    return cfg


def _table(args) -> InstanceTable:
    """Instances from a processed directory (--data) or straight from a manifest."""
    if getattr(args, "data", None):
        table = load_table(args.data)
        if table.policy != _policy(args):
            raise ConfigError(f"{args.data} was processed with {table.policy}; reprocess or pass "
                              f"matching --instances/--instance-frames")
        return table
    if getattr(args, "manifest", None):
        return process_manifest(read_manifest(args.manifest), policy=_policy(args))
    raise ConfigError("pass --data (processed tensors) or --manifest (recordings)")


def _progress(label):
    def cb(i, n):
        if i == n or i % 200 == 0:
            log.info("%s %d/%d", label, i, n)
    return cb


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    if min(args.users, args.days, args.sessions) < 1:
        raise ConfigError("--users, --days and --sessions must be at least 1")
    cfg = CorpusConfig(users=args.users, pretrain_users=min(args.pretrain_users, args.users),
                       days=args.days, sessions_per_day=args.sessions,
                       session_seconds=args.seconds,
                       jitter=CorpusConfig().jitter.scaled(args.jitter),
                       drift=args.drift, snr_db=args.snr, seed=args.seed,
                       conditions=tuple(args.conditions or ()))
    out = _prepare_out(args.out, args.force)
    man = write_corpus(cfg, out, _progress("synth"))
    write_manifest(out / "manifest.json", man)
    _write_run(out, "synth", cfg.to_dict(), args.seed, {"manifest_digest": man.digest()})
    print(f"{sum(1 for _ in man.sessions())} sessions -> {out / 'manifest.json'}")
    return 0


def cmd_process(args) -> int:
    man = read_manifest(args.manifest)
    out = _prepare_out(args.out, args.force)
    policy = _policy(args)
    table = process_manifest(man, out, policy, progress=_progress("process"))
    rows = label_table(table)
    with open(out / "labels.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_run(out, "process", {"manifest": man.digest(), "policy": asdict(policy)}, args.seed)
    print(f"{len(table)} sessions -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    if args.deterministic:
        set_deterministic(args.seed)
    table = _table(args)
    out = _prepare_out(args.out, args.force, is_dir=False)
    users = args.users or table.users("pretrain")
    sessions = [s for u in users for s in table.select(u, condition=None)]
    if not sessions:
        raise DataError("no sessions for the requested pretrain identities")
    blocks, ids = table.stack(sessions, max(table.truncations), args.per_session)
    label = {u: i for i, u in enumerate(users)}
    owner = {s.meta.session_id: s.meta.user for s in sessions}
    labels = [label[owner[i]] for i in ids]
    cfg = _train_cfg(args)
    base = pretrain_base(blocks, np.array(labels), cfg, ModelConfig.desk(), CHANNEL_SETS[args.channels])
    write_checkpoint(out, base, cfg)
    _write_run(out.parent, "pretrain", {"users": users, "train": cfg.to_dict(),
                                        "channels": args.channels, "per_session": args.per_session},
               args.seed, {"model_digest": base.digest()})
    print(f"base model {base.digest()[:12]} -> {out}")
    return 0


def _stack_base(path):
    if not path:
        return None
    params, _ = read_checkpoint(path)
    return params


def cmd_enroll(args) -> int:
    if args.deterministic:
        set_deterministic(args.seed)
    table = _table(args)
    out = _prepare_out(args.out, args.force, is_dir=False)
    base = _stack_base(args.base)
    spec = ProtocolSpec(kind="cross_day", train_day=args.train_day, train_minutes=args.train_minutes,
                        channels=args.channels, seed=args.seed)
    drop, n = spec.drop_practice_sessions, spec.train_sessions
    sess = table.select(args.user, args.train_day, "sitting", lambda i: drop <= i < drop + n)
    if not sess:
        raise DataError(f"no training sessions for {args.user} on day {args.train_day}")
    pos, _ = table.stack(sess, spec.train_seconds)
    pool = [s for u in table.users("pretrain") for s in table.select(u, condition=None)]
    neg, _ = table.stack(pool, max(table.truncations))
    if len(neg) == 0:
        raise DataError("no pretrain identities for training negatives")
    cfg = _train_cfg(args)
    model = enroll_user(base, pos, neg, cfg, spec.channel_index)
    write_checkpoint(out, model, cfg)
    _write_run(out.parent, "enroll", {"user": args.user, "spec": spec.to_dict(), "train": cfg.to_dict(),
                                      "base": base.digest() if base else None}, args.seed,
               {"model_digest": model.digest()})
    print(f"user model {model.digest()[:12]} -> {out}")
    return 0


def cmd_finetune(args) -> int:
    if args.deterministic:
        set_deterministic(args.seed)
    table = _table(args)
    out = _prepare_out(args.out, args.force, is_dir=False)
    model, _ = read_checkpoint(args.model)
    spec = ProtocolSpec(channels=args.channels, seed=args.seed)
    sess = table.select(args.user, args.day, "sitting", lambda i: i < spec.drop_practice_sessions)
    pos, _ = table.stack(sess, spec.finetune_seconds_per_session)
    if len(pos) == 0:
        raise DataError(f"no practice sessions for {args.user} on day {args.day}")
    pool = [s for u in table.users("pretrain") for s in table.select(u, condition=None)]
    neg, _ = table.stack(pool, max(table.truncations))
    cfg = _train_cfg(args)
    tuned = fine_tune(model, pos, cfg, neg if len(neg) else None, spec.channel_index)
    write_checkpoint(out, tuned, cfg)
    _write_run(out.parent, "finetune", {"user": args.user, "day": args.day, "model": model.digest(),
                                        "train": cfg.to_dict()}, args.seed,
               {"model_digest": tuned.digest()})
    print(f"fine-tuned model {tuned.digest()[:12]} -> {out}")
    return 0


def cmd_eval(args) -> int:
    if args.deterministic:
        set_deterministic(args.seed)
    kind = args.protocol.replace("-", "_")
    policy = _policy(args)
    spec = ProtocolSpec(kind=kind, train_day=args.train_day, train_minutes=args.train_minutes,
                        channels=args.channels, seed=args.seed,
                        instance_policy=policy if kind == "instance_ablation" else None,
                        pretrained=not args.scratch)
    table = _table(args)
    out = _prepare_out(args.out, args.force)
    stack = ModelStack(base=_stack_base(args.base), train=_train_cfg(args),
                       pretrain_per_session=args.per_session)
    report = run_protocol(table, spec, stack,
                          progress=lambda u, d: log.info("evaluated %s (train day %d)", u, d))
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    _write_run(out, "eval", {"spec": spec.to_dict(), "stack": stack.digest()}, args.seed,
               {"report_digest": report.digest()})
    s = report.summary()
    for k in ("same_day", "cross_day", "cross_day_after_finetune"):
        if s.get(k):
            print(f"{k:26s} BAC {s[k]['bac']['mean']:.3f} +- {s[k]['bac']['std']:.3f}  "
                  f"TPR {s[k]['tpr']['mean']:.3f}  FPR {s[k]['fpr']['mean']:.3f}")
    return 0


def cmd_report(args) -> int:
    out = _prepare_out(args.out, args.force, is_dir=False)
    rows = []
    for path in args.reports:
        doc = json.loads(Path(path).read_text())
        for c in doc["cells"]:
            rows.append({"report": str(path), "protocol": doc["protocol"]["kind"],
                         "channels": doc["protocol"]["channels"], **c})
    if not rows:
        raise DataError("no cells in the given reports")
    rows.sort(key=lambda r: (r["train_day"], r["test_day"], r["condition"], r["stage"], r["user"],
                             r["report"]))
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_run(out.parent, "report", {"reports": [str(p) for p in args.reports]}, args.seed)
    print(f"{len(rows)} rows -> {out}")
    return 0


def cmd_benchmark(args) -> int:
    corpus = CorpusConfig(users=args.users, pretrain_users=args.pretrain_users, days=args.days,
                          sessions_per_day=args.sessions, seed=args.seed)
    cfg = BenchmarkConfig(corpus=corpus, train=TrainConfig(seed=args.seed),
                          train_minutes=args.train_minutes, deterministic=args.deterministic)
    out = _prepare_out(args.out, args.force)
    res = run_benchmark(cfg, log=log.info)
    for name, rep in res.reports.items():
        (out / f"{name}.json").write_text(rep.to_json())
        (out / f"{name}.csv").write_text(rep.to_csv())
    (out / "benchmark.json").write_text(json.dumps(res.to_dict(), indent=1, sort_keys=True))
    _write_run(out, "benchmark", cfg.to_dict(), args.seed, {"digest": res.digest()})
    for k, v in res.figures().items():
        print(f"{k:28s} {v}")
    print(f"digest {res.digest()}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, required=True)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic torch kernels, single thread")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", type=Path)
    data.add_argument("--data", type=Path, help="directory written by 'process'")
    data.add_argument("--instances", type=int, default=10, help="static instances per session")
    data.add_argument("--instance-frames", type=int, default=5)
    data.add_argument("--channels", choices=tuple(CHANNEL_SETS), default="all")
    data.add_argument("--epochs", type=int, default=None, help="override all epoch counts")

    p = argparse.ArgumentParser(prog="echoauth", description="Acoustic echo authentication toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize a corpus and its manifest")
    s.add_argument("--users", type=int, default=30)
    s.add_argument("--pretrain-users", type=int, default=20)
    s.add_argument("--days", type=int, default=3)
    s.add_argument("--sessions", type=int, default=36)
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--jitter", type=float, default=1.0, help="remount jitter scale")
    s.add_argument("--drift", type=float, default=CorpusConfig().drift)
    s.add_argument("--snr", type=float, default=CorpusConfig().snr_db)
    s.add_argument("--conditions", nargs="*", default=[])
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("process", parents=[common], help="recordings -> static instance tensors")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--instances", type=int, default=10)
    s.add_argument("--instance-frames", type=int, default=5)
    s.set_defaults(func=cmd_process)

    s = sub.add_parser("pretrain", parents=[common, data], help="train the base extractor")
    s.add_argument("--users", nargs="*", help="pretrain identities (default: manifest roles)")
    s.add_argument("--per-session", type=int, default=4)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("enroll", parents=[common, data], help="train one user model")
    s.add_argument("--base", type=Path, help="base checkpoint; omit to train from scratch")
    s.add_argument("--user", required=True)
    s.add_argument("--train-day", type=int, default=1)
    s.add_argument("--train-minutes", type=int, choices=(1, 2, 3, 4), default=1)
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("finetune", parents=[common, data], help="update a user model for a new day")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--user", required=True)
    s.add_argument("--day", type=int, required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", parents=[common, data], help="run an evaluation protocol")
    s.add_argument("--protocol", choices=[k.replace("_", "-") for k in KINDS] + list(KINDS),
                   default="cross-day")
    s.add_argument("--base", type=Path, help="base checkpoint (default: pretrain from the data)")
    s.add_argument("--scratch", action="store_true", help="enroll without a pretrained extractor")
    s.add_argument("--train-day", type=int, default=1)
    s.add_argument("--train-minutes", type=int, choices=(1, 2, 3, 4), default=1)
    s.add_argument("--per-session", type=int, default=4)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="merge report JSON files into one CSV")
    s.add_argument("reports", nargs="+", type=Path)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("benchmark", parents=[common], help="end-to-end synthetic benchmark")
    s.add_argument("--users", type=int, default=30)
    s.add_argument("--pretrain-users", type=int, default=20)
    s.add_argument("--days", type=int, default=3)
    s.add_argument("--sessions", type=int, default=36)
    s.add_argument("--train-minutes", type=int, choices=(1, 2, 3, 4), default=1)
    s.set_defaults(func=cmd_benchmark)
    return p


def _where(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    if not tb:
        return ""
    f = tb[-1]
    return f"{Path(f.filename).name}:{f.lineno}: "


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except EchoAuthError as e:
        print(f"error: {_where(e)}{e}", file=sys.stderr)
        return e.exit_code
    except AssertionError as e:
        print(f"error: {_where(e)}assertion failed: {e}", file=sys.stderr)
        return LeakageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
