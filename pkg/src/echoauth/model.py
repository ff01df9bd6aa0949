"""Residual CNN feature extractor + linear classifier, two-stage training."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace, field
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .instances import augment_batch, eval_view

PARAM_VERSION = "echoauth-params/1"
# binary heads: logit 0 is the enrolled user, logit 1 everyone else
POSITIVE, NEGATIVE = 0, 1

Stage = tuple[int, int, tuple[int, int]]  # (width, blocks, stride)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    frames: int = 5
    rows: int = 70
    stem_width: int = 16
    stem_stride: tuple[int, int] = (1, 2)
    stages: tuple[Stage, ...] = ((16, 1, (1, 2)), (32, 1, (2, 2)), (64, 1, (1, 2)), (64, 1, (1, 1)))
    head_dim: int = 2
    scale: str = "desk"

    def __post_init__(self):
        if self.head_dim < 2:
            raise ConfigError("head needs at least two outputs")
        if min(self.in_channels, self.frames, self.rows) < 1:
            raise ConfigError("input shape must be positive")
        if self.stages and self.stem_width < 1:
            raise ConfigError("residual stages need a stem")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.frames, self.rows)

    def with_head(self, head_dim: int) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), "head_dim": head_dim})

    def with_input(self, in_channels: int, frames: int | None = None) -> "ModelConfig":
        d = self.to_dict()
        d["in_channels"] = in_channels
        if frames is not None:
            d["frames"] = frames
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_stride"] = tuple(self.stem_stride)
        d["stages"] = tuple((w, b, tuple(s)) for w, b, s in self.stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stem_stride"] = tuple(d["stem_stride"])
        d["stages"] = tuple((int(w), int(b), tuple(s)) for w, b, s in d["stages"])
        return cls(**d)

    @classmethod
    def desk(cls, in_channels: int = 4, head_dim: int = 2, frames: int = 5) -> "ModelConfig":
        return cls(in_channels=in_channels, frames=frames, head_dim=head_dim)

    @classmethod
    def resnet18(cls, in_channels: int = 4, head_dim: int = 2, frames: int = 5) -> "ModelConfig":
        """ResNet-18 layout (64..512 wide, two blocks per stage) for a 5x70 input."""
        return cls(in_channels=in_channels, frames=frames, head_dim=head_dim, stem_width=64,
                   stem_stride=(1, 1),
                   stages=((64, 2, (1, 1)), (128, 2, (2, 2)), (256, 2, (2, 2)), (512, 2, (2, 2))),
                   scale="paper")

    @classmethod
    def linear(cls, in_channels: int = 4, head_dim: int = 2, frames: int = 5) -> "ModelConfig":
        return cls(in_channels=in_channels, frames=frames, head_dim=head_dim, stem_width=0,
                   stages=(), scale="linear")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 2e-4
    epochs_base: int = 20
    epochs_enroll: int = 10
    epochs_finetune: int = 2
    epochs_scratch: int = 30
    batch_size: int = 32
    weight_decay: float = 0.0
    # negatives drawn per epoch as a multiple of the positive count; 0 uses the whole pool
    negative_ratio: float = 8.0
    finetune_negative_ratio: float = 0.0
    optimizer: str = "adam"
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ConfigError("learning rate must be positive")
        if min(self.epochs_base, self.epochs_enroll, self.epochs_scratch) < 1 or self.epochs_finetune < 0:
            raise ConfigError("epoch counts must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.optimizer != "adam" or self.schedule != "cosine":
            raise ConfigError("only adam with a cosine schedule is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu1 = nn.ReLU()
        self.relu2 = nn.ReLU()
        self.shortcut = None
        if cin != cout or tuple(np.broadcast_to(stride, 2)) != (1, 1):
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        y = self.relu1(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.relu2(y + (x if self.shortcut is None else self.shortcut(x)))


class EchoNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        width = cfg.in_channels * cfg.frames * cfg.rows
        if cfg.stages or cfg.stem_width:
            layers += [nn.Conv2d(cfg.in_channels, cfg.stem_width, 3, cfg.stem_stride, 1, bias=False),
                       nn.BatchNorm2d(cfg.stem_width), nn.ReLU()]
            width = cfg.stem_width
            for w, blocks, stride in cfg.stages:
                for b in range(blocks):
                    layers.append(BasicBlock(width, w, stride if b == 0 else 1))
                    width = w
            layers += [nn.AdaptiveAvgPool2d(1)]
        layers.append(nn.Flatten())
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(width, cfg.head_dim)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ConfigError(f"batch shape {tuple(x.shape[1:])} does not match model input "
                              f"{self.cfg.input_shape}")
        return self.head(self.features(x))


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Immutable named tensors of one trained model."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: str = PARAM_VERSION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.tensors.items():
            v.setflags(write=False)
            if v.dtype.kind == "f" and not np.all(np.isfinite(v)):
                raise DataError(f"non-finite values in {k}")

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            v = np.ascontiguousarray(self.tensors[k])
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def module(self, dtype=torch.float32) -> EchoNet:
        net = EchoNet(self.config)
        load_into(net, self)
        return net.to(dtype)

    @property
    def is_binary(self) -> bool:
        return self.config.head_dim == 2


def params_from(net: EchoNet, meta: dict | None = None) -> ParameterSet:
    tensors = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    tensors = {k: (v.astype(np.float32) if v.dtype.kind == "f" else v) for k, v in tensors.items()}
    return ParameterSet(config=net.cfg, tensors=tensors, meta=dict(meta or {}))


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    return {k: tuple(v.shape) for k, v in EchoNet(cfg).state_dict().items()}


def load_into(net: EchoNet, params: ParameterSet, strict: bool = True) -> None:
    want = expected_shapes(net.cfg)
    if strict and set(want) != set(params.tensors):
        raise ConfigError("parameter names do not match the model configuration")
    for k, v in params.tensors.items():
        if k in want and tuple(v.shape) != want[k]:
            raise ConfigError(f"shape of {k} is {v.shape}, model expects {want[k]}")
    state = {k: torch.from_numpy(np.array(v)) for k, v in params.tensors.items()}
    net.load_state_dict(state, strict=strict)


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterSet:
    torch.manual_seed(seed)
    return params_from(EchoNet(cfg))


# ---------------------------------------------------------------- inference

def _as_input(batch) -> np.ndarray:
    x = np.asarray(getattr(batch, "values", batch))
    return x[None] if x.ndim == 3 else x


def forward(params: ParameterSet, config: ModelConfig | None, batch, chunk: int = 2048) -> np.ndarray:
    """Logits for model-ready inputs of shape (n, channels, frames, rows)."""
    cfg = config or params.config
    if cfg != params.config:
        raise ConfigError("parameter set was built for a different configuration")
    x = _as_input(batch)
    if tuple(x.shape[1:]) != cfg.input_shape:
        raise ConfigError(f"batch shape {tuple(x.shape[1:])} does not match {cfg.input_shape}")
    net = params.module()
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            out.append(net(torch.as_tensor(x[i:i + chunk], dtype=torch.float32)).numpy())
    if not out:
        return np.zeros((0, cfg.head_dim), dtype=np.float32)
    return np.concatenate(out).astype(np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def select_channels(blocks: np.ndarray, channels: tuple[int, ...] | None) -> np.ndarray:
    return blocks if channels is None else blocks[:, list(channels)]


def scores(model: ParameterSet, blocks: np.ndarray, channels=None) -> np.ndarray:
    """Positive-class probability for stored (n, c, f, 110) blocks."""
    if not model.is_binary:
        raise ConfigError("authentication needs a binary model")
    x = eval_view(select_channels(np.asarray(blocks), channels))
    return softmax(forward(model, None, x))[:, POSITIVE]


def decide(logits) -> tuple[float, bool]:
    """Score and decision for one binary logit pair; the boundary accepts."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (2,):
        raise ConfigError("authentication needs a binary model")
    s = float(softmax(logits)[POSITIVE])
    return s, s >= 0.5


def authenticate(model: ParameterSet, inst, channels=None) -> tuple[float, bool]:
    if not model.is_binary:
        raise ConfigError("authentication needs a binary model")
    blocks = _as_input(inst)
    x = eval_view(select_channels(blocks, channels))
    return decide(forward(model, None, x)[0])


# ----------------------------------------------------------------- training

def _cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1 + math.cos(math.pi * step / max(total, 1)))


def _fit(net: EchoNet, epochs: Iterator[tuple[np.ndarray, np.ndarray]], n_epochs: int,
         steps_per_epoch: int, cfg: TrainConfig, rng: np.random.Generator,
         class_weight: Callable[[np.ndarray], np.ndarray | None] = lambda y: None) -> list[float]:
    """Mini-batch Adam with per-step cosine decay; returns mean loss per epoch."""
    opt = torch.optim.Adam(net.parameters(), lr=cfg.initial_lr, weight_decay=cfg.weight_decay)
    total = n_epochs * steps_per_epoch
    step = 0
    history = []
    net.train()
    for _ in range(n_epochs):
        blocks, labels = next(epochs)
        w = class_weight(labels)
        weight = None if w is None else torch.as_tensor(w, dtype=torch.float32)
        order = rng.permutation(len(labels))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:  # batch norm needs two samples
                continue
            x = torch.as_tensor(augment_batch(blocks[idx], rng), dtype=torch.float32)
            y = torch.as_tensor(labels[idx], dtype=torch.long)
            for g in opt.param_groups:
                g["lr"] = _cosine_lr(cfg.initial_lr, step, total)
            opt.zero_grad()
            loss = F.cross_entropy(net(x), y, weight=weight)
            loss.backward()
            opt.step()
            step += 1
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return history


def _steps(n: int, batch: int) -> int:
    return sum(1 for i in range(0, n, batch) if n - i >= 2)


def _repeat(blocks, labels):
    while True:
        yield blocks, labels


def pretrain_base(blocks: np.ndarray, labels: np.ndarray, cfg: TrainConfig = TrainConfig(),
                  model_cfg: ModelConfig | None = None, channels=None) -> ParameterSet:
    """Multi-class identity classifier over the pretraining corpus.

    ``blocks`` are stored (n, c, f, 110) instances, ``labels`` 0..K-1.
    """
    labels = np.asarray(labels, dtype=np.int64)
    blocks = select_channels(np.asarray(blocks), channels)
    k = int(labels.max()) + 1 if len(labels) else 0
    if k < 2:
        raise DataError("pretraining needs at least two identities")
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        raise DataError(f"identities without instances: {np.flatnonzero(counts == 0).tolist()}")
    mc = (model_cfg or ModelConfig.desk()).with_input(blocks.shape[1], blocks.shape[2]).with_head(k)
    set_deterministic(cfg.seed)
    net = EchoNet(mc)
    rng = np.random.default_rng([cfg.seed, 1])
    hist = _fit(net, _repeat(blocks, labels), cfg.epochs_base, _steps(len(labels), cfg.batch_size),
                cfg, rng)
    return params_from(net, {"stage": "base", "loss": hist, "classes": k})


def balanced_weights(labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    return np.where(counts > 0, len(labels) / (n_classes * np.maximum(counts, 1)), 0.0)


def _binary_epochs(pos: np.ndarray, neg: np.ndarray, ratio: float, rng: np.random.Generator):
    n_neg = len(neg) if ratio <= 0 else min(len(neg), max(1, int(round(ratio * len(pos)))))
    while True:
        pick = rng.choice(len(neg), n_neg, replace=False) if n_neg < len(neg) else np.arange(len(neg))
        blocks = np.concatenate([pos, neg[np.sort(pick)]])
        labels = np.concatenate([np.full(len(pos), POSITIVE, np.int64), np.full(n_neg, NEGATIVE, np.int64)])
        yield blocks, labels


def _train_binary(net: EchoNet, pos, neg, cfg: TrainConfig, epochs: int, seed) -> list[float]:
    rng = np.random.default_rng(seed)
    n_neg = len(neg) if cfg.negative_ratio <= 0 else min(len(neg), max(1, int(round(cfg.negative_ratio * len(pos)))))
    return _fit(net, _binary_epochs(pos, neg, cfg.negative_ratio, rng), epochs,
                _steps(len(pos) + n_neg, cfg.batch_size), cfg, rng, balanced_weights)


def enroll_user(base: ParameterSet | None, positives: np.ndarray, negatives: np.ndarray,
                cfg: TrainConfig = TrainConfig(), channels=None, epochs: int | None = None,
                model_cfg: ModelConfig | None = None) -> ParameterSet:
    """Binary user model. The extractor starts from ``base``; ``base=None``
    trains from random initialisation for ``cfg.epochs_scratch`` epochs."""
    positives = select_channels(np.asarray(positives), channels)
    negatives = select_channels(np.asarray(negatives), channels)
    if len(positives) == 0:
        raise DataError("enrollment needs positive instances")
    if len(negatives) == 0:
        raise DataError("enrollment needs negative instances")
    set_deterministic(cfg.seed)
    if base is None:
        mc = (model_cfg or ModelConfig.desk()).with_input(positives.shape[1], positives.shape[2])
        net = EchoNet(mc.with_head(2))
        n_epochs = cfg.epochs_scratch if epochs is None else epochs
        stage = "scratch"
    else:
        if tuple(positives.shape[1:3]) != base.config.input_shape[:2]:
            raise ConfigError(f"instances {positives.shape[1:3]} do not fit base model "
                              f"{base.config.input_shape[:2]}")
        net = EchoNet(base.config.with_head(2))
        state = {k: torch.from_numpy(np.array(v)) for k, v in base.tensors.items()
                 if not k.startswith("head.")}
        net.load_state_dict(state, strict=False)
        n_epochs = cfg.epochs_enroll if epochs is None else epochs
        stage = "enroll"
    hist = _train_binary(net, positives, negatives, cfg, n_epochs, [cfg.seed, 2])
    return params_from(net, {"stage": stage, "loss": hist})


def fine_tune(model: ParameterSet, positives: np.ndarray, cfg: TrainConfig = TrainConfig(),
              negatives: np.ndarray | None = None, channels=None,
              epochs: int | None = None) -> ParameterSet:
    """Short update of a binary model with a new day's positives."""
    if not model.is_binary:
        raise ConfigError("only binary models can be fine-tuned")
    positives = select_channels(np.asarray(positives), channels)
    if len(positives) == 0:
        raise DataError("fine-tuning needs positive instances")
    n_epochs = cfg.epochs_finetune if epochs is None else epochs
    if n_epochs == 0:
        return model
    set_deterministic(cfg.seed)
    net = model.module()
    if negatives is None or len(negatives) == 0:
        negatives = positives[:0]
        rng = np.random.default_rng([cfg.seed, 3])
        labels = np.full(len(positives), POSITIVE, np.int64)
        hist = _fit(net, _repeat(positives, labels), n_epochs, _steps(len(positives), cfg.batch_size),
                    cfg, rng)
    else:
        negatives = select_channels(np.asarray(negatives), channels)
        ft = replace(cfg, negative_ratio=cfg.finetune_negative_ratio)
        hist = _train_binary(net, positives, negatives, ft, n_epochs, [cfg.seed, 3])
    return params_from(net, {**model.meta, "stage": "finetune", "finetune_loss": hist})


def fit_batch(params: ParameterSet, x: np.ndarray, y: np.ndarray, steps: int,
              lr: float | None = None, cfg: TrainConfig = TrainConfig()) -> tuple[ParameterSet, list[float]]:
    """Full-batch Adam on model-ready inputs, no augmentation or schedule.

    Returns the updated parameters and the loss before every step.
    """
    set_deterministic(cfg.seed)
    net = params.module()
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr or cfg.initial_lr)
    xt = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    yt = torch.as_tensor(np.asarray(y), dtype=torch.long)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(net(xt), yt)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return params_from(net, params.meta), losses


# ------------------------------------------------------------ gradient check

class _KinkWatch:
    """Records the sign pattern of every ReLU input during a forward pass."""

    def __init__(self, net: nn.Module):
        self.masks: list[torch.Tensor] = []
        self.handles = [m.register_forward_pre_hook(self._hook)
                        for m in net.modules() if isinstance(m, nn.ReLU)]

    def _hook(self, module, inputs):
        self.masks.append(inputs[0].detach() > 0)

    def take(self) -> list[torch.Tensor]:
        out, self.masks = self.masks, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a, b))


def grad_check(params: ParameterSet, config: ModelConfig | None, batch: np.ndarray,
               labels: np.ndarray, n_params: int = 128, step: float = 1e-5, seed: int = 0,
               grad_hook: Callable[[str, torch.Tensor], torch.Tensor] | None = None,
               report: dict | None = None) -> float:
    """Largest relative gap between autograd and central differences (float64).

    Parameters are sampled evenly across tensors, up to ``n_params`` in total. A probe whose +/-step moves
    any ReLU input across zero straddles a kink, where the difference quotient
    is meaningless; such probes are replaced by fresh draws. ``grad_hook`` may
    rewrite an analytic gradient before comparison (used to check the check).
    """
    cfg = config or params.config
    if cfg != params.config:
        raise ConfigError("parameter set was built for a different configuration")
    net = params.module(torch.float64)
    net.train()
    x = torch.as_tensor(np.asarray(batch), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    watch = _KinkWatch(net)
    net.zero_grad()
    F.cross_entropy(net(x), y).backward()
    base_masks = watch.take()
    named = list(net.named_parameters())
    grads = {k: p.grad.detach().clone() for k, p in named}
    if grad_hook is not None:
        grads = {k: grad_hook(k, g) for k, g in grads.items()}
    scale = max(float(g.abs().max()) for g in grads.values())
    # relative error is meaningless for gradients at round-off level
    floor = 1e-6 * max(scale, 1e-12)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    # small tensors first so their unused quota carries over to larger ones
    order = sorted(named, key=lambda kv: kv[1].numel())
    with torch.no_grad():
        for i, (name, p) in enumerate(order):
            per = max(1, math.ceil((n_params - checked) / (len(order) - i)))
            flat = p.view(-1)
            candidates = rng.permutation(flat.numel())
            done = 0
            for j in candidates:
                if done >= per:
                    break
                orig = flat[j].item()
                flat[j] = orig + step
                up = F.cross_entropy(net(x), y).item()
                up_masks = watch.take()
                flat[j] = orig - step
                down = F.cross_entropy(net(x), y).item()
                down_masks = watch.take()
                flat[j] = orig
                if not (_same(up_masks, base_masks) and _same(down_masks, base_masks)):
                    skipped += 1
                    continue
                num = (up - down) / (2 * step)
                ana = grads[name].view(-1)[j].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
                done += 1
            checked += done
    watch.close()
    if report is not None:
        report.update(checked=checked, skipped=skipped)
    return worst
