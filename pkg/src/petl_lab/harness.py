"""Synthetic-video fine-tuning harness: data, optimizers, training, checks.

The dataset is a deterministic stand-in for real action-recognition corpora:
each class is a moving-pattern family (drift direction, with texture
frequency taking over once the eight directions are used up), so labels are
recoverable from motion statistics alone. Regeneration with the same seed is
bit-identical.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .registry import Parameter
from .tensor import Tensor

# Class families cycle through these drift directions (dy, dx).
DRIFT_DIRECTIONS = (
    (0, 1), (0, -1), (1, 0), (-1, 0),
    (1, 1), (-1, -1), (1, -1), (-1, 1),
)

# Denominator floor for the model-level gradient check. Central differences
# at eps=1e-5 on 64-bit floats carry ~1e-10 absolute noise from rounding in
# the two loss evaluations; the floor keeps that oracle noise from dominating
# the ratio for near-zero gradients while still bounding their absolute
# error at 1e-8 (the fault-injection test shows real bugs still trip it).
GRADCHECK_FLOOR = 1e-4


class SyntheticVideoDataset:
    """Deterministic labeled clips; class = moving-pattern family."""

    def __init__(self, clips: np.ndarray, labels: np.ndarray, n_classes: int, seed: int):
        self.clips = clips
        self.labels = labels
        self.n_classes = n_classes
        self.seed = seed

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def clip_shape(self) -> tuple[int, ...]:
        return self.clips.shape[1:]


def make_dataset(n_classes: int, per_class: int,
                 clip_shape: tuple[int, int, int] = (8, 32, 32),
                 seed: int = 0, noise: float = 0.05) -> SyntheticVideoDataset:
    """Generate ``n_classes * per_class`` moving-grating clips, channels last."""
    if n_classes < 1 or per_class < 1 or any(x < 1 for x in clip_shape):
        raise ConfigError("dataset sizes must be positive")
    t, h, w = clip_shape
    rng = np.random.default_rng(seed)
    ys = np.linspace(0.0, 1.0, h, endpoint=False)[:, None]
    xs = np.linspace(0.0, 1.0, w, endpoint=False)[None, :]
    channel_gain = np.array([1.0, 0.8, 0.6])
    omega = 1.2  # phase advance per frame

    clips = np.empty((n_classes * per_class, t, h, w, 3))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    idx = 0
    for c in range(n_classes):
        dy, dx = DRIFT_DIRECTIONS[c % len(DRIFT_DIRECTIONS)]
        freq = 1.5 + 0.75 * (c // len(DRIFT_DIRECTIONS))
        for _ in range(per_class):
            phase0 = rng.uniform(0.0, 2.0 * math.pi)
            frames = np.empty((t, h, w))
            for ti in range(t):
                frames[ti] = np.sin(
                    2.0 * math.pi * freq * (dy * ys + dx * xs) + phase0 - omega * ti)
            clip = frames[..., None] * channel_gain
            clip += rng.normal(0.0, noise, size=clip.shape)
            clips[idx] = clip
            labels[idx] = c
            idx += 1
    return SyntheticVideoDataset(clips, labels, n_classes, seed)


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "sgd" | "sgd-momentum" | "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 200
    batch_size: int = 16
    eval_every: int = 0  # 0 = evaluate only at the end

    def validate(self) -> None:
        if self.kind not in ("sgd", "sgd-momentum", "adam"):
            raise ConfigError(f"unknown optimizer kind '{self.kind}'")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("steps and batch size must be >= 1")


class _Sgd:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.lr

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            if p.tensor.grad is not None:
                p.tensor.data -= self.lr * p.tensor.grad


class _SgdMomentum:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.lr
        self.mu = cfg.momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            g = p.tensor.grad
            if g is None:
                continue
            buf = self.buf.get(p.path)
            buf = g.copy() if buf is None else self.mu * buf + g
            self.buf[p.path] = buf
            p.tensor.data -= self.lr * buf


class _Adam:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.lr
        self.b1 = cfg.beta1
        self.b2 = cfg.beta2
        self.eps = cfg.eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: list[Parameter]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in params:
            g = p.tensor.grad
            if g is None:
                continue
            m = self.m.get(p.path)
            v = self.v.get(p.path)
            m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
            v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
            self.m[p.path] = m
            self.v[p.path] = v
            p.tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: OptimizerConfig):
    cfg.validate()
    return {"sgd": _Sgd, "sgd-momentum": _SgdMomentum, "adam": _Adam}[cfg.kind](cfg)


@dataclass
class TrainHistory:
    """Everything a run produced: per-step losses and accuracy checkpoints."""

    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float, float | None]] = field(default_factory=list)
    trainable_count: int = 0
    wall_seconds: float = 0.0

    @property
    def final_train_top1(self) -> float:
        return self.evals[-1][1]

    @property
    def final_eval_top1(self) -> float | None:
        return self.evals[-1][2]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("step,loss\n")
            for step, loss in enumerate(self.losses, start=1):
                fh.write(f"{step},{loss!r}\n")

    def summary(self) -> dict:
        return {
            "steps": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "final_train_top1": self.final_train_top1,
            "final_eval_top1": self.final_eval_top1,
            "trainable_count": self.trainable_count,
            "wall_seconds": self.wall_seconds,
        }


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of one clip's logits against its class index."""
    picked = T.gather_rows(T.log_softmax(logits, axis=-1), [int(label)])
    return T.mul(T.tsum(picked), -1.0)


def evaluate(model, dataset: SyntheticVideoDataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise ConfigError("evaluate on an empty dataset")
    hits = 0
    with T.no_grad():
        for clip, label in zip(dataset.clips, dataset.labels):
            pred = int(np.argmax(model.forward(clip).data))
            hits += pred == int(label)
    return hits / len(dataset)


def train(model, dataset: SyntheticVideoDataset, opt: OptimizerConfig, seed: int = 0,
          eval_dataset: SyntheticVideoDataset | None = None) -> TrainHistory:
    """Fine-tune the model's trainable parameters on the dataset.

    Only parameters with gradient tracking enabled are updated; everything
    else is untouched down to the bit. A fixed seed fixes the batch sequence,
    so reruns reproduce the history exactly.
    """
    opt.validate()
    trainable = [p for p in model.registry if p.tensor.requires_grad]
    if not trainable:
        raise ConfigError("model has no trainable parameters")
    optimizer = make_optimizer(opt)
    rng = np.random.default_rng(seed)
    history = TrainHistory(trainable_count=sum(p.count for p in trainable))

    start = time.perf_counter()
    for step in range(1, opt.steps + 1):
        batch = rng.integers(0, len(dataset), size=opt.batch_size)
        total = None
        for i in batch:
            loss_i = cross_entropy(model.forward(dataset.clips[i]), dataset.labels[i])
            total = loss_i if total is None else T.add(total, loss_i)
        loss = T.mul(total, 1.0 / opt.batch_size)
        model.zero_grads()
        loss.backward()
        optimizer.step(trainable)
        history.losses.append(loss.item())
        if opt.eval_every and step % opt.eval_every == 0 and step < opt.steps:
            history.evals.append((
                step,
                evaluate(model, dataset),
                evaluate(model, eval_dataset) if eval_dataset is not None else None,
            ))
    model.zero_grads()
    history.evals.append((
        opt.steps,
        evaluate(model, dataset),
        evaluate(model, eval_dataset) if eval_dataset is not None else None,
    ))
    history.wall_seconds = time.perf_counter() - start
    return history


def _batch_loss_value(model, clips: np.ndarray, labels: np.ndarray) -> float:
    with T.no_grad():
        total = 0.0
        for clip, label in zip(clips, labels):
            logits = model.forward(clip).data
            m = logits.max()
            total += math.log(np.exp(logits - m).sum()) + m - logits[int(label)]
    return total / len(labels)


def grad_check(model, clips: np.ndarray, labels: np.ndarray, eps: float = 1e-5,
               max_params: int = 50_000) -> float:
    """Central-difference verification of every trainable parameter.

    Returns the worst relative error
    ``|analytic - numeric| / max(GRADCHECK_FLOOR, |analytic|, |numeric|)``
    over all trainable parameter entries, for the mean cross-entropy loss on
    the given batch.
    """
    clips = np.asarray(clips, dtype=np.float64)
    labels = np.asarray(labels)
    trainable = [p for p in model.registry if p.tensor.requires_grad]
    if not trainable:
        raise ConfigError("gradient check needs at least one trainable parameter")
    n_params = sum(p.count for p in trainable)
    if n_params >= max_params:
        raise ConfigError(
            f"{n_params} trainable parameters: too many for finite differences "
            f"(limit {max_params})")

    model.zero_grads()
    total = None
    for clip, label in zip(clips, labels):
        loss_i = cross_entropy(model.forward(clip), label)
        total = loss_i if total is None else T.add(total, loss_i)
    T.mul(total, 1.0 / len(labels)).backward()
    analytic = {p.path: (np.zeros_like(p.tensor.data) if p.tensor.grad is None
                         else p.tensor.grad.copy())
                for p in trainable}
    model.zero_grads()

    worst = 0.0
    for p in trainable:
        flat = p.tensor.data.reshape(-1)
        a_flat = analytic[p.path].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _batch_loss_value(model, clips, labels)
            flat[i] = orig - eps
            down = _batch_loss_value(model, clips, labels)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(a_flat[i] - numeric) / max(GRADCHECK_FLOOR, abs(a_flat[i]), abs(numeric))
            if err > worst:
                worst = err
    return worst
