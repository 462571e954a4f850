"""Mini-batch SGD with momentum and weight decay, plus superpixel-level
prediction (per-scale probability averaging)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import NetworkSpec, backward, forward, init_params, loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float  # nan when no validation set


def evaluate(spec, params, x, y, batch_size: int = 256):
    """Test-mode loss and accuracy over a dataset, in chunks."""
    losses = []
    correct = 0
    for i in range(0, len(x), batch_size):
        probs = forward(spec, params, x[i:i + batch_size], mode="test")
        losses.append(loss(probs, y[i:i + batch_size]) * len(probs))
        correct += int(((probs[:, 1] > 0.5).astype(np.int64)
                        == y[i:i + batch_size]).sum())
    return sum(losses) / len(x), correct / len(x)


def train_sgd(spec: NetworkSpec, x, y, cfg: TrainConfig | None = None,
              params=None, val_x=None, val_y=None,
              callback=None):
    """Returns (params, trace).  Deterministic for a fixed seed in
    single-threaded execution; weight decay skips biases."""
    cfg = cfg or TrainConfig()
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None, :, :]
    y = np.asarray(y).astype(np.int64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if y.min() == y.max():
        raise ValueError("training labels are single-class")

    if params is None:
        params = init_params(spec, seed=cfg.seed, dtype=x.dtype)
    velocity = [None if p is None else {k: np.zeros_like(v)
                                        for k, v in p.items()}
                for p in params]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5D9)))
    trace: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step_rng = np.random.default_rng(np.random.SeedSequence(
                (cfg.seed, epoch, start)))
            grads = backward(spec, params, x[idx], y[idx], rng=step_rng)
            for p, v, g in zip(params, velocity, grads):
                if p is None:
                    continue
                for key in p:
                    decay = cfg.weight_decay if key == "w" else 0.0
                    v[key] = (cfg.momentum * v[key]
                              - cfg.learning_rate * (g[key] + decay * p[key]))
                    p[key] += v[key].astype(p[key].dtype, copy=False)
        ep_loss, ep_acc = evaluate(spec, params, x, y)
        if val_x is not None and len(val_x):
            _, val_acc = evaluate(spec, params, val_x, val_y)
        else:
            val_acc = float("nan")
        stats = EpochStats(epoch=epoch, loss=ep_loss, train_accuracy=ep_acc,
                           val_accuracy=val_acc)
        trace.append(stats)
        if callback is not None and callback(stats):
            break
    return params, trace


def write_trace_csv(trace: list[EpochStats], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "train_accuracy", "val_accuracy"])
        for row in trace:
            writer.writerow([row.epoch, repr(row.loss),
                             repr(row.train_accuracy),
                             repr(row.val_accuracy)])


def average_scale_probs(probs) -> float:
    """Arithmetic mean of per-scale probabilities, accumulated in scale
    order in float64."""
    probs = list(probs)
    if not probs:
        raise ValueError("need at least one probability")
    acc = 0.0
    for p in probs:
        acc += float(p)
    return acc / len(probs)


def predict_superpixel(spec: NetworkSpec, params, patches) -> float:
    """Mean foreground probability over one superpixel's per-scale patches.

    Each patch gets its own forward pass; averaging matches
    ``average_scale_probs`` bit for bit.
    """
    if len(patches) == 0:
        raise ValueError("need at least one patch")
    per_scale = []
    for patch in patches:
        p = np.asarray(patch)
        if p.ndim == 2:
            p = p[None, None]
        elif p.ndim == 3:
            p = p[None]
        per_scale.append(forward(spec, params, p, mode="test")[0, 1])
    return average_scale_probs(per_scale)


def predict_patches(spec: NetworkSpec, params, patches,
                    batch_size: int = 128) -> np.ndarray:
    """Batched foreground probabilities for many patches (inference path)."""
    out = np.empty(len(patches), dtype=np.float64)
    for i in range(0, len(patches), batch_size):
        chunk = np.asarray(patches[i:i + batch_size])
        if chunk.ndim == 3:
            chunk = chunk[:, None]
        out[i:i + len(chunk)] = forward(spec, params, chunk,
                                        mode="test")[:, 1]
    return out
