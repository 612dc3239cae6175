"""Loss, optimizer, learning-rate schedule and the training loop."""

import math
import time
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import model as M
from .errors import ConfigError, DataError, ShapeError


def smoothed_ce_loss(logits, labels, alpha=0.1):
    """Mean label-smoothed softmax cross-entropy and its gradient.

    The target puts ``1 - alpha`` on the true class plus ``alpha / C`` on
    every class.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels {labels.shape} do not match batch {B}")
    if B and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"label outside [0, {C})")
    if not 0.0 <= alpha < 1.0:
        raise ConfigError({"label_smoothing": "must lie in [0, 1)"})
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((B, C), alpha / C)
    target[np.arange(B), labels] += 1.0 - alpha
    loss = float(-(target * logp).sum() / B)
    grad = (np.exp(logp) - target) / B
    return loss, grad.astype(logits.dtype)


def smoothed_target_entropy(C, alpha):
    """Lower bound of :func:`smoothed_ce_loss` (entropy of the smoothed target)."""
    hi = 1.0 - alpha + alpha / C
    lo = alpha / C
    ent = -hi * math.log(hi)
    if lo > 0:
        ent -= (C - 1) * lo * math.log(lo)
    return ent


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, named, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({k: np.zeros_like(v) for k, v in named.items()},
                   {k: np.zeros_like(v) for k, v in named.items()}, 0, beta1, beta2, eps)


def adam_step(params, grads, state, lr, weight_decay=0.0):
    """Bias-corrected Adam update, in place on the ``params`` dict.

    ``weight_decay`` is decoupled (applied directly to the weights).
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("parameter, gradient and optimizer-state names differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            step += lr * weight_decay * p
        p -= step.astype(p.dtype, copy=False)
    return params, state


@dataclass
class ScheduleConfig:
    peak_lr: float = 0.01
    warmup_steps: int = 0
    total_steps: int = 1
    floor_lr: float = 0.0

    def __post_init__(self):
        problems = {}
        if not 0 <= self.warmup_steps < self.total_steps:
            problems["warmup_steps"] = f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})"
        if self.floor_lr > self.peak_lr:
            problems["floor_lr"] = "must not exceed peak_lr"
        if problems:
            raise ConfigError(problems)


def cosine_warmup_lr(step, sched):
    """Linear warmup to ``peak_lr`` then cosine decay to ``floor_lr``.

    Steps past ``total_steps`` return ``floor_lr``.
    """
    if step >= sched.total_steps:
        return sched.floor_lr
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.floor_lr + (sched.peak_lr - sched.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    seconds: float
    lr: float
    steps: int


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: np.ndarray

    def to_dict(self):
        return {"accuracy": self.accuracy, "loss": self.loss,
                "confusion": self.confusion.tolist(), "samples": int(self.confusion.sum())}


def _global_norm(named):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in named.values()))


def compute_gradients(params, config, tokens, mask, labels, workers=1, dropout_key=(0, 0)):
    """Loss/accuracy and worker-averaged gradients for one batch.

    The batch is split into ``workers`` contiguous shards; each shard's mean
    gradient is computed independently and the shard gradients are averaged
    in shard order. Empty shards (more workers than rows) are skipped.
    """
    shards = [s for s in np.array_split(np.arange(len(labels)), workers) if len(s)]
    total = None
    loss_sum = 0.0
    correct = 0
    for idx in shards:
        sl = slice(int(idx[0]), int(idx[-1]) + 1)
        logits, cache = M.forward(tokens[sl], mask[sl], params, config, train=True,
                                  dropout_key=dropout_key, batch_offset=sl.start)
        loss, gl = smoothed_ce_loss(logits, labels[sl], config.label_smoothing)
        loss_sum += loss * len(idx)
        correct += int((logits.argmax(axis=1) == labels[sl]).sum())
        grads = M.backward(gl, cache, params, config).named()
        if total is None:
            total = grads
        else:
            for k in total:
                total[k] += grads[k]
    n = len(shards)
    for k in total:
        total[k] /= n
    return loss_sum / len(labels), correct, total


@dataclass
class Trainer:
    """Mutable training state: parameters, optimizer, schedule, step counter."""

    config: M.ModelConfig
    params: M.ModelParams
    schedule: ScheduleConfig
    seed: int = 0
    workers: int = 1
    weight_decay: float = 0.0
    clip_norm: float = 0.0
    adam: AdamState = None
    step: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.adam is None:
            self.adam = AdamState.zeros_like(self.params.named())

    def train_step(self, batch):
        lr = cosine_warmup_lr(self.step, self.schedule)
        loss, correct, grads = compute_gradients(
            self.params, self.config, batch.tokens, batch.mask, batch.labels,
            self.workers, dropout_key=(self.seed, self.step))
        if self.clip_norm > 0:
            norm = _global_norm(grads)
            if norm > self.clip_norm:
                for g in grads.values():
                    g *= self.clip_norm / norm
        adam_step(self.params.named(), grads, self.adam, lr, self.weight_decay)
        self.step += 1
        return loss, correct, lr

    def train_epoch(self, dataset, batch_size, epoch=0):
        """One pass over ``dataset`` with a per-epoch deterministic shuffle."""
        if len(dataset) == 0:
            raise ConfigError({"data": "training dataset is empty"})
        start = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        seen = 0
        steps = 0
        lr = cosine_warmup_lr(self.step, self.schedule)
        for batch in dataset.batches(batch_size, seed=(self.seed, epoch)):
            loss, c, lr = self.train_step(batch)
            n = len(batch.labels)
            loss_sum += loss * n
            correct += c
            seen += n
            steps += 1
        metrics = EpochMetrics(loss_sum / seen, correct / seen, time.perf_counter() - start, lr, steps)
        self.history.append(metrics)
        return metrics


def train_epoch(trainer, dataset, batch_size, epoch=0):
    return trainer.train_epoch(dataset, batch_size, epoch)


def evaluate(params, config, dataset, batch_size=64):
    """Deterministic eval-mode accuracy, mean loss and confusion matrix.

    Confusion rows are true classes, columns are predictions.
    """
    C = config.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    loss_sum = 0.0
    n = 0
    for batch in dataset.batches(batch_size, seed=None):
        logits, _ = M.forward(batch.tokens, batch.mask, params, config, train=False)
        loss, _ = smoothed_ce_loss(logits, batch.labels, config.label_smoothing)
        np.add.at(confusion, (batch.labels, logits.argmax(axis=1)), 1)
        loss_sum += loss * len(batch.labels)
        n += len(batch.labels)
    if n == 0:
        return EvalResult(0.0, 0.0, confusion)
    return EvalResult(float(np.trace(confusion) / n), loss_sum / n, confusion)
