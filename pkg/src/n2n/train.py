"""Optimizers and the deterministic training loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .netgraph import TRAINABLE, BatchNorm, Graph, ParamSet, clone_params, cross_entropy, forward, value_and_grad

OPTIMIZERS = ("sgd", "rmsprop")
EVAL_BATCH = 256


class TrainingAborted(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    momentum: float = 0.9
    decay: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 32
    max_steps: int = 100
    lr_schedule: str = "constant"
    step_factor: float = 0.1
    step_every: int = 0
    seed: int = 0
    eval_every: int = 25
    train_eval_size: int = 1000

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, max_steps >= 0")
        if self.optimizer == "rmsprop" and not self.epsilon > 0:
            raise ValueError("rmsprop epsilon must be positive")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_schedule == "step" and self.step_every < 1:
            raise ValueError("step schedule needs step_every >= 1")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "step":
            return self.lr * self.step_factor ** (step // self.step_every)
        return self.lr


def student_config(teacher_cfg: TrainConfig) -> TrainConfig:
    """Teacher hyperparameters with a tenfold smaller learning rate."""
    return replace(teacher_cfg, lr=teacher_cfg.lr / 10)


@dataclass
class MetricsRow:
    step: int
    train_acc: float
    eval_acc: float
    loss: float
    wall_ms: float


CSV_HEADER = ("step", "train_acc", "eval_acc", "loss", "wall_ms")


class CsvMetrics:
    """Metrics sink writing one CSV row per evaluation point."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)
        self._last = None

    def __call__(self, row: MetricsRow):
        if self._last is not None and row.step <= self._last:
            raise ValueError(f"metrics steps must increase: {row.step} after {self._last}")
        self._last = row.step
        self._writer.writerow([row.step, f"{row.train_acc:.6f}", f"{row.eval_acc:.6f}",
                               f"{row.loss:.6f}", f"{row.wall_ms:.1f}"])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
                for r in reader]


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

def sgd_momentum_step(p, grad, buf, lr, momentum=0.9):
    """Heavy-ball SGD: ``buf <- momentum * buf + grad``, ``p <- p - lr * buf``."""
    t = p.dtype.type
    buf = t(momentum) * buf + grad
    return p - t(lr) * buf, buf


def rmsprop_step(p, grad, sq, lr, decay=0.9, epsilon=1e-8):
    """``sq <- decay * sq + (1 - decay) * grad**2``, ``p <- p - lr * grad / (sqrt(sq) + eps)``."""
    t = p.dtype.type
    sq = t(decay) * sq + t(1 - decay) * grad * grad
    return p - t(lr) * grad / (np.sqrt(sq) + t(epsilon)), sq


@dataclass
class TrainState:
    """Optimizer slots and the number of completed steps."""

    optimizer: str
    step: int = 0
    slots: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, optimizer, params: ParamSet):
        slots = {nid: {k: np.zeros_like(v) for k, v in g.items() if k in TRAINABLE}
                 for nid, g in params.items()}
        return cls(optimizer, 0, {nid: s for nid, s in slots.items() if s})


def apply_update(params: ParamSet, grads: ParamSet, state: TrainState, cfg: TrainConfig, lr: float):
    for nid, slots in state.slots.items():
        for name, buf in slots.items():
            p, g = params[nid][name], grads[nid][name]
            if cfg.optimizer == "sgd":
                params[nid][name], slots[name] = sgd_momentum_step(p, g, buf, lr, cfg.momentum)
            else:
                params[nid][name], slots[name] = rmsprop_step(p, g, buf, lr, cfg.decay, cfg.epsilon)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def evaluate(graph: Graph, params: ParamSet, x, y, batch=EVAL_BATCH):
    """Eval-mode ``(accuracy, mean cross-entropy)``."""
    out = graph.softmax_node()
    correct, loss_sum = 0, 0.0
    for i in range(0, len(x), batch):
        probs = forward(graph, params, x[i:i + batch], mode="eval")[out]
        correct += int(np.sum(probs.argmax(axis=1) == y[i:i + batch]))
        loss_sum += cross_entropy(probs, y[i:i + batch]) * len(probs)
    return correct / len(x), loss_sum / len(x)


class _BatchSchedule:
    """Per-epoch permutations derived from ``(seed, epoch)``, so any step can be resumed."""

    def __init__(self, n, batch_size, seed):
        if batch_size > n:
            raise ValueError(f"batch_size {batch_size} exceeds training set size {n}")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self.per_epoch = n // batch_size
        self._epoch, self._perm = None, None

    def indices(self, step):
        epoch, pos = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._epoch = epoch
            self._perm = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._perm[pos * self.batch_size:(pos + 1) * self.batch_size]


def train(graph: Graph, params: ParamSet, dataset, cfg: TrainConfig, sink=None,
          state: TrainState | None = None, clock=time.perf_counter) -> ParamSet:
    """Run ``cfg.max_steps`` optimizer steps (beyond ``state.step``); returns new parameters.

    ``state`` is updated in place when given.  Metrics rows go to ``sink``
    at the starting step, every ``eval_every`` steps, and at the end.
    """
    params = clone_params(params)
    dtype = next(iter(next(iter(params.values())).values())).dtype
    if state is None:
        state = TrainState.fresh(cfg.optimizer, params)
    elif state.optimizer != cfg.optimizer:
        raise ValueError(f"state is for {state.optimizer!r}, config uses {cfg.optimizer!r}")
    x_train = np.asarray(dataset.x_train, dtype=dtype)
    y_train = np.asarray(dataset.y_train, dtype=np.int64)
    x_eval = np.asarray(dataset.x_eval, dtype=dtype)
    y_eval = np.asarray(dataset.y_eval, dtype=np.int64)
    x_probe, y_probe = x_train[:cfg.train_eval_size], y_train[:cfg.train_eval_size]
    schedule = _BatchSchedule(len(x_train), cfg.batch_size, cfg.seed)
    bn_nodes = {nid: graph.kind(nid) for nid in graph.order if isinstance(graph.kind(nid), BatchNorm)}
    start_clock = clock()
    end = state.step + cfg.max_steps

    def emit():
        if sink is None:
            return
        train_acc, loss = evaluate(graph, params, x_probe, y_probe)
        eval_acc, _ = evaluate(graph, params, x_eval, y_eval)
        sink(MetricsRow(state.step, train_acc, eval_acc, loss, (clock() - start_clock) * 1000.0))

    with threadpool_limits(1):
        emit()
        while state.step < end:
            step = state.step
            idx = schedule.indices(step)
            rng = np.random.default_rng([cfg.seed, step, 1])
            loss, grads, aux = value_and_grad(graph, params, x_train[idx], y_train[idx], "train", rng)
            if not math.isfinite(loss):
                raise TrainingAborted(step, loss)
            for nid, (mean, var) in aux["batch_stats"].items():
                m = dtype.type(bn_nodes[nid].momentum)
                p = params[nid]
                p["running_mean"] = m * p["running_mean"] + (1 - m) * mean
                p["running_var"] = m * p["running_var"] + (1 - m) * var
            apply_update(params, grads, state, cfg, cfg.lr_at(step))
            state.step += 1
            if state.step % cfg.eval_every == 0 or state.step == end:
                emit()
    return params
