"""Dataset ingestion: IDX (MNIST-format) files and a seeded synthetic task."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .netgraph import forward, init_params
from . import zoo

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def input_shape(self):
        return self.x_train.shape[1:]

    def batches(self, batch_size, split="train", limit=None):
        x = self.x_train if split == "train" else self.x_eval
        for n, i in enumerate(range(0, len(x), batch_size)):
            if limit is not None and n >= limit:
                return
            yield x[i:i + batch_size]


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise IdxFormatError(f"{path}: expected {int(np.prod(dims))} data bytes, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path, labels_path, dtype=np.float32):
    """Images as ``[N, 1, H, W]`` scaled to [0, 1], labels as int64 ``[N]``."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(dtype) / dtype(255))[:, None, :, :]
    return x, labels.astype(np.int64)


def idx_dataset(images_path, labels_path, eval_fraction=0.1, dtype=np.float32) -> Dataset:
    """Split one IDX pair into train and held-out eval (the last ``eval_fraction``)."""
    x, y = load_idx(images_path, labels_path, dtype)
    n_eval = max(1, int(round(len(x) * eval_fraction)))
    return Dataset(x[:-n_eval], y[:-n_eval], x[-n_eval:], y[-n_eval:])


# --------------------------------------------------------------------------
# synthetic task
# --------------------------------------------------------------------------

LABELER_WIDTH = 32


def _smooth_fields(rng, n, shape, sigma=1.5):
    """Gaussian-blurred (circular) white noise, rescaled to unit variance."""
    c, h, w = shape
    x = rng.standard_normal((n, c, h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    transfer = np.exp(-2 * (np.pi * sigma) ** 2 * (fy ** 2 + fx ** 2))
    x = np.fft.irfft2(np.fft.rfft2(x) * transfer, s=(h, w))
    return x / x.std()


def labeler_graph(input_shape, n_classes):
    """Fixed random network (two hidden layers of width 32) that defines the labels."""
    if len(input_shape) == 3:
        return zoo.conv_stack(input_shape, channels=(LABELER_WIDTH, LABELER_WIDTH), kernel=3,
                              n_classes=n_classes, batchnorm=False, head="gap", first_stride=2)
    return zoo.mlp(int(np.prod(input_shape)), hidden=(LABELER_WIDTH, LABELER_WIDTH),
                   n_classes=n_classes)


def _balancing_offsets(logits, n_classes, iters=500, temperature=0.05):
    """Per-class logit offsets that make the argmax histogram near uniform.

    Sinkhorn iterations on a low-temperature softmax; the temperature is a
    fraction of the spread of the centered logits.
    """
    offsets = np.zeros(n_classes)
    tau = temperature * (logits - logits.mean(axis=0)).std()
    for _ in range(iters):
        z = (logits + offsets) / tau
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        offsets -= tau * np.log(p.mean(axis=0) * n_classes)
    return offsets


def _margins(logits):
    top2 = np.sort(logits, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def _quotas(n, n_classes):
    return [n // n_classes + (c < n % n_classes) for c in range(n_classes)]


def _stratified_pick(y, margins, n_train, n_eval, n_classes):
    """Per class, the clearest-margin examples up to its quota, split in generation order."""
    train, held = [], []
    for c, qt, qe in zip(range(n_classes), _quotas(n_train, n_classes), _quotas(n_eval, n_classes)):
        idx = np.flatnonzero(y == c)
        if len(idx) < qt + qe:
            return None
        best = np.sort(idx[np.argsort(-margins[idx], kind="stable")[:qt + qe]])
        train.append(best[:qt])
        held.append(best[qt:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def synthetic(seed=0, n_classes=4, input_shape=(1, 16, 16), n_train=2000, n_eval=1000,
              margin_keep=0.5, dtype=np.float32) -> Dataset:
    """Inputs from the seed, labels from a seeded random labeler network.

    Roughly ``(n_train + n_eval) / margin_keep`` candidates are labelled.
    Every class then keeps an equal share of examples, preferring those with
    the clearest top-2 logit gap, which removes near-ties from the task.
    Within a class the earliest survivors (in generation order) go to train.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if not 0 < margin_keep <= 1:
        raise ValueError("margin_keep must be in (0, 1]")
    input_shape = tuple(input_shape)
    rng = np.random.default_rng([seed, 0x5EED])
    g = labeler_graph(input_shape, n_classes)
    p = init_params(g, rng, dtype=np.float64)
    logits_id = g[g.softmax_node()].inputs[0]
    pool = int(np.ceil(1.25 * (n_train + n_eval) / margin_keep)) + 4 * n_classes
    xs, ls = [], []
    pick, total = None, 0
    while pick is None:
        x = _smooth_fields(rng, pool, input_shape) if len(input_shape) == 3 else \
            rng.standard_normal((pool,) + input_shape)
        flat = x if len(input_shape) == 3 else x.reshape(pool, -1)
        xs.append(x)
        ls.append(np.concatenate([forward(g, p, flat[i:i + 512])[logits_id] for i in range(0, pool, 512)]))
        total += pool
        logits = np.concatenate(ls)
        logits = logits + _balancing_offsets(logits, n_classes)
        y = logits.argmax(axis=1)
        pick = _stratified_pick(y, _margins(logits), n_train, n_eval, n_classes)
    x = np.concatenate(xs)
    tr, ev = pick
    return Dataset(x[tr].astype(dtype), y[tr], x[ev].astype(dtype), y[ev])
