"""scikit-learn style wrappers around the surgery operators and training loop.

The transformers act on :class:`Network` values (graph plus parameters)
rather than feature matrices: ``fit`` draws the random plan and
``transform`` applies it, so one fitted widener can be reused on several
snapshots of the same teacher.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from . import zoo
from .datasets import Dataset
from .net2net import NoiseConfig, deepen, infer_remaps, widen
from .netgraph import Graph, ParamSet, clone_params, forward, init_params, param_dtype, validate_params
from .train import TrainConfig, TrainState, train


@dataclass
class Network:
    graph: Graph
    params: ParamSet

    def copy(self) -> "Network":
        return Network(self.graph, clone_params(self.params))


def check_network(net) -> Network:
    """Accept a :class:`Network` or a ``(graph, params)`` pair; validate shapes."""
    if isinstance(net, tuple) and len(net) == 2:
        net = Network(*net)
    if not isinstance(net, Network):
        raise TypeError(f"expected a Network or (graph, params), got {type(net).__name__}")
    validate_params(net.graph, net.params)
    return net


def _noise(relative_std, seed):
    return NoiseConfig(relative_std=float(relative_std), seed=int(seed))


class Net2WiderNet(TransformerMixin, BaseEstimator):
    """Function-preserving widening of the layers named in ``spec``."""

    def __init__(self, spec=None, noise=0.0, random_state=0):
        self.spec = spec
        self.noise = noise
        self.random_state = random_state

    def fit(self, X, y=None):
        net = check_network(X)
        if not self.spec:
            raise ValueError("spec must name at least one layer")
        self.plan_ = infer_remaps(net.graph, dict(self.spec), np.random.default_rng(self.random_state))
        self.teacher_graph_ = net.graph
        return self

    def transform(self, X):
        check_is_fitted(self, "plan_")
        net = check_network(X)
        if net.graph != self.teacher_graph_:
            raise ValueError("network architecture differs from the one the plan was fitted on")
        g, p, _, self.report_ = widen(net.graph, net.params, dict(self.spec),
                                      noise=_noise(self.noise, self.random_state), plan=self.plan_)
        return Network(g, p)


class Net2DeeperNet(TransformerMixin, BaseEstimator):
    """Insert identity layers after each activation listed in ``at``.

    ``calib`` (an array of inputs) is required when an insertion point sits
    behind batch normalization.
    """

    def __init__(self, at=(), kernel_size=None, noise=0.0, random_state=0, calib_batch=64):
        self.at = at
        self.kernel_size = kernel_size
        self.noise = noise
        self.random_state = random_state
        self.calib_batch = calib_batch

    def fit(self, X, y=None, calib=None):
        net = check_network(X)
        at = [self.at] if isinstance(self.at, str) else list(self.at)
        missing = [a for a in at if a not in net.graph]
        if missing:
            raise ValueError(f"unknown insertion points {missing}")
        self.at_ = at
        self.calib_ = None if calib is None else np.asarray(calib)
        return self

    def transform(self, X):
        check_is_fitted(self, "at_")
        net = check_network(X)
        g, p = net.graph, net.params
        batches = None
        if self.calib_ is not None:
            c = self.calib_.astype(param_dtype(p))
            batches = [c[i:i + self.calib_batch] for i in range(0, len(c), self.calib_batch)]
        self.reports_ = []
        for i, site in enumerate(self.at_):
            g, p, rep = deepen(g, p, site, calib=batches, kernel_size=self.kernel_size,
                               noise=_noise(self.noise, np.random.default_rng([self.random_state, i])
                                            .integers(2**31)))
            self.reports_.append(rep)
        return Network(g, p)


class NetClassifier(ClassifierMixin, BaseEstimator):
    """Train a graph classifier; defaults to an MLP sized from the data.

    ``warm_start`` may be a :class:`Network` (for instance a widened
    teacher) whose parameters seed the fit instead of a fresh draw.
    """

    def __init__(self, hidden=(32,), optimizer="rmsprop", lr=1e-3, batch_size=32, max_steps=200,
                 random_state=0, warm_start=None, dtype="float32"):
        self.hidden = hidden
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.random_state = random_state
        self.warm_start = warm_start
        self.dtype = dtype

    def _x(self, X):
        X = check_array(X, allow_nd=True, dtype=np.dtype(self.dtype))
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.dtype(self.dtype))
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if self.warm_start is not None:
            net = check_network(self.warm_start).copy()
        else:
            g = zoo.mlp(int(np.prod(X.shape[1:])), hidden=tuple(self.hidden),
                        n_classes=len(self.classes_))
            net = Network(g, init_params(g, self.random_state, np.dtype(self.dtype)))
        x = X.reshape((len(X),) + tuple(net.graph.input_shape[1:]))
        cfg = TrainConfig(optimizer=self.optimizer, lr=self.lr,
                          batch_size=min(self.batch_size, len(x)), max_steps=self.max_steps,
                          seed=int(self.random_state))
        codes = codes.astype(np.int64)
        self.state_ = TrainState.fresh(cfg.optimizer, net.params)
        params = train(net.graph, net.params, Dataset(x, codes, x, codes), cfg, state=self.state_)
        self.network_ = Network(net.graph, params)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = self._x(X)
        g = self.network_.graph
        x = X.reshape((len(X),) + tuple(g.input_shape[1:]))
        return forward(g, self.network_.params, x)[g.softmax_node()]

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
