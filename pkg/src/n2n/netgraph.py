"""Computation-graph IR: typed layer nodes in a DAG.

Activations carry the batch on axis 0 and channels/units on axis 1.  A
``ParamSet`` is a plain ``dict`` mapping node id to a ``dict`` of named
parameter arrays; graphs and parameter sets are never mutated by
evaluation, so the same pair can be shared by concurrent readers.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ConvGeometry, DimensionError

ParamSet = Dict[str, Dict[str, np.ndarray]]


class GraphError(ValueError):
    """Structural problem with a graph (cycles, arity, shapes)."""


# --------------------------------------------------------------------------
# node kinds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Input:
    shape: tuple


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    geom: ConvGeometry


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class Maxout:
    k: int


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    epsilon: float = 1e-5
    momentum: float = 0.9


@dataclass(frozen=True)
class Concat:
    axis: int = 1


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Pool2D:
    mode: str
    size: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class SoftmaxOutput:
    pass


KINDS = {cls.__name__: cls for cls in (
    Input, Dense, Conv2D, ReLU, Sigmoid, Maxout, BatchNorm, Concat, Dropout,
    Pool2D, GlobalAvgPool, Flatten, SoftmaxOutput)}

PARAMETRIC = (Dense, Conv2D, BatchNorm)
TRAINABLE = {"weight", "bias", "kernel", "gamma", "beta"}
# nodes whose output channel i depends only on input channel i
CHANNELWISE = (ReLU, Sigmoid, Dropout, BatchNorm, Pool2D, GlobalAvgPool)


def kind_to_dict(kind) -> dict:
    d = asdict(kind)
    if isinstance(kind, Input):
        d["shape"] = list(kind.shape)
    d["type"] = type(kind).__name__
    return d


def kind_from_dict(d: Mapping):
    d = dict(d)
    cls = KINDS[d.pop("type")]
    if cls is Conv2D:
        return Conv2D(ConvGeometry(**d["geom"]))
    if cls is Input:
        return Input(tuple(d["shape"]))
    return cls(**d)


def param_shapes(kind) -> dict:
    if isinstance(kind, Dense):
        return {"weight": (kind.in_features, kind.out_features), "bias": (kind.out_features,)}
    if isinstance(kind, Conv2D):
        g = kind.geom
        return {"kernel": (g.out_channels, g.in_channels, g.kernel_h, g.kernel_w),
                "bias": (g.out_channels,)}
    if isinstance(kind, BatchNorm):
        c = (kind.channels,)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


@dataclass(frozen=True)
class Node:
    id: str
    kind: object
    inputs: tuple = field(default_factory=tuple)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

class Graph:
    """An immutable DAG of layer nodes with inferred activation shapes.

    ``nodes`` is an ordered iterable of ``(id, kind, inputs)`` triples;
    ``outputs`` defaults to every node without successors.
    """

    def __init__(self, nodes: Iterable, outputs: Sequence[str] | None = None):
        self.nodes: dict[str, Node] = {}
        for spec in nodes:
            node = spec if isinstance(spec, Node) else Node(spec[0], spec[1], tuple(spec[2]))
            if node.id in self.nodes:
                raise GraphError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        for node in self.nodes.values():
            for p in node.inputs:
                if p not in self.nodes:
                    raise GraphError(f"node {node.id!r} references unknown input {p!r}")
            self._check_arity(node)
        self._succ = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for p in node.inputs:
                self._succ[p].append(node.id)
        self.order = self._topological_order()
        if outputs is None:
            outputs = [nid for nid in self.nodes if not self._succ[nid]]
        self.outputs = list(outputs)
        for o in self.outputs:
            if o not in self.nodes:
                raise GraphError(f"unknown output {o!r}")
        self.shapes = self._infer_shapes()

    @staticmethod
    def _check_arity(node):
        n = len(node.inputs)
        if isinstance(node.kind, Input):
            if n:
                raise GraphError(f"input node {node.id!r} cannot have predecessors")
        elif isinstance(node.kind, Concat):
            if n < 2:
                raise GraphError(f"concat {node.id!r} needs >= 2 inputs, has {n}")
            if node.kind.axis != 1:
                raise GraphError(f"concat {node.id!r}: only the channel axis (1) is supported")
        elif n != 1:
            raise GraphError(f"node {node.id!r} ({type(node.kind).__name__}) needs exactly 1 input, has {n}")

    def _topological_order(self):
        # Kahn's algorithm, ties broken by insertion order for stable output
        position = {nid: i for i, nid in enumerate(self.nodes)}
        indeg = {nid: len(n.inputs) for nid, n in self.nodes.items()}
        ready = sorted((nid for nid, d in indeg.items() if d == 0), key=position.get)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for s in self._succ[nid]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    ready.append(s)
                    ready.sort(key=position.get)
        if len(order) != len(self.nodes):
            stuck = [nid for nid in self.nodes if nid not in set(order)]
            raise GraphError(f"graph contains a cycle through {stuck}")
        return order

    def _infer_shapes(self):
        shapes = {}
        for nid in self.order:
            node = self.nodes[nid]
            try:
                shapes[nid] = _node_shape(node.kind, [shapes[p] for p in node.inputs])
            except DimensionError as exc:
                raise GraphError(f"shape inference failed at node {nid!r}: {exc}") from exc
        return shapes

    # -- queries -------------------------------------------------------------

    def __getitem__(self, nid) -> Node:
        return self.nodes[nid]

    def __contains__(self, nid):
        return nid in self.nodes

    def __len__(self):
        return len(self.nodes)

    def kind(self, nid):
        return self.nodes[nid].kind

    def successors(self, nid) -> list[str]:
        return list(self._succ[nid])

    @property
    def input_id(self) -> str:
        ids = [nid for nid, n in self.nodes.items() if isinstance(n.kind, Input)]
        if len(ids) != 1:
            raise GraphError(f"expected exactly one input node, found {ids}")
        return ids[0]

    @property
    def input_shape(self) -> tuple:
        return self.nodes[self.input_id].kind.shape

    @property
    def output_id(self) -> str:
        if len(self.outputs) != 1:
            raise GraphError(f"graph has {len(self.outputs)} outputs")
        return self.outputs[0]

    def softmax_node(self) -> str:
        ids = [nid for nid in self.order if isinstance(self.kind(nid), SoftmaxOutput)]
        if len(ids) != 1:
            raise GraphError(f"expected exactly one SoftmaxOutput node, found {len(ids)}")
        return ids[0]

    def parametric_nodes(self) -> list[str]:
        return [nid for nid in self.order if isinstance(self.kind(nid), PARAMETRIC)]

    def node_list(self) -> list[Node]:
        return list(self.nodes.values())

    def channels(self, nid) -> int:
        return self.shapes[nid][1]

    def __eq__(self, other):
        return (isinstance(other, Graph) and self.node_list() == other.node_list()
                and self.outputs == other.outputs)

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, outputs={self.outputs})"

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {"nodes": [{"id": n.id, "kind": kind_to_dict(n.kind), "inputs": list(n.inputs)}
                          for n in self.nodes.values()],
                "outputs": list(self.outputs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Graph":
        return cls([(n["id"], kind_from_dict(n["kind"]), n["inputs"]) for n in d["nodes"]],
                   outputs=d["outputs"])


def _node_shape(kind, in_shapes):
    if isinstance(kind, Input):
        if not kind.shape or any(int(d) < 1 for d in kind.shape):
            raise DimensionError(f"invalid input shape {kind.shape}")
        return tuple(int(d) for d in kind.shape)
    (s,) = in_shapes if not isinstance(kind, Concat) else (None,)
    if isinstance(kind, Dense):
        if len(s) != 2 or s[1] != kind.in_features:
            raise DimensionError(f"Dense expects [N,{kind.in_features}], got {list(s)}")
        return (s[0], kind.out_features)
    if isinstance(kind, Conv2D):
        g = kind.geom
        if len(s) != 4 or s[1] != g.in_channels:
            raise DimensionError(f"Conv2D expects [N,{g.in_channels},H,W], got {list(s)}")
        return (s[0], g.out_channels) + g.output_hw(s[2], s[3])
    if isinstance(kind, (ReLU, Sigmoid, Dropout)):
        return s
    if isinstance(kind, Maxout):
        if s[1] % kind.k:
            raise DimensionError(f"Maxout k={kind.k} does not divide {s[1]} units")
        return (s[0], s[1] // kind.k) + s[2:]
    if isinstance(kind, BatchNorm):
        if s[1] != kind.channels:
            raise DimensionError(f"BatchNorm expects {kind.channels} channels, got {s[1]}")
        return s
    if isinstance(kind, Concat):
        ranks = {len(x) for x in in_shapes}
        trailing = {tuple(x[2:]) for x in in_shapes}
        if len(ranks) != 1 or len(trailing) != 1:
            raise DimensionError(f"Concat inputs disagree off the channel axis: {[list(x) for x in in_shapes]}")
        return (in_shapes[0][0], sum(x[1] for x in in_shapes)) + in_shapes[0][2:]
    if isinstance(kind, Pool2D):
        if len(s) != 4:
            raise DimensionError(f"Pool2D expects rank 4, got {list(s)}")
        if kind.mode not in ("max", "avg"):
            raise DimensionError(f"unknown pool mode {kind.mode!r}")
        return s[:2] + T.pool_output_hw(s[2], s[3], kind.size, kind.stride, kind.pad)
    if isinstance(kind, GlobalAvgPool):
        if len(s) != 4:
            raise DimensionError(f"GlobalAvgPool expects rank 4, got {list(s)}")
        return s[:2]
    if isinstance(kind, Flatten):
        return (s[0], int(np.prod(s[1:])))
    if isinstance(kind, SoftmaxOutput):
        if len(s) != 2:
            raise DimensionError(f"SoftmaxOutput expects [N,classes], got {list(s)}")
        return s
    raise DimensionError(f"unknown node kind {kind!r}")


def infer_shapes(graph: Graph) -> dict:
    return dict(graph.shapes)


def topological_order(graph: Graph) -> list[str]:
    return list(graph.order)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def init_params(graph: Graph, rng=None, dtype=np.float32) -> ParamSet:
    """He-normal weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(rng)
    params: ParamSet = {}
    for nid in graph.order:
        kind = graph.kind(nid)
        if isinstance(kind, (Dense, Conv2D)):
            params[nid] = init_layer(kind, rng, dtype)
        elif isinstance(kind, BatchNorm):
            params[nid] = init_layer(kind, rng, dtype)
    return params


def fan_in(kind) -> int:
    if isinstance(kind, Dense):
        return kind.in_features
    g = kind.geom
    return g.in_channels * g.kernel_h * g.kernel_w


def init_layer(kind, rng, dtype=np.float32) -> dict:
    shapes = param_shapes(kind)
    if isinstance(kind, BatchNorm):
        c = shapes["gamma"]
        return {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
                "running_mean": np.zeros(c, dtype), "running_var": np.ones(c, dtype)}
    wname = "weight" if isinstance(kind, Dense) else "kernel"
    std = math.sqrt(2.0 / fan_in(kind))
    return {wname: (rng.standard_normal(shapes[wname]) * std).astype(dtype),
            "bias": np.zeros(shapes["bias"], dtype)}


def validate_params(graph: Graph, params: ParamSet) -> None:
    for nid in graph.order:
        expected = param_shapes(graph.kind(nid))
        got = params.get(nid, {})
        if set(got) != set(expected):
            raise GraphError(f"node {nid!r} expects parameters {sorted(expected)}, has {sorted(got)}")
        for name, shape in expected.items():
            if tuple(got[name].shape) != tuple(shape):
                raise GraphError(f"{nid}.{name} has shape {got[name].shape}, expected {shape}")
    extra = set(params) - set(graph.nodes)
    if extra:
        raise GraphError(f"parameters for unknown nodes {sorted(extra)}")


def param_dtype(params: ParamSet) -> np.dtype:
    dtypes = {a.dtype for group in params.values() for a in group.values()}
    if len(dtypes) != 1:
        raise TypeError(f"parameter set mixes dtypes {sorted(map(str, dtypes))}")
    return dtypes.pop()


def cast_params(params: ParamSet, dtype) -> ParamSet:
    return {nid: {k: v.astype(dtype) for k, v in group.items()} for nid, group in params.items()}


def clone_params(params: ParamSet) -> ParamSet:
    return {nid: {k: v.copy() for k, v in group.items()} for nid, group in params.items()}


def clone(graph: Graph, params: ParamSet):
    return copy.deepcopy(graph), clone_params(params)


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {nid: {k: np.zeros_like(v) for k, v in group.items()} for nid, group in params.items()}


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _as_rng(rng):
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_input(graph, params, x):
    expected = graph.input_shape
    if x.ndim != len(expected) or tuple(x.shape[1:]) != tuple(expected[1:]):
        raise DimensionError(f"input shape {x.shape} does not match {expected} (batch axis free)")
    if params:
        dt = param_dtype(params)
        if x.dtype != dt:
            raise TypeError(f"input dtype {x.dtype} does not match parameter dtype {dt}")


def _bc(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _forward(graph, params, x, mode, rng, keep_cache):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_input(graph, params, x)
    rng = _as_rng(rng)
    acts = {}
    cache = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        kind = node.kind
        ins = [acts[p] for p in node.inputs]
        if isinstance(kind, Input):
            out = x
        elif isinstance(kind, Dense):
            p = params[nid]
            out = T.matmul(ins[0], p["weight"]) + p["bias"]
        elif isinstance(kind, Conv2D):
            p = params[nid]
            out = T.add_bias(T.conv2d(ins[0], p["kernel"], kind.geom), p["bias"])
        elif isinstance(kind, ReLU):
            out = T.relu(ins[0])
        elif isinstance(kind, Sigmoid):
            out = T.sigmoid(ins[0])
        elif isinstance(kind, Maxout):
            out = T.maxout(ins[0], kind.k)
        elif isinstance(kind, BatchNorm):
            p = params[nid]
            h = ins[0]
            if mode == "train":
                mean, var = T.batch_moments(h)
            else:
                mean, var = p["running_mean"], p["running_var"]
            inv_std = 1 / np.sqrt(var + h.dtype.type(kind.epsilon))
            xhat = (h - _bc(mean, h.ndim)) * _bc(inv_std, h.ndim)
            out = xhat * _bc(p["gamma"], h.ndim) + _bc(p["beta"], h.ndim)
            if keep_cache:
                cache[nid] = {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var}
        elif isinstance(kind, Concat):
            out = np.concatenate(ins, axis=1)
        elif isinstance(kind, Dropout):
            if mode == "train" and kind.rate > 0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep = rng.random(ins[0].shape) >= kind.rate
                mask = keep.astype(ins[0].dtype) / ins[0].dtype.type(1 - kind.rate)
                out = ins[0] * mask
                if keep_cache:
                    cache[nid] = mask
            else:
                out = ins[0]
        elif isinstance(kind, Pool2D):
            if kind.mode == "max":
                out, arg = T.max_pool2d(ins[0], kind.size, kind.stride, kind.pad)
                if keep_cache:
                    cache[nid] = arg
            else:
                out = T.avg_pool2d(ins[0], kind.size, kind.stride, kind.pad)
        elif isinstance(kind, GlobalAvgPool):
            out = ins[0].mean(axis=(2, 3))
        elif isinstance(kind, Flatten):
            out = ins[0].reshape(ins[0].shape[0], -1)
        elif isinstance(kind, SoftmaxOutput):
            out = T.softmax(ins[0])
        else:  # pragma: no cover - guarded by shape inference
            raise GraphError(f"cannot evaluate {kind!r}")
        acts[nid] = out
    return acts, cache


def forward(graph: Graph, params: ParamSet, x, mode="eval", rng=None) -> dict:
    """Evaluate every node; returns ``{node_id: activation}``."""
    acts, _ = _forward(graph, params, x, mode, rng, keep_cache=False)
    return acts


def predict(graph: Graph, params: ParamSet, x, mode="eval", rng=None):
    """Activation of the graph's single output node."""
    return forward(graph, params, x, mode, rng)[graph.output_id]


def batch_statistics(graph: Graph, params: ParamSet, x, rng=None) -> dict:
    """Train-mode batch moments seen by every BatchNorm node."""
    _, cache = _forward(graph, params, x, "train", rng, keep_cache=True)
    return {nid: (c["mean"], c["var"]) for nid, c in cache.items()
            if isinstance(graph.kind(nid), BatchNorm)}


def cross_entropy(probs, labels):
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    tiny = np.finfo(probs.dtype).tiny
    return float(-np.mean(np.log(np.maximum(picked, tiny))))


def value_and_grad(graph: Graph, params: ParamSet, x, labels, mode="train", rng=None):
    """Mean softmax cross-entropy, its gradients, and auxiliary outputs.

    Returns ``(loss, grads, aux)`` where ``aux`` carries the activations and
    the train-mode batch moments of every BatchNorm node.
    """
    out_id = graph.softmax_node()
    labels = np.asarray(labels, dtype=np.int64)
    acts, cache = _forward(graph, params, x, mode, rng, keep_cache=True)
    probs = acts[out_id]
    if labels.shape != (probs.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {probs.shape[0]}")
    loss = cross_entropy(probs, labels)

    n = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1
    grads = zeros_like_params(params)
    dacts = {}
    # d loss / d logits lives on the SoftmaxOutput's predecessor
    dacts[graph[out_id].inputs[0]] = (probs - onehot) / probs.dtype.type(n)

    for nid in reversed(graph.order):
        if nid not in dacts or nid == out_id:
            continue
        node = graph.nodes[nid]
        kind = node.kind
        dy = dacts.pop(nid)
        if isinstance(kind, Input):
            continue
        xin = [acts[p] for p in node.inputs]
        if isinstance(kind, Dense):
            W = params[nid]["weight"]
            grads[nid]["weight"] = xin[0].T @ dy
            grads[nid]["bias"] = dy.sum(axis=0)
            dx = [dy @ W.T]
        elif isinstance(kind, Conv2D):
            dxi, dk = T.conv2d_backward(xin[0], params[nid]["kernel"], kind.geom, dy)
            grads[nid]["kernel"] = dk
            grads[nid]["bias"] = dy.sum(axis=(0, 2, 3))
            dx = [dxi]
        elif isinstance(kind, ReLU):
            dx = [dy * (xin[0] > 0)]
        elif isinstance(kind, Sigmoid):
            s = acts[nid]
            dx = [dy * s * (1 - s)]
        elif isinstance(kind, Maxout):
            dx = [T.maxout_backward(xin[0], kind.k, dy)]
        elif isinstance(kind, BatchNorm):
            c = cache[nid]
            nd = dy.ndim
            axes = (0,) + tuple(range(2, nd))
            gamma = params[nid]["gamma"]
            grads[nid]["gamma"] = (dy * c["xhat"]).sum(axis=axes)
            grads[nid]["beta"] = dy.sum(axis=axes)
            dxhat = dy * _bc(gamma, nd)
            if mode == "train":
                m = dy.size // dy.shape[1]
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * c["xhat"]).sum(axis=axes)
                dxi = (dxhat - _bc(s1 / m, nd) - c["xhat"] * _bc(s2 / m, nd)) * _bc(c["inv_std"], nd)
            else:
                dxi = dxhat * _bc(c["inv_std"], nd)
            dx = [dxi]
        elif isinstance(kind, Concat):
            bounds = np.cumsum([a.shape[1] for a in xin])[:-1]
            dx = np.split(dy, bounds, axis=1)
        elif isinstance(kind, Dropout):
            dx = [dy * cache[nid]] if nid in cache else [dy]
        elif isinstance(kind, Pool2D):
            if kind.mode == "max":
                dx = [T.max_pool2d_backward(dy, cache[nid], xin[0].shape)]
            else:
                dx = [T.avg_pool2d_backward(dy, kind.size, kind.stride, kind.pad, xin[0].shape)]
        elif isinstance(kind, GlobalAvgPool):
            h, w = xin[0].shape[2:]
            dx = [np.broadcast_to(dy[:, :, None, None] / dy.dtype.type(h * w), xin[0].shape).copy()]
        elif isinstance(kind, Flatten):
            dx = [dy.reshape(xin[0].shape)]
        elif isinstance(kind, SoftmaxOutput):  # pragma: no cover - only one allowed
            continue
        else:  # pragma: no cover
            raise GraphError(f"no gradient for {kind!r}")
        for p, d in zip(node.inputs, dx):
            d = d.astype(xin[0].dtype, copy=False)
            dacts[p] = dacts[p] + d if p in dacts else d

    aux = {"acts": acts,
           "batch_stats": {nid: (c["mean"], c["var"]) for nid, c in cache.items()
                           if isinstance(graph.kind(nid), BatchNorm) and mode == "train"}}
    return loss, grads, aux


def backward(graph: Graph, params: ParamSet, x, labels, mode="train", rng=None):
    """Returns ``(loss_value, grads)`` with ``grads`` shaped like ``params``."""
    loss, grads, _ = value_and_grad(graph, params, x, labels, mode, rng)
    return loss, grads
