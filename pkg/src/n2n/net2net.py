"""Function-preserving widening and deepening of a graph.

Widening replicates randomly chosen units (channels for convolutions) of
hidden layers and divides the outgoing weights of every replica by its
replication count.  Which downstream tensors must follow a replication is
decided by :func:`infer_remaps`, a forward pass over the DAG that pushes each
node's channel mapping through elementwise nodes, batch norm, concatenation
(with channel offsets) and flattening.

Deepening inserts an identity-initialised layer after a ReLU or maxout
activation, with an optional batch norm whose scale and shift undo the
normalisation of statistics estimated on calibration data.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .netgraph import (CHANNELWISE, BatchNorm, Concat, Conv2D, Dense, Dropout, Flatten, Graph,
                       Maxout, Node, ParamSet, ReLU, Sigmoid, SoftmaxOutput, _node_shape,
                       forward, param_dtype)
from .tensor import ConvGeometry


class WidenError(ValueError):
    """Invalid widening request (bad target, width not increased)."""


class InconsistentPlanError(WidenError):
    """No single channel mapping satisfies every consumer."""


class DeepenError(ValueError):
    pass


class UnsupportedActivationError(DeepenError):
    """The activation after the insertion point has no same-type identity."""


@dataclass(frozen=True)
class NoiseConfig:
    """Gaussian symmetry-breaking noise, ``relative_std`` times the tensor's std."""

    relative_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.relative_std >= 0:
            raise ValueError(f"relative_std must be non-negative, got {self.relative_std}")

    @property
    def enabled(self) -> bool:
        return self.relative_std > 0


DEFAULT_NOISE = 0.01


@dataclass
class UnitRemap:
    """Mapping from the ``q`` new units of a widened layer to its ``n`` old ones."""

    n: int
    q: int
    mapping: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.mapping, minlength=self.n)


@dataclass
class RemapPlan:
    """Output of remapping inference.

    ``units`` holds the random mapping of every widened layer;
    ``activations`` holds, for every node whose output layout changes, the
    old channel index behind each new channel.
    """

    units: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)

    def input_mapping(self, graph: Graph, nid: str):
        return self.activations.get(graph[nid].inputs[0])

    def to_dict(self) -> dict:
        return {"units": {k: {"n": u.n, "q": u.q, "mapping": u.mapping.tolist()}
                          for k, u in self.units.items()},
                "activations": {k: v.tolist() for k, v in self.activations.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RemapPlan":
        units = {k: UnitRemap(u["n"], u["q"], np.asarray(u["mapping"], dtype=np.int64))
                 for k, u in d["units"].items()}
        acts = {k: np.asarray(v, dtype=np.int64) for k, v in d["activations"].items()}
        return cls(units, acts)


@dataclass
class TransformReport:
    op: str
    affected: list
    new_nodes: list = field(default_factory=list)
    noise_std: dict = field(default_factory=dict)
    preservation: object = None

    def to_dict(self) -> dict:
        return {"op": self.op, "affected": list(self.affected), "new_nodes": list(self.new_nodes),
                "noise_std": dict(self.noise_std),
                "preservation": None if self.preservation is None else self.preservation.to_dict()}


def replication_counts(mapping: np.ndarray) -> np.ndarray:
    """For every new position, how many new positions share its source."""
    return np.bincount(mapping)[mapping]


def replica_mask(mapping: np.ndarray) -> np.ndarray:
    """True for positions whose source already appeared earlier (the copies)."""
    seen = np.zeros(int(mapping.max()) + 1, dtype=bool)
    mask = np.empty(len(mapping), dtype=bool)
    for i, m in enumerate(mapping):
        mask[i] = seen[m]
        seen[m] = True
    return mask


# --------------------------------------------------------------------------
# remapping inference
# --------------------------------------------------------------------------

def _walk_channelwise(graph, nid):
    """Nodes reachable from ``nid`` through channelwise nodes, plus the stop nodes."""
    stack, seen, stops = list(graph.successors(nid)), set(), []
    while stack:
        s = stack.pop()
        if s in seen:
            continue
        seen.add(s)
        if isinstance(graph.kind(s), CHANNELWISE):
            if s in graph.outputs:
                stops.append(s)
            stack.extend(graph.successors(s))
        else:
            stops.append(s)
    return stops


def _is_output_layer(graph, nid):
    if nid in graph.outputs:
        return True
    for s in _walk_channelwise(graph, nid):
        kind = graph.kind(s)
        if isinstance(kind, SoftmaxOutput) or (isinstance(kind, CHANNELWISE) and s in graph.outputs):
            return True
    return False


def _piece_size(graph, nid):
    maxouts = sorted((s for s in _walk_channelwise(graph, nid) if isinstance(graph.kind(s), Maxout)),
                     key=graph.order.index)
    ks = {s: graph.kind(s).k for s in maxouts}
    if len(set(ks.values())) > 1:
        a, b = maxouts[0], next(s for s in maxouts if ks[s] != ks[maxouts[0]])
        raise InconsistentPlanError(
            f"inconsistent fork after {nid!r}: consumers {a!r} (k={ks[a]}) and {b!r} (k={ks[b]}) "
            "require different channel groupings")
    return next(iter(ks.values()), 1)


def validate_widen_spec(graph: Graph, spec: Mapping[str, int]) -> None:
    if not spec:
        raise WidenError("empty widen spec")
    for nid, width in spec.items():
        if nid not in graph:
            raise WidenError(f"unknown node {nid!r}")
        kind = graph.kind(nid)
        if not isinstance(kind, (Dense, Conv2D)):
            raise WidenError(f"{nid!r} is a {type(kind).__name__}; only Dense and Conv2D layers are widened")
        old = graph.channels(nid)
        if int(width) <= old:
            raise WidenError(f"{nid!r}: new width {width} must exceed current width {old}")
        if _is_output_layer(graph, nid):
            raise WidenError(f"{nid!r} is an output layer and cannot be widened")


def infer_remaps(graph: Graph, spec: Mapping[str, int], rng=None,
                 fixed: Mapping[str, Sequence[int]] | None = None) -> RemapPlan:
    """Draw a random mapping per widened layer and propagate it through the DAG.

    ``fixed`` supplies explicit unit mappings for some widened layers instead
    of random draws; they must keep the identity prefix.
    """
    rng = np.random.default_rng(rng)
    fixed = fixed or {}
    validate_widen_spec(graph, spec)
    plan = RemapPlan()
    acts = plan.activations
    for nid in graph.order:
        node = graph[nid]
        kind = node.kind
        ins = [acts.get(p) for p in node.inputs]
        if isinstance(kind, (Dense, Conv2D)):
            if nid in spec:
                n, q = graph.channels(nid), int(spec[nid])
                k = _piece_size(graph, nid)
                if n % k or q % k:
                    raise InconsistentPlanError(
                        f"{nid!r}: widths {n}->{q} must be multiples of the maxout group size {k}")
                if nid in fixed:
                    mapping = np.asarray(fixed[nid], dtype=np.int64)
                    if (mapping.shape != (q,) or not np.array_equal(mapping[:n], np.arange(n))
                            or mapping.min() < 0 or mapping.max() >= n):
                        raise WidenError(f"{nid!r}: fixed mapping must have length {q}, "
                                         f"start with 0..{n - 1} and stay below {n}")
                else:
                    extra = rng.integers(0, n // k, size=(q - n) // k)
                    groups = np.concatenate([np.arange(n // k), extra])
                    mapping = (groups[:, None] * k + np.arange(k)).ravel().astype(np.int64)
                plan.units[nid] = UnitRemap(n, q, mapping)
                acts[nid] = mapping
        elif isinstance(kind, CHANNELWISE):
            if ins[0] is not None:
                acts[nid] = ins[0]
        elif isinstance(kind, Maxout):
            m = ins[0]
            if m is not None:
                k = kind.k
                rows = m.reshape(-1, k)
                base = rows[:, 0]
                if np.any(base % k) or not np.array_equal(rows, base[:, None] + np.arange(k)):
                    raise InconsistentPlanError(
                        f"mapping reaching maxout {nid!r} from {node.inputs[0]!r} splits its groups of {k}")
                acts[nid] = base // k
        elif isinstance(kind, Concat):
            if any(m is not None for m in ins):
                parts, offset = [], 0
                for p, m in zip(node.inputs, ins):
                    width = graph.channels(p)
                    parts.append((np.arange(width) if m is None else m) + offset)
                    offset += width
                acts[nid] = np.concatenate(parts)
        elif isinstance(kind, Flatten):
            m = ins[0]
            if m is not None:
                hw = int(np.prod(graph.shapes[node.inputs[0]][2:]))
                acts[nid] = (m[:, None] * hw + np.arange(hw)).ravel()
        elif isinstance(kind, SoftmaxOutput):
            if ins[0] is not None:
                raise WidenError(f"widening would change the network output at {nid!r}")
    for o in graph.outputs:
        if o in acts:
            raise WidenError(f"widening would change graph output {o!r}")
    return plan


# --------------------------------------------------------------------------
# widening
# --------------------------------------------------------------------------

def rebuild_graph(graph: Graph, widths: Mapping[str, int]) -> Graph:
    """Copy of ``graph`` with new output widths for some layers; consumers adapt."""
    shapes = {}
    nodes = []
    for nid in graph.order:
        node = graph[nid]
        kind = node.kind
        ins = [shapes[p] for p in node.inputs]
        if isinstance(kind, Dense):
            kind = Dense(ins[0][1], int(widths.get(nid, kind.out_features)))
        elif isinstance(kind, Conv2D):
            kind = Conv2D(kind.geom.replace(in_channels=ins[0][1],
                                            out_channels=int(widths.get(nid, kind.geom.out_channels))))
        elif isinstance(kind, BatchNorm):
            kind = BatchNorm(ins[0][1], kind.epsilon, kind.momentum)
        shapes[nid] = _node_shape(kind, ins)
        nodes.append(Node(nid, kind, node.inputs))
    order = {nid: i for i, nid in enumerate(graph.nodes)}
    nodes.sort(key=lambda n: order[n.id])
    return Graph(nodes, outputs=graph.outputs)


def _weight_name(kind):
    return "weight" if isinstance(kind, Dense) else "kernel"


def _axes(kind):
    """(input axis, output axis) of a layer's weight tensor."""
    return (0, 1) if isinstance(kind, Dense) else (1, 0)


def remap_weight(w, in_axis, out_axis, in_map=None, out_map=None):
    """Select output units by ``out_map``, input units by ``in_map``, and
    divide by the replication count of each input unit's source."""
    u = w
    if out_map is not None:
        u = np.take(u, out_map, axis=out_axis)
    if in_map is not None:
        u = np.take(u, in_map, axis=in_axis)
        shape = [1] * u.ndim
        shape[in_axis] = -1
        u = u / replication_counts(in_map).astype(u.dtype).reshape(shape)
    if u is w:
        u = w.copy()
    return u


def _check_finite(params):
    for nid, group in params.items():
        for name, v in group.items():
            if not np.all(np.isfinite(v)):
                raise WidenError(f"teacher parameter {nid}.{name} is not finite")


def widen(graph: Graph, params: ParamSet, spec: Mapping[str, int], noise: NoiseConfig | None = None,
          rng=None, plan: RemapPlan | None = None):
    """Net2WiderNet over an arbitrary DAG.

    Returns ``(student_graph, student_params, plan, report)``.
    """
    noise = NoiseConfig() if noise is None else noise
    if plan is None:
        plan = infer_remaps(graph, spec, rng)
    else:
        validate_widen_spec(graph, spec)
    _check_finite(params)
    student = rebuild_graph(graph, {k: u.q for k, u in plan.units.items()})
    new_params: ParamSet = {}
    affected = set(plan.units)
    for nid in graph.order:
        kind = graph.kind(nid)
        if nid not in params:
            continue
        p = params[nid]
        in_map = plan.input_mapping(graph, nid)
        if isinstance(kind, BatchNorm):
            new_params[nid] = {k: (v[in_map] if in_map is not None else v.copy()) for k, v in p.items()}
            if in_map is not None:
                affected.add(nid)
            continue
        out_map = plan.units[nid].mapping if nid in plan.units else None
        wname = _weight_name(kind)
        in_axis, out_axis = _axes(kind)
        new_params[nid] = {
            wname: remap_weight(p[wname], in_axis, out_axis, in_map, out_map),
            "bias": p["bias"][out_map] if out_map is not None else p["bias"].copy(),
        }
        if in_map is not None:
            affected.add(nid)

    noise_std = {}
    if noise.enabled:
        noise_rng = np.random.default_rng(noise.seed)
        for nid in graph.order:
            if nid not in plan.units:
                continue
            kind = graph.kind(nid)
            u = plan.units[nid]
            wname = _weight_name(kind)
            _, out_axis = _axes(kind)
            w = new_params[nid][wname]
            std = noise.relative_std * float(np.std(params[nid][wname]))
            idx = [slice(None)] * w.ndim
            idx[out_axis] = slice(u.n, u.q)
            idx = tuple(idx)
            w[idx] = w[idx] + (noise_rng.standard_normal(w[idx].shape) * std).astype(w.dtype)
            noise_std[nid] = std
    report = TransformReport("widen", sorted(affected, key=graph.order.index), noise_std=noise_std)
    return student, new_params, plan, report


def auto_noise(graph: Graph, spec: Mapping[str, int], seed=0) -> NoiseConfig:
    """Noise disabled when every widened layer feeds dropout, else the default."""
    def feeds_dropout(nid):
        stack = list(graph.successors(nid))
        while stack:
            s = stack.pop()
            kind = graph.kind(s)
            if isinstance(kind, Dropout):
                return True
            if isinstance(kind, (ReLU, Sigmoid, BatchNorm)):
                stack.extend(graph.successors(s))
        return False
    if all(feeds_dropout(nid) for nid in spec):
        return NoiseConfig(0.0, seed)
    return NoiseConfig(DEFAULT_NOISE, seed)


# --------------------------------------------------------------------------
# deepening
# --------------------------------------------------------------------------

def _single_successor(graph, nid):
    succ = graph.successors(nid)
    if len(succ) != 1:
        raise DeepenError(f"{nid!r} has {len(succ)} consumers; insertion point is ambiguous")
    return succ[0]


def _insertion_site(graph, at):
    if at not in graph:
        raise DeepenError(f"unknown node {at!r}")
    if not isinstance(graph.kind(at), (Dense, Conv2D)):
        raise DeepenError(f"{at!r} is a {type(graph.kind(at)).__name__}; deepen after a Dense or Conv2D layer")
    nxt = _single_successor(graph, at)
    bn = None
    if isinstance(graph.kind(nxt), BatchNorm):
        bn = nxt
        nxt = _single_successor(graph, bn)
    act_kind = graph.kind(nxt)
    if not isinstance(act_kind, (ReLU, Maxout)):
        raise UnsupportedActivationError(
            f"{at!r} is followed by {type(act_kind).__name__} ({nxt!r}); an identity layer of the same "
            "type exists only for ReLU and maxout activations")
    return bn, nxt


def _unique(graph, base):
    if base not in graph:
        return base
    for i in itertools.count(2):
        if f"{base}{i}" not in graph:
            return f"{base}{i}"


def _calibration_batches(calib):
    for item in calib:
        yield item[0] if isinstance(item, (tuple, list)) else item


def estimate_moments(graph, params, node, calib):
    """Per-channel mean and population variance of ``node``'s eval-mode activation."""
    dtype = param_dtype(params)
    chunks = [forward(graph, params, np.asarray(x, dtype=dtype), mode="eval")[node]
              for x in _calibration_batches(calib)]
    if not chunks:
        raise DeepenError("batch-norm insertion needs at least one calibration batch")
    acts = np.concatenate(chunks, axis=0).astype(np.float64)
    mean, var = T.batch_moments(acts)
    return mean, var


def deepen(graph: Graph, params: ParamSet, at: str, calib: Iterable | None = None,
           noise: NoiseConfig | None = None, kernel_size: Sequence[int] | None = None,
           name: str | None = None):
    """Net2DeeperNet: insert an identity layer (+BN, +activation) after ``at``'s activation.

    Returns ``(student_graph, student_params, report)``; ``report.new_nodes[0]``
    is the inserted linear layer.
    """
    noise = NoiseConfig() if noise is None else noise
    bn, act = _insertion_site(graph, at)
    at_kind = graph.kind(at)
    act_kind = graph.kind(act)
    dtype = param_dtype(params)
    k = act_kind.k if isinstance(act_kind, Maxout) else 1
    width = graph.channels(act)
    # output unit u*k + r of the new layer copies input unit u
    copy_of = np.repeat(np.arange(width), k)

    lin_id = _unique(graph, name or f"{at}_deep")
    if isinstance(at_kind, Dense):
        lin_kind = Dense(width, width * k)
        weight = np.zeros((width, width * k), dtype=dtype)
        weight[copy_of, np.arange(width * k)] = 1
        lin_params = {"weight": weight, "bias": np.zeros(width * k, dtype=dtype)}
    else:
        kh, kw = kernel_size if kernel_size is not None else (at_kind.geom.kernel_h, at_kind.geom.kernel_w)
        if kh % 2 == 0 or kw % 2 == 0:
            raise DeepenError(f"identity filters need odd kernel dimensions, got {kh}x{kw}")
        lin_kind = Conv2D(ConvGeometry.same(width, width * k, kh, kw))
        kernel = np.zeros((width * k, width, kh, kw), dtype=dtype)
        kernel[np.arange(width * k), copy_of, (kh - 1) // 2, (kw - 1) // 2] = 1
        lin_params = {"kernel": kernel, "bias": np.zeros(width * k, dtype=dtype)}

    new_nodes = [Node(lin_id, lin_kind, (act,))]
    new_params = {nid: {k_: v.copy() for k_, v in g.items()} for nid, g in params.items()}
    new_params[lin_id] = lin_params
    tail = lin_id
    if bn is not None:
        bn_kind = graph.kind(bn)
        bn_id = _unique(graph, f"{lin_id}_bn")
        mean, var = estimate_moments(graph, params, act, calib if calib is not None else [])
        mean = np.repeat(mean, k)
        var = np.repeat(var, k)
        new_params[bn_id] = {
            "gamma": np.sqrt(var + bn_kind.epsilon).astype(dtype),
            "beta": mean.astype(dtype),
            "running_mean": mean.astype(dtype),
            "running_var": var.astype(dtype),
        }
        new_nodes.append(Node(bn_id, BatchNorm(width * k, bn_kind.epsilon, bn_kind.momentum), (tail,)))
        tail = bn_id
    act_id = _unique(graph, f"{lin_id}_{type(act_kind).__name__.lower()}")
    new_nodes.append(Node(act_id, act_kind, (tail,)))

    nodes = []
    for node in graph.node_list():
        if act in node.inputs:
            node = Node(node.id, node.kind, tuple(act_id if p == act else p for p in node.inputs))
        nodes.append(node)
        if node.id == act:
            nodes.extend(new_nodes)
    outputs = [act_id if o == act else o for o in graph.outputs]
    student = Graph(nodes, outputs=outputs)

    noise_std = {}
    if noise.enabled:
        wname = _weight_name(lin_kind)
        std = noise.relative_std * float(np.std(params[at][_weight_name(at_kind)]))
        w = new_params[lin_id][wname]
        w += (np.random.default_rng(noise.seed).standard_normal(w.shape) * std).astype(dtype)
        noise_std[lin_id] = std
    report = TransformReport("deepen", [at], new_nodes=[n.id for n in new_nodes], noise_std=noise_std)
    return student, new_params, report


@dataclass(frozen=True)
class DeepenSpec:
    at: str
    kernel_size: tuple | None = None
    name: str | None = None


def widen_then_deepen(graph, params, wspec, dspecs=(), noise=None, rng=None, calib=None):
    """Apply widening (if ``wspec`` is non-empty) and then each deepening in order."""
    reports = []
    plan = None
    calib = list(calib) if calib is not None else None
    if wspec:
        graph, params, plan, report = widen(graph, params, wspec, noise, rng)
        reports.append(report)
    for d in dspecs:
        d = d if isinstance(d, DeepenSpec) else DeepenSpec(d)
        graph, params, report = deepen(graph, params, d.at, calib=calib, noise=noise,
                                       kernel_size=d.kernel_size, name=d.name)
        reports.append(report)
    return graph, params, plan, reports
