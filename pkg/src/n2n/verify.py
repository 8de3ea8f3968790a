"""Independent checks: function preservation, finite-difference gradients,
and a literal nested-loop evaluation of the widening weight formula."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .netgraph import Graph, TRAINABLE, backward, forward, param_dtype


class StructureError(ValueError):
    """Teacher and student cannot be compared (different input/output shapes)."""


@dataclass
class PreservationReport:
    n_samples: int
    max_abs_diff: float
    mean_abs_diff: float
    argmax_agreement: float
    passed: bool
    tolerance: float

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "max_abs_diff": self.max_abs_diff,
                "mean_abs_diff": self.mean_abs_diff, "argmax_agreement": self.argmax_agreement,
                "passed": self.passed, "tolerance": self.tolerance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def normal_sampler(shape, dtype):
    """Standard-normal inputs of per-example ``shape``."""
    def sample(rng, n):
        return rng.standard_normal((n,) + tuple(shape)).astype(dtype)
    return sample


def _unpack(net):
    if hasattr(net, "graph") and hasattr(net, "params"):
        return net.graph, net.params
    return net


def check_preserved(teacher, student, sampler=None, n=256, tol=1e-5, seed=0, batch_size=64,
                    compare="output") -> PreservationReport:
    """Compare eval-mode outputs of ``teacher`` and ``student`` on ``n`` sampled inputs.

    ``compare="logits"`` compares the input of the softmax instead of the
    probabilities.
    """
    tg, tp = _unpack(teacher)
    sg, sp = _unpack(student)
    if tuple(tg.input_shape[1:]) != tuple(sg.input_shape[1:]):
        raise StructureError(f"input shapes differ: {tg.input_shape} vs {sg.input_shape}")

    def output_node(g):
        out = g.output_id
        if compare == "logits":
            return g[g.softmax_node()].inputs[0]
        return out

    t_out, s_out = output_node(tg), output_node(sg)
    if tuple(tg.shapes[t_out][1:]) != tuple(sg.shapes[s_out][1:]):
        raise StructureError(f"output shapes differ: {tg.shapes[t_out]} vs {sg.shapes[s_out]}")
    dtype = param_dtype(tp)
    if param_dtype(sp) != dtype:
        raise StructureError(f"parameter dtypes differ: {dtype} vs {param_dtype(sp)}")
    sampler = sampler or normal_sampler(tg.input_shape[1:], dtype)
    rng = np.random.default_rng(seed)

    max_diff, total, count, agree = 0.0, 0.0, 0, 0
    remaining = n
    while remaining > 0:
        b = min(batch_size, remaining)
        x = np.asarray(sampler(rng, b), dtype=dtype)
        yt = forward(tg, tp, x, mode="eval")[t_out]
        ys = forward(sg, sp, x, mode="eval")[s_out]
        d = np.abs(yt.astype(np.float64) - ys.astype(np.float64))
        max_diff = max(max_diff, float(d.max()))
        total += float(d.sum())
        count += d.size
        if yt.ndim == 2:
            agree += int(np.sum(yt.argmax(axis=1) == ys.argmax(axis=1)))
        else:
            agree += b
        remaining -= b
    return PreservationReport(n_samples=n, max_abs_diff=max_diff, mean_abs_diff=total / count,
                              argmax_agreement=agree / n, passed=bool(max_diff <= tol),
                              tolerance=float(tol))


def grad_check(graph: Graph, params, x, labels, eps=1e-5, threshold=1e-4, mode="train", seed=0,
               max_coords=10_000, grads=None, floor=1e-6, order=2):
    """Largest relative error between analytic and central-difference gradients.

    Every trainable coordinate is perturbed unless there are more than
    ``max_coords``, in which case a seeded subsample is used.  Dropout masks
    are reproduced on each evaluation through the fixed ``seed``.  Pass
    ``grads`` to check a gradient other than the one from :func:`backward`.
    ``order=4`` switches to the five-point stencil for tighter checks.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    if param_dtype(params) != np.float64:
        raise TypeError("grad_check requires float64 parameters")
    x = np.asarray(x, dtype=np.float64)
    if grads is None:
        _, grads = backward(graph, params, x, labels, mode=mode, rng=seed)
    coords = [(nid, name, idx) for nid in sorted(params) for name in sorted(params[nid])
              if name in TRAINABLE for idx in np.ndindex(params[nid][name].shape)]
    if len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def loss_at(arr, idx, value):
        arr[idx] = value
        loss, _ = backward(graph, params, x, labels, mode=mode, rng=seed)
        return loss

    worst = 0.0
    for nid, name, idx in coords:
        arr = params[nid][name]
        orig = arr[idx]
        if order == 2:
            numeric = (loss_at(arr, idx, orig + eps) - loss_at(arr, idx, orig - eps)) / (2 * eps)
        else:
            numeric = (8 * (loss_at(arr, idx, orig + eps) - loss_at(arr, idx, orig - eps))
                       - (loss_at(arr, idx, orig + 2 * eps) - loss_at(arr, idx, orig - 2 * eps))) / (12 * eps)
        arr[idx] = orig
        analytic = float(grads[nid][name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def chain_mappings(graph: Graph, plan, layers):
    """Per-interface mappings ``g(0) .. g(L)`` of a chain of layers under ``plan``.

    Interfaces without a widened layer get the identity mapping.
    """
    maps = []
    first = layers[0]
    m = plan.input_mapping(graph, first)
    maps.append(np.arange(graph.kind(first).in_features) if m is None else m)
    for nid in layers:
        if nid in plan.units:
            maps.append(plan.units[nid].mapping)
        else:
            maps.append(np.arange(graph.channels(nid)))
    return maps


def alg1_reference(weights, plan, layers=None, graph=None, biases=None):
    """Widened chain weights by direct evaluation of
    ``U[k, j] = W[g_in(k), g_out(j)] / |{x : g_in(x) = g_in(k)}|``.

    ``plan`` is either a list of interface mappings ``g(0) .. g(L)`` or a
    :class:`~n2n.net2net.RemapPlan` together with the chain's ``layers`` and
    ``graph``.  Biases, when given, are treated as an extra weight row fed by
    a constant unit that is never replicated.
    """
    maps = plan if layers is None else chain_mappings(graph, plan, layers)
    if len(maps) != len(weights) + 1:
        raise ValueError(f"{len(weights)} layers need {len(weights) + 1} mappings, got {len(maps)}")
    out_w, out_b = [], []
    for i, w in enumerate(weights):
        g_in, g_out = [int(v) for v in maps[i]], [int(v) for v in maps[i + 1]]
        if max(g_in) >= w.shape[0] or max(g_out) >= w.shape[1]:
            raise ValueError(f"layer {i}: mapping exceeds weight shape {w.shape}")
        u = np.empty((len(g_in), len(g_out)), dtype=w.dtype)
        for k in range(len(g_in)):
            c = len([x for x in range(len(g_in)) if g_in[x] == g_in[k]])
            for j in range(len(g_out)):
                u[k, j] = w[g_in[k], g_out[j]] / w.dtype.type(c)
        out_w.append(u)
        if biases is not None:
            b = biases[i]
            out_b.append(np.array([b[g_out[j]] for j in range(len(g_out))], dtype=b.dtype))
    return out_w if biases is None else (out_w, out_b)
