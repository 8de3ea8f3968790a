"""Comparison students: random padding and fresh random initialization."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .net2net import TransformReport, _axes, _check_finite, _weight_name, infer_remaps, rebuild_graph
from .netgraph import BatchNorm, Graph, ParamSet, init_layer, init_params, param_dtype


def random_pad_baseline(graph: Graph, params: ParamSet, spec: Mapping[str, int], rng=None):
    """Widen by appending randomly initialized units, with no preservation.

    The student has exactly the architecture :func:`~n2n.net2net.widen`
    would produce.  Existing entries stay where they were, unchanged, and
    every new entry is drawn from the layer's own initializer (He-normal
    weights, zero bias, identity batch norm).  Returns
    ``(student_graph, student_params, report)``.
    """
    rng = np.random.default_rng(rng)
    plan = infer_remaps(graph, spec, rng)
    _check_finite(params)
    student = rebuild_graph(graph, {k: u.q for k, u in plan.units.items()})
    dtype = param_dtype(params)
    new_params: ParamSet = {}
    affected = []
    for nid in graph.order:
        if nid not in params:
            continue
        kind = student.kind(nid)
        fresh = init_layer(kind, rng, dtype)
        old = params[nid]
        if isinstance(kind, BatchNorm):
            n = len(old["gamma"])
            for name, v in old.items():
                fresh[name][:n] = v
        else:
            wname = _weight_name(kind)
            w = old[wname]
            in_axis, out_axis = _axes(kind)
            idx = [slice(None)] * w.ndim
            idx[in_axis] = slice(0, w.shape[in_axis])
            idx[out_axis] = slice(0, w.shape[out_axis])
            fresh[wname][tuple(idx)] = w
            fresh["bias"][:len(old["bias"])] = old["bias"]
        if any(fresh[k].shape != v.shape for k, v in old.items()):
            affected.append(nid)
        new_params[nid] = fresh
    return student, new_params, TransformReport("random_pad", affected)


def random_init_baseline(graph: Graph, rng=None, dtype=np.float32):
    """Fresh parameters for ``graph`` from the default initializer."""
    return graph, init_params(graph, rng, dtype)
