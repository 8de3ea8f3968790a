"""Graph builders: MLP chains, conv stacks, and the toy-Inception classifier."""
from __future__ import annotations

import math

from .netgraph import (BatchNorm, Concat, Conv2D, Dense, Dropout, Flatten, GlobalAvgPool, Graph,
                       Input, Maxout, Node, Pool2D, ReLU, Sigmoid, SoftmaxOutput, _node_shape)
from .tensor import ConvGeometry


class GraphBuilder:
    """Incrementally assemble a graph, inferring layer input widths as it goes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.shapes: dict = {}

    def add(self, nid, kind, *inputs):
        self.shapes[nid] = _node_shape(kind, [self.shapes[p] for p in inputs])
        self.nodes.append(Node(nid, kind, tuple(inputs)))
        return nid

    def channels(self, nid):
        return self.shapes[nid][1]

    def input(self, shape, nid="input"):
        return self.add(nid, Input(tuple(shape)))

    def dense(self, x, out, nid):
        return self.add(nid, Dense(self.channels(x), out), x)

    def conv(self, x, out, kernel, nid, stride=1, pad=None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if pad is None:
            pad = ((kh - 1) // 2, (kw - 1) // 2)
        geom = ConvGeometry(self.channels(x), out, kh, kw, stride, stride, pad[0], pad[1])
        return self.add(nid, Conv2D(geom), x)

    def bn(self, x, nid):
        return self.add(nid, BatchNorm(self.channels(x)), x)

    def conv_bn_relu(self, x, out, kernel, nid, stride=1, dropout=0.0):
        h = self.conv(x, out, kernel, nid, stride=stride)
        h = self.bn(h, f"{nid}_bn")
        h = self.add(f"{nid}_relu", ReLU(), h)
        if dropout:
            h = self.add(f"{nid}_drop", Dropout(dropout), h)
        return h

    def build(self, outputs=None) -> Graph:
        return Graph(self.nodes, outputs=outputs)


def mlp(in_features, hidden=(8,), n_classes=3, activation="relu", batchnorm=False, dropout=0.0,
        maxout_k=2, softmax=True) -> Graph:
    """Dense chain ``fc1 .. fcL`` with activations ``act1 ..`` and output ``logits``."""
    b = GraphBuilder()
    h = b.input((1, in_features))
    for i, width in enumerate(hidden, 1):
        pre = width * maxout_k if activation == "maxout" else width
        h = b.dense(h, pre, f"fc{i}")
        if batchnorm:
            h = b.bn(h, f"bn{i}")
        if activation == "relu":
            h = b.add(f"act{i}", ReLU(), h)
        elif activation == "maxout":
            h = b.add(f"act{i}", Maxout(maxout_k), h)
        elif activation == "sigmoid":
            h = b.add(f"act{i}", Sigmoid(), h)
        else:
            raise ValueError(f"unknown activation {activation!r}")
        if dropout:
            h = b.add(f"drop{i}", Dropout(dropout), h)
    h = b.dense(h, n_classes, "logits")
    if softmax:
        b.add("softmax", SoftmaxOutput(), h)
    return b.build()


def conv_stack(input_shape=(1, 8, 8), channels=(4, 6), kernel=3, n_classes=3, batchnorm=True,
               head="gap", first_stride=1) -> Graph:
    """Conv(+BN)+ReLU layers ``conv1 ..``, then global pooling or flatten, then ``logits``."""
    b = GraphBuilder()
    h = b.input((1,) + tuple(input_shape))
    for i, c in enumerate(channels, 1):
        stride = first_stride if i == 1 else 1
        if batchnorm:
            h = b.conv_bn_relu(h, c, kernel, f"conv{i}", stride=stride)
        else:
            h = b.add(f"conv{i}_relu", ReLU(), b.conv(h, c, kernel, f"conv{i}", stride=stride))
    h = b.add("gap", GlobalAvgPool(), h) if head == "gap" else b.add("flat", Flatten(), h)
    h = b.dense(h, n_classes, "logits")
    b.add("softmax", SoftmaxOutput(), h)
    return b.build()


# (reduce, 1x1 branch, 3x1->1x3 branch, pool-projection branch) per module
INCEPTION_WIDTHS = ((8, 8, 8, 8), (12, 8, 8, 8))


def scaled_widths(widths=INCEPTION_WIDTHS, factor=1.0):
    return tuple(tuple(max(1, int(round(w * factor))) for w in m) for m in widths)


def inception_module(b: GraphBuilder, x, widths, prefix, dropout=0.0):
    """1x1 reduce conv, then three forked paths joined by concatenation."""
    reduce_w, w1, w2, w3 = widths
    h = b.conv_bn_relu(x, reduce_w, 1, f"{prefix}_reduce", dropout=dropout)
    p1 = b.conv_bn_relu(h, w1, 1, f"{prefix}_b1", dropout=dropout)
    p2 = b.conv_bn_relu(h, w2, (3, 1), f"{prefix}_b2a", dropout=dropout)
    p2 = b.conv_bn_relu(p2, w2, (1, 3), f"{prefix}_b2b", dropout=dropout)
    p3 = b.add(f"{prefix}_pool", Pool2D("max", 3, 1, 1), h)
    p3 = b.conv_bn_relu(p3, w3, 1, f"{prefix}_b3", dropout=dropout)
    return b.add(f"{prefix}_concat", Concat(), p1, p2, p3)


def toy_inception(input_shape=(1, 16, 16), n_classes=4, stem=8, widths=INCEPTION_WIDTHS,
                  dropout=0.1, stem_stride=2, unit_dropout=0.0) -> Graph:
    """Stem conv, inception modules ``m1``, ``m2`` ..., global pool, dropout, dense softmax.

    ``unit_dropout`` adds a dropout node (``<conv>_drop``) after every conv
    activation; it is what lets replicated channels drift apart after an
    exact widening.
    """
    b = GraphBuilder()
    h = b.input((1,) + tuple(input_shape))
    h = b.conv_bn_relu(h, stem, 3, "stem", stride=stem_stride, dropout=unit_dropout)
    for i, w in enumerate(widths, 1):
        h = inception_module(b, h, w, f"m{i}", dropout=unit_dropout)
    h = b.add("gap", GlobalAvgPool(), h)
    if dropout:
        h = b.add("drop", Dropout(dropout), h)
    h = b.dense(h, n_classes, "logits")
    b.add("softmax", SoftmaxOutput(), h)
    return b.build()


def widen_spec_between(teacher: Graph, target: Graph) -> dict:
    """Layers that are wider in ``target`` than in ``teacher``, with their target widths."""
    spec = {}
    for nid in teacher.parametric_nodes():
        if isinstance(teacher.kind(nid), (Dense, Conv2D)) and nid in target:
            if target.channels(nid) > teacher.channels(nid):
                spec[nid] = target.channels(nid)
    return spec


def inception_pair_tails(graph: Graph) -> list:
    """Ids of the horizontal (1xk) convs that close each vertical-horizontal pair."""
    tails = []
    for nid in graph.order:
        kind = graph.kind(nid)
        if isinstance(kind, Conv2D) and kind.geom.kernel_h == 1 and kind.geom.kernel_w > 1:
            tails.append(nid)
    return tails


SQRT_03 = math.sqrt(0.3)
