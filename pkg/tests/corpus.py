"""Random (graph, widen spec) trials shared by the property and acceptance suites."""
import numpy as np

from n2n import netgraph as G
from n2n import zoo
from n2n.net2net import _is_output_layer, _piece_size
from n2n.netgraph import BatchNorm, Conv2D, Dense


def randomize(params, rng):
    """Non-trivial biases and batch-norm statistics, so preservation is not vacuous."""
    for group in params.values():
        if "bias" in group:
            group["bias"][...] = 0.1 * rng.standard_normal(group["bias"].shape)
        if "gamma" in group:
            n = group["gamma"].shape
            group["gamma"][...] = rng.uniform(0.5, 1.5, n)
            group["beta"][...] = 0.2 * rng.standard_normal(n)
            group["running_mean"][...] = 0.2 * rng.standard_normal(n)
            group["running_var"][...] = rng.uniform(0.5, 2.0, n)
    return params


def random_graph(rng, family):
    if family == "mlp":
        act = str(rng.choice(["relu", "maxout", "sigmoid"]))
        hidden = tuple(int(w) for w in rng.integers(1, 6, size=rng.integers(1, 4)))
        return zoo.mlp(int(rng.integers(2, 7)), hidden, n_classes=int(rng.integers(2, 5)), activation=act,
                       batchnorm=bool(rng.integers(2)), dropout=float(rng.choice([0.0, 0.3])))
    if family == "conv":
        chans = tuple(int(c) for c in rng.integers(1, 5, size=rng.integers(1, 4)))
        return zoo.conv_stack(input_shape=(int(rng.integers(1, 3)), 6, 6), channels=chans,
                              kernel=int(rng.choice([1, 3])), head=str(rng.choice(["gap", "flatten"])),
                              batchnorm=bool(rng.integers(2)))
    widths = tuple(tuple(int(w) for w in rng.integers(1, 5, size=4)) for _ in range(int(rng.integers(1, 3))))
    return zoo.toy_inception(input_shape=(1, 8, 8), stem=int(rng.integers(2, 6)), widths=widths)


def widenable(graph):
    return [nid for nid in graph.order
            if isinstance(graph.kind(nid), (Dense, Conv2D)) and not _is_output_layer(graph, nid)]


def random_spec(rng, graph):
    layers = widenable(graph)
    chosen = [l for l in layers if rng.random() < 0.6] or [layers[int(rng.integers(len(layers)))]]
    spec = {}
    for nid in chosen:
        k = _piece_size(graph, nid)
        spec[nid] = graph.channels(nid) + k * int(rng.integers(1, 4))
    return spec


def trial(seed, dtype=np.float32, family=None):
    """``(graph, params, spec)`` for one randomized trial."""
    rng = np.random.default_rng([seed, 77])
    family = family or ("mlp", "conv", "concat")[seed % 3]
    g = random_graph(rng, family)
    p = randomize(G.init_params(g, rng, dtype), rng)
    return g, p, random_spec(rng, g)


def has_batchnorm(graph):
    return any(isinstance(graph.kind(n), BatchNorm) for n in graph.order)
