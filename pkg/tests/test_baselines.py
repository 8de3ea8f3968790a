import numpy as np

from n2n import zoo
from n2n import netgraph as G
from n2n.baselines import random_init_baseline, random_pad_baseline
from n2n.net2net import widen


def test_random_pad_keeps_old_entries_in_place():
    g = zoo.conv_stack(channels=(3, 4))
    p = G.init_params(g, 0)
    sg, sp, rep = random_pad_baseline(g, p, {"conv1": 5}, rng=1)
    assert sg == widen(g, p, {"conv1": 5}, rng=1)[0]
    assert np.array_equal(sp["conv1"]["kernel"][:3], p["conv1"]["kernel"])
    assert np.array_equal(sp["conv2"]["kernel"][:, :3], p["conv2"]["kernel"])
    assert np.array_equal(sp["conv1_bn"]["gamma"][:3], p["conv1_bn"]["gamma"])
    assert np.any(sp["conv2"]["kernel"][:, 3:])
    assert set(rep.affected) == {"conv1", "conv1_bn", "conv2"}


def test_random_pad_new_units_are_not_copies():
    g = zoo.mlp(4, hidden=(3,))
    p = G.init_params(g, 0)
    _, sp, _ = random_pad_baseline(g, p, {"fc1": 6}, rng=2)
    w = sp["fc1"]["weight"]
    for j in range(3, 6):
        assert not any(np.array_equal(w[:, j], w[:, i]) for i in range(3))
    assert not np.any(sp["fc1"]["bias"][3:])


def test_random_pad_is_seeded():
    g = zoo.mlp(4, hidden=(3,))
    p = G.init_params(g, 0)
    a = random_pad_baseline(g, p, {"fc1": 6}, rng=5)[1]
    b = random_pad_baseline(g, p, {"fc1": 6}, rng=5)[1]
    assert all(np.array_equal(a[n][k], b[n][k]) for n in a for k in a[n])


def test_random_init_matches_init_params():
    g = zoo.mlp(4)
    graph, p = random_init_baseline(g, 3)
    q = G.init_params(g, 3)
    assert graph is g and all(np.array_equal(p[n][k], q[n][k]) for n in p for k in p[n])
