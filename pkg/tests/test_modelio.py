import gzip
import json
import struct

import numpy as np
import pytest

from n2n import modelio, zoo
from n2n import netgraph as G
from n2n.datasets import IdxFormatError, idx_dataset, load_idx, synthetic
from n2n.modelio import ChecksumError, ModelFileError, TruncatedError, VersionError
from n2n.train import TrainState

CORPUS = {
    "mlp": lambda: zoo.mlp(5, (4, 3), n_classes=3, batchnorm=True, dropout=0.2),
    "maxout": lambda: zoo.mlp(5, (6,), activation="maxout"),
    "conv_flatten": lambda: zoo.conv_stack(head="flatten"),
    "inception": lambda: zoo.toy_inception(),
}


def assert_same(p, q):
    assert sorted(p) == sorted(q)
    for nid in p:
        assert sorted(p[nid]) == sorted(q[nid])
        for k in p[nid]:
            assert p[nid][k].dtype == q[nid][k].dtype and np.array_equal(p[nid][k], q[nid][k])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("name", sorted(CORPUS))
def test_roundtrip_bit_exact(name, dtype, tmp_path):
    g = CORPUS[name]()
    p = G.init_params(g, 3, dtype)
    path = tmp_path / "m.n2n"
    modelio.save(g, p, path)
    g2, p2, state = modelio.load(path)
    assert g2 == g and state is None
    assert_same(p, p2)
    x = np.random.default_rng(0).standard_normal((4,) + tuple(g.input_shape[1:])).astype(dtype)
    a, b = G.forward(g, p, x), G.forward(g2, p2, x)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_optimizer_state_roundtrip(tmp_path):
    g = zoo.mlp(3)
    p = G.init_params(g, 0)
    state = TrainState.fresh("sgd", p)
    state.step = 17
    state.slots["fc1"]["weight"] += 0.5
    modelio.save(g, p, tmp_path / "m.n2n", state=state)
    _, _, s2 = modelio.load(tmp_path / "m.n2n")
    assert s2.optimizer == "sgd" and s2.step == 17
    assert_same(state.slots, s2.slots)


def test_encoding_is_deterministic():
    g = zoo.toy_inception()
    p = G.init_params(g, 1)
    assert modelio.encode(g, p) == modelio.encode(*G.clone(g, p))


def test_header_layout():
    g = zoo.mlp(3)
    data = modelio.encode(g, G.init_params(g, 0))
    assert data[:8] == b"N2NMODEL"
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    assert header["format_version"] == "1.0" and header["dtype"] == "float32"
    spans = sorted((e["offset"], e["offset"] + e["nbytes"]) for e in header["tensors"])
    assert spans[0][0] == 0 and all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert spans[-1][1] == header["blob_bytes"] == len(data) - 16 - hlen


def _rewrite_header(data, **changes):
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    header.update(changes)
    text = json.dumps(header).encode()
    return data[:8] + struct.pack("<Q", len(text)) + text + data[16 + hlen:]


def test_corrupt_byte_is_checksum_error():
    g = zoo.mlp(3)
    data = bytearray(modelio.encode(g, G.init_params(g, 0)))
    data[-3] ^= 0xFF
    with pytest.raises(ChecksumError):
        modelio.decode(bytes(data))


def test_future_version_names_both():
    g = zoo.mlp(3)
    data = _rewrite_header(modelio.encode(g, G.init_params(g, 0)), format_version="2.0")
    with pytest.raises(VersionError, match=r"2\.0.*1\.0"):
        modelio.decode(data)
    # newer minor of the same major still loads
    modelio.decode(_rewrite_header(modelio.encode(g, G.init_params(g, 0)), format_version="1.7"))


def test_truncation_and_bad_magic():
    g = zoo.mlp(3)
    data = modelio.encode(g, G.init_params(g, 0))
    with pytest.raises(TruncatedError):
        modelio.decode(data[:-5])
    with pytest.raises(TruncatedError):
        modelio.decode(data[:10])
    with pytest.raises(ModelFileError, match="magic"):
        modelio.decode(b"NOTAMODEL" + data[9:])
    errors = {ChecksumError, VersionError, TruncatedError}
    assert len(errors) == 3 and all(issubclass(e, ModelFileError) for e in errors)


def test_save_leaves_no_temp_files(tmp_path):
    g = zoo.mlp(3)
    modelio.save(g, G.init_params(g, 0), tmp_path / "a.n2n")
    modelio.save(g, G.init_params(g, 1), tmp_path / "a.n2n")
    assert [f.name for f in tmp_path.iterdir()] == ["a.n2n"]


# --------------------------------------------------------------------------
# IDX fixtures, written independently with struct
# --------------------------------------------------------------------------

def write_idx(path, magic, dims, payload):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{len(dims)}I", *dims))
        fh.write(bytes(payload))


@pytest.fixture
def idx_pair(tmp_path):
    pixels = [0, 51, 102, 255, 0, 0, 0, 0, 7, 8, 9, 10]  # 3 images of 2x2
    write_idx(tmp_path / "img", 0x00000803, (3, 2, 2), pixels)
    write_idx(tmp_path / "lbl", 0x00000801, (3,), [4, 0, 9])
    return tmp_path / "img", tmp_path / "lbl"


def test_idx_known_pixels(idx_pair):
    x, y = load_idx(*idx_pair)
    assert x.shape == (3, 1, 2, 2) and x.dtype == np.float32
    np.testing.assert_array_equal(x[0, 0], np.array([[0, 51], [102, 255]], np.float32) / np.float32(255))
    assert not np.any(x[1])
    np.testing.assert_array_equal(y, [4, 0, 9])


def test_idx_gzip(tmp_path):
    write_idx(tmp_path / "i.gz", 0x803, (1, 1, 3), [1, 2, 3])
    write_idx(tmp_path / "l.gz", 0x801, (1,), [2])
    x, y = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    np.testing.assert_allclose(x.ravel(), np.array([1, 2, 3]) / 255)


def test_idx_errors(idx_pair, tmp_path):
    img, _ = idx_pair
    write_idx(tmp_path / "bad", 0x00000803, (3,), [1, 2, 3])
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(img, tmp_path / "bad")
    write_idx(tmp_path / "two", 0x00000801, (2,), [1, 2])
    with pytest.raises(IdxFormatError, match="3 images but 2 labels"):
        load_idx(img, tmp_path / "two")
    write_idx(tmp_path / "short", 0x00000801, (5,), [1, 2])
    with pytest.raises(IdxFormatError):
        load_idx(img, tmp_path / "short")


def test_idx_dataset_split(idx_pair):
    d = idx_dataset(*idx_pair, eval_fraction=0.34)
    assert len(d.x_train) == 2 and len(d.x_eval) == 1


# --------------------------------------------------------------------------
# synthetic task
# --------------------------------------------------------------------------

def test_synthetic_is_deterministic():
    a = synthetic(seed=5, n_train=100, n_eval=50, input_shape=(1, 8, 8))
    b = synthetic(seed=5, n_train=100, n_eval=50, input_shape=(1, 8, 8))
    for k in ("x_train", "y_train", "x_eval", "y_eval"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    c = synthetic(seed=6, n_train=100, n_eval=50, input_shape=(1, 8, 8))
    assert not np.array_equal(a.x_train, c.x_train)


@pytest.mark.parametrize("n_classes,shape", [(2, (1, 8, 8)), (4, (1, 16, 16)), (10, (1, 8, 8)), (5, (6,))])
def test_synthetic_class_histogram(n_classes, shape):
    for seed in range(3):
        d = synthetic(seed=seed, n_classes=n_classes, input_shape=shape, n_train=10 * n_classes,
                      n_eval=10 * n_classes)
        for y in (d.y_train, np.concatenate([d.y_train, d.y_eval])):
            counts = np.bincount(y, minlength=n_classes)
            expected = len(y) / n_classes
            assert np.all(np.abs(counts - expected) <= 0.2 * expected), counts


def test_synthetic_splits_disjoint_and_shaped():
    d = synthetic(seed=0, n_train=120, n_eval=60, input_shape=(1, 8, 8))
    assert d.x_train.shape == (120, 1, 8, 8) and d.x_eval.shape == (60, 1, 8, 8)
    train_rows = {r.tobytes() for r in d.x_train}
    assert not any(r.tobytes() in train_rows for r in d.x_eval)


def test_synthetic_rejects_one_class():
    with pytest.raises(ValueError):
        synthetic(n_classes=1)
