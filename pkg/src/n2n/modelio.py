"""Single-file model container: magic, JSON header, little-endian tensor blob.

Layout::

    b"N2NMODEL" | uint64 LE header length | UTF-8 JSON header | blob

The header records the format version, parameter dtype, the graph, a
directory of named tensors (owner, name, shape, dtype, offset, nbytes),
the blob length and its CRC-32.  Optimizer slots, when saved, live in the
same directory under ``section = "optimizer"``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .datasets import Dataset, IdxFormatError, idx_dataset, load_idx, synthetic  # noqa: F401
from .netgraph import Graph, ParamSet, param_dtype, validate_params
from .train import TrainState

MAGIC = b"N2NMODEL"
FORMAT_VERSION = "1.0"
_LEN = struct.Struct("<Q")


class ModelFileError(ValueError):
    """Base class for unreadable model files."""


class VersionError(ModelFileError):
    def __init__(self, found, supported=FORMAT_VERSION):
        super().__init__(f"model file format_version {found} is newer than supported {supported}")
        self.found, self.supported = found, supported


class ChecksumError(ModelFileError):
    pass


class TruncatedError(ModelFileError):
    pass


def _major(version: str) -> int:
    try:
        return int(str(version).split(".")[0])
    except ValueError:
        raise ModelFileError(f"unparseable format_version {version!r}") from None


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def encode(graph: Graph, params: ParamSet, state: TrainState | None = None) -> bytes:
    validate_params(graph, params)
    entries, chunks, offset = [], [], 0

    def put(section, owner, name, arr):
        nonlocal offset
        raw = _le(arr).tobytes()
        entries.append({"section": section, "owner": owner, "name": name,
                        "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for nid in sorted(params):
        for name in sorted(params[nid]):
            put("params", nid, name, params[nid][name])
    header = {"format_version": FORMAT_VERSION, "dtype": param_dtype(params).name,
              "graph": graph.to_dict(), "tensors": entries}
    if state is not None:
        for nid in sorted(state.slots):
            for name in sorted(state.slots[nid]):
                put("optimizer", nid, name, state.slots[nid][name])
        header["optimizer"] = {"name": state.optimizer, "step": int(state.step)}
    blob = b"".join(chunks)
    header["blob_bytes"] = len(blob)
    header["blob_crc32"] = zlib.crc32(blob)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(text)) + text + blob


def decode(data: bytes):
    """Inverse of :func:`encode`: ``(graph, params, state_or_None)``."""
    if len(data) < len(MAGIC) + _LEN.size:
        raise TruncatedError("file shorter than the fixed preamble")
    if data[:len(MAGIC)] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    (hlen,) = _LEN.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if len(data) < start + hlen:
        raise TruncatedError(f"header declares {hlen} bytes, only {len(data) - start} present")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"corrupt header: {exc}") from None
    version = header.get("format_version")
    if _major(version) > _major(FORMAT_VERSION):
        raise VersionError(version)
    blob = data[start + hlen:]
    if len(blob) < header["blob_bytes"]:
        raise TruncatedError(f"blob has {len(blob)} of {header['blob_bytes']} declared bytes")
    if len(blob) > header["blob_bytes"]:
        raise ModelFileError(f"{len(blob) - header['blob_bytes']} trailing bytes after blob")
    if zlib.crc32(blob) != header["blob_crc32"]:
        raise ChecksumError("blob CRC-32 mismatch")

    params: ParamSet = {}
    slots: dict = {}
    end_prev = 0
    for e in sorted(header["tensors"], key=lambda e: e["offset"]):
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] < end_prev or e["offset"] + e["nbytes"] > len(blob):
            raise ModelFileError(f"tensor {e['owner']}/{e['name']} overlaps or is out of bounds")
        if count * dtype.itemsize != e["nbytes"]:
            raise ModelFileError(f"tensor {e['owner']}/{e['name']}: shape {e['shape']} "
                                 f"does not match {e['nbytes']} bytes")
        end_prev = e["offset"] + e["nbytes"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=e["offset"])
        arr = arr.astype(dtype.newbyteorder("="), copy=True).reshape(e["shape"])
        target = params if e["section"] == "params" else slots
        target.setdefault(e["owner"], {})[e["name"]] = arr
    graph = Graph.from_dict(header["graph"])
    validate_params(graph, params)
    state = None
    if "optimizer" in header:
        opt = header["optimizer"]
        state = TrainState(opt["name"], int(opt["step"]), slots)
    return graph, params, state


def save(graph: Graph, params: ParamSet, path, state: TrainState | None = None) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    data = encode(graph, params, state)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".n2n-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    """``(graph, params, state)``; ``state`` is ``None`` when none was saved."""
    with open(path, "rb") as fh:
        return decode(fh.read())
