"""Binary file formats: fields (FLD1), convolution filters (FCW1), and
model checkpoints (GRIF1). All integers little-endian, all floats 64-bit."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError
from .fem import Field, FemConvFilter

_FIELD_MAGIC = b"FLD1"
_FILTER_MAGIC = b"FCW1"
_CHECKPOINT_MAGIC = b"GRIF1"
_CHECKPOINT_VERSION = 1


def write_field(path, field) -> None:
    values = field.values if isinstance(field, Field) else np.asarray(field, np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n, c = values.shape
    with open(path, "wb") as f:
        f.write(_FIELD_MAGIC)
        f.write(struct.pack("<QI", n, c))
        f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _FIELD_MAGIC:
        raise ParseError(f"{path}: bad field magic {blob[:4]!r}")
    n, c = struct.unpack_from("<QI", blob, 4)
    data = np.frombuffer(blob, dtype="<f8", count=n * c, offset=16)
    if data.size != n * c:
        raise ParseError(f"{path}: truncated field payload")
    return data.reshape(n, c).astype(np.float64)


def write_filter(path, filt: FemConvFilter) -> None:
    c_out, c_in, p, _ = filt.weights.shape
    with open(path, "wb") as f:
        f.write(_FILTER_MAGIC)
        f.write(struct.pack("<IIId", c_out, c_in, p, filt.radius))
        f.write(np.ascontiguousarray(filt.weights, dtype="<f8").tobytes())


def read_filter(path) -> FemConvFilter:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _FILTER_MAGIC:
        raise ParseError(f"{path}: bad filter magic {blob[:4]!r}")
    c_out, c_in, p, radius = struct.unpack_from("<IIId", blob, 4)
    count = c_out * c_in * p * p
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=4 + struct.calcsize("<IIId"))
    if data.size != count:
        raise ParseError(f"{path}: truncated filter payload")
    return FemConvFilter(data.reshape(c_out, c_in, p, p).astype(np.float64), radius)


def save_checkpoint(path, net) -> None:
    """Versioned header with all hyperparameters, then parameter tensors in
    declaration order."""
    from dataclasses import asdict

    header = {
        "config": asdict(net.config),
        "n_levels": net.hierarchy.n_levels,
        "mu": net.hierarchy.mu,
        "frequencies": net.frequencies.tolist(),
        "tensors": [[name, list(v.shape)] for name, v in net.params.items()],
    }
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", _CHECKPOINT_VERSION, len(head)))
        f.write(head)
        for v in net.params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path, hierarchy):
    """Rebuild the network on the given mesh hierarchy (which may be a
    different resolution than it was trained on)."""
    from .score import FemUNet, NetConfig

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != _CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {blob[:5]!r}")
    version, head_len = struct.unpack_from("<IQ", blob, 5)
    if version != _CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    offset = 5 + struct.calcsize("<IQ")
    header = json.loads(blob[offset : offset + head_len].decode("utf-8"))
    offset += head_len

    if hierarchy.n_levels != header["n_levels"]:
        raise ParseError(
            f"{path}: checkpoint expects {header['n_levels']} hierarchy levels, "
            f"got {hierarchy.n_levels}"
        )
    config = NetConfig(**header["config"])
    net = FemUNet(hierarchy, config, np.random.default_rng(0))
    net.frequencies = np.array(header["frequencies"], dtype=np.float64)
    expected = [(name, tuple(shape)) for name, shape in header["tensors"]]
    actual = [(name, tuple(v.shape)) for name, v in net.params.items()]
    if expected != actual:
        raise ParseError(f"{path}: checkpoint tensor layout mismatch")
    for name, shape in expected:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        if data.size != size:
            raise ParseError(f"{path}: truncated tensor {name}")
        net.params[name] = data.reshape(shape).astype(np.float64)
        offset += size * 8
    return net
