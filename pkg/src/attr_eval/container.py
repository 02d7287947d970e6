"""The "EVAT" binary container for model weights and single tensors.

Layout (all little-endian)::

    b"EVAT" | u32 version (=1) | u32 record count
    per record: u8 kind tag | u32 hyperparameters (kind-specific)
                | u64 parameter count | f32 parameters

Tensors reuse the record grammar with a single record of kind ``tensor``
whose hyperparameters are ``ndim`` followed by the extents.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .tensor_core import LayerSpec, Model

MAGIC = b"EVAT"
VERSION = 1

KIND_TAGS = {
    "dense": 1,
    "conv2d": 2,
    "relu": 3,
    "maxpool2d": 4,
    "avgpool2d": 5,
    "globalavgpool": 6,
    "flatten": 7,
}
TENSOR_TAG = 0xFF
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

# u32 hyperparameters per kind, in order
HYPER_FIELDS = {
    "dense": ("in_features", "out_features"),
    "conv2d": ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "pad"),
    "relu": (),
    "maxpool2d": ("window", "stride"),
    "avgpool2d": ("window", "stride"),
    "globalavgpool": (),
    "flatten": (),
}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class TrailingBytesError(ContainerError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise TrailingBytesError(f"{len(self.buf) - self.pos} trailing bytes")


def _header(reader: _Reader) -> int:
    magic = reader.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    version = reader.u32()
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    return reader.u32()


def encode_model(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(model.layers))]
    for layer, params in zip(model.layers, model.weights):
        parts.append(struct.pack("<B", KIND_TAGS[layer.kind]))
        for name in HYPER_FIELDS[layer.kind]:
            parts.append(struct.pack("<I", getattr(layer, name)))
        flat = np.concatenate([p.ravel() for p in params]) if params else np.zeros(0)
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.astype("<f4").tobytes())
    return b"".join(parts)


def decode_model(buf: bytes, num_classes: int | None = None, input_shape=None) -> Model:
    """Parse a weight container.

    ``num_classes`` defaults to the output width of the last dense layer.
    """
    reader = _Reader(buf)
    count = _header(reader)
    layers, weights = [], []
    for i in range(count):
        tag = reader.u8()
        if tag not in TAG_KINDS:
            raise ContainerError(f"record {i}: unknown kind tag {tag}")
        kind = TAG_KINDS[tag]
        hyper = {name: reader.u32() for name in HYPER_FIELDS[kind]}
        try:
            layer = LayerSpec(kind, **hyper)
        except ValueError as exc:
            raise ContainerError(f"record {i}: {exc}") from None
        n = reader.u64()
        shapes = layer.param_shapes()
        expected = sum(int(np.prod(s)) for s in shapes)
        if n != expected:
            raise ContainerError(f"record {i} ({kind}): {n} parameters, shape needs {expected}")
        flat = reader.f32(n)
        params, off = [], 0
        for s in shapes:
            size = int(np.prod(s))
            params.append(flat[off:off + size].reshape(s))
            off += size
        layers.append(layer)
        weights.append(params)
    reader.finish()
    if num_classes is None:
        dense = [l for l in layers if l.kind == "dense"]
        if not dense:
            raise ContainerError("cannot infer class count without a dense layer")
        num_classes = dense[-1].out_features
    try:
        return Model(layers, weights, num_classes, input_shape)
    except ValueError as exc:
        raise ContainerError(f"inconsistent model: {exc}") from None


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype=np.float64)
    parts = [MAGIC, struct.pack("<II", VERSION, 1), struct.pack("<BI", TENSOR_TAG, t.ndim)]
    parts += [struct.pack("<I", d) for d in t.shape]
    parts.append(struct.pack("<Q", t.size))
    parts.append(t.astype("<f4").tobytes())
    return b"".join(parts)


def decode_tensor(buf: bytes) -> np.ndarray:
    reader = _Reader(buf)
    if _header(reader) != 1:
        raise ContainerError("tensor container must hold exactly one record")
    if reader.u8() != TENSOR_TAG:
        raise ContainerError("record is not a tensor")
    shape = tuple(reader.u32() for _ in range(reader.u32()))
    n = reader.u64()
    if n != int(np.prod(shape)):
        raise ContainerError(f"tensor of shape {shape} cannot hold {n} values")
    data = reader.f32(n).reshape(shape)
    reader.finish()
    return data


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: Model, path) -> None:
    atomic_write(path, encode_model(model))


def load_model(path, num_classes: int | None = None, input_shape=None) -> Model:
    with open(path, "rb") as fh:
        return decode_model(fh.read(), num_classes, input_shape)


def save_tensor(t: np.ndarray, path) -> None:
    atomic_write(path, encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
