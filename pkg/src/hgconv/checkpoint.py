"""Binary checkpoint format.

All integers are little-endian. Layout::

    magic         8 bytes   b"HGCONVCK"
    version       u32       FORMAT_VERSION
    byte order    u32       0x01020304 (read back as-is on a little-endian file)
    meta length   u32
    meta          JSON, UTF-8 (model config, optimizer scalars, free-form extras)
    tensor count  u32
    tensors       repeated:
        name length  u16, name UTF-8
        dtype code   u8   (1 = float32, 2 = float64, 3 = int64)
        ndim         u8
        shape        ndim x u64
        data         raw little-endian, C order
    trailer       8 bytes   b"HGCKEND!"

Tensor names are prefixed ``param/``, ``buffer/``, ``adam.m/`` or ``adam.v/``.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"HGCONVCK"
TRAILER = b"HGCKEND!"
FORMAT_VERSION = 1
BYTE_ORDER_MARK = 0x01020304

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    adam: Optional[object] = None
    meta: dict = field(default_factory=dict)


def _tensor_bytes(name, arr):
    arr = np.ascontiguousarray(arr)
    code = _CODES[arr.dtype]
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head, arr.astype(_DTYPES[code], copy=False).tobytes()


def save_checkpoint(path, params, config, adam=None, meta=None):
    """Write a checkpoint atomically (temp file + rename)."""
    tensors = {f"param/{k}": v for k, v in params.named().items()}
    tensors.update({f"buffer/{k}": v for k, v in params.buffers().items()})
    header = {"config": config.to_dict(), "extra": meta or {}}
    if adam is not None:
        header["adam"] = {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        tensors.update({f"adam.m/{k}": v for k, v in adam.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in adam.v.items()})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, BYTE_ORDER_MARK, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            head, data = _tensor_bytes(name, arr)
            fh.write(head)
            fh.write(data)
        fh.write(TRAILER)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, expected=None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    If ``expected`` (a :class:`ModelConfig`) is given, every tensor shape
    must match it. Nothing is returned unless the whole file validates.
    """
    from .train import AdamState

    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: not an hgconv checkpoint")
    version, bom, meta_len = r.unpack("<III", "header")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if bom != BYTE_ORDER_MARK:
        raise CheckpointFormatError(f"{path}: unexpected byte order mark {bom:#x}")
    try:
        header = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: bad metadata block ({exc})") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q", f"{name} shape")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(r.take(nbytes, f"{name} data"), dtype=dt).reshape(shape)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    if r.take(len(TRAILER), "trailer") != TRAILER:
        raise CheckpointTruncatedError(f"{path}: missing trailer")

    want = param_shapes(config)
    if expected is not None:
        for name, shape in param_shapes(expected).items():
            if want.get(name) != shape:
                raise CheckpointShapeError(
                    f"{path}: {name} has shape {want.get(name)} but config expects {shape}")
        if set(want) != set(param_shapes(expected)):
            raise CheckpointShapeError(f"{path}: parameter set differs from the expected config")
    named = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    for name, shape in want.items():
        if name not in named:
            raise CheckpointShapeError(f"{path}: missing tensor {name}")
        if named[name].shape != shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {named[name].shape}, expected {shape}")
    buffers = {k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")}
    params = ModelParams.from_named(named, config.num_layers, buffers)

    adam = None
    if "adam" in header:
        a = header["adam"]
        m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
        for name in named:
            if name not in m or m[name].shape != named[name].shape or v.get(name) is None:
                raise CheckpointShapeError(f"{path}: optimizer state for {name} missing or misshapen")
        adam = AdamState(m=m, v=v, t=int(a["t"]), beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    return Checkpoint(config, params, adam, header.get("extra", {}))
