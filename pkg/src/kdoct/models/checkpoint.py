"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"KDOC" | u32 version | u32 config length | config JSON (UTF-8)
    then per tensor: u32 name length | name | u32 rank | rank x u64 dims
                     | float32 payload, row-major

The config JSON records the model kind, its config and the tensor count, so
a file cut exactly at a record boundary is still detected as truncated.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import FormatError, ShapeError
from .layers import Module
from .student import EfficientStudent, StudentConfig
from .teacher import ConvNeXtTeacher, TeacherConfig

MAGIC = b"KDOC"
VERSION = 1

_KINDS = {
    "teacher": (TeacherConfig, ConvNeXtTeacher),
    "student": (StudentConfig, EfficientStudent),
}


def build_model(kind: str, config: dict) -> Module:
    if kind not in _KINDS:
        raise FormatError(f"unknown model kind {kind!r}")
    config_cls, model_cls = _KINDS[kind]
    return model_cls(config_cls(**config))


def encode_checkpoint(model: Module, meta: dict | None = None) -> bytes:
    state = model.state_dict()
    header = {
        "kind": getattr(model, "kind", None),
        "config": model.config.to_dict() if hasattr(model, "config") else None,
        "num_tensors": len(state),
        "meta": meta or {},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    for name, arr in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Module, path, meta: dict | None = None) -> str:
    """Write ``model`` to ``path`` and return the file's sha256 hex digest."""
    data = encode_checkpoint(model, meta)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated file while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    r = _Reader(data, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    length = r.u32("config length")
    try:
        header = json.loads(r.take(length, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: malformed config block ({exc})") from None

    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    while r.pos < len(data):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name!r}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name!r}"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * count, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    expected = header.get("num_tensors")
    if expected is not None and expected != len(tensors):
        raise FormatError(f"{source}: truncated file, found {len(tensors)} of {expected} tensors")
    return header, tensors


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def load_checkpoint(path) -> Module:
    """Rebuild the model recorded in ``path`` and restore its parameters."""
    header, tensors = read_checkpoint(path)
    model = build_model(header.get("kind"), header.get("config") or {})
    load_state_into(model, tensors, source=str(path))
    return model


def load_state_into(model: Module, tensors, source: str = "<state>") -> None:
    """Copy ``tensors`` into ``model``; names and shapes must match exactly."""
    params = OrderedDict(model.named_parameters())
    for name, arr in tensors.items():
        if name not in params:
            raise FormatError(f"{source}: unknown tensor name {name!r}")
        if tuple(arr.shape) != params[name].shape:
            raise ShapeError(
                f"{source}: shape mismatch for tensor {name!r}: checkpoint {tuple(arr.shape)} "
                f"vs model {params[name].shape}"
            )
    missing = [n for n in params if n not in tensors]
    if missing:
        raise FormatError(f"{source}: checkpoint lacks tensor {missing[0]!r}")
    for name, arr in tensors.items():
        params[name].data = np.array(arr, dtype=np.float32)


def load_checkpoint_into(model: Module, path) -> dict:
    header, tensors = read_checkpoint(path)
    load_state_into(model, tensors, source=str(path))
    return header


def state_hash(model: Module) -> str:
    """sha256 over parameter names, shapes and bytes."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
