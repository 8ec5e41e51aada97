"""Named parameter sets, linear weight-space arithmetic and checkpoint files.

Checkpoint byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"SCLCKPT\\x00"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header:
                    {"config": {...}, "meta": {...},
                     "manifest": [{"name": str, "shape": [int, ...]}, ...]}
    16+H    ...   payload: for each manifest entry in order, prod(shape)
                  float32 values, little-endian, row-major

The payload length must equal ``4 * sum(prod(shape))`` exactly.
"""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Iterator, Mapping
from typing import Any

import numpy as np

MAGIC = b"SCLCKPT\x00"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sII")
# debug builds reject non-finite values at construction
DEBUG_FINITE = bool(os.environ.get("SCALECL_DEBUG"))


class StructureError(ValueError):
    """Raised when two parameter sets (or a set and a model) do not line up."""


class CheckpointFormatError(ValueError):
    """Bad magic bytes, unknown version or unreadable header."""


class CheckpointCorruptError(ValueError):
    """Payload does not match the manifest."""


class ParamSet(Mapping):
    """Ordered, immutable mapping from layer name to a float64 array.

    Arrays are copied on construction and marked read-only, so a ParamSet can
    be shared freely. Use :meth:`to_dict` to get writable copies.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, Any] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            arr = np.array(value, dtype=np.float64, copy=True)
            if arr.ndim == 0:
                raise StructureError(f"{name}: scalars are not tensors")
            if DEBUG_FINITE and not np.isfinite(arr).all():
                raise FloatingPointError(f"{name}: non-finite values")
            arr.setflags(write=False)
            self._entries[str(name)] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({inner})"

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self._entries.items()]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._entries.items()}

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        """Build a set with this set's layout from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(v.size for v in self._entries.values())
        if flat.shape != (total,):
            raise StructureError(f"expected flat vector of length {total}, got {flat.shape}")
        out, pos = {}, 0
        for k, v in self._entries.items():
            out[k] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return ParamSet(out)

    def subset(self, names) -> "ParamSet":
        return ParamSet({k: self._entries[k] for k in names})

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self._entries.values())))

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._entries.values())

    def equals(self, other: "ParamSet") -> bool:
        return compatible(self, other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )


def compatible(p: ParamSet, q: ParamSet) -> bool:
    """Same names, same order, same shapes."""
    return p.shapes == q.shapes


def check_compatible(p: ParamSet, q: ParamSet) -> None:
    if compatible(p, q):
        return
    pn, qn = list(p), list(q)
    if pn != qn:
        raise StructureError(f"layer names differ: {pn} vs {qn}")
    for name in pn:
        if p[name].shape != q[name].shape:
            raise StructureError(
                f"{name}: shape {p[name].shape} vs {q[name].shape}"
            )
    raise StructureError("incompatible parameter sets")


def lincomb(a: float, p: ParamSet, b: float, q: ParamSet) -> ParamSet:
    """Return ``a * p + b * q`` layer by layer."""
    check_compatible(p, q)
    return ParamSet({k: a * p[k] + b * q[k] for k in p})


def zeros_like(p: ParamSet) -> ParamSet:
    return ParamSet({k: np.zeros_like(v) for k, v in p.items()})


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_checkpoint(
    params: ParamSet,
    meta: Mapping[str, Any] | None,
    path: str | os.PathLike,
    config: Mapping[str, Any] | None = None,
) -> None:
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    header = json.dumps(
        {"config": _jsonable(config or {}), "meta": _jsonable(meta or {}), "manifest": manifest},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_checkpoint(path: str | os.PathLike) -> tuple[ParamSet, dict, dict]:
    """Load a checkpoint, returning ``(params, meta, config)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise CheckpointFormatError(f"{path}: file too short for header")
    magic, version, hlen = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    start = _HEAD.size
    if len(blob) < start + hlen:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        manifest = header["manifest"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header") from exc
    payload = memoryview(blob)[start + hlen:]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in manifest]
    if 4 * sum(sizes) != len(payload):
        raise CheckpointCorruptError(
            f"{path}: manifest expects {4 * sum(sizes)} payload bytes, found {len(payload)}"
        )
    entries, pos = {}, 0
    for e, n in zip(manifest, sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos)
        entries[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
        pos += 4 * n
    return ParamSet(entries), header.get("meta", {}), header.get("config", {})


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamSet, dict]:
    params, meta, _ = read_checkpoint(path)
    return params, meta
