"""Named trainable parameters and their binary checkpoint format.

A checkpoint is one JSON header line followed by little-endian float64
payloads: every parameter in store order, then (optionally) the Adam first
and second moments in the same order.
"""
from __future__ import annotations

import json
import os
from typing import Iterator

import numpy as np

from ..errors import BadMagicError, DimensionMismatchError, StructuralError, TruncatedPayloadError
from .engine import Tensor

PSTK_MAGIC = "PSTK1"


class ParamStore:
    """Ordered mapping ``name -> Tensor`` with ``requires_grad`` set."""

    def __init__(self, items: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for k, v in (items or {}).items():
            self.add(k, v)

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor]) -> "ParamStore":
        """Store wrapping existing tensors without copying them."""
        out = cls()
        out._params.update(tensors)
        return out

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise StructuralError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def get(self, name: str, default=None):
        return self._params.get(name, default)

    def slice(self, prefix: str) -> "ParamStore":
        """Sub-store sharing tensors whose names start with ``prefix``."""
        sub = ParamStore()
        for k, t in self._params.items():
            if k.startswith(prefix):
                sub._params[k] = t
        return sub

    def merge(self, other: "ParamStore") -> "ParamStore":
        for k, t in other._params.items():
            if k in self._params:
                raise StructuralError(f"duplicate parameter name {k!r}")
            self._params[k] = t
        return self

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(self.arrays())

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            t = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise StructuralError(f"{k}: shape {v.shape} vs {t.shape}")
            t.data = v.copy()


def count_params(store: ParamStore) -> dict[str, int]:
    """Scalar counts per top-level slice (name up to the first dot) plus ``total``."""
    out: dict[str, int] = {}
    for name, t in store.items():
        head = name.split(".", 1)[0]
        out[head] = out.get(head, 0) + t.size
    out["total"] = store.count()
    return out


def save_params(path, store: ParamStore, optimizer_state: dict | None = None,
                meta: dict | None = None) -> None:
    entries = [{"name": k, "shape": list(t.shape)} for k, t in store.items()]
    header = {"magic": PSTK_MAGIC, "dtype": "<f8", "entries": entries,
              "meta": meta or {}}
    if optimizer_state is not None:
        header["optimizer"] = {"t": int(optimizer_state["t"])}
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for k, t in store.items():
            fh.write(t.data.astype("<f8").tobytes())
        if optimizer_state is not None:
            for key in ("m", "v"):
                moments = optimizer_state[key]
                for k, t in store.items():
                    # moments are absent before the first step
                    m = moments.get(k, np.zeros(t.shape))
                    fh.write(np.asarray(m).astype("<f8").tobytes())
    os.replace(tmp, path)


def load_params(path) -> tuple[ParamStore, dict | None, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    try:
        header = json.loads(blob[:nl].decode("utf-8")) if nl >= 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or header.get("magic") != PSTK_MAGIC:
        raise BadMagicError(f"{path}: not a parameter checkpoint")
    payload = memoryview(blob)[nl + 1:]
    entries = header["entries"]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in entries]
    n = sum(sizes)
    has_opt = "optimizer" in header
    expected = 8 * n * (3 if has_opt else 1)
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: checkpoint truncated")
    if len(payload) > expected:
        raise DimensionMismatchError(f"{path}: trailing bytes in checkpoint")
    flat = np.frombuffer(payload, dtype="<f8")

    def unpack(offset):
        out = {}
        for e, sz in zip(entries, sizes):
            out[e["name"]] = flat[offset:offset + sz].reshape(e["shape"]).astype(np.float64)
            offset += sz
        return out

    store = ParamStore(unpack(0))
    opt = None
    if has_opt:
        opt = {"t": header["optimizer"]["t"], "m": unpack(n), "v": unpack(2 * n)}
    return store, opt, header.get("meta", {})
