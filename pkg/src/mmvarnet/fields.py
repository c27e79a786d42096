"""Grid, state and observation containers plus basic discrete calculus.

Every raster is a ``FieldStack``: ``n_t`` frames of ``n_y`` x ``n_x`` cells
stored as read-only float32 (time slowest).  Missing data never appears as
NaN; it is carried by binary masks on :class:`ObsModality`.

FSTK files hold one or more stacks on a shared grid::

    {"magic": "FSTK1", "dims": [T, H, W], "dx": .., "dt": .., "fields": [...],
     "byteorder": "little"}\\n
    <float32 LE payload of field 0><payload of field 1>...
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    FormatError,
    StructuralError,
    TruncatedPayloadError,
    UnsupportedShapeError,
)

FSTK_MAGIC = "FSTK1"


@dataclass(frozen=True)
class GridSpec:
    n_t: int
    n_y: int
    n_x: int
    dx: float = 0.05
    dt: float = 1.0

    def __post_init__(self):
        if self.n_t < 1 or self.n_y < 4 or self.n_x < 4:
            raise StructuralError(f"grid too small: {self.shape}")
        if not (self.dx > 0 and self.dt > 0):
            raise StructuralError("dx and dt must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_t, self.n_y, self.n_x)

    @property
    def size(self) -> int:
        return self.n_t * self.n_y * self.n_x

    def with_frames(self, n_t: int) -> "GridSpec":
        return GridSpec(n_t, self.n_y, self.n_x, self.dx, self.dt)


class FieldStack:
    """Immutable ``T x H x W`` float32 raster on a :class:`GridSpec`."""

    __slots__ = ("grid", "_data")

    def __init__(self, grid: GridSpec, data):
        arr = np.asarray(data, dtype=np.float32)
        if arr.size != grid.size:
            raise StructuralError(
                f"data has {arr.size} values, grid {grid.shape} needs {grid.size}")
        arr = np.array(arr.reshape(grid.shape), dtype=np.float32, order="C")
        if not np.all(np.isfinite(arr)):
            raise StructuralError("FieldStack values must be finite")
        arr.setflags(write=False)
        self.grid = grid
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape

    def astype64(self) -> np.ndarray:
        return self._data.astype(np.float64)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "FieldStack":
        return cls(grid, np.zeros(grid.shape, np.float32))

    @classmethod
    def full(cls, grid: GridSpec, value: float) -> "FieldStack":
        return cls(grid, np.full(grid.shape, value, np.float32))

    def frames(self, start: int, stop: int) -> "FieldStack":
        return FieldStack(self.grid.with_frames(stop - start), self._data[start:stop])

    def __eq__(self, other):
        if not isinstance(other, FieldStack):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"FieldStack(grid={self.grid})"


def _check_same_grid(*stacks: FieldStack) -> GridSpec:
    grid = stacks[0].grid
    for s in stacks[1:]:
        if s.grid != grid:
            raise StructuralError(f"grid mismatch: {grid} vs {s.grid}")
    return grid


@dataclass(frozen=True)
class StateSeq:
    """Two-scale state: large-scale ``xbar`` plus fine-scale anomaly ``dx``."""

    xbar: FieldStack
    dx: FieldStack

    def __post_init__(self):
        _check_same_grid(self.xbar, self.dx)

    @property
    def grid(self) -> GridSpec:
        return self.xbar.grid

    @classmethod
    def zeros(cls, grid: GridSpec) -> "StateSeq":
        z = FieldStack.zeros(grid)
        return cls(z, z)

    def channels(self) -> np.ndarray:
        """State as a float64 ``(2T, H, W)`` array, ``xbar`` frames first."""
        return np.concatenate([self.xbar.astype64(), self.dx.astype64()], axis=0)

    @classmethod
    def from_channels(cls, grid: GridSpec, arr: np.ndarray) -> "StateSeq":
        arr = np.asarray(arr).reshape(2 * grid.n_t, grid.n_y, grid.n_x)
        return cls(FieldStack(grid, arr[: grid.n_t]), FieldStack(grid, arr[grid.n_t:]))


@dataclass(frozen=True)
class ObsModality:
    id: int
    values: FieldStack
    mask: FieldStack

    def __post_init__(self):
        _check_same_grid(self.values, self.mask)
        m = self.mask.data
        if not np.all((m == 0) | (m == 1)):
            raise StructuralError("mask entries must be 0 or 1")
        if np.any(self.values.data[m == 0] != 0):
            raise StructuralError("values must be zero outside the mask (canonical form)")

    @property
    def grid(self) -> GridSpec:
        return self.values.grid

    @classmethod
    def masked(cls, id: int, values: FieldStack, mask: FieldStack) -> "ObsModality":
        """Build a modality, zeroing values outside ``mask``."""
        m = (mask.data != 0).astype(np.float32)
        return cls(id, FieldStack(values.grid, values.data * m), FieldStack(mask.grid, m))

    @classmethod
    def dense(cls, id: int, values: FieldStack) -> "ObsModality":
        return cls(id, values, FieldStack.full(values.grid, 1.0))

    def frames(self, start: int, stop: int) -> "ObsModality":
        return ObsModality(self.id, self.values.frames(start, stop), self.mask.frames(start, stop))


@dataclass(frozen=True)
class ObsSet:
    modalities: tuple[ObsModality, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        ids = [m.id for m in self.modalities]
        if len(set(ids)) != len(ids):
            raise StructuralError(f"duplicate modality ids: {ids}")
        if self.modalities:
            _check_same_grid(*[m.values for m in self.modalities])

    def __contains__(self, mid: int) -> bool:
        return any(m.id == mid for m in self.modalities)

    def get(self, mid: int) -> ObsModality | None:
        for m in self.modalities:
            if m.id == mid:
                return m
        return None

    def __getitem__(self, mid: int) -> ObsModality:
        m = self.get(mid)
        if m is None:
            raise KeyError(mid)
        return m

    @property
    def grid(self) -> GridSpec | None:
        return self.modalities[0].grid if self.modalities else None

    def frames(self, start: int, stop: int) -> "ObsSet":
        return ObsSet(tuple(m.frames(start, stop) for m in self.modalities))


def composite(s: StateSeq) -> FieldStack:
    """Physical field ``xbar + dx``."""
    _check_same_grid(s.xbar, s.dx)
    return FieldStack(s.grid, s.xbar.astype64() + s.dx.astype64())


def difference_matrix(n: int, step: float) -> np.ndarray:
    """First-derivative operator: central inside, one-sided at both ends."""
    if n < 2:
        raise UnsupportedShapeError("need at least 2 points to differentiate")
    d = np.zeros((n, n))
    d[0, 0], d[0, 1] = -1.0, 1.0
    d[-1, -2], d[-1, -1] = -1.0, 1.0
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i + 1] = -0.5, 0.5
    return d / step


def forward_difference_matrix(n: int, step: float) -> np.ndarray:
    """Forward difference in time; the last row repeats the previous one."""
    if n < 2:
        raise UnsupportedShapeError("temporal difference needs n_t >= 2")
    d = np.zeros((n, n))
    for t in range(n - 1):
        d[t, t], d[t, t + 1] = -1.0, 1.0
    d[n - 1] = d[n - 2]
    return d / step


def gradient_array(arr: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """(d/dx, d/dy) of a ``(..., H, W)`` float array."""
    h, w = arr.shape[-2:]
    gx = arr @ difference_matrix(w, dx).T
    gy = np.swapaxes(np.swapaxes(arr, -1, -2) @ difference_matrix(h, dx).T, -1, -2)
    return gx, gy


def spatial_gradient(f: FieldStack) -> tuple[FieldStack, FieldStack]:
    gx, gy = gradient_array(f.astype64(), f.grid.dx)
    return FieldStack(f.grid, gx), FieldStack(f.grid, gy)


def temporal_difference(f: FieldStack) -> FieldStack:
    g = f.grid
    d = forward_difference_matrix(g.n_t, g.dt)
    out = np.tensordot(d, f.astype64(), axes=(1, 0))
    return FieldStack(g, out)


def write_fstk(path, stacks: Mapping[str, FieldStack], grid: GridSpec | None = None) -> None:
    """Write named stacks sharing one grid.  ``grid`` is required when empty."""
    names = list(stacks)
    if names:
        grid = _check_same_grid(*stacks.values())
    elif grid is None:
        grid = GridSpec(1, 4, 4)
    header = {
        "magic": FSTK_MAGIC,
        "dims": list(grid.shape),
        "dx": grid.dx,
        "dt": grid.dt,
        "fields": names,
        "byteorder": "little",
    }
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for name in names:
            fh.write(stacks[name].data.astype("<f4").tobytes())
    os.replace(tmp, path)


def read_fstk(path) -> dict[str, FieldStack]:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise BadMagicError(f"{path}: no header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagicError(f"{path}: header is not JSON") from exc
    if not isinstance(header, dict) or header.get("magic") != FSTK_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    try:
        t, h, w = (int(v) for v in header["dims"])
        grid = GridSpec(t, h, w, float(header["dx"]), float(header["dt"]))
        names = list(header["fields"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DimensionMismatchError(f"{path}: malformed header: {exc}") from exc
    if header.get("byteorder", "little") != "little":
        raise FormatError(f"{path}: unsupported byte order")
    payload = blob[nl + 1:]
    nbytes = 4 * grid.size
    expected = nbytes * len(names)
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise DimensionMismatchError(f"{path}: {len(payload) - expected} trailing bytes")
    out = {}
    for i, name in enumerate(names):
        arr = np.frombuffer(payload, dtype="<f4", count=grid.size, offset=i * nbytes)
        out[name] = FieldStack(grid, arr)
    return out
