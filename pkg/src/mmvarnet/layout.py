"""Conversions between field containers and engine tensors.

A state lives in the engine as a ``(1, 2T, H, W)`` tensor, large-scale
frames first.  Single fields are ``(1, T, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import FieldStack, GridSpec, ObsSet, StateSeq
from .gradcore import Tensor, ops


def state_tensor(s: StateSeq, requires_grad: bool = False) -> Tensor:
    return Tensor(s.channels()[None], requires_grad=requires_grad)


def tensor_state(x: Tensor | np.ndarray, grid: GridSpec) -> StateSeq:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return StateSeq.from_channels(grid, arr[0])


def field_tensor(f: FieldStack) -> Tensor:
    return Tensor(f.astype64()[None])


def tensor_field(x: Tensor | np.ndarray, grid: GridSpec) -> FieldStack:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return FieldStack(grid, arr.reshape(grid.shape))


def xbar_of(x: Tensor, n_t: int) -> Tensor:
    return ops.slice_axis(x, 1, 0, n_t)


def dx_of(x: Tensor, n_t: int) -> Tensor:
    return ops.slice_axis(x, 1, n_t, 2 * n_t)


def composite_t(x: Tensor, n_t: int) -> Tensor:
    """``xbar + dx`` as a ``(1, T, H, W)`` tensor."""
    return ops.add(xbar_of(x, n_t), dx_of(x, n_t))


@dataclass
class ModalityArrays:
    id: int
    values: np.ndarray  # (1, T, H, W) float64
    mask: np.ndarray


class ObsArrays:
    """Float64 copies of an :class:`ObsSet`, prepared once per sample."""

    def __init__(self, obs: ObsSet):
        self.grid = obs.grid
        self._by_id = {
            m.id: ModalityArrays(m.id, m.values.astype64()[None], m.mask.astype64()[None])
            for m in obs.modalities
        }

    def __contains__(self, mid: int) -> bool:
        return mid in self._by_id

    def __getitem__(self, mid: int) -> ModalityArrays:
        return self._by_id[mid]

    def ids(self) -> list[int]:
        return list(self._by_id)

    def crop(self, y0: int, x0: int, size_y: int, size_x: int) -> "ObsArrays":
        out = object.__new__(ObsArrays)
        g = self.grid
        out.grid = GridSpec(g.n_t, size_y, size_x, g.dx, g.dt)
        out._by_id = {
            k: ModalityArrays(
                k,
                np.ascontiguousarray(m.values[..., y0:y0 + size_y, x0:x0 + size_x]),
                np.ascontiguousarray(m.mask[..., y0:y0 + size_y, x0:x0 + size_x]),
            )
            for k, m in self._by_id.items()
        }
        return out
