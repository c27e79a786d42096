"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tape, Tensor, grad


def _analytic(fn, inputs):
    leaves = [Tensor(x.data.copy(), requires_grad=True) for x in inputs]
    with Tape():
        out = fn(leaves)
        gs = grad(out, leaves)
    return [g.data for g in gs]


def _value(fn, arrays) -> float:
    # a live tape: fn may itself take gradients internally
    with Tape():
        return float(fn([Tensor(a) for a in arrays]).data)


def grad_check(fn: Callable[[list[Tensor]], Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, directions: int | None = None, seed: int = 0,
               floor: float = 1e-12, rel_floor: float = 0.0) -> float:
    """Max relative error between analytic and central-difference derivatives.

    ``fn`` maps a list of tensors to a scalar tensor.  By default every
    coordinate of every input is probed.  With ``directions=d`` the check
    instead compares directional derivatives along ``d`` random unit
    directions per input, which keeps large inputs affordable.

    Each probe's error is ``|a - fd| / max(floor, |fd|)``.  A positive
    ``rel_floor`` raises the denominator to at least ``rel_floor * scale``,
    ``scale`` being the largest analytic magnitude among that input's
    probes; this judges components that vanish up to roundoff against the
    gradient's own size.
    """
    inputs = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    base = [x.data.astype(np.float64).copy() for x in inputs]
    analytic = _analytic(fn, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, x0 in enumerate(base):
        if directions is None:
            probes = []
            for j in range(x0.size):
                e = np.zeros(x0.size)
                e[j] = 1.0
                probes.append(e.reshape(x0.shape))
        else:
            probes = []
            for _ in range(directions):
                d = rng.standard_normal(x0.shape)
                probes.append(d / np.linalg.norm(d))
        pairs = []
        for d in probes:
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[i] = x0 + eps * d
            minus[i] = x0 - eps * d
            fd = (_value(fn, plus) - _value(fn, minus)) / (2.0 * eps)
            pairs.append((float(np.sum(analytic[i] * d)), fd))
        scale = max([abs(a) for a, _ in pairs] + [1e-300])
        for an, fd in pairs:
            err = abs(an - fd) / max(floor, abs(fd), rel_floor * scale)
            worst = max(worst, err)
    return worst


def dot_product_test(fn: Callable[[Tensor], Tensor], x: np.ndarray, seed: int = 0,
                     linear: bool = False) -> float:
    """Relative mismatch of <J^T v, u> and <v, J u>.

    For ``linear=True`` the map is assumed linear and ``J u = fn(u)``
    exactly; otherwise ``J u`` is a central difference at ``x``.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    u = rng.standard_normal(x.shape)
    leaf = Tensor(x.copy(), requires_grad=True)
    with Tape():
        y = fn(leaf)
        v = rng.standard_normal(y.shape)
        (jtv,) = grad(y, [leaf], seed=Tensor(v))
        if linear:
            ju = fn(Tensor(u)).data
        else:
            h = 1e-6
            ju = (fn(Tensor(x + h * u)).data - fn(Tensor(x - h * u)).data) / (2 * h)
    lhs = float(np.sum(jtv.data * u))
    rhs = float(np.sum(v * ju))
    return abs(lhs - rhs) / max(1e-300, abs(rhs))
