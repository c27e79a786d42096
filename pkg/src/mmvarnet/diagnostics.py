"""Finite-difference checks over every differentiable building block.

``gradient_checks`` returns named closures; each yields the max relative
error of analytic against central-difference derivatives (float64,
step 1e-5).  Small operators are probed coordinate by coordinate, large
parameter sets along random unit directions.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from .fields import GridSpec, difference_matrix
from .gradcore import ParamStore, Tensor, grad, grad_check, ops
from .layout import ObsArrays
from .obsops import (advection_residual_t, feature_pair_residual_t, geostrophic_velocity_t,
                     init_feature_pair, largescale_residual_t, masked_identity_residual_t)
from .priornet import PhiConfig, phi_init, phi_residual_t
from .solver import SolverConfig, lstm_init, lstm_step_t, solve_t
from .varcost import CostConfig, cost_t

TOL = 1e-5
TOL_UNROLL = 1e-4
DIRECTIONS = 4


def _probe(out: Tensor, seed: int) -> Tensor:
    """Random linear functional of ``out``: a scalar sensitive to every entry."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.total(ops.mul(out, Tensor(w)))


def _store(names: list[str], tensors: list[Tensor]) -> ParamStore:
    return ParamStore.from_tensors(dict(zip(names, tensors)))


def _fixture(grid: GridSpec, seed: int, obs_frac: float = 0.3):
    from .fields import FieldStack, ObsModality, ObsSet
    rng = np.random.default_rng(seed)
    truth = rng.standard_normal(grid.shape)
    mask = (rng.random(grid.shape) < obs_frac).astype(np.float64)
    mods = (ObsModality.masked(1, FieldStack(grid, truth + 0.1 * rng.standard_normal(grid.shape)),
                               FieldStack(grid, mask)),
            ObsModality.dense(2, FieldStack(grid, truth + 0.3 * rng.standard_normal(grid.shape))),
            ObsModality.dense(3, FieldStack(grid, truth + 0.1 * rng.standard_normal(grid.shape))))
    # state near the data, as during a solve: keeps U moderate so that
    # finite differences are not swamped by cancellation
    xbar = mods[1].values.astype64() + 0.05 * rng.standard_normal(grid.shape)
    dx = truth - xbar + 0.1 * rng.standard_normal(grid.shape)
    return ObsArrays(ObsSet(mods)), np.concatenate([xbar, dx])[None]


def _primitive_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    a = rng.standard_normal((1, 2, 4, 4))
    b = rng.standard_normal((1, 2, 4, 4))
    pos = rng.random((1, 2, 4, 4)) + 0.5
    away = np.where(np.abs(a) < 0.1, 0.5, a)  # keep relu off its kink
    w = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    x8 = rng.standard_normal((1, 2, 8, 8))
    m = rng.standard_normal((5, 4))
    mask = (rng.random(a.shape) < 0.5).astype(float)
    s = rng.standard_normal(())
    one = lambda f, *xs: (lambda: grad_check(f, [Tensor(x) for x in xs]))  # noqa: E731

    return {
        "add": one(lambda t: _probe(ops.add(t[0], t[1]), 1), a, b),
        "sub": one(lambda t: _probe(ops.sub(t[0], t[1]), 2), a, b),
        "scale": one(lambda t: _probe(ops.scale(t[0], -1.7), 3), a),
        "mul": one(lambda t: _probe(ops.mul(t[0], t[1]), 4), a, b),
        "smul": one(lambda t: _probe(ops.smul(t[0], t[1]), 5), s, a),
        "relu": one(lambda t: _probe(ops.relu(t[0]), 6), away),
        "tanh": one(lambda t: _probe(ops.tanh(t[0]), 7), a),
        "sigmoid": one(lambda t: _probe(ops.sigmoid(t[0]), 8), a),
        "power": one(lambda t: _probe(ops.power(t[0], -0.5), 9), pos),
        "total": one(lambda t: ops.total(ops.mul(t[0], t[0])), a),
        "masked_sq_norm": one(lambda t: ops.masked_sq_norm(t[0], mask), a),
        "sq_norm": one(lambda t: ops.sq_norm(t[0]), a),
        "conv2d": one(lambda t: _probe(ops.conv2d(t[0], t[1]), 10), a, w),
        "flip_transpose": one(lambda t: _probe(ops.flip_transpose(t[0]), 11), w),
        "conv2d_weight_grad": one(
            lambda t: _probe(ops.conv2d_weight_grad(t[0], t[1], 3), 12), a,
            rng.standard_normal((1, 3, 4, 4))),
        "channel_broadcast": one(lambda t: _probe(ops.channel_broadcast(t[0], (1, 3, 4, 4)), 13), bias),
        "channel_sum": one(lambda t: _probe(ops.channel_sum(t[0]), 14), a),
        "add_bias": one(lambda t: _probe(ops.add_bias(t[0], t[1]), 15), a, bias[:2]),
        "conv2d_bias": one(lambda t: _probe(ops.conv2d_bias(t[0], t[1], t[2]), 16), a, w, bias),
        "bilinear": one(lambda t: _probe(ops.bilinear(t[0], t[1], t[2], t[3]), 17), a, w, b, w[::-1].copy()),
        "axis_linear": one(lambda t: _probe(ops.axis_linear(t[0], m, -1), 18), a),
        "avgpool2": one(lambda t: _probe(ops.avgpool2(t[0]), 19), x8),
        "upsample_bilinear2": one(lambda t: _probe(ops.upsample_bilinear2(t[0]), 20), a),
        "slice_axis": one(lambda t: _probe(ops.slice_axis(t[0], 1, 1, 2), 21), a),
        "pad_axis": one(lambda t: _probe(ops.pad_axis(t[0], 1, 1, 4), 22), a),
        "concat": one(lambda t: _probe(ops.concat([t[0], t[1]], 1), 23), a, b),
        "reshape": one(lambda t: _probe(ops.reshape(t[0], (2, 1, 4, 4)), 24), a),
        "second_order": one(lambda t: _second_order(t[0], w), a),
    }


def _second_order(x: Tensor, w: np.ndarray) -> Tensor:
    """||d/dx sum tanh(conv(x))^2||^2, which needs a differentiable gradient."""
    leaf = x if x.requires_grad else Tensor(x.data, requires_grad=True)
    inner = ops.sq_norm(ops.tanh(ops.conv2d(leaf, Tensor(w))))
    (g,) = grad(inner, [leaf], create_graph=True)
    return ops.sq_norm(g)


def gradient_checks(cost: CostConfig, solver: SolverConfig, size: int = 8,
                    seed: int = 0) -> dict[str, tuple[Callable[[], float], float]]:
    """Named checks and their tolerances for the given model configuration."""
    rng = np.random.default_rng(seed)
    checks: dict[str, tuple[Callable[[], float], float]] = {
        k: (f, TOL) for k, f in _primitive_checks(rng).items()}

    n_t = cost.prior.n_t
    grid = GridSpec(n_t, size, size, 0.05, 1.0)
    obs, x_arr = _fixture(grid, seed)
    x = Tensor(x_arr)
    v1, m1 = obs[1].values, obs[1].mask
    v3 = obs[3].values
    dx = grid.dx

    checks["MaskedIdentity"] = (lambda: grad_check(
        lambda t: ops.sq_norm(masked_identity_residual_t(v1, m1, t[0])), [x]), TOL)
    checks["LargeScale"] = (lambda: grad_check(
        lambda t: ops.sq_norm(largescale_residual_t(obs[2].values, obs[2].mask, t[0])), [x]), TOL)
    fp = [t for t in cost.terms if t.kind == "FeaturePair"]
    if fp:
        kp = init_feature_pair(fp[0], seed + 1, scale=0.5)
        k1, k2 = kp[f"{fp[0].params}.k1"], kp[f"{fp[0].params}.k2"]
        checks["FeaturePair"] = (lambda: grad_check(
            lambda t: ops.sq_norm(feature_pair_residual_t(v3, t[0], t[1], t[2])),
            [x, Tensor(k1.data), Tensor(k2.data)]), TOL)
    checks["geostrophic_velocity"] = (lambda: grad_check(
        lambda t: _probe(ops.concat(list(geostrophic_velocity_t(t[0], dx)), 1), 30),
        [Tensor(x_arr[:, :n_t])]), TOL)
    if n_t >= 2:
        checks["Advection"] = (lambda: grad_check(
            lambda t: ops.sq_norm(advection_residual_t(v3, t[0], dx, grid.dt)), [x]), TOL)

    phi_cfg = replace(cost.prior, n_t=n_t)
    P_phi = phi_init(phi_cfg, seed + 2)
    # nonzero projection so the prior is not the identity at initialisation
    P_phi.assign({"phi.proj.w": 0.3 * rng.standard_normal(P_phi["phi.proj.w"].shape),
                  "phi.proj.b": 0.1 * rng.standard_normal(P_phi["phi.proj.b"].shape)})
    names_phi = P_phi.names()
    checks["prior_state"] = (lambda: grad_check(
        lambda t: phi_residual_t(P_phi, t[0], phi_cfg), [x], directions=DIRECTIONS), TOL)
    checks["prior_params"] = (lambda: grad_check(
        lambda t: phi_residual_t(_store(names_phi, t), x, phi_cfg), P_phi.tensors(),
        directions=DIRECTIONS), TOL)

    P = P_phi.copy()
    for i, spec in enumerate(fp):
        kp = init_feature_pair(spec, seed + 3 + i, scale=0.5)
        # k2 close to k1 keeps the feature residual near the data as well
        k1 = kp[f"{spec.params}.k1"].data
        kp.assign({f"{spec.params}.k2": k1 + 0.05 * rng.standard_normal(k1.shape)})
        P.merge(kp)
    sol = replace(solver, mode="lstm")
    P.merge(lstm_init(2 * n_t, sol, seed + 4))
    P.assign({"solver.L.w": 0.05 * rng.standard_normal(P["solver.L.w"].shape)})
    names = P.names()
    cost_params = [n for n in names if not n.startswith("solver.")]

    checks["cost_state"] = (lambda: grad_check(
        lambda t: cost_t(t[0], obs, P, cost), [x], directions=DIRECTIONS), TOL)

    def cost_of_params(t):
        Q = ParamStore.from_tensors({**dict(P.items()), **dict(zip(cost_params, t))})
        return cost_t(x, obs, Q, cost)

    checks["cost_params"] = (lambda: grad_check(
        cost_of_params, [P[n] for n in cost_params], directions=DIRECTIONS), TOL)

    ch = sol.hidden_channels
    g_in = Tensor(rng.standard_normal((1, 2 * n_t, size, size)))
    h0 = Tensor(0.5 * rng.standard_normal((1, ch, size, size)))
    c0 = Tensor(0.5 * rng.standard_normal((1, ch, size, size)))
    lstm_names = ["solver.gates.w", "solver.gates.b"]

    def cell(t):
        Q = _store(lstm_names, t[3:])
        _, h, c = lstm_step_t(t[0], t[1], t[2], Q)
        return ops.add(_probe(h, 31), _probe(c, 32))

    checks["lstm_cell"] = (lambda: grad_check(
        cell, [g_in, h0, c0, P["solver.gates.w"], P["solver.gates.b"]], directions=DIRECTIONS), TOL)

    target = rng.standard_normal((1, n_t, size, size))
    D = difference_matrix(size, dx)

    def unroll(t):
        Q = _store(names, t)
        res = solve_t(Tensor(x_arr), obs, Q, cost, sol, create_graph=True, n_iters=3, trace=False)
        comp = ops.add(ops.slice_axis(res.x, 1, 0, n_t), ops.slice_axis(res.x, 1, n_t, 2 * n_t))
        err = ops.sub(comp, Tensor(target))
        return ops.add(ops.sq_norm(err), ops.scale(ops.sq_norm(ops.axis_linear(err, D, -1)), 1e-3))

    checks["unroll_K3"] = (lambda: grad_check(unroll, P.tensors(), directions=DIRECTIONS), TOL_UNROLL)
    return checks


def gradcheck_report(exp, size: int = 8, seed: int = 0) -> list[tuple[str, float, float]]:
    """Run every check for an experiment's model; rows of (name, error, tolerance)."""
    return [(name, fn(), tol) for name, (fn, tol) in gradient_checks(exp.cost, exp.solver, size, seed).items()]
