import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvarnet.baselines import (EmptyObservationWarning, OIConfig, direct_forward_t, direct_init,
                                direct_inputs, direct_inversion, oi_posterior_variance,
                                optimal_interp)
from mmvarnet.errors import ConfigError, StructuralError
from mmvarnet.fields import FieldStack, GridSpec, ObsModality, ObsSet


def _obs(grid, rng, n_obs):
    mask = np.zeros(grid.size)
    mask[rng.choice(grid.size, n_obs, replace=False)] = 1
    mask = mask.reshape(grid.shape)
    vals = rng.standard_normal(grid.shape) * mask
    return ObsModality.masked(1, FieldStack(grid, vals), FieldStack(grid, mask))


def _dense_oracle(obs, cfg):
    """Hand-assembled Gauss-Markov solve over every grid point."""
    g = obs.grid
    tt, yy, xx = np.meshgrid(np.arange(g.n_t), np.arange(g.n_y), np.arange(g.n_x), indexing="ij")
    pts = np.stack([tt.ravel() * g.dt, yy.ravel() * g.dx, xx.ravel() * g.dx], axis=1)
    on = obs.mask.data.ravel() > 0
    y = obs.values.astype64().ravel()[on]

    def cov(a, b):
        dt = a[:, None, 0] - b[None, :, 0]
        ds2 = (a[:, None, 1] - b[None, :, 1]) ** 2 + (a[:, None, 2] - b[None, :, 2]) ** 2
        return cfg.signal_var * np.exp(-0.5 * dt ** 2 / cfg.length_t ** 2 - 0.5 * ds2 / cfg.length_x ** 2)

    A = cov(pts[on], pts[on]) + (cfg.noise_var + 1e-8 * cfg.signal_var) * np.eye(on.sum())
    k = cov(pts, pts[on])
    mean = y.mean()
    est = k @ np.linalg.solve(A, y - mean) + mean
    var = cfg.signal_var - np.einsum("ij,ji->i", k, np.linalg.solve(A, k.T))
    return est.reshape(g.shape), var.reshape(g.shape)


@pytest.mark.parametrize("n_obs", [1, 3, 12, 25])
def test_oi_matches_dense_oracle(rng, n_obs):
    g = GridSpec(3, 5, 6, 0.1, 1.0)
    obs = _obs(g, rng, n_obs)
    cfg = OIConfig(length_x=0.2, length_t=2.0, noise_var=0.05)
    est, var = _dense_oracle(obs, cfg)
    np.testing.assert_allclose(optimal_interp(obs, cfg).astype64(), est, atol=1e-6)
    # float32 storage of the output bounds the first check; the float64 path is exact
    np.testing.assert_allclose(oi_posterior_variance(obs, cfg), var, atol=1e-8)


def test_oi_float64_path_to_1e8(rng):
    # values stored in float32 are exact in float64, so the oracle sees the same data
    g = GridSpec(1, 4, 4, 0.1, 1.0)
    obs = _obs(g, rng, 3)
    cfg = OIConfig(length_x=0.15, length_t=1.0, noise_var=0.01)
    est, _ = _dense_oracle(obs, cfg)
    from mmvarnet.baselines import _factor, _kernels, _select
    import scipy.linalg
    idx, vals = _select(obs, cfg)
    alpha = scipy.linalg.cho_solve(_factor(idx, g, cfg), vals - vals.mean())
    kt, ky, kx = _kernels(idx, g, cfg)
    out = (ky * (kt[0] * alpha)) @ kx.T + vals.mean()
    np.testing.assert_allclose(out, est[0], atol=1e-8)


def test_single_noiseless_observation():
    g = GridSpec(1, 4, 4, 0.1, 1.0)
    mask = np.zeros(g.shape)
    mask[0, 1, 2] = 1
    vals = mask * 0.7
    out = optimal_interp(ObsModality.masked(1, FieldStack(g, vals), FieldStack(g, mask)),
                         OIConfig(noise_var=0.0)).astype64()
    assert out[0, 1, 2] == pytest.approx(0.7, abs=1e-7)


def test_noiseless_interpolates(rng):
    g = GridSpec(2, 6, 6, 0.05, 1.0)
    obs = _obs(g, rng, 10)
    out = optimal_interp(obs, OIConfig(noise_var=0.0, length_x=0.1)).astype64()
    m = obs.mask.data > 0
    np.testing.assert_allclose(out[m], obs.values.astype64()[m], atol=1e-5)


def test_zero_observations_warns():
    g = GridSpec(1, 4, 4)
    obs = ObsModality.masked(1, FieldStack.zeros(g), FieldStack.zeros(g))
    with pytest.warns(EmptyObservationWarning):
        out = optimal_interp(obs, OIConfig())
    assert not out.data.any()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(-4, 4).filter(lambda a: abs(a) > 1e-3))
def test_oi_linear(seed, a):
    rng = np.random.default_rng(seed)
    g = GridSpec(2, 5, 5, 0.1, 1.0)
    obs = _obs(g, rng, 8)
    scaled = ObsModality.masked(1, FieldStack(g, a * obs.values.astype64()), obs.mask)
    cfg = OIConfig(length_x=0.2, length_t=2.0)
    np.testing.assert_allclose(optimal_interp(scaled, cfg).astype64(),
                               a * optimal_interp(obs, cfg).astype64(), atol=1e-5 * (1 + abs(a)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_extra_observation_never_raises_variance(seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(2, 4, 4, 0.1, 1.0)
    obs = _obs(g, rng, 6)
    free = np.argwhere(obs.mask.data == 0)
    t, y, x = free[rng.integers(len(free))]
    mask = obs.mask.astype64().copy()
    mask[t, y, x] = 1
    more = ObsModality.masked(1, FieldStack(g, obs.values.astype64()), FieldStack(g, mask))
    cfg = OIConfig(length_x=0.2, length_t=2.0)
    assert np.all(oi_posterior_variance(more, cfg) <= oi_posterior_variance(obs, cfg) + 1e-12)


def test_thinning_caps_system(rng):
    g = GridSpec(2, 8, 8, 0.1, 1.0)
    obs = _obs(g, rng, 60)
    from mmvarnet.baselines import _select
    idx, _ = _select(obs, OIConfig(max_obs=20))
    assert len(idx) <= 20


def test_oi_config_errors():
    with pytest.raises(ConfigError):
        OIConfig(length_x=0)
    with pytest.raises(ConfigError):
        OIConfig(noise_var=-1)


# ---------------------------------------------------------------- direct inversion

def _obs_set(g, rng):
    m = (rng.random(g.shape) < 0.3).astype(float)
    return ObsSet((ObsModality.masked(1, FieldStack(g, rng.standard_normal(g.shape)), FieldStack(g, m)),
                   ObsModality.dense(2, FieldStack(g, rng.standard_normal(g.shape))),
                   ObsModality.dense(3, FieldStack(g, rng.standard_normal(g.shape)))))


def test_direct_zero_init_and_shape(rng):
    g = GridSpec(7, 16, 16)
    P = direct_init(7, 0, base_channels=4)
    out = direct_inversion(P, _obs_set(g, rng))
    assert out.shape == g.shape
    assert not out.data.any()
    P.assign({"direct.proj.w": rng.standard_normal(P["direct.proj.w"].shape)})
    assert direct_inversion(P, _obs_set(g, rng)).data.any()


def test_direct_inputs_layout(rng):
    g = GridSpec(2, 4, 4)
    obs = _obs_set(g, rng)
    d = direct_inputs(obs)
    assert d.shape == (1, 8, 4, 4)
    np.testing.assert_array_equal(d[0, 2:4], obs[1].mask.astype64())


def test_direct_channel_mismatch(rng):
    P = direct_init(3, 0, base_channels=4)
    with pytest.raises(StructuralError):
        direct_forward_t(P, np.zeros((1, 8, 8, 8)), 3)
