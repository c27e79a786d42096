import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvarnet.errors import ConfigError, StructuralError
from mmvarnet.fields import FieldStack, GridSpec, ObsModality, ObsSet
from mmvarnet.osse import (MaskConfig, SplitConfig, SynthConfig, coverage, daily_masks, derive_sst,
                           init_state, make_dataset, nadir_mask, swath_mask, synth_truth,
                           window_starts)


def _grid(n_t=4, n=32):
    return GridSpec(n_t, n, n, 0.05, 1.0)


def test_determinism():
    cfg = SynthConfig(grid=_grid())
    assert synth_truth(cfg) == synth_truth(cfg)
    other = synth_truth(SynthConfig(grid=_grid(), seed=1))
    assert not np.array_equal(synth_truth(cfg).data, other.data)
    m = MaskConfig()
    assert daily_masks(m, _grid(), 3) == daily_masks(m, _grid(), 3)


def test_frozen_without_advection_or_diffusion():
    x = synth_truth(SynthConfig(grid=_grid(5), advection=(0.0, 0.0), phase_diffusion=0.0)).data
    for t in range(1, 5):
        np.testing.assert_array_equal(x[t], x[0])


def test_zero_mean_unit_rms():
    x = synth_truth(SynthConfig(grid=_grid(6))).astype64()
    np.testing.assert_allclose(x.mean(axis=(1, 2)), 0, atol=1e-6)
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0, rel=1e-5)


def test_integer_advection_is_a_roll():
    x = synth_truth(SynthConfig(grid=_grid(3), advection=(2.0, 1.0), phase_diffusion=0.0)).astype64()
    np.testing.assert_allclose(x[1], np.roll(x[0], (1, 2), axis=(0, 1)), atol=1e-5)


def _radial_slope(stack, k_lo, k_hi):
    """Independent periodogram fit: per-mode power, annulus means, log-log line."""
    n = stack.shape[-1]
    k1 = 2 * np.pi * np.fft.fftfreq(n)
    kk = np.sqrt(k1[None, :] ** 2 + k1[:, None] ** 2)
    p = np.mean(np.abs(np.fft.fft2(stack)) ** 2, axis=0)
    edges = np.arange(0.5, n // 2) * 2 * np.pi / n
    ks, ps = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (kk >= a) & (kk < b)
        kc = 0.5 * (a + b)
        if sel.any() and k_lo <= kc <= k_hi:
            ks.append(kc)
            ps.append(p[sel].mean())
    return np.polyfit(np.log(ks), np.log(ps), 1)[0]


@pytest.mark.parametrize("slope", [3.0, 4.0, 5.0])
def test_spectral_slope(slope):
    cfg = SynthConfig(grid=_grid(8, 64), slope=slope)
    x = synth_truth(cfg).astype64()
    k0 = 2 * np.pi / cfg.wavelength
    fitted = _radial_slope(x, 4 * k0, 0.9 * np.pi)
    assert abs(fitted + slope) <= 0.3


def test_config_errors():
    with pytest.raises(ConfigError):
        SynthConfig(wavelength=1.5)
    with pytest.raises(ConfigError):
        SynthConfig(sigma_obs=-1)
    with pytest.raises(ConfigError):
        MaskConfig(target_coverage=0)


# ---------------------------------------------------------------- SST

def test_sst_of_constant_is_zero():
    g = _grid(2, 8)
    np.testing.assert_allclose(derive_sst(FieldStack.full(g, 3.0)).astype64(), 0, atol=1e-6)


@pytest.mark.parametrize("m", [1, 3, 7])
def test_sst_single_mode(m):
    g = _grid(1, 16)
    j = np.arange(16)
    k = 2 * np.pi * m / 16
    f = np.broadcast_to(np.sin(k * j)[None, None, :], g.shape)
    np.testing.assert_allclose(derive_sst(FieldStack(g, f)).astype64(), k * f, atol=1e-6)


def test_sst_parseval(rng):
    g = _grid(2, 16)
    ssh = rng.standard_normal(g.shape)
    # float32 storage of the input; the identity is checked on what is stored
    s = FieldStack(g, ssh).astype64()
    sst = derive_sst(FieldStack(g, s)).astype64()
    k1 = 2 * np.pi * np.fft.fftfreq(16)
    k2 = k1[None, :] ** 2 + k1[:, None] ** 2
    rhs = np.sum(k2 * np.abs(np.fft.fft2(s)) ** 2) / 256
    assert np.sum(sst ** 2) == pytest.approx(rhs, rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_sst_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    g = _grid(1, 8)
    f, h = rng.standard_normal(g.shape), rng.standard_normal(g.shape)
    lhs = derive_sst(FieldStack(g, a * f + b * h)).astype64()
    rhs = a * derive_sst(FieldStack(g, f)).astype64() + b * derive_sst(FieldStack(g, h)).astype64()
    np.testing.assert_allclose(lhs, rhs, atol=1e-5 * (1 + abs(a) + abs(b)))


def test_sst_noise_keeps_zero_mean():
    g = _grid(3, 16)
    sst = derive_sst(synth_truth(SynthConfig(grid=g)), sigma_sst=0.5, seed=4).astype64()
    np.testing.assert_allclose(sst.mean(axis=(1, 2)), 0, atol=1e-6)


# ---------------------------------------------------------------- masks

def test_zero_tracks():
    m = nadir_mask(MaskConfig(n_nadir_tracks=0), _grid(), 0, 0)
    assert not m.any()


def test_full_swath():
    cfg = MaskConfig(swath_width=1000.0, swath_gap=0.0)
    assert np.all(swath_mask(cfg, _grid(), 3, 0) == 1)


def test_masks_binary():
    m = daily_masks(MaskConfig(), _grid(10, 64), 0).data
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_default_coverage():
    cov = coverage(daily_masks(MaskConfig(), GridSpec(30, 64, 64, 0.05, 1.0), 0))
    assert np.all(np.abs(cov - 0.05) <= 0.02)


def test_swath_moves():
    cfg = MaskConfig()
    g = _grid(1, 64)
    assert not np.array_equal(swath_mask(cfg, g, 0, 0), swath_mask(cfg, g, 1, 0))


# ---------------------------------------------------------------- windows

def test_stride_arithmetic():
    s = window_starts(14, 7, 7, SplitConfig((0, 0), (0, 0)))
    assert s["train"] == [0, 7] and s["val"] == [] and s["test"] == []
    assert len(window_starts(60, 7, 1, SplitConfig((0, 0), (0, 0)))["train"]) == 54


def test_windows_never_touch_test_block():
    for n_t, window, stride in itertools.product([14, 20, 33], [1, 3, 7], [1, 2, 5]):
        for a in range(0, n_t, 4):
            for b in range(a, n_t + 1, 5):
                split = SplitConfig(test=(a, b), val=(b, min(n_t, b + window)))
                s = window_starts(n_t, window, stride, split)
                test_frames = set(range(a, b))
                val_frames = set(range(split.val[0], split.val[1]))
                for st_ in s["train"]:
                    frames = set(range(st_, st_ + window))
                    assert not frames & test_frames and not frames & val_frames
                    assert st_ + window <= n_t
                for st_ in s["val"]:
                    assert not set(range(st_, st_ + window)) & test_frames
                for st_ in s["test"]:
                    assert set(range(st_, st_ + window)) <= test_frames


def _record(n_t=14, n=16, sigma=0.0, full=False):
    g = GridSpec(n_t, n, n, 0.05, 1.0)
    truth = synth_truth(SynthConfig(grid=g, wavelength=8.0))
    sst = derive_sst(truth)
    masks = FieldStack(g, np.ones(g.shape)) if full else daily_masks(MaskConfig(), g, 0)
    return truth, sst, masks


def test_noiseless_full_mask():
    truth, sst, masks = _record(full=True)
    ds = make_dataset(truth, sst, masks, window=7, stride=7)
    for s in ds.train:
        np.testing.assert_array_equal(s.obs[1].values.data, s.x_true.data)


def test_dataset_modalities_and_canonical_form():
    truth, sst, masks = _record()
    ds = make_dataset(truth, sst, masks, window=7, stride=1, sigma_obs=0.1,
                      oi_baseline=lambda o: FieldStack.full(o.grid, 0.5),
                      split=SplitConfig(test=(0, 7), val=(7, 8)))
    assert [s.start for s in ds.test] == [0]
    assert all(s.start >= 8 for s in ds.train)
    for s in ds.train + ds.test:
        assert all(m in s.obs for m in (1, 2, 3))
        y1 = s.obs[1]
        assert not np.any(y1.values.data[y1.mask.data == 0])
        assert np.all(s.x0.xbar.data == 0.5) and not s.x0.dx.data.any()
        assert np.sqrt(np.mean(s.obs[3].values.astype64() ** 2)) > 0


def test_oi_products_keyed_by_start():
    truth, sst, masks = _record()
    with pytest.raises(StructuralError):
        make_dataset(truth, sst, masks, window=7, stride=7, oi_products={0: FieldStack.zeros(truth.grid.with_frames(7))})


def test_window_longer_than_record():
    truth, sst, masks = _record(n_t=5)
    with pytest.raises(StructuralError):
        make_dataset(truth, sst, masks, window=7)


# ---------------------------------------------------------------- init_state

def test_init_state_cases(caplog):
    g = GridSpec(2, 4, 4)
    y2 = FieldStack.full(g, 0.25)
    x0 = init_state(ObsSet((ObsModality.dense(2, y2), ObsModality.dense(3, FieldStack.zeros(g)))))
    assert x0.xbar == y2 and not x0.dx.data.any()
    x0 = init_state(ObsSet((ObsModality.dense(3, FieldStack.full(g, 1.0)),)))
    assert not x0.channels().any()
    with caplog.at_level(logging.WARNING):
        x0 = init_state(ObsSet((ObsModality.masked(1, FieldStack.full(g, 1.0), FieldStack.full(g, 1.0)),)))
    assert not x0.channels().any()
    assert "zero state" in caplog.text
