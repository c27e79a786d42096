"""Acceptance suite: one pass/fail line per criterion, printed in the terminal summary.

Criterion 6 runs the full desk experiment (64x64, 60 days) and takes
roughly twenty minutes on one core.
"""
import time

import numpy as np
import pytest

from mmvarnet import pipeline
from mmvarnet.baselines import OIConfig, optimal_interp
from mmvarnet.config import build, default_config
from mmvarnet.diagnostics import gradcheck_report
from mmvarnet.fields import FieldStack, GridSpec, ObsModality, ObsSet, StateSeq
from mmvarnet.gradcore import ParamStore
from mmvarnet.layout import state_tensor
from mmvarnet.metrics import mu_sigma, resolved_scale
from mmvarnet.obsops import ObsTermSpec, default_terms, feature_pair_residual, init_feature_pair, \
    masked_identity_residual_t
from mmvarnet.osse import (MaskConfig, SynthConfig, coverage, daily_masks, derive_sst, synth_truth)
from mmvarnet.priornet import PhiConfig, phi_init
from mmvarnet.solver import SolverConfig, solve
from mmvarnet.train import (DirectUNet, TrainConfig, VarNet, evaluate, prepare, train_loop)
from mmvarnet.varcost import CostConfig, cost_eval, term_breakdown

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


# ---------------------------------------------------------------- 1

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rows = gradcheck_report(build(default_config()), size=8, seed=0)
    elapsed = time.perf_counter() - t0
    bad = [(n, e) for n, e, tol in rows if not e < tol]
    worst = max(rows, key=lambda r: r[1] / r[2])
    ok = not bad and elapsed < 120
    record(1, ok, f"{len(rows)} checks, worst {worst[0]} {worst[1]:.2e} (tol {worst[2]:.0e}), "
                  f"{elapsed:.0f} s")
    assert not bad, bad
    assert elapsed < 120


# ---------------------------------------------------------------- 2

def _delta_pair(spec):
    k = np.zeros((spec.channels, 1, spec.kernel_size, spec.kernel_size))
    k[:, 0, spec.kernel_size // 2, spec.kernel_size // 2] = 1.0
    return ParamStore({f"{spec.params}.k1": k, f"{spec.params}.k2": k})


def test_criterion_2_cost_structure():
    worst_sum, min_u = 0.0, np.inf
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = GridSpec(3, 8, 8, 0.05, 1.0)
        mask = (rng.random(g.shape) < 0.3).astype(float)
        obs = ObsSet((ObsModality.masked(1, FieldStack(g, rng.standard_normal(g.shape)), FieldStack(g, mask)),
                      ObsModality.dense(2, FieldStack(g, rng.standard_normal(g.shape))),
                      ObsModality.dense(3, FieldStack(g, rng.standard_normal(g.shape)))))
        cfg = CostConfig(default_terms(True, True), 1.0, PhiConfig(n_t=3, base_channels=4))
        P = phi_init(cfg.prior, seed)
        P.assign({"phi.proj.w": 0.3 * rng.standard_normal(P["phi.proj.w"].shape)})
        for t in cfg.terms:
            if t.kind == "FeaturePair":
                P.merge(init_feature_pair(t, seed, scale=0.5))
        s = StateSeq(FieldStack(g, rng.standard_normal(g.shape)), FieldStack(g, rng.standard_normal(g.shape)))
        u = cost_eval(s, obs, P, cfg)
        parts = term_breakdown(s, obs, P, cfg)
        min_u = min(min_u, u)
        worst_sum = max(worst_sum, abs(sum(parts.values()) - u) / u)
    rng = np.random.default_rng(99)
    g = GridSpec(3, 6, 6)
    spec = ObsTermSpec(1, 1, "FeaturePair", 1.0, channels=1)
    s = StateSeq(FieldStack(g, rng.standard_normal(g.shape)), FieldStack(g, rng.standard_normal(g.shape)))
    y = ObsModality.dense(1, FieldStack(g, rng.standard_normal(g.shape)))
    fp = feature_pair_residual(y, s, _delta_pair(spec), spec)[0]
    mi = masked_identity_residual_t(y.values.astype64()[None], y.mask.astype64()[None], state_tensor(s)).data[0]
    bitwise = fp.tobytes() == mi.tobytes()
    ok = min_u >= 0 and worst_sum <= 1e-12 and bitwise
    record(2, ok, f"min U {min_u:.3g}, breakdown rel. mismatch {worst_sum:.1e}, identity pair bitwise={bitwise}")
    assert ok


# ---------------------------------------------------------------- 3

def _oracle(obs, cfg):
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
    return (cov(pts, pts[on]) @ np.linalg.solve(A, y - y.mean()) + y.mean()).reshape(g.shape)


def test_criterion_3_oi_oracle():
    import scipy.linalg
    from mmvarnet.baselines import _factor, _kernels, _select
    t0 = time.perf_counter()
    worst, worst_interp = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g = GridSpec(3, 5, 6, 0.1, 1.0)
        n_obs = int(rng.integers(1, 26))
        mask = np.zeros(g.size)
        mask[rng.choice(g.size, n_obs, replace=False)] = 1
        mask = mask.reshape(g.shape)
        obs = ObsModality.masked(1, FieldStack(g, rng.standard_normal(g.shape) * mask), FieldStack(g, mask))
        cfg = OIConfig(length_x=0.2, length_t=2.0, noise_var=0.05)
        # float64 estimate (before the float32 field container) against the oracle
        idx, vals = _select(obs, cfg)
        alpha = scipy.linalg.cho_solve(_factor(idx, g, cfg), vals - vals.mean())
        kt, ky, kx = _kernels(idx, g, cfg)
        est = np.stack([(ky * (cfg.signal_var * kt[t] * alpha)) @ kx.T for t in range(g.n_t)]) + vals.mean()
        worst = max(worst, float(np.abs(est - _oracle(obs, cfg)).max()))
        assert np.allclose(optimal_interp(obs, cfg).astype64(), est, atol=1e-6)
        exact = optimal_interp(obs, OIConfig(length_x=0.2, length_t=2.0, noise_var=0.0)).astype64()
        m = mask > 0
        worst_interp = max(worst_interp, float(np.abs(exact[m] - obs.values.astype64()[m]).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and worst_interp < 1e-5
    record(3, ok, f"max |OI - dense| {worst:.1e}, noiseless interpolation error {worst_interp:.1e} "
                  f"(float32 storage), {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_metrics():
    rng = np.random.default_rng(0)
    dx = 0.05
    misses = []
    for axis, n, spacing in (("x", 64, dx), ("t", 64, 1.0)):
        shape = (16, 32, n) if axis == "x" else (n, 16, 32)
        truth = rng.standard_normal(shape)
        ax = -1 if axis == "x" else 0
        kk = np.fft.fftfreq(n, d=spacing)
        kk = kk if axis == "x" else kk[:, None, None]
        for q in (5, 9, 14):
            kc = q / (n * spacing)
            h = np.sqrt(0.5) * np.abs(kk) / kc
            err = np.fft.ifft(np.fft.fft(truth, axis=ax) * h, axis=ax).real
            r = resolved_scale(truth + err, truth, axis, spacing=spacing)
            misses.append(abs(r.wavenumber - kc) * n * spacing)
    g = GridSpec(10, 16, 16, dx, 1.0)
    truth = FieldStack(g, rng.standard_normal(g.shape))
    mu1, sig1, _ = mu_sigma(truth, truth)
    mu0, _, _ = mu_sigma(np.zeros(g.shape), truth)
    ok = max(misses) <= 1.0 and mu1 == 1.0 and sig1 == 0.0 and abs(mu0) < 1e-12
    record(4, ok, f"crossing error {max(misses):.2f} bins (x and t), perfect mu={mu1} sigma={sig1}, "
                  f"zero predictor mu={mu0:.1e}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_gd_convergence():
    rng = np.random.default_rng(0)
    g = GridSpec(3, 8, 8)
    y = FieldStack(g, rng.standard_normal(g.shape))
    lam, alpha, K = 1.0, 0.1, 30
    cfg = CostConfig((ObsTermSpec(1, 1, "MaskedIdentity", lam),), 0.0, PhiConfig(n_t=3))
    x_hat, res = solve(StateSeq.zeros(g), ObsSet((ObsModality.dense(1, y),)), ParamStore(), cfg,
                       SolverConfig(mode="gd", step=alpha, n_iters=K))
    u = np.array(res.costs)
    rate = (u[-1] / u[0]) ** (1 / K)
    bound = (1 - 4 * alpha * lam) ** 2  # Hessian eigenvalue 4 lam along xbar = dx
    err = np.abs(x_hat.xbar.astype64() + x_hat.dx.astype64() - y.astype64()).max()
    ok = abs(rate - bound) <= 0.05 * bound and bool(np.all(np.diff(u) < 0)) and err < 1e-5
    record(5, ok, f"U rate {rate:.5f} vs closed form {bound:.5f}, final error {err:.1e}")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_training_mechanics(tmp_path):
    from mmvarnet.gradcore import load_params
    from mmvarnet.osse import make_dataset
    g = GridSpec(3, 16, 16, 0.05, 1.0)
    truth = synth_truth(SynthConfig(grid=g, wavelength=8.0))
    ds = make_dataset(truth, derive_sst(truth, 0.01, 1), daily_masks(MaskConfig(), g, 2), window=3,
                      stride=3, sigma_obs=0.02, oi_baseline=lambda o: optimal_interp(o, OIConfig()))
    model = VarNet(CostConfig(default_terms(True), prior=PhiConfig(3, base_channels=4)),
                   SolverConfig(hidden_channels=8))
    res = train_loop(model, [prepare(ds.train[0])], [],
                     TrainConfig(epochs=200, lr=1e-2, unroll=((0, 6),), batch_size=1))
    h = [e["train_loss"] for e in res.history]
    reduction = h[0] / min(h)

    tr = [prepare(s, True) for s in ds.train[:3]]
    cfg = TrainConfig(epochs=3, batch_size=2, lr=1e-2, patch=8, checkpoint=str(tmp_path / "ck.pstk"))
    a = train_loop(DirectUNet(3, 4), tr, tr[:1], cfg)
    b = train_loop(DirectUNet(3, 4), tr, tr[:1], cfg)
    same = a.history == b.history
    P, _, _ = load_params(tmp_path / "ck.pstk")
    vl = evaluate(DirectUNet(3, 4), P, tr[:1], 0, cfg.weights)[0]
    exact = vl == a.history[a.best_epoch]["val_loss"]
    ok = reduction >= 100 and same and exact
    record(7, ok, f"overfit reduction {reduction:.0f}x, identical histories={same}, "
                  f"checkpoint val loss exact={exact}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_osse():
    from mmvarnet.osse import fit_spectral_slope, spectral_slope_band
    cfg = SynthConfig(grid=GridSpec(10, 64, 64, 0.05, 1.0))
    slope = fit_spectral_slope(synth_truth(cfg), *spectral_slope_band(cfg))
    g = GridSpec(1, 32, 32)
    j = np.arange(32)
    eig = 0.0
    for m in (1, 4, 11):
        k = 2 * np.pi * m / 32
        f = np.broadcast_to(np.cos(k * j)[None, :, None], g.shape)
        eig = max(eig, float(np.abs(derive_sst(FieldStack(g, f)).astype64() - k * f).max()))
    rng = np.random.default_rng(0)
    s = FieldStack(GridSpec(2, 32, 32), rng.standard_normal((2, 32, 32))).astype64()
    sst = derive_sst(FieldStack(GridSpec(2, 32, 32), s)).astype64()
    k1 = 2 * np.pi * np.fft.fftfreq(32)
    k2 = k1[None, :] ** 2 + k1[:, None] ** 2
    pars = abs(np.sum(sst ** 2) / (np.sum(k2 * np.abs(np.fft.fft2(s)) ** 2) / 32 ** 2) - 1)
    cov = coverage(daily_masks(MaskConfig(), GridSpec(60, 64, 64, 0.05, 1.0), 0))
    ok = abs(slope + cfg.slope) <= 0.3 and eig < 1e-6 and pars < 1e-6 and np.all(np.abs(cov - 0.05) <= 0.02)
    record(8, ok, f"slope {slope:.2f} (target -{cfg.slope}), eigenmode error {eig:.1e}, Parseval {pars:.1e}, "
                  f"coverage {100 * cov.min():.1f}-{100 * cov.max():.1f}%")
    assert ok


# ---------------------------------------------------------------- 6

@pytest.fixture(scope="module")
def desk_experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    exp = build(default_config())
    run = pipeline.open_run(exp, str(out))
    t0 = time.perf_counter()
    reports = pipeline.run_all(run)
    return reports, time.perf_counter() - t0, out


def test_criterion_6_desk_experiment(desk_experiment):
    reports, elapsed, out = desk_experiment
    print(pipeline.table(reports))
    full, ssh, direct, oi = (reports[k] for k in ("varnet_sst", "varnet_ssh", "direct", "oi"))

    def lam(r, axis):
        v, ok = (r.lambda_x, r.lambda_x_resolved) if axis == "x" else (r.lambda_t, r.lambda_t_resolved)
        return v if ok else np.inf

    a = full.mu > oi.mu
    b = full.mu > ssh.mu and lam(full, "x") < lam(ssh, "x") and lam(full, "t") < lam(ssh, "t")
    c = lam(full, "x") < lam(direct, "x")
    fast = elapsed <= 1800
    detail = (f"(a) mu {full.mu:.3f} vs OI {oi.mu:.3f}: {a}; "
              f"(b) vs SSH-only mu {ssh.mu:.3f} lx {lam(ssh, 'x'):.3f} lt {lam(ssh, 't'):.2f}: {b}; "
              f"(c) lx {lam(full, 'x'):.3f} vs direct {lam(direct, 'x'):.3f}: {c}; "
              f"{elapsed / 60:.1f} min")
    record(6, a and b and c and fast, detail)
    assert fast, f"desk experiment took {elapsed:.0f} s"
    assert a, detail
    assert b, detail
    assert c, detail
