"""
Acceptance checks. Each test prints one ``[PASS]``/``[FAIL]`` line.

Run just these with ``pytest tests/test_acceptance.py -s -v``; the
end-to-end phantom check trains a desk-scale model and takes a while.
"""

import math
import time

import numpy as np
import pytest
import torch

from bridgesynth.metrics import nrmse, nz_metrics, psnr, ssim, ssim_map
from bridgesynth.model import DenoiserSpec, init_model
from bridgesynth.phantom import PhantomConfig, generate_dataset
from bridgesynth.preprocess import assign_splits, clip_normalize, dilate_mask, load_mask
from bridgesynth.sampler import SamplerConfig, aggregate_slices, correction_step, sample_volume
from bridgesynth.schedule import build_schedule, forward_sample, transition_params
from bridgesynth.stylekey import compute_style_key
from bridgesynth.trainer import TrainConfig, bridge_loss, load_cases, train
from bridgesynth.volume import HU, Volume

from test_metrics import brute_nz, brute_ssim_map
from test_preprocess import brute_force_dilation
from test_sampler import CenterIndexStub, OracleStub, brute_aggregate


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def test_schedule_consistency(verdict):
    start = time.perf_counter()
    sched = build_schedule(20, 1.0)
    rng = np.random.default_rng(0)
    n, x0, y = 100_000, 0.2, 0.8
    worst = 0.0
    for t in range(2, 21):
        prev = forward_sample(np.full(n, x0), np.full(n, y), t - 1, rng.standard_normal(n), sched)
        alpha, beta, var_c = transition_params(t, sched)
        draws = alpha * prev + beta * y + math.sqrt(var_c) * rng.standard_normal(n)
        mean, var = (1 - sched.m[t]) * x0 + sched.m[t] * y, sched.delta[t]
        z_mean = abs(draws.mean() - mean) / math.sqrt(var / n)
        z_var = abs(draws.var(ddof=1) - var) / (var * math.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean, z_var)
    # t = 1 has no predecessor; check its marginal directly
    d1 = forward_sample(np.full(n, x0), np.full(n, y), 1, rng.standard_normal(n), sched)
    v1 = sched.delta[1]
    worst = max(worst, abs(d1.mean() - ((1 - sched.m[1]) * x0 + sched.m[1] * y)) / math.sqrt(v1 / n),
                abs(d1.var(ddof=1) - v1) / (v1 * math.sqrt(2 / (n - 1))))
    elapsed = time.perf_counter() - start
    verdict("schedule consistency", worst < 3 and elapsed < 30, f"max |z| = {worst:.2f} (< 3), {elapsed:.1f}s")


def test_oracle_reversibility(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    x0 = rng.random((4, 16, 16))
    y = Volume(rng.random((4, 16, 16)))
    sched = build_schedule(1000, 1.0)
    out = sample_volume(OracleStub(x0), y, compute_style_key(y), sched, SamplerConfig(steps=1000, M=0, eta=0.0))
    rmse = float(np.sqrt(np.mean((out.data - x0) ** 2)))
    elapsed = time.perf_counter() - start
    verdict("oracle reversibility", rmse < 1e-2 and elapsed < 60, f"RMSE {rmse:.2e} (< 1e-2), {elapsed:.1f}s")


def test_metric_identity(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        a, b = rng.random((2, 4, 32, 32))
        a.flat[0], a.flat[1] = 0.0, 1.0
        worst = max(worst, abs(nrmse(a, b) - 10 ** (-psnr(a, b) / 20)))
    # reported (PSNR, NRMSE) pairs, NRMSE rounded to 3 decimals
    pairs = [(32.578, 0.024), (36.820, 0.015)]
    gaps = [abs(10 ** (-p / 20) - n) for p, n in pairs]
    ok = worst < 1e-9 and all(g <= 0.001 for g in gaps)
    verdict("metric identity", ok, f"max identity error {worst:.1e}; reported-pair gaps {[round(g, 4) for g in gaps]}")


def test_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        gt = np.where(rng.random((4, 32, 32)) < 0.6, rng.random((4, 32, 32)), 0.0)
        pred = np.where(rng.random((4, 32, 32)) < 0.6, rng.random((4, 32, 32)), 0.0)
        mse = sum((x - y) ** 2 for x, y in zip(gt.ravel().tolist(), pred.ravel().tolist())) / gt.size
        smap = brute_ssim_map(gt, pred)
        errs = [
            abs(psnr(gt, pred) - 10 * math.log10(1 / mse)),
            abs(nrmse(gt, pred) - math.sqrt(mse) / (gt.max() - gt.min())),
            abs(ssim(gt, pred) - smap.mean()),
            float(np.abs(ssim_map(gt, pred) - smap).max()),
            *np.abs(np.array(nz_metrics(gt, pred)) - np.array(brute_nz(gt, pred))),
        ]
        worst = max(worst, max(errs))
    verdict("metric oracles", worst < 1e-6, f"max deviation {worst:.1e} (< 1e-6)")


def test_aggregation_oracle(verdict):
    x = np.zeros((8, 2, 2))
    got = aggregate_slices(CenterIndexStub(), x, x, compute_style_key(x), 5, N=1)[:, 0, 0]
    expected = brute_aggregate(8, 1)
    verdict("aggregation oracle", bool(np.array_equal(got, expected)), f"Z=8 slices {got.tolist()}")


def test_correction_algebra(verdict):
    sched = build_schedule(1000, 1.0)
    rng = np.random.default_rng(4)
    x, e = rng.standard_normal((2, 3, 8, 8))
    identity = np.array_equal(correction_step(x, e, 400, sched, SamplerConfig(lam=0.0)), x)
    skip = np.array_equal(correction_step(x, np.zeros_like(e), 400, sched, SamplerConfig()), x)
    # from X = 0 the returned state is the update itself, free of cancellation
    zero = np.zeros_like(x)
    base = correction_step(zero, e, 400, sched, SamplerConfig())
    worst = 0.0
    for c in (1e-3, 0.5, 2.0, 37.0, 1e3):
        scaled = correction_step(zero, c * e, 400, sched, SamplerConfig())
        worst = max(worst, float(np.abs(scaled * c - base).max() / np.abs(base).max()))
    verdict("correction algebra", identity and skip and worst < 1e-9,
            f"lambda=0 identity {identity}, zero-field skip {skip}, homogeneity rel err {worst:.1e}")


def test_gradient_check(verdict):
    spec = DenoiserSpec(image_size=16, base_channels=8, channel_multipliers=(1, 2), res_blocks_per_level=1,
                        attention_resolutions=(8,), attention_heads=2, style_hidden=16)
    net = init_model(spec, seed=0, dtype=torch.float64).net
    sched = build_schedule(1000, 1.0)
    rng = np.random.default_rng(5)
    x0, y = rng.random((2, 2, 3, 16, 16))
    style = np.stack([compute_style_key(y[0]).flat()] * 2)
    t, eps = np.array([100, 600]), rng.standard_normal(x0.shape)
    loss_fn = lambda: bridge_loss(net, x0, y, style, t, eps, sched)  # noqa: E731
    net.zero_grad()
    loss_fn().backward()
    params = list(net.parameters())
    worst, checked, h = 0.0, 0, 1e-6
    while checked < 12:
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(n)) for n in p.shape)
        g = p.grad[idx].item()
        if abs(g) < 1e-7:
            continue
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            lp = loss_fn().item()
            p[idx] = orig - h
            lm = loss_fn().item()
            p[idx] = orig
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g)))
        checked += 1
    verdict("gradient check", worst < 1e-3, f"{checked} parameters, max relative error {worst:.1e} (< 1e-3)")


def test_preprocessing_fidelity(verdict):
    rng = np.random.default_rng(6)
    dil_ok = True
    for r in (0, 1, 2, 3):
        m = rng.random((9, 9, 9)) < 0.01
        m[4, 4, 4] = True
        dil_ok &= bool(np.array_equal(dilate_mask(m, r), brute_force_dilation(m, r)))
    hu = Volume(np.array([-1000.0, 0.0, 1000.0]).reshape(1, 1, 3), domain=HU)
    norm_ok = clip_normalize(hu).data.ravel().tolist() == [0.0, 0.5, 1.0]
    ids = [f"case_{k:03d}" for k in range(10)]
    a, b = assign_splits(ids, seed=13), assign_splits(ids[::-1], seed=13)
    split_ok = repr(a).encode() == repr(b).encode() and [len(a[s]) for s in ("train", "val", "test")] == [8, 1, 1]
    verdict("preprocessing fidelity", dil_ok and norm_ok and split_ok,
            f"dilation exact {dil_ok}, clip/normalize endpoints {norm_ok}, 80/10/10 split deterministic {split_ok}")


# ---------------------------------------------------------------------------
# end-to-end phantom

E2E_SPEC = DenoiserSpec(base_channels=32, res_blocks_per_level=1)
E2E_TRAIN = TrainConfig(epochs=1000, batch_size=8, lr=3e-4, max_steps=1200, time_limit_s=28 * 60, seed=0)
E2E_SAMPLE_STEPS = 50


def _tube_profile(vol, tube):
    per_slice = np.array([vol.data[z][tube[z]].mean() for z in range(tube.shape[0])], dtype=np.float64)
    return float(vol.data[tube].mean()), float(per_slice.var())


@pytest.mark.slow
def test_end_to_end_phantom(verdict, tmp_path):
    manifest = generate_dataset(PhantomConfig(), tmp_path / "data")
    start = time.monotonic()
    result = train(manifest, tmp_path / "run", E2E_TRAIN, E2E_SPEC, validate=False)
    minutes = (time.monotonic() - start) / 60
    on = SamplerConfig(steps=E2E_SAMPLE_STEPS, M=1, aggregate=True)
    off = SamplerConfig(steps=E2E_SAMPLE_STEPS, M=0, aggregate=False)
    rows = []
    for case in load_cases(manifest, "test"):
        tube = load_mask(tmp_path / "data" / "raw" / f"{case.case_id}_aorta").data
        synth_on = sample_volume(result.denoiser, case.native, result.train_key, result.sched, on)
        synth_off = sample_volume(result.denoiser, case.native, result.train_key, result.sched, off)
        rows.append((ssim(case.arterial, synth_on), *_tube_profile(synth_on, tube), _tube_profile(synth_off, tube)[1]))
    rows = np.array(rows)
    ssim_mean, vessel, var_on, var_off = rows.mean(axis=0)
    parts = {
        "train <= 30 min": minutes <= 30,
        "SSIM >= 0.80": ssim_mean >= 0.80,
        "vessel mean within 0.10 of 0.75": abs(vessel - 0.75) <= 0.10,
        "variance ISTA off >= on": var_off >= var_on,
    }
    failed = [k for k, v in parts.items() if not v]
    verdict("end-to-end phantom", not failed,
            f"train {minutes:.1f} min, SSIM {ssim_mean:.3f}, vessel mean {vessel:.3f}, "
            f"inter-slice variance ISTA off {var_off:.2e} vs on {var_on:.2e}"
            + (f"; unmet: {', '.join(failed)}" if failed else ""))
