"""Acceptance criteria 1-9.

Each test prints one ``CRITERION n: PASS|FAIL`` line (visible with ``-v``
or ``-s``) and then asserts. Run standalone with
``python tests/test_acceptance.py``.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from srfn import diffmath as dm
from srfn.fusionnet import he_uniform, invert_resblock, resblock_forward
from srfn.gradcheck import check_gradients
from srfn.metrics import ergas, psnr, sam, ssim
from srfn.scene import generate_scene
from srfn.selfreg import SrfnConfig, ablation_config, learned_model, loss_lc, train
from oracles import top_singular_value

# criterion-6 scene and the training setup shared by criteria 6 and 7
SCENE = dict(width=16, height=16, bands=6, msi_bands=2, scale=4, psf_size=8, psf_sigma=1.0, seed=0)
TRAIN = dict(lambda_sn=0.7, beta=0.01, gamma=30.0, lr=1e-3, iterations=2000, scale=4,
             n_blocks=2, features=16, kernel_size=8, grad_clip=10.0, seed=0)


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def scene():
    return generate_scene(**SCENE)


@pytest.fixture(scope="module")
def ladder(scene):
    runs = {}
    for name in ("S", "SN", "SNL", "SNLA"):
        cfg = ablation_config(name, SrfnConfig(**TRAIN))
        runs[name] = train(scene.y, scene.z, cfg)
    return runs


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    rep = check_gradients(seed=0, step=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(rep.max_rel_error.values())
    ok = rep.passed and elapsed < 120
    report(capsys, 1, ok, f"{rep.checked} entries, max rel err {worst:.2e} (tol 1e-4), {elapsed:.0f}s (limit 120s)")


def test_criterion_2_simplex(capsys):
    worst_b = worst_r = 0.0
    negative = False
    for seed in range(5):
        sc = generate_scene(8, 8, 4, 2, 2, psf_size=3, seed=seed)
        cfg = SrfnConfig(scale=2, features=4, n_blocks=1, kernel_size=3, iterations=40, lr=2e-2, seed=seed)

        def check(state, vals):
            nonlocal worst_b, worst_r, negative
            k, r = (a.value for a in learned_model(state))
            worst_b = max(worst_b, abs(k.sum() - 1))
            worst_r = max(worst_r, np.abs(r.sum(axis=1) - 1).max())
            negative = negative or k.min() < 0 or r.min() < 0

        train(sc.y, sc.z, cfg, callback=check)
    ok = worst_b <= 1e-9 and worst_r <= 1e-9 and not negative
    report(capsys, 2, ok, f"5 seeds x 40 steps: max |sum B - 1| {worst_b:.1e}, max |row sum R - 1| {worst_r:.1e}, "
                          f"negative entries: {negative}")


def test_criterion_3_local_consistency(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        sc = generate_scene(**{**SCENE, "seed": seed})
        worst = max(worst, float(loss_lc(sc.y, sc.z, sc.psf, sc.srf, sc.scale).value))
    report(capsys, 3, worst <= 1e-10, f"max loss_lc at true model over 5 scenes {worst:.1e} (limit 1e-10), "
                                      f"{time.perf_counter() - t0:.1f}s")


def test_criterion_4_invertibility(capsys):
    rng = np.random.default_rng(0)
    worst, count = 0.0, 0
    for _ in range(5):
        weights = []
        for _ in range(2):
            w = dm.parameter(he_uniform(rng, (8, 8, 3, 3)))
            u = rng.standard_normal(8)
            weights.append(dm.spectral_normalize(w, 0.6, u / np.linalg.norm(u), iters=50).value)
        w1, w2 = weights
        for _ in range(5):
            x = rng.standard_normal((1, 8, 8, 8))
            y = resblock_forward(dm.constant(x), dm.constant(w1), dm.constant(w2)).value
            worst = max(worst, np.abs(invert_resblock(y, w1, w2, iters=60) - x).max())
            count += 1
    report(capsys, 4, worst < 1e-5, f"{count} inputs, lambda 0.6, 60 iterations: max inf-norm error {worst:.1e} (limit 1e-5)")


def test_criterion_5_power_iteration(capsys):
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(100):
        m, n = int(rng.integers(1, 33)), int(rng.integers(1, 65))
        w = rng.standard_normal((m, n))
        sigma, _, _ = dm.power_iteration(w, rng.standard_normal(m), 50)
        ref = top_singular_value(w)
        errs.append(abs(sigma - ref) / ref)
    errs = np.array(errs)
    bad = int(np.sum(errs > 1e-3))
    report(capsys, 5, bad == 0, f"100 Gaussian matrices up to 32x64, 50 iterations: {bad} exceed 1e-3 relative "
                                f"(max {errs.max():.1e}, mean {errs.mean():.1e})")


def test_criterion_6_convergence(capsys, scene, ladder):
    res = ladder["SNLA"]
    ratio = res.final["total"] / res.history[0]["total"]
    baseline = psnr(dm.upsample_bilinear(dm.constant(scene.y[None]), 4).value[0], scene.x)
    fused = psnr(res.xhat, scene.x)
    ok = ratio <= 0.1 and fused - baseline >= 1.0
    report(capsys, 6, ok, f"loss ratio {ratio:.4f} (limit 0.1); PSNR {fused:.2f} dB vs bilinear {baseline:.2f} dB "
                          f"(gain {fused - baseline:+.2f}, need +1)")


def test_criterion_7_ablation_direction(capsys, scene, ladder):
    spa_s, spa_sn = ladder["S"].final["spa"], ladder["SN"].final["spa"]

    def r_err(run):
        return float(np.mean(np.abs(run.srf - scene.srf)))

    err_sn, err_snl = r_err(ladder["SN"]), r_err(ladder["SNL"])
    ok = spa_sn < spa_s and err_snl <= err_sn
    report(capsys, 7, ok, f"L_spa SN {spa_sn:.3e} < S {spa_s:.3e}: {spa_sn < spa_s}; "
                          f"R error SNL {err_snl:.4f} <= SN {err_sn:.4f}: {err_snl <= err_sn}")


def test_criterion_8_metric_sanity(capsys):
    gt = np.random.default_rng(0).random((4, 16, 16)) + 0.05
    same = (psnr(gt, gt), ssim(gt, gt), sam(gt, gt), ergas(gt, gt, 4))
    offset = psnr(np.full((2, 4, 4), 0.6), np.full((2, 4, 4), 0.5))
    g = np.full((1, 4, 4), 0.5)
    pred = g + np.where(np.indices((4, 4)).sum(axis=0) % 2 == 0, 0.05, -0.05)[None]
    forced = ergas(pred, g, 8)
    ok = (same[0] == 100.0 and abs(same[1] - 1.0) <= 1e-12 and same[2] <= 0.03 and same[3] == 0.0
          and abs(offset - 20.0) <= 1e-9 and abs(forced - 1.25) <= 1e-9)
    report(capsys, 8, ok, f"identity psnr {same[0]:g} ssim {same[1]:.12f} sam {same[2]:.2e} deg ergas {same[3]:g}; "
                          f"offset case {offset:.12f} dB; ergas case {forced:.12f}")


def test_criterion_9_determinism(capsys, tmp_path):
    sc_dir = tmp_path / "scene"
    env = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}
    srfn = [sys.executable, "-m", "srfn"]
    subprocess.run(srfn + ["simulate", "--width", "16", "--height", "16", "--bands", "6", "--msi-bands", "2",
                           "--scale", "4", "--seed", "0", "--out", str(sc_dir)], check=True, env=env)
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"iterations": 100, "scale": 4, "features": 16, "n_blocks": 2, "kernel_size": 8, '
                   '"lambda_sn": 0.7, "lr": 0.001, "seed": 3}')
    blobs = []
    for run in ("a", "b"):
        subprocess.run(srfn + ["train", "--y", str(sc_dir / "Y.hcube"), "--z", str(sc_dir / "Z.hcube"),
                               "--config", str(cfg), "--out", str(tmp_path / run)], check=True, env=env,
                       stdout=subprocess.DEVNULL)
        blobs.append((tmp_path / run / "checkpoint.bin").read_bytes())
    ok = blobs[0] == blobs[1]
    report(capsys, 9, ok, f"two single-threaded train runs, {len(blobs[0])}-byte checkpoints identical: {ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v"]))
