"""Acceptance checks, one test per numbered criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
numbers; run ``pytest tests/test_acceptance.py -s`` to see all eleven lines.
Criteria 4-6 share three desk-scale training runs of a few minutes each, so
the whole file takes roughly a quarter hour on one CPU.
"""

import math
import subprocess
import sys

import numpy as np
import pytest

from lctem import train as train_mod
from lctem.cellgeom import (
    CellSpec,
    MembraneFit,
    TiltSeries,
    compare_center_thickness,
    empirical_thickness,
    fit_profile,
    fit_separation,
    liquid_thickness,
)
from lctem.metrics import SsimConfig, psnr, ssim, ssim_loss, ssim_map
from lctem.nn import (
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    l1_objective,
    l2_objective,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    ssim_objective,
    upsample_nearest2x_backward,
    upsample_nearest2x_forward,
)
from lctem.stream import RingBuffer, SceneSpec, bench_conversion, simulate_source
from lctem.unet import ModelConfig, build

from helpers import finite_difference_grad, relative_error, ssim_map_bruteforce

DESK_EPOCHS = 20


def report(num, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} ({name}): {detail}"
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def desk_runs():
    """One 200-pair 64x64 width-16 training run per objective."""
    pairs = train_mod.make_synthetic_dataset(200, size=64, seed=0)
    results = {}
    for loss in ("ssim", "l1", "l2"):
        cfg = train_mod.TrainConfig(loss=loss, learning_rate=1e-4,
                                    epochs=DESK_EPOCHS, batch_size=4, seed=0)
        train_pairs, val_pairs = train_mod.split_dataset(pairs, 0.9, 0)
        model = build(ModelConfig(encoder_blocks=(2, 2, 2, 2), base_width=16,
                                  input_size=64), seed=0)
        history = train_mod.validation_curve(model, train_pairs, val_pairs, cfg,
                                             every_n_epochs=2)
        results[loss] = (history, train_mod.evaluate(model, val_pairs,
                                                     loss_name=loss))
    return results


def test_01_ssim_oracle_equivalence():
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        x = rng.random((24, 24))
        y = rng.random((24, 24))
        for w in (3, 11):
            cfg = SsimConfig(window_size=w)
            got = ssim_map(x, y, cfg)
            want = ssim_map_bruteforce(x, y, w, cfg.c1, cfg.c2)
            worst = max(worst, float(np.abs(got - want).max()))
    for _ in range(100):
        x = rng.random((48, 48))
        y = rng.random((48, 48))
        cfg = SsimConfig(window_size=39)
        got = ssim_map(x, y, cfg)
        want = ssim_map_bruteforce(x, y, 39, cfg.c1, cfg.c2)
        worst = max(worst, float(np.abs(got - want).max()))
    report(1, "ssim oracle", worst < 1e-9,
           f"max |ssim_map - bruteforce| = {worst:.2e} over windows 3/11/39")


def test_02_metric_exactness():
    rng = np.random.default_rng(200)
    identity_exact = True
    for _ in range(5):
        x = rng.random((32, 32))
        r = ssim(x, x)
        identity_exact &= (r.mean == 1.0 and float(ssim_loss(x, x)) == 0.0)
    x = rng.random((32, 32)) * 0.8
    offset_db = psnr(x, x + 0.1)
    offset_ok = abs(offset_db - 20.0) < 1e-9
    report(2, "metric exactness", identity_exact and offset_ok,
           f"ssim(x,x)=1 bitwise, loss(x,x)=0, psnr(+0.1)={offset_db:.12f} dB")


def test_03_gradient_suite():
    rng = np.random.default_rng(300)
    layer_worst = 0.0

    x = rng.random((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.3
    b = rng.standard_normal(4) * 0.1
    dy = rng.standard_normal((2, 4, 4, 4))

    def conv_obj(xx=None, ww=None, bb=None):
        return float(np.sum(dy * conv2d_forward(
            x if xx is None else xx, w if ww is None else ww,
            b if bb is None else bb, stride=2, padding=1)))

    dx, dw, db = conv2d_backward(dy, x, w, stride=2, padding=1)
    layer_worst = max(
        layer_worst,
        relative_error(dx, finite_difference_grad(lambda a: conv_obj(xx=a), x)),
        relative_error(dw, finite_difference_grad(lambda a: conv_obj(ww=a), w)),
        relative_error(db, finite_difference_grad(lambda a: conv_obj(bb=a), b)),
    )

    x = rng.random((2, 3, 6, 6))
    gamma = 1.0 + 0.2 * rng.standard_normal(3)
    beta = 0.1 * rng.standard_normal(3)
    dy = rng.standard_normal(x.shape)

    def bn_obj(xx=None, gg=None, bb=None):
        y, _ = batchnorm2d_forward(
            x if xx is None else xx, gamma if gg is None else gg,
            beta if bb is None else bb, np.zeros(3), np.ones(3), train=True)
        return float(np.sum(dy * y))

    y, cache = batchnorm2d_forward(x, gamma, beta, np.zeros(3), np.ones(3),
                                   train=True)
    dx, dgamma, dbeta = batchnorm2d_backward(dy, cache)
    layer_worst = max(
        layer_worst,
        relative_error(dx, finite_difference_grad(lambda a: bn_obj(xx=a), x)),
        relative_error(dgamma, finite_difference_grad(lambda a: bn_obj(gg=a), gamma)),
        relative_error(dbeta, finite_difference_grad(lambda a: bn_obj(bb=a), beta)),
    )

    x = rng.standard_normal((2, 2, 5, 5))
    x[np.abs(x) < 0.1] = 0.5  # keep clear of the relu kink
    dy = rng.standard_normal(x.shape)
    _, mask = relu_forward(x)
    layer_worst = max(layer_worst, relative_error(
        relu_backward(dy, mask),
        finite_difference_grad(lambda a: float(np.sum(dy * relu_forward(a)[0])), x),
    ))

    x = rng.standard_normal((2, 2, 5, 5))
    ys, _ = sigmoid_forward(x)
    layer_worst = max(layer_worst, relative_error(
        sigmoid_backward(dy, ys),
        finite_difference_grad(lambda a: float(np.sum(dy * sigmoid_forward(a)[0])), x),
    ))

    x = rng.random((1, 3, 4, 4))
    dy_up = rng.standard_normal((1, 3, 8, 8))
    layer_worst = max(layer_worst, relative_error(
        upsample_nearest2x_backward(dy_up),
        finite_difference_grad(
            lambda a: float(np.sum(dy_up * upsample_nearest2x_forward(a))), x),
    ))

    x = rng.random((1, 1, 12, 12))
    t = rng.random((1, 1, 12, 12))
    for objective in (l1_objective, l2_objective,
                      lambda a, b: ssim_objective(a, b, SsimConfig(window_size=5))):
        _, dx = objective(x, t)
        layer_worst = max(layer_worst, relative_error(
            dx, finite_difference_grad(lambda a: float(objective(a, t)[0]), x)))

    # end to end: ssim loss through a small double-precision network
    model = build(ModelConfig(encoder_blocks=(1, 1), base_width=4, input_size=32),
                  seed=3, dtype=np.float64)
    x = rng.random((1, 1, 32, 32))
    t = rng.random((1, 1, 32, 32))
    loss_cfg = SsimConfig(window_size=11)

    def loss_value():
        y, _ = model.forward(x, train=True)
        return ssim_objective(y, t, loss_cfg)[0]

    y, cache = model.forward(x, train=True)
    _, dy = ssim_objective(y, t, loss_cfg)
    model.store.zero_grads()
    dx_in = model.backward(dy, cache)
    eps = 1e-6
    e2e_worst = 0.0
    names = model.store.names()
    for idx in rng.choice(len(names), size=10, replace=False):
        tensor = model.store[names[idx]]
        flat = tensor.value.ravel()
        k = int(rng.integers(flat.size))
        orig = flat[k]
        flat[k] = orig + eps
        hi = loss_value()
        flat[k] = orig - eps
        lo = loss_value()
        flat[k] = orig
        fd = (hi - lo) / (2 * eps)
        an = tensor.grad.ravel()[k]
        e2e_worst = max(e2e_worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    for (i, j) in [(5, 5), (16, 9), (30, 30)]:
        orig = x[0, 0, i, j]
        x[0, 0, i, j] = orig + eps
        hi = loss_value()
        x[0, 0, i, j] = orig - eps
        lo = loss_value()
        x[0, 0, i, j] = orig
        fd = (hi - lo) / (2 * eps)
        an = dx_in[0, 0, i, j]
        e2e_worst = max(e2e_worst, abs(fd - an) / max(abs(fd), 1e-10))

    report(3, "gradient suite", layer_worst < 1e-6 and e2e_worst < 1e-4,
           f"per-layer max rel err {layer_worst:.2e}, end-to-end {e2e_worst:.2e}")


def test_04_training_improves_validation_pairs(desk_runs):
    _, rep = desk_runs["ssim"]
    d_ssim = rep.mean_refined_ssim - rep.mean_baseline_ssim
    d_psnr = rep.mean_refined_psnr - rep.mean_baseline_psnr
    report(4, "training improvement", d_ssim >= 0.2 and d_psnr >= 6.0,
           f"ssim {rep.mean_baseline_ssim:.3f}->{rep.mean_refined_ssim:.3f} "
           f"(+{d_ssim:.3f} >= 0.2), psnr {rep.mean_baseline_psnr:.2f}->"
           f"{rep.mean_refined_psnr:.2f} (+{d_psnr:.2f} dB >= 6)")


def test_05_validation_loss_does_not_increase(desk_runs):
    history, _ = desk_runs["ssim"]
    losses = [r.val_loss for r in history]
    ratio = losses[-1] / min(losses)
    report(5, "overfitting guard", ratio <= 1.05,
           f"final/min validation loss = {ratio:.4f} <= 1.05 "
           f"over {DESK_EPOCHS} epochs")


def test_06_l1_and_l2_match_the_thresholds(desk_runs):
    details = []
    ok = True
    for loss in ("l1", "l2"):
        _, rep = desk_runs[loss]
        d_ssim = rep.mean_refined_ssim - rep.mean_baseline_ssim
        d_psnr = rep.mean_refined_psnr - rep.mean_baseline_psnr
        ok &= d_ssim >= 0.2 and d_psnr >= 6.0
        details.append(f"{loss}: +{d_ssim:.3f} ssim, +{d_psnr:.2f} dB")
    report(6, "loss-variant parity", ok, "; ".join(details))


def test_07_frame_integration_statistics():
    # constant scene: zero particles leaves only the flat background
    spec = SceneSpec(size=32, n_particles=0, seed=9, background=0.2, gain=0.9,
                     exposure=0.01)
    events = simulate_source(spec, fps=100.0, duration=5.0, dose_schedule=12500.0)
    assert len(events) == 500
    ratios = []
    for k in range(50):
        chunk = [e.frame.counts.astype(np.float64) for e in events[10 * k : 10 * k + 10]]
        total = sum(chunk)
        ratios.append((total.mean() / total.std()) / (chunk[0].mean() / chunk[0].std()))
    snr_ok = abs(np.mean(ratios) - math.sqrt(10)) < 0.2 * math.sqrt(10)

    ring = RingBuffer(capacity=10)
    for e in events[:10]:
        ring.push(e.frame.counts.astype(np.float64), 12500.0 * spec.exposure)
    dose_ok = ring.total_dose == sum(125.0 for _ in range(10))
    report(7, "frame integration", snr_ok and dose_ok,
           f"mean SNR ratio {np.mean(ratios):.3f} vs sqrt(10)={math.sqrt(10):.3f} "
           f"(50 trials), 10-frame dose = {ring.total_dose} exactly")


def test_08_bench_report_shape():
    def builder(size):
        return build(ModelConfig(encoder_blocks=(1,), base_width=2,
                                 input_size=size), seed=0)

    reports = bench_conversion(builder, sizes=(256, 512, 1024), repeats=10,
                               warmup=3)
    med = {r.size: r.total.median for r in reports}
    ratio = med[1024] / med[512]
    ok = (sorted(med) == [256, 512, 1024] and med[256] < med[512]
          and 2.0 <= ratio <= 8.0)
    report(8, "bench shape", ok,
           f"medians {med[256]:.1f}/{med[512]:.1f}/{med[1024]:.1f} ms, "
           f"1024/512 ratio {ratio:.2f} in [2, 8]")


def test_09_tilt_fit():
    h_prime = 1.78
    series = TiltSeries([(t, h_prime * math.sin(math.radians(t)))
                         for t in (-20.0, -10.0, 10.0, 20.0, 30.0)])
    fit = fit_separation(series)
    exact_ok = (abs(fit.h_prime_um - h_prime) < 1e-12 * h_prime
                and fit.residual_rms_um < 1e-12)
    thickness = liquid_thickness(fit.h_prime_um, 0.1)
    thickness_ok = abs(thickness - 1.88) < 1e-9

    rng = np.random.default_rng(900)
    planted = 2.0
    angles = (-30.0, -20.0, -10.0, 10.0, 20.0, 30.0)
    covered = 0
    errs, stderrs = [], []
    for _ in range(100):
        noisy = TiltSeries([
            (t, planted * math.sin(math.radians(t)) + rng.normal(0.0, 0.01))
            for t in angles
        ])
        f = fit_separation(noisy)
        errs.append(f.h_prime_um - planted)
        stderrs.append(f.stderr_um)
        if abs(f.h_prime_um - planted) < 3 * f.stderr_um:
            covered += 1
    mc_ok = covered >= 95 and abs(np.mean(errs)) < 3 * np.mean(stderrs) / 10
    report(9, "tilt fit", exact_ok and thickness_ok and mc_ok,
           f"h' = {fit.h_prime_um:.6g} um exactly, h = {thickness:.6g} um, "
           f"Monte-Carlo coverage {covered}/100 within 3 stderr")


def test_10_profile_fit_and_center_gap():
    a, b = 2.3, 7.5
    points = [(0.0, 0.0, b)]
    for r in (10.0, 20.0, 30.0):
        for k in range(4):
            ang = math.pi * k / 2.0
            x, y = r * math.cos(ang), r * math.sin(ang)
            points.append((x, y, b - (a / 1e3) * r * r))
    fit = fit_profile(points)
    exact_ok = (abs(fit.a_per_mm - a) < 1e-9 * a and abs(fit.b_um - b) < 1e-9 * b)

    spec = CellSpec(w_um=50.0, w_a_um=68.0, s_um=0.5)
    center = empirical_thickness(0.0, spec)
    center_ok = abs(center - 6.81) < 0.01

    cmp = compare_center_thickness(MembraneFit(a_per_mm=a, b_um=b,
                                               residual_rms_um=0.0), spec)
    gap_ok = abs(cmp.gap_um - (b - center)) < 1e-9
    report(10, "profile fit", exact_ok and center_ok and gap_ok,
           f"a = {fit.a_per_mm:.6g}/mm, b = {fit.b_um:.6g} um, center law "
           f"{center:.3f} um vs fitted {cmp.fitted_um:.2f} um "
           f"(gap {cmp.gap_um:+.3f} um)")


def _cli(args, out):
    out.mkdir(parents=True, exist_ok=True)
    proc = subprocess.run(
        [sys.executable, "-m", "lctem.cli"] + args + ["--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    return out


def test_11_cli_determinism(tmp_path):
    train_args = ["train", "--synthetic", "5", "--size", "32", "--width", "2",
                  "--blocks", "1", "--epochs", "2", "--batch-size", "2",
                  "--loss", "l2", "--lr", "1e-3", "--seed", "3"]
    runs = {}
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        runs[name] = _cli(train_args + ["--threads", threads], tmp_path / f"t{name}")
    ckpt = runs["a"] / "model.ckpt"
    train_same = all(
        (runs["a"] / f).read_bytes() == (runs[k] / f).read_bytes()
        for k in ("b", "c") for f in ("model.ckpt", "train_log.csv")
    )

    eval_args = ["eval", str(ckpt), "--synthetic", "4", "--size", "32",
                 "--seed", "3"]
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        runs[f"e{name}"] = _cli(eval_args + ["--threads", threads],
                                tmp_path / f"e{name}")
    eval_same = all(
        (runs["ea"] / "eval.csv").read_bytes() == (runs[f"e{k}"] / "eval.csv").read_bytes()
        for k in ("b", "c")
    )

    stream_args = ["stream", str(ckpt), "--fps", "100", "--duration", "0.1",
                   "--scene-size", "32", "--particles", "4",
                   "--queue-capacity", "100", "--seed", "3"]
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        runs[f"s{name}"] = _cli(stream_args + ["--threads", threads],
                                tmp_path / f"s{name}")
    stream_same = True
    for k in ("b", "c"):
        stream_same &= ((runs["sa"] / "stream_telemetry.csv").read_bytes()
                        == (runs[f"s{k}"] / "stream_telemetry.csv").read_bytes())
        frames_a = sorted((runs["sa"] / "frames").glob("*.pgm"))
        frames_k = sorted((runs[f"s{k}"] / "frames").glob("*.pgm"))
        stream_same &= [f.name for f in frames_a] == [f.name for f in frames_k]
        stream_same &= all(fa.read_bytes() == fk.read_bytes()
                           for fa, fk in zip(frames_a, frames_k))
    report(11, "determinism", train_same and eval_same and stream_same,
           "train/eval/stream outputs byte-identical across repeat runs and "
           "thread caps {1, 4} (timing files excluded)")
