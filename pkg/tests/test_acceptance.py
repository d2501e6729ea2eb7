"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
verdict lines. Criteria 8 and 9 train networks and dominate the runtime
(tens of minutes on a single CPU core).
"""

import math
import time

import numpy as np
import pytest
import torch

from slaug import data as dt
from slaug.bezier import build_intensity_lut, sample_control_points
from slaug.cli import main, run_phantom_experiment
from slaug.core import AugConfig, RandomStream, decompose_by_class, recompose
from slaug.nnet import TinySegNet, TrainConfig, input_gradient, seg_loss
from slaug.saliency import fuse, normalize_saliency, saliency_map, smooth_saliency

torch.set_num_threads(1)


def verdict(name: str, ok: bool, extra: str = ""):
    tag = "PASS" if ok else "FAIL"
    suffix = f" ({extra})" if extra else ""
    print(f"\n[{tag}] {name}{suffix}")
    assert ok, f"{name}{suffix}"


# ------------------------------------------------------------------ 1


def test_criterion_1_bezier_monotone_curves():
    t0 = time.time()
    ok = True
    rng = RandomStream(0)
    for _ in range(10_000):
        cp = sample_control_points(0.0, 1.0, invert=False, rng=rng)
        lut = build_intensity_lut(cp, n=128)
        if (np.diff(lut.ys) < 0).any():
            ok = False
            break
        ends = lut(np.array([0.0, 1.0]))
        if abs(ends[0]) > 1e-6 or abs(ends[1] - 1.0) > 1e-6:
            ok = False
            break
    from slaug.bezier import BezierControlPoints

    ident = BezierControlPoints((0, 0), (1 / 3, 1 / 3), (2 / 3, 2 / 3), (1, 1), inverted=False)
    xs = np.linspace(0, 1, 5000)
    ident_err = np.abs(build_intensity_lut(ident, n=1000)(xs) - xs).max()
    elapsed = time.time() - t0
    ok = ok and ident_err < 1e-6 and elapsed < 5.0
    verdict("criterion 1: bezier curve correctness", ok, f"identity err {ident_err:.2e}, {elapsed:.2f}s")


# ------------------------------------------------------------------ 2


def test_criterion_2_partition_identity():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(1000):
        h, w = rng.integers(1, 24, size=2)
        c = int(rng.integers(1, 6))
        x = rng.normal(size=(h, w))
        m = rng.integers(0, c, size=(h, w))
        if not np.array_equal(recompose(decompose_by_class(x, m, c)), x):
            ok = False
            break
    verdict("criterion 2: partition identity exact on 1000 pairs", ok)


# ------------------------------------------------------------------ 3


def test_criterion_3_gla_lla_replay():
    from slaug.augment import foreground_mask, gla, lla

    spec = dt.PhantomSpec(size=48, num_classes=3, intensity_bands=((0.2, 0.32), (0.4, 0.55), (0.6, 0.8)))
    cfg = AugConfig()
    ok = True
    for seed in range(100):
        x, lab = dt.generate_phantom(spec, RandomStream(seed))
        fg = foreground_mask(x)
        g = gla(x, fg, cfg, RandomStream(seed).child("g"))
        expected = x.copy()
        mask = fg > 0
        expected[mask] = g.record.alpha * g.record.lut(x[mask]) + g.record.beta
        if not np.array_equal(g.image, expected) or not np.array_equal(g.image[~mask], x[~mask]):
            ok = False
            break
        l = lla(x, lab, spec.num_classes, fg, cfg, RandomStream(seed).child("l"))
        expected = x.copy()
        for c, rec in l.records.items():
            sup = (lab == c) & mask
            expected[sup] = rec.alpha * rec.lut(x[sup]) + rec.beta
        if not np.array_equal(l.image, expected) or not np.array_equal(l.image[~mask], x[~mask]):
            ok = False
            break
    verdict("criterion 3: GLA/LLA replay exact on 100 slices", ok)


# ------------------------------------------------------------------ 4


def test_criterion_4_fusion_convexity():
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(1000):
        xg = rng.normal(size=(8, 8))
        xl = rng.normal(size=(8, 8))
        s = rng.uniform(size=(8, 8))
        out = fuse(xg, xl, s)
        lo = np.minimum(xg, xl) - 1e-12
        hi = np.maximum(xg, xl) + 1e-12
        if (out < lo).any() or (out > hi).any():
            ok = False
            break
    xg = rng.normal(size=(8, 8))
    xl = rng.normal(size=(8, 8))
    ok = ok and np.array_equal(fuse(xg, xl, np.ones((8, 8))), xg)
    ok = ok and np.array_equal(fuse(xg, xl, np.zeros((8, 8))), xl)
    verdict("criterion 4: fusion convexity over 1000 triples", ok)


# ------------------------------------------------------------------ 5


def test_criterion_5_saliency_chain():
    ok = np.array_equal(saliency_map([np.full((24, 24), 3.0)], 3), np.ones((24, 24)))
    const_err = np.abs(smooth_saliency(np.full((20, 30), 1.7), 4) - 1.7).max()
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(20, 20)), rng.uniform(size=(20, 20))
    lin_err = np.abs(
        smooth_saliency(2.0 * x - 3.0 * y, 3) - (2.0 * smooth_saliency(x, 3) - 3.0 * smooth_saliency(y, 3))
    ).max()
    shapes_ok = all(
        smooth_saliency(rng.uniform(size=shape), g).shape == shape
        for shape, g in (((16, 16), 1), ((17, 31), 3), ((96, 96), 5))
    )
    ok = ok and const_err < 1e-6 and lin_err < 1e-6 and shapes_ok
    verdict(
        "criterion 5: saliency chain degenerate/constant/linear",
        ok,
        f"const err {const_err:.1e}, lin err {lin_err:.1e}",
    )


# ------------------------------------------------------------------ 6


def test_criterion_6_gradient_check():
    t0 = time.time()
    net = TinySegNet(num_classes=3, seed=13, dtype=torch.float64)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(16, 16))
    lab = rng.integers(0, 3, size=(16, 16))
    eps = 1e-6

    # input gradient at >= 50 probe pixels
    g = input_gradient(net, x, lab)
    max_rel = 0.0
    probes = 0
    for _ in range(60):
        i, j = rng.integers(0, 16, size=2)
        xp, xm = x.copy(), x.copy()
        xp[i, j] += eps
        xm[i, j] -= eps
        with torch.no_grad():
            fd = (
                float(seg_loss(net(torch.from_numpy(xp)), lab)) - float(seg_loss(net(torch.from_numpy(xm)), lab))
            ) / (2 * eps)
        rel = abs(fd - g[0, i, j]) / max(abs(fd), abs(g[0, i, j]), 1e-8)
        max_rel = max(max_rel, rel)
        probes += 1

    # parameter gradients: analytic backward vs central differences,
    # a few probe coordinates in every parameter tensor
    t = torch.from_numpy(x)
    loss = seg_loss(net(t), lab)
    grads = torch.autograd.grad(loss, list(net.parameters()))
    with torch.no_grad():
        for p, an in zip(net.parameters(), grads):
            flat = p.view(-1)
            for k in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                orig = float(flat[k])
                flat[k] = orig + eps
                lp = float(seg_loss(net(t), lab))
                flat[k] = orig - eps
                lm = float(seg_loss(net(t), lab))
                flat[k] = orig
                fd = (lp - lm) / (2 * eps)
                an_k = float(an.view(-1)[k])
                rel = abs(fd - an_k) / max(abs(fd), abs(an_k), 1e-8)
                max_rel = max(max_rel, rel)
                probes += 1

    elapsed = time.time() - t0
    ok = max_rel < 1e-3 and probes >= 50 and elapsed < 30.0
    verdict(
        "criterion 6: gradient finite-difference check",
        ok,
        f"max rel err {max_rel:.2e} over {probes} probes, {elapsed:.1f}s",
    )


# ------------------------------------------------------------------ 7


def test_criterion_7_loss_sanity():
    c, h, w = 5, 12, 12
    lab = np.random.default_rng(4).integers(0, c, size=(h, w))
    uniform = torch.full((1, c, h, w), 1.0 / c, dtype=torch.float64)
    # isolate the CE term by subtracting the analytically known Dice term
    counts = np.bincount(lab.ravel(), minlength=c)
    dice_term = 1.0 - np.mean([(2 * n / c + 1.0) / (h * w / c + n + 1.0) for n in counts])
    ce_uniform = float(seg_loss(uniform, lab)) - dice_term
    ce_ok = abs(ce_uniform - math.log(c)) < 1e-6

    onehot = np.zeros((1, c, h, w))
    for cc in range(c):
        onehot[0, cc] = lab == cc
    perfect = float(seg_loss(torch.from_numpy(onehot), lab))
    # CE of exact one-hot is 0; Dice residual is bounded by the eps=1 smoothing
    dice_bound = 1.0 - np.mean([(2 * n + 1.0) / (2 * n + 1.0) for n in counts]) + 1e-12
    onehot_ok = perfect < 1e-6 + dice_bound + 1e-9
    verdict(
        "criterion 7: loss sanity at uniform and one-hot predictions",
        ce_ok and onehot_ok,
        f"ce err {abs(ce_uniform - math.log(c)):.1e}, one-hot loss {perfect:.2e}",
    )


# ------------------------------------------------------------------ 8 & 9 (shared experiment)

EXP_CFG = AugConfig(
    sigma2=0.25,
    rotate_deg=10.0,
    shift_px=5.0,
    shear_deg=5.0,
    scale_range=(0.9, 1.1),
    elastic_alpha=10.0,
    contrast_range=(0.9, 1.1),
    gamma_range=(0.7, 1.4),
    noise_std=0.05,
)
EXP_TCFG = TrainConfig(lr=5e-3, epochs=40, batch_size=8, decay_start=40)


@pytest.fixture(scope="module")
def phantom_rows():
    t0 = time.time()
    rows = run_phantom_experiment(
        seeds=[0, 1, 2],
        variants=["erm", "gla+lla", "slaug", "random-fusion"],
        cfg=EXP_CFG,
        tcfg=EXP_TCFG,
        size=96,
        num_classes=5,
        n_train=48,
        n_test=12,
    )
    elapsed = time.time() - t0
    print(f"\nphantom experiment wall time: {elapsed / 60:.1f} min (single CPU core)")
    return rows


def _mean_over_seeds(rows, variant, col):
    vals = [r[col] for r in rows if r[0] == variant]
    return float(np.mean(vals))


def test_criterion_8_phantom_sdg_ordering(phantom_rows):
    erm = _mean_over_seeds(phantom_rows, "erm", 3)
    glalla = _mean_over_seeds(phantom_rows, "gla+lla", 3)
    slaug = _mean_over_seeds(phantom_rows, "slaug", 3)
    ok = slaug > glalla > erm and (slaug - erm) >= 5.0
    verdict(
        "criterion 8: phantom target-Dice ordering slaug > gla+lla > erm by >= 5",
        ok,
        f"erm {erm:.2f}, gla+lla {glalla:.2f}, slaug {slaug:.2f}",
    )


def test_criterion_9_fusion_variant_probe(phantom_rows):
    slaug_src = _mean_over_seeds(phantom_rows, "slaug", 4)
    rand_src = _mean_over_seeds(phantom_rows, "random-fusion", 4)
    ok = slaug_src >= rand_src
    verdict(
        "criterion 9: saliency fusion source Dice >= random-map fusion",
        ok,
        f"slaug {slaug_src:.2f}, random {rand_src:.2f}",
    )


# ------------------------------------------------------------------ 10


def test_criterion_10_determinism(tmp_path):
    argv = [
        "phantom", "--seed", "1", "--seeds", "1", "--variants", "erm,slaug",
        "--size", "32", "--slices", "8", "--test-slices", "2",
        "--epochs", "2", "--batch", "4", "--lr", "1e-3",
    ]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(argv + ["--out", str(out_a)]) == 0
    assert main(argv + ["--out", str(out_b)]) == 0
    reports_ok = (out_a / "report.txt").read_bytes() == (out_b / "report.txt").read_bytes()

    rng = np.random.default_rng(5)
    f = rng.uniform(size=(13, 17)).astype(np.float32)
    u = rng.integers(0, 200, size=(13, 17))
    pf, pu = tmp_path / "f.img", tmp_path / "u.img"
    dt.write_raster(f, pf)
    dt.write_raster(u, pu)
    rasters_ok = np.array_equal(dt.read_raster(pf).astype(np.float32), f) and np.array_equal(dt.read_raster(pu), u)
    verdict("criterion 10: byte-identical reruns and bit-exact raster round trips", reports_ok and rasters_ok)
