"""Command-line front end: augment datasets, run the phantom experiment, train, eval, demo."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import data as dt
from .augment import foreground_mask, gla, lla
from .core import AugConfig, RandomStream, minmax_normalize
from .nnet import (
    CheckpointError,
    TinySegNet,
    TrainConfig,
    Trainer,
    dice_score,
    input_gradient,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
)
from .saliency import fuse, saliency_map

log = logging.getLogger("slaug")

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_INPUT = 2
EXIT_CHECKPOINT = 3
EXIT_MISMATCH = 4

PHANTOM_VARIANTS = ("erm", "gla", "lla", "gla+lla", "slaug")


def _setup_logging():
    level = os.environ.get("SLAUG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")


def _aug_config(args) -> AugConfig:
    return AugConfig(
        sigma1=args.sigma1,
        sigma2=args.sigma2,
        grid_size=args.grid_size,
    )


def _add_common_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma1", type=float, default=0.1)
    p.add_argument("--sigma2", type=float, default=0.5)
    p.add_argument("--grid-size", type=int, default=3)
    p.add_argument("--out", type=Path, required=True)


def _load_dataset(root: Path, split: str):
    entries = [e for e in dt.read_manifest(root) if e.split == split]
    pairs = []
    for e in entries:
        img = dt.read_raster(root / e.image)
        lab = dt.read_raster(root / e.label)
        if img.shape != lab.shape:
            raise ValueError(f"slice {e.id}: image/label shape mismatch")
        pairs.append((e.id, img, lab))
    return pairs


# ---------------------------------------------------------------- augment


def cmd_augment(args) -> int:
    cfg = _aug_config(args)
    try:
        slices = _load_dataset(args.data, "train")
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    net = None
    if args.checkpoint is not None:
        try:
            net = load_checkpoint(args.checkpoint)
        except (OSError, CheckpointError) as e:
            print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
            return EXIT_CHECKPOINT
    else:
        log.info("no checkpoint given; emitting GLA/LLA pairs only (no saliency/fused outputs)")

    args.out.mkdir(parents=True, exist_ok=True)
    root = RandomStream(args.seed)

    def process(item):
        sid, img, lab = item
        num_classes = int(lab.max()) + 1
        xn = minmax_normalize(img)
        fg = foreground_mask(xn)
        srng = root.child("slice", sid)
        xg = gla(xn, fg, cfg, srng.child("gla")).image
        xl = lla(xn, lab, num_classes, fg, cfg, srng.child("lla")).image
        dt.write_raster(xg.astype(np.float32), args.out / f"{sid}_gla.img")
        dt.write_raster(xl.astype(np.float32), args.out / f"{sid}_lla.img")
        panels = {"input": xn, "gla": xg, "lla": xl}
        if net is not None:
            if net.num_classes < num_classes:
                raise ValueError(f"slice {sid}: {num_classes} classes but checkpoint has {net.num_classes}")
            grad = input_gradient(net, xg, lab)
            s = saliency_map([grad[0]], cfg.grid_size)
            fused = fuse(xg, xl, s)
            dt.write_raster(s.astype(np.float32), args.out / f"{sid}_saliency.img")
            dt.write_raster(fused.astype(np.float32), args.out / f"{sid}_fused.img")
            panels.update({"saliency": s, "fused": fused})
        if args.panels:
            dt.export_panel(panels, args.out / f"{sid}_panel.pgm")

    try:
        if args.workers > 1:
            with ThreadPoolExecutor(max_workers=args.workers) as pool:
                list(pool.map(process, slices))
        else:
            for item in slices:
                process(item)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    log.info("augmented %d slices into %s", len(slices), args.out)
    return EXIT_OK


# ---------------------------------------------------------------- training helpers


def _epoch_batches(n: int, batch_size: int, rng: RandomStream):
    order = np.arange(n)
    perm = rng.integers(0, 2**31, size=n)
    order = order[np.argsort(perm, kind="stable")]
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _train_model(train_pairs, num_classes, cfg, tcfg, variant, seed, log_lines=None):
    """Train one network on (image, label) pairs; returns the Trainer."""
    torch.set_num_threads(1)  # keeps reruns bit-identical
    root = RandomStream(seed)
    net = TinySegNet(num_classes=num_classes, seed=root.child("net").seed)
    trainer = Trainer(net, tcfg)
    for epoch in range(1, tcfg.epochs + 1):
        lr = lr_schedule(epoch, tcfg)
        erng = root.child("epoch", epoch)
        losses = []
        for bi, idx in enumerate(_epoch_batches(len(train_pairs), tcfg.batch_size, erng.child("shuffle"))):
            batch = [train_pairs[i] for i in idx]
            metrics = trainer.train_step(batch, cfg, erng.child("batch", bi), variant=variant, lr=lr)
            losses.append(metrics["loss"])
        mean_loss = float(np.mean(losses))
        if log_lines is not None:
            log_lines.append(f"{epoch}\t{lr:.8f}\t{mean_loss:.6f}")
        log.info("[%s seed %d] epoch %d lr %.6g loss %.4f", variant, seed, epoch, lr, mean_loss)
    return trainer


def _eval_dice(net, pairs, num_classes):
    """Aggregate per-class Dice over a list of (image, label) slices."""
    preds, gts = [], []
    with torch.no_grad():
        for img, lab in pairs:
            probs = net(torch.as_tensor(minmax_normalize(img)[None]).to(net.dtype))
            preds.append(probs.argmax(dim=1).numpy()[0])
            gts.append(lab)
    return dice_score(np.vstack(preds), np.vstack(gts), num_classes)


# ---------------------------------------------------------------- phantom experiment


def _make_phantom_sets(spec, seed, n_train, n_val, n_test):
    root = RandomStream(seed)
    gen = lambda tag, n: [dt.generate_phantom(spec, root.child(tag, i)) for i in range(n)]
    train = gen("train", n_train)
    val = gen("val", n_val)
    src_test = gen("test", n_test)
    tgt_test = []
    for i, (img, lab) in enumerate(gen("target", n_test)):
        shifted = dt.shift_domain(img, lab, spec, root.child("shift", i))
        tgt_test.append((shifted.image, lab))
    return train, val, src_test, tgt_test


def run_phantom_experiment(seeds, variants, cfg, tcfg, size=96, num_classes=5, n_train=200, n_test=20):
    """Train each variant on source phantoms; evaluate on source and shifted target.

    Returns rows of (variant, seed, per-class target dice, mean target, mean source).
    """
    spec = dt.PhantomSpec(size=size, num_classes=num_classes)
    rows = []
    for seed in seeds:
        train, _, src_test, tgt_test = _make_phantom_sets(spec, seed, n_train, 10, n_test)
        train_pairs = [(img, lab) for img, lab in train]
        for variant in variants:
            trainer = _train_model(train_pairs, num_classes, cfg, tcfg, variant, seed)
            tgt = _eval_dice(trainer.net, tgt_test, num_classes)
            src = _eval_dice(trainer.net, src_test, num_classes)
            per_class = [tgt.get(c, float("nan")) for c in range(1, num_classes)]
            mean_tgt = float(np.mean([v for v in tgt.values()])) if tgt else 0.0
            mean_src = float(np.mean([v for v in src.values()])) if src else 0.0
            rows.append((variant, seed, per_class, mean_tgt, mean_src))
            log.info("[%s seed %d] target dice %.2f source dice %.2f", variant, seed, mean_tgt, mean_src)
    return rows


def format_phantom_report(rows, num_classes) -> str:
    header = ["variant", "seed"] + [f"class{c}" for c in range(1, num_classes)] + ["mean_target", "mean_source"]
    lines = ["\t".join(header)]
    for variant, seed, per_class, mean_tgt, mean_src in rows:
        cells = [variant, str(seed)] + [f"{v:.2f}" for v in per_class] + [f"{mean_tgt:.2f}", f"{mean_src:.2f}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_phantom(args) -> int:
    cfg = _aug_config(args)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, decay_start=args.decay_start, seed=args.seed)
    seeds = [args.seed + i for i in range(args.seeds)]
    variants = args.variants.split(",") if args.variants else list(PHANTOM_VARIANTS)
    rows = run_phantom_experiment(
        seeds, variants, cfg, tcfg, size=args.size, n_train=args.slices, n_test=args.test_slices
    )
    args.out.mkdir(parents=True, exist_ok=True)
    report = format_phantom_report(rows, num_classes=5)
    (args.out / "report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval


def cmd_train(args) -> int:
    cfg = _aug_config(args)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, decay_start=args.decay_start, seed=args.seed)
    try:
        slices = _load_dataset(args.data, "train")
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    if not slices:
        print("error: no training slices in manifest", file=sys.stderr)
        return EXIT_INPUT
    num_classes = max(int(lab.max()) for _, _, lab in slices) + 1
    h, w = slices[0][1].shape
    if h % 4 or w % 4:
        print(f"error: slice dimensions {h}x{w} not divisible by 4", file=sys.stderr)
        return EXIT_MISMATCH
    pairs = [(img, lab) for _, img, lab in slices]
    log_lines: list[str] = []
    trainer = _train_model(pairs, num_classes, cfg, tcfg, args.variant, args.seed, log_lines)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trainer.net, args.out / "checkpoint.net")
    (args.out / "loss_log.tsv").write_text("epoch\tlr\tmean_loss\n" + "\n".join(log_lines) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        net = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    try:
        slices = _load_dataset(args.data, args.split)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    if not slices:
        print(f"error: no {args.split} slices in manifest", file=sys.stderr)
        return EXIT_INPUT
    num_classes = max(int(lab.max()) for _, _, lab in slices) + 1
    h, w = slices[0][1].shape
    if num_classes > net.num_classes or h % 4 or w % 4:
        print(
            f"error: data ({num_classes} classes, {h}x{w}) incompatible with checkpoint "
            f"({net.num_classes} classes)",
            file=sys.stderr,
        )
        return EXIT_MISMATCH
    scores = _eval_dice(net, [(img, lab) for _, img, lab in slices], net.num_classes)
    lines = ["class\tdice"]
    for c, v in sorted(scores.items()):
        lines.append(f"{c}\t{v:.2f}")
    mean = float(np.mean(list(scores.values()))) if scores else 0.0
    lines.append(f"mean\t{mean:.2f}")
    report = "\n".join(lines) + "\n"
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "dice_report.tsv").write_text(report)
    print(report, end="")
    return EXIT_OK


# ---------------------------------------------------------------- demo


def _curve_panel(lut, size=192):
    """Rasterize an intensity curve (xs, ys in [0,1]) into a square grid."""
    panel = np.zeros((size, size))
    xs = np.linspace(lut.v_low, lut.v_high, size * 4)
    ys = lut(xs)
    span = lut.v_high - lut.v_low
    cols = np.clip(((xs - lut.v_low) / span * (size - 1)).round().astype(int), 0, size - 1)
    rows = np.clip((size - 1 - (ys - lut.v_low) / span * (size - 1)).round().astype(int), 0, size - 1)
    panel[rows, cols] = 1.0
    return panel


def cmd_demo(args) -> int:
    cfg = _aug_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    spec = dt.PhantomSpec(size=96, num_classes=5)
    root = RandomStream(args.seed)
    img, lab = dt.generate_phantom(spec, root.child("phantom"))
    xn = minmax_normalize(img)
    fg = foreground_mask(xn)

    g = gla(xn, fg, cfg, root.child("gla"))
    l = lla(xn, lab, spec.num_classes, fg, cfg, root.child("lla"))

    # curve panels: forward curve from the GLA draw plus per-class LLA curves
    curves = {"gla_curve": _curve_panel(g.record.lut)}
    for c, rec in sorted(l.records.items()):
        curves[f"lla_curve_c{c}"] = _curve_panel(rec.lut)
    dt.export_panel(curves, args.out / "curves.pgm")

    net = TinySegNet(num_classes=spec.num_classes, seed=root.child("net").seed)
    grad = input_gradient(net, g.image, lab)
    s = saliency_map([grad[0]], cfg.grid_size)
    fused = fuse(g.image, l.image, s)
    dt.export_panel(
        {"input": xn, "gla": g.image, "saliency": s, "lla": l.image, "fused": fused},
        args.out / "pipeline.pgm",
    )
    print(f"wrote {args.out / 'curves.pgm'} and {args.out / 'pipeline.pgm'}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slaug", description="Location-scale augmentation engine and training harness")
    sub = p.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("augment", help="augment a dataset on disk")
    _add_common_flags(pa)
    pa.add_argument("--data", type=Path, required=True)
    pa.add_argument("--checkpoint", type=Path, default=None)
    pa.add_argument("--workers", type=int, default=1)
    pa.add_argument("--panels", action="store_true")
    pa.set_defaults(func=cmd_augment)

    pp = sub.add_parser("phantom", help="run the phantom generalization experiment")
    _add_common_flags(pp)
    pp.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    pp.add_argument("--variants", type=str, default=None, help="comma-separated variant list")
    pp.add_argument("--size", type=int, default=96)
    pp.add_argument("--slices", type=int, default=200)
    pp.add_argument("--test-slices", type=int, default=20)
    pp.add_argument("--epochs", type=int, default=60)
    pp.add_argument("--batch", type=int, default=8)
    pp.add_argument("--lr", type=float, default=3e-4)
    pp.add_argument("--decay-start", type=int, default=50)
    pp.set_defaults(func=cmd_phantom)

    pt = sub.add_parser("train", help="train a checkpoint on a dataset")
    _add_common_flags(pt)
    pt.add_argument("--data", type=Path, required=True)
    pt.add_argument("--variant", type=str, default="slaug")
    pt.add_argument("--epochs", type=int, default=60)
    pt.add_argument("--batch", type=int, default=8)
    pt.add_argument("--lr", type=float, default=3e-4)
    pt.add_argument("--decay-start", type=int, default=50)
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common_flags(pe)
    pe.add_argument("--data", type=Path, required=True)
    pe.add_argument("--checkpoint", type=Path, required=True)
    pe.add_argument("--split", type=str, default="test")
    pe.set_defaults(func=cmd_eval)

    pd = sub.add_parser("demo", help="emit curve and pipeline demonstration panels")
    _add_common_flags(pd)
    pd.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # anything unplanned is a generic failure
        log.exception("unhandled error")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
