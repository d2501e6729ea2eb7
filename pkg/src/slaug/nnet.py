"""Desk-scale differentiable segmentation network and the training step.

A 3-level encoder-decoder (~30k parameters, channel widths 8/16/32, two 2x2
poolings, skip connections, per-pixel softmax head) stands in for a full U-Net
backbone. The objective is cross entropy plus soft Dice; input gradients of
that objective drive the saliency-balancing fusion inside the training step.

Everything runs on CPU with seeded initialization, so reruns are
byte-identical. The default dtype is float32; gradient-check builds use
float64, where finite-difference tolerances are actually attainable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import common_augment, foreground_mask, gla, lla
from .core import AugConfig, RandomStream, minmax_normalize
from .saliency import fuse, saliency_map

__all__ = [
    "TinySegNet",
    "TrainConfig",
    "seg_loss",
    "input_gradient",
    "dice_score",
    "lr_schedule",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

DICE_EPS = 1.0


class TinySegNet(nn.Module):
    """Small encoder-decoder producing per-pixel class probabilities.

    Input height and width must be divisible by 4 (two pooling stages).
    Parameters are initialized with fan-in scaled Gaussians drawn from a
    seeded stream, so construction is reproducible across platforms.

    Default dtype is float32; pass dtype=torch.float64 for gradient-check
    builds (finite-difference tolerances are unattainable in single
    precision).
    """

    def __init__(self, num_classes: int, in_channels: int = 1, seed: int = 0, dtype=torch.float32):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.in_channels = in_channels

        c1, c2, c3 = 8, 16, 32
        block = lambda ci, co: nn.Sequential(
            nn.Conv2d(ci, co, 3, padding=1),
            nn.GroupNorm(max(co // 4, 1), co),
            nn.ReLU(),
        )
        self.enc1 = nn.Sequential(block(in_channels, c1), block(c1, c1))
        self.enc2 = nn.Sequential(block(c1, c2), block(c2, c2))
        self.bott = nn.Sequential(block(c2, c3), block(c3, c3))
        self.dec2 = nn.Sequential(block(c3 + c2, c2), block(c2, c2))
        self.dec1 = nn.Sequential(block(c2 + c1, c1), block(c1, c1))
        self.head = nn.Conv2d(c1, num_classes, 1)

        self.to(dtype)
        self.dtype = dtype
        self._init_params(seed)

    def _init_params(self, seed: int):
        rng = RandomStream(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if p.ndim > 1:  # conv weight: He-style fan-in scaling
                    fan_in = int(np.prod(p.shape[1:]))
                    vals = rng.child("init", name).normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(p.shape))
                    p.copy_(torch.from_numpy(vals))
                elif "bias" in name:
                    p.zero_()
                else:  # norm gains
                    p.fill_(1.0)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input dimensions must be divisible by 4, got {h}x{w}")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bott(F.max_pool2d(e2, 2))
        u2 = F.interpolate(b, scale_factor=2, mode="nearest")
        d2 = self.dec2(torch.cat([u2, e2], dim=1))
        u1 = F.interpolate(d2, scale_factor=2, mode="nearest")
        d1 = self.dec1(torch.cat([u1, e1], dim=1))
        return self.head(d1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities, shape (N, C, H, W)."""
        return torch.softmax(self.logits(x), dim=1)


def _to_tensor(x, dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64)).to(dtype)


def seg_loss(probs: torch.Tensor, labels, num_classes: int | None = None) -> torch.Tensor:
    """Cross entropy plus soft Dice on per-pixel probabilities.

    CE is the mean negative log-likelihood of the true class; Dice is
    1 - mean_c (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps) with eps = 1.
    """
    if probs.ndim == 3:
        probs = probs[None]
    n, c, h, w = probs.shape
    lab = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if lab.ndim == 2:
        lab = lab[None]
    if lab.shape != (n, h, w):
        raise ValueError(f"label shape {tuple(lab.shape)} incompatible with probs {tuple(probs.shape)}")
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"labels must lie in [0, {c - 1}]")

    p_true = probs.gather(1, lab[:, None]).squeeze(1)
    ce = -torch.log(p_true.clamp_min(1e-30)).mean()

    onehot = F.one_hot(lab, c).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    dice = 1.0 - ((2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()
    return ce + dice


def input_gradient(net: TinySegNet, x, labels) -> np.ndarray:
    """Gradient of the objective w.r.t. the input pixels, shape (N, C_in, H, W).

    Uses autograd.grad only, so network parameters are untouched. For a batch,
    per-sample losses are summed first; samples do not interact, so each
    slice of the result is that sample's own gradient.
    """
    t = _to_tensor(x, net.dtype)
    squeeze = t.ndim == 2
    if squeeze:
        t = t[None]
    t = t.clone().requires_grad_(True)
    probs = net(t)
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim == 2:
        lab = lab[None]
    total = sum(seg_loss(probs[i], lab[i]) for i in range(probs.shape[0]))
    (grad,) = torch.autograd.grad(total, t)
    g = grad.detach().numpy()
    if g.ndim == 3:
        g = g[:, None]
    return g[0] if squeeze else g


def dice_score(pred, gt, num_classes: int) -> dict[int, float]:
    """Per-foreground-class Dice in [0, 100]; classes absent from both are omitted."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    scores: dict[int, float] = {}
    for c in range(1, num_classes):
        np_c = (p == c).sum()
        ng_c = (g == c).sum()
        if np_c == 0 and ng_c == 0:
            continue
        inter = ((p == c) & (g == c)).sum()
        scores[c] = 100.0 * 2.0 * inter / (np_c + ng_c)
    return scores


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 3e-5
    batch_size: int = 8
    epochs: int = 60
    decay_start: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def lr_schedule(epoch: int, tcfg: TrainConfig) -> float:
    """Constant for the first decay_start epochs, then linear decay to zero.

    Epochs are 1-based; lr(decay_start) == lr and lr(epochs) == 0 when the
    schedule has room to decay.
    """
    if tcfg.epochs <= tcfg.decay_start or epoch <= tcfg.decay_start:
        return tcfg.lr
    return tcfg.lr * (tcfg.epochs - epoch) / (tcfg.epochs - tcfg.decay_start)


VARIANTS = ("erm", "gla", "lla", "gla+lla", "slaug", "random-fusion", "no-fusion")


class Trainer:
    """Owns the network and optimizer; one train_step per batch."""

    def __init__(self, net: TinySegNet, tcfg: TrainConfig):
        self.net = net
        self.tcfg = tcfg
        self.opt = torch.optim.Adam(
            net.parameters(), lr=tcfg.lr, betas=(0.9, 0.999), weight_decay=tcfg.weight_decay
        )

    def set_lr(self, lr: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = lr

    def augment_sample(self, x, labels, num_classes: int, cfg: AugConfig, rng: RandomStream, variant: str):
        """Run the augmentation stages for one slice; fusion happens later.

        Returns (images, labels_aug) where images is the list of intensity
        images awaiting the shared training step. For fusion variants the
        list is [gla_image, lla_image] and the caller blends the second entry.
        """
        xn = minmax_normalize(x)
        fg = foreground_mask(xn)
        if variant == "erm":
            ag, _, lab = common_augment(xn, xn, labels, num_classes, cfg, rng.child("common"))
            return [ag], lab
        xg = gla(xn, fg, cfg, rng.child("gla")).image
        xl = lla(xn, labels, num_classes, fg, cfg, rng.child("lla")).image
        if variant == "gla":
            ag, _, lab = common_augment(xg, xg, labels, num_classes, cfg, rng.child("common"))
            return [ag], lab
        if variant == "lla":
            al, _, lab = common_augment(xl, xl, labels, num_classes, cfg, rng.child("common"))
            return [al], lab
        ag, al, lab = common_augment(xg, xl, labels, num_classes, cfg, rng.child("common"))
        return [ag, al], lab

    def train_step(self, batch, cfg: AugConfig, rng: RandomStream, variant: str = "slaug", lr: float | None = None):
        """One optimizer step over a batch of (image, labels) pairs.

        Implements the full augmentation pipeline per sample, a gradient-only
        saliency pass on the GLA images (no parameter update), fusion, and a
        single Adam step on the assembled training batch.
        """
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if not batch:
            raise ValueError("empty batch")
        if lr is not None:
            self.set_lr(lr)

        train_imgs: list[np.ndarray] = []
        train_labs: list[np.ndarray] = []
        fuse_pairs: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []  # (xg, xl, labels)
        fuse_rngs: list[RandomStream] = []
        for i, (x, labels) in enumerate(batch):
            srng = rng.child("sample", i)
            num_classes = self.net.num_classes
            images, lab = self.augment_sample(x, labels, num_classes, cfg, srng, variant)
            if variant in ("erm", "gla", "lla"):
                train_imgs.append(images[0])
                train_labs.append(lab)
            elif variant in ("gla+lla", "no-fusion"):
                train_imgs += images
                train_labs += [lab, lab]
            else:  # slaug, random-fusion
                fuse_pairs.append((images[0], images[1], lab))
                fuse_rngs.append(srng.child("fusion"))

        if fuse_pairs:
            xg_batch = np.stack([p[0] for p in fuse_pairs])
            lab_batch = np.stack([p[2] for p in fuse_pairs])
            if variant == "slaug":
                grads = input_gradient(self.net, xg_batch, lab_batch)
            for i, (xg_i, xl_i, lab_i) in enumerate(fuse_pairs):
                if variant == "slaug":
                    s = saliency_map([grads[i, 0]], cfg.grid_size)
                else:  # random-fusion: smoothed random map instead of saliency
                    noise = fuse_rngs[i].uniform(0.0, 1.0, size=xg_i.shape)
                    s = saliency_map([noise], cfg.grid_size)
                fused = fuse(xg_i, xl_i, s)
                train_imgs += [xg_i, fused]
                train_labs += [lab_i, lab_i]

        xb = _to_tensor(np.stack(train_imgs), self.net.dtype)
        lb = np.stack(train_labs)
        self.opt.zero_grad()
        loss = seg_loss(self.net(xb), lb)
        loss.backward()
        self.opt.step()
        return {"loss": float(loss.detach())}


class CheckpointError(ValueError):
    pass


_CKPT_MAGIC = b"SLAUGNET"
_CKPT_VERSION = 1


def save_checkpoint(net: TinySegNet, path) -> None:
    """Versioned binary container: parameter names, shapes, f64 LE payloads."""
    params = sorted(net.state_dict().items())
    out = bytearray(_CKPT_MAGIC)
    out += struct.pack("<HHHI", _CKPT_VERSION, net.num_classes, net.in_channels, len(params))
    for name, tensor in params:
        a = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", a.ndim)
        for d in a.shape:
            out += struct.pack("<I", d)
        out += a.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> TinySegNet:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, num_classes, in_channels, count = struct.unpack("<HHHI", blob[8:18])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    net = TinySegNet(num_classes=num_classes, in_channels=in_channels)
    state = {}
    off = 18
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            a = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            state[name] = torch.from_numpy(a.copy())
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameter mismatch ({e})") from e
    return net
