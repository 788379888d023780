"""Supervised training: weighted L1 + SSIM loss, Adam, step-decayed learning rate."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from . import tensor as T
from .checkpoint import load_network, save_network
from .datasetgen import read_manifest
from .imageio import ImageFormatError, read_image, to_unit
from .optim import Adam, AdamState

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,step,l1,ssim_loss,total,lr"


@dataclass
class TrainConfig:
    lam: float = 0.2
    lr0: float = 1e-4
    lr_decay_every: int = 200
    lr_decay_factor: float = 10.0
    epochs: int = 300
    batch: int = 8
    crop: int = 256
    seed: int = 0
    ssim_window: int = losses.SSIM_WINDOW
    ssim_sigma: float = losses.SSIM_SIGMA
    c1: float = losses.SSIM_C1
    c2: float = losses.SSIM_C2
    checkpoint_every: int = 10
    max_steps: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.crop < self.ssim_window:
            raise ValueError(f"crop {self.crop} is smaller than the SSIM window {self.ssim_window}")
        if self.lr_decay_every < 1 or self.epochs < 0:
            raise ValueError("lr_decay_every must be >= 1 and epochs >= 0")


@dataclass
class LossReport:
    l1: float
    ssim_loss: float
    total: float
    epoch: int = 0
    step: int = 0
    lr: float = 0.0

    def csv(self):
        return f"{self.epoch},{self.step},{self.l1:.9g},{self.ssim_loss:.9g},{self.total:.9g},{self.lr:.9g}"


@dataclass
class TrainResult:
    net: object
    curve: list = field(default_factory=list)
    optimizer: AdamState | None = None
    epochs_done: int = 0


def lr_at(epoch, cfg):
    """Learning rate for a 0-based epoch: lr0 divided by the factor every ``lr_decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def ssim(o, i, cfg=None):
    cfg = cfg or TrainConfig()
    return losses.ssim(o, i, cfg.ssim_window, cfg.ssim_sigma, cfg.c1, cfg.c2)


def total_loss(pred, gt, cfg=None):
    """Return (loss tensor, LossReport) for ``lam * L1 + (1 - lam) * (1 - SSIM)``."""
    cfg = cfg or TrainConfig()
    l1 = losses.l1_loss(pred, gt)
    ls = T.sub(1.0, ssim(pred, gt, cfg))
    total = T.add(T.mul(l1, cfg.lam), T.mul(ls, 1.0 - cfg.lam))
    report = LossReport(l1.item(), ls.item(), total.item())
    return total, report


# ----------------------------------------------------------------------
# data
# ----------------------------------------------------------------------
def _load_triplet(entry):
    near = read_image(entry.near, mode="rgb")
    far = read_image(entry.far, mode="rgb")
    gt = read_image(entry.gt, mode="rgb")
    if not near.shape == far.shape == gt.shape:
        raise ImageFormatError(f"triplet images differ in size: {near.shape} {far.shape} {gt.shape}")
    return near, far, gt


def load_triplets(manifest):
    """Decode every manifest entry, skipping (with a warning) the unreadable ones."""
    entries = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    data = []
    for e in entries:
        try:
            data.append(_load_triplet(e))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable triplet %s: %s", e.near, exc)
    if not data:
        raise ValueError("no readable triplets in the manifest")
    return data


def random_crop(triplet, size, rng):
    """Crop near/far/gt with one shared window."""
    h, w = triplet[0].shape[:2]
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image size {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return tuple(im[y:y + size, x:x + size] for im in triplet)


def _batch(crops):
    return [np.concatenate([to_unit(c[k]) for c in crops], axis=0) for k in range(3)]


# ----------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------
def train(net, manifest, cfg, checkpoint_path=None, loss_csv=None, resume=None, on_step=None):
    """Train ``net`` in place on the triplets of ``manifest``.

    ``manifest`` is a path or a list of manifest entries. ``resume`` is a
    checkpoint written by a previous call; its weights, optimizer moments,
    epoch counter and RNG state are restored. ``on_step`` receives each
    LossReport.
    """
    data = load_triplets(manifest)
    smallest = min(min(t[0].shape[:2]) for t in data)
    if cfg.crop > smallest:
        raise ValueError(f"crop {cfg.crop} exceeds the smallest image side {smallest}")

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, lr=cfg.lr0)
    start_epoch, step = 0, 0
    if resume is not None:
        start_epoch, step = _restore(resume, net, opt, rng)

    csv_fh = None
    if loss_csv is not None:
        mode = "a" if resume is not None and Path(loss_csv).exists() else "w"
        csv_fh = open(loss_csv, mode, encoding="utf-8", newline="\n")
        if mode == "w":
            csv_fh.write(CSV_HEADER + "\n")

    result = TrainResult(net, optimizer=opt.state, epochs_done=start_epoch)
    steps_per_epoch = math.ceil(len(data) / cfg.batch)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = rng.permutation(len(data))
            t0 = time.perf_counter()
            for b in range(steps_per_epoch):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                idx = order[b * cfg.batch:(b + 1) * cfg.batch]
                near, far, gt = _batch([random_crop(data[i], cfg.crop, rng) for i in idx])
                opt.zero_grad()
                pred = net([T.Tensor(near), T.Tensor(far)])
                loss, report = total_loss(pred, T.Tensor(gt), cfg)
                loss.backward()
                opt.step(lr)
                step += 1
                report.epoch, report.step, report.lr = epoch, step, lr
                result.curve.append(report)
                if csv_fh is not None:
                    csv_fh.write(report.csv() + "\n")
                if on_step is not None:
                    on_step(report)
            result.epochs_done = epoch + 1
            log.info("epoch %d: loss %.5f (%.1fs)", epoch, result.curve[-1].total if result.curve else float("nan"),
                     time.perf_counter() - t0)
            stop = cfg.max_steps is not None and step >= cfg.max_steps
            if checkpoint_path is not None and (stop or (epoch + 1) % cfg.checkpoint_every == 0
                                                or epoch + 1 == cfg.epochs):
                save_training_checkpoint(checkpoint_path, net, opt, cfg, epoch + 1, step, rng)
            if stop:
                break
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return result


def save_training_checkpoint(path, net, opt, cfg, epoch, step, rng):
    extra = {}
    for name, m in opt.state.m.items():
        extra[f"adam.m/{name}"] = m
        extra[f"adam.v/{name}"] = opt.state.v[name]
    save_network(path, net, extra_tensors=extra, **{
        "lambda": cfg.lam,
        "epoch": epoch,
        "step": step,
        "adam_step": opt.state.step,
        "rng_state": json.dumps(rng.bit_generator.state),
        "config": asdict(cfg),
    })


def _restore(path, net, opt, rng):
    saved, meta, extras = load_network(path)
    for name, p in net.params.items():
        p.data[...] = saved.params[name].data.reshape(p.shape)
    net.ablation = saved.ablation
    state = AdamState(step=int(meta.get("adam_step", 0)))
    for key, arr in extras.items():
        kind, _, name = key.partition("/")
        if kind == "adam.m":
            state.m[name] = arr.reshape(net.params[name].shape).astype(net.dtype)
        elif kind == "adam.v":
            state.v[name] = arr.reshape(net.params[name].shape).astype(net.dtype)
    opt.state = state
    if "rng_state" in meta:
        rng.bit_generator.state = json.loads(meta["rng_state"])
    return int(meta.get("epoch", 0)), int(meta.get("step", 0))
