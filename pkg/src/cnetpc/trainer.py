"""Desk-scale training of the four context networks."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .colorspace import rgb_array_to_ycocg
from .models import (
    CoordGraph,
    ModelBundle,
    ModelConfig,
    accuracy,
    FEATURE_NAMES,
)
from .pcloud import SparseTensor, raster_index
from .sparsenn import Adam, lr_schedule, softmax_ce, softmax_ce_backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NormParams:
    bitdepth: int
    y_shift: float = 0.0

    @property
    def s(self) -> float:
        return (2 ** self.bitdepth - 1) / 2


def norm_params(colorspace: str, feature: int) -> NormParams:
    """Normalization used for colour feature ``feature`` (1..3)."""
    if colorspace == "ycocg":
        return NormParams(9, 0.5 if feature == 1 else 0.0)
    return NormParams(8)


def normalize(x, np_: NormParams):
    s = np_.s
    return (np.asarray(x, dtype=np.float64) - s) / s + np_.y_shift


def denormalize(v, np_: NormParams):
    s = np_.s
    return np.rint((np.asarray(v, dtype=np.float64) - np_.y_shift) * s + s).astype(np.int64)


def color_symbols(rgb: np.ndarray, colorspace: str) -> np.ndarray:
    """(N, 3) coded symbols for features 1..3 in coding order."""
    rgb = np.asarray(rgb, dtype=np.int64).reshape(-1, 3)
    if colorspace == "ycocg":
        return rgb_array_to_ycocg(rgb)
    return rgb.copy()


def previous_features(symbols: np.ndarray, feature: int, colorspace: str) -> np.ndarray:
    """Side-branch input for ``feature``: occupancy (1.0) plus earlier normalized channels."""
    n = len(symbols)
    cols = [np.ones(n)]
    for f in range(1, feature):
        cols.append(normalize(symbols[:, f - 1], norm_params(colorspace, f)))
    return np.stack(cols, axis=1)


def channel_history(symbols: np.ndarray, feature: int, colorspace: str) -> np.ndarray:
    return normalize(symbols[:, feature - 1], norm_params(colorspace, feature)).reshape(-1, 1)


def subsample_augment(block: SparseTensor, rng: np.random.Generator, rho=None,
                      rho_range=(0.3, 1.0)) -> SparseTensor:
    """Keep each point with probability ``rho`` (drawn per block unless given)."""
    if len(block) == 0:
        raise ValueError("cannot subsample an empty block")
    if rho is None:
        rho = rng.uniform(*rho_range)
    keep = rng.random(len(block)) < rho
    if not keep.any():
        keep[0] = True
    return SparseTensor(block.coords[keep], block.features[keep], block.bitdepths,
                        block.offset, block.geometry_only)


# --- synthetic data ---------------------------------------------------------

def synthetic_block(d: int, rng: np.random.Generator, kind: str = "surface",
                    noise: float = 0.0) -> SparseTensor:
    """A block holding a smooth surface with smoothly varying colour.

    ``kind`` is one of ``plane``, ``sphere``, ``surface`` (height field).
    """
    r = np.arange(d)
    if kind == "sphere":
        c = rng.uniform(d * 0.35, d * 0.65, 3)
        rad = rng.uniform(d * 0.2, d * 0.45)
        g = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
        dist = np.linalg.norm(g + 0.5 - c, axis=1)
        coords = g[np.abs(dist - rad) < 0.5 + noise]
        if len(coords) == 0:
            coords = g[np.argsort(np.abs(dist - rad))[:1]]
    else:
        xx, yy = np.meshgrid(r, r, indexing="ij")
        if kind == "plane":
            a, b = rng.uniform(-0.4, 0.4, 2)
            h = d / 2 + a * (xx - d / 2) + b * (yy - d / 2)
        else:
            fx, fy = rng.uniform(0.5, 1.5, 2)
            ph = rng.uniform(0, 2 * np.pi, 2)
            amp = d / 6
            h = d / 2 + amp * np.sin(2 * np.pi * fx * xx / d + ph[0]) * np.cos(2 * np.pi * fy * yy / d + ph[1])
        if noise:
            h = h + rng.normal(0, noise, h.shape)
        z = np.clip(np.rint(h), 0, d - 1).astype(np.int64)
        coords = np.stack([xx.ravel(), yy.ravel(), z.ravel()], 1)
    coords = np.unique(coords, axis=0)
    coords = coords[np.argsort(raster_index(coords, d))]
    base = rng.uniform(40, 215, 3)
    grad = rng.uniform(-90, 90, (3, 3)) / d
    col = base + (coords - d / 2) @ grad
    if noise:
        col = col + rng.normal(0, 2 * noise, col.shape)
    rgb = np.clip(np.rint(col), 0, 255).astype(np.int64)
    return SparseTensor(coords, rgb, (8, 8, 8))


def synthetic_dataset(n_blocks: int, d: int, seed: int = 0, noise: float = 0.0) -> list[SparseTensor]:
    rng = np.random.default_rng(seed)
    kinds = ("plane", "sphere", "surface")
    return [synthetic_block(d, rng, kinds[i % 3], noise) for i in range(n_blocks)]


# --- training loop ------------------------------------------------------------

@dataclass
class TrainRun:
    seed: int = 0
    epochs: int = 1
    first_epoch: int = 0
    batch_size: int = 32
    lr: float = 15e-5
    lr_step: int = 2
    lr_gamma: float = 0.95
    steps_per_epoch: int | None = None
    max_steps: int | None = None
    augment: bool = True
    rho_range: tuple[float, float] = (0.3, 1.0)
    checkpoint_dir: str | None = None
    log_path: str | None = None
    train_colors: bool = True
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    steps: int = 0


def block_losses(bundle: ModelBundle, blocks: list[SparseTensor], backward: bool = False):
    """Per-feature (loss_bits, accuracy) on a batch; with ``backward`` also fills gradients."""
    cfg = bundle.cfg
    d = cfg.d
    out = []
    logits, tape = bundle.occupancy.forward([b.coords for b in blocks])
    target = np.zeros(len(blocks) * d ** 3, dtype=np.int64)
    for i, b in enumerate(blocks):
        if len(b):
            target[i * d ** 3 + raster_index(b.coords, d)] = 1
    loss, probs, cache = softmax_ce(logits, target)
    out.append((loss, accuracy(probs, target)))
    if backward:
        bundle.occupancy.backward(softmax_ce_backward(cache), tape)
    if any(b.geometry_only or b.features.shape[1] == 0 for b in blocks):
        return out
    coords = np.concatenate([np.hstack([np.full((len(b), 1), i), b.coords]) for i, b in enumerate(blocks)])
    graph = CoordGraph(coords)
    symbols = np.concatenate([color_symbols(b.features, cfg.colorspace) for b in blocks])
    for f, net in enumerate(bundle.colors, start=1):
        hist = channel_history(symbols, f, cfg.colorspace)
        prev = previous_features(symbols, f, cfg.colorspace)
        lg, st = net.forward(graph, hist, prev)
        loss, probs, cache = softmax_ce(lg, symbols[:, f - 1])
        out.append((loss, accuracy(probs, symbols[:, f - 1])))
        if backward:
            net.backward(softmax_ce_backward(cache), st)
    return out


def train(dataset: list[SparseTensor], cfg: ModelConfig, run: TrainRun,
          bundle: ModelBundle | None = None, validation: list[SparseTensor] | None = None) -> ModelBundle:
    """Train (or continue training) all four networks on ``dataset``."""
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng(run.seed)
    if bundle is None:
        bundle = ModelBundle(cfg, seed=run.seed)
    nets = [bundle.occupancy] + (bundle.colors if run.train_colors else [])
    optims = [Adam(n.params()) for n in nets]
    names = FEATURE_NAMES[cfg.colorspace]
    val = None
    if validation:
        val = [subsample_augment(b, rng, rho_range=run.rho_range) if run.augment else b for b in validation]
    bs = min(run.batch_size, len(dataset))
    per_epoch = run.steps_per_epoch or max(1, math.ceil(len(dataset) / bs))
    writer = None
    fh = None
    if run.log_path:
        fresh = run.steps == 0  # a continued run appends to its log
        fh = open(run.log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "feature", "loss_bits", "accuracy", "lr"])
    try:
        for epoch in range(run.first_epoch, run.first_epoch + run.epochs):
            lr = lr_schedule(epoch, run.lr, run.lr_step, run.lr_gamma)
            for _ in range(per_epoch):
                if run.max_steps is not None and run.steps >= run.max_steps:
                    break
                idx = rng.choice(len(dataset), size=bs, replace=False)
                batch = [dataset[i] for i in sorted(idx)]
                if run.augment:
                    batch = [subsample_augment(b, rng, rho_range=run.rho_range) for b in batch]
                for o in optims:
                    o.zero_grad()
                metrics = block_losses(bundle, batch, backward=True)
                if not run.train_colors:
                    metrics = metrics[:1]
                for (loss, acc), name in zip(metrics, names):
                    if not np.isfinite(loss):
                        raise TrainingDiverged(f"{name} loss became {loss} at step {run.steps}")
                    row = (run.steps, name, loss, acc, lr)
                    run.log.append(row)
                    if writer:
                        writer.writerow(row)
                for o, _ in zip(optims, metrics):
                    o.step(lr)
                run.steps += 1
            if val is not None:
                for (loss, acc), name in zip(block_losses(bundle, val), names):
                    row = (run.steps, "val/" + name, loss, acc, lr)
                    run.log.append(row)
                    if writer:
                        writer.writerow(row)
            if run.checkpoint_dir:
                os.makedirs(run.checkpoint_dir, exist_ok=True)
                path = os.path.join(run.checkpoint_dir, f"epoch_{epoch:04d}.cnet")
                bundle.save(path)
                run.checkpoints.append(path)
            log.info("epoch %d done, step %d", epoch, run.steps)
    finally:
        if fh:
            fh.close()
    return bundle


def final_losses(run: TrainRun, window: int = 1) -> dict[str, float]:
    """Mean of the last ``window`` logged training losses per feature."""
    per: dict[str, list[float]] = {}
    for _, name, loss, _, _ in run.log:
        if not name.startswith("val/"):
            per.setdefault(name, []).append(loss)
    return {k: float(np.mean(v[-window:])) for k, v in per.items()}
