"""Cross-entropy training of the context model with Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .context_model import DensityModel, Sample, cloud_sample
from .nn import Adam
from .pointcloud_io import VoxelizedCloud, is_rgb, rgb_to_yuv
from .quant import reconstruct, serialize
from .raht import build_tree, forward_transform

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    qstep: float = 10.0
    components: str = "HLCS"
    ema: float = 0.98  # weight averaging decay; 0 disables
    keep_best: bool = True  # return the epoch with the lowest training loss

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.ema < 1:
            raise ValueError("ema decay must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainResult:
    model: DensityModel
    initial_loss: float
    history: list = field(default_factory=list)  # (epoch, nats, bits per point)
    best_epoch: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "nats", "bpp"])
            for epoch, nats, bpp in self.history:
                w.writerow([epoch, f"{nats:.6f}", f"{bpp:.6f}"])


@dataclass
class TrainingItem:
    sample: Sample
    points: int


def prepare(cloud: VoxelizedCloud, qstep: float) -> TrainingItem:
    """Teacher-forced model inputs for one cloud, matching what the coder sees."""
    coded = rgb_to_yuv(cloud) if is_rgb(cloud) else cloud
    qstep = float(np.float32(qstep))
    tree = forward_transform(build_tree(coded))
    stream = serialize(tree, qstep)
    _, lows = reconstruct(tree, stream, return_lows=True)
    nodes = stream.node_major()
    by_depth, cursor = {}, 0
    for d, m in stream.level_sizes:
        by_depth[d] = nodes[cursor : cursor + m]
        cursor += m
    return TrainingItem(cloud_sample(tree, lows, by_depth, qstep), cloud.original_point_count)


def _as_items(corpus, qstep):
    return [c if isinstance(c, TrainingItem) else prepare(c, qstep) for c in corpus]


def corpus_loss(model: DensityModel, items) -> float:
    return sum(model.loss(it.sample) for it in items)


def train(corpus, config: TrainConfig | None = None, model: DensityModel | None = None) -> TrainResult:
    """Fit a model, one cloud per Adam step, shuffled each epoch by ``config.seed``.

    ``corpus`` holds VoxelizedClouds or prepared TrainingItems. The corpus is
    never modified. Losses are measured on an exponential moving average of
    the weights, and the returned model is the best epoch by training loss.
    Raises TrainingDiverged when an epoch loss exceeds ten times the initial
    loss.
    """
    config = config or TrainConfig()
    items = _as_items(corpus, config.qstep)
    if not items:
        raise ValueError("training corpus is empty")
    n_channels = items[0].sample.node_ctx.shape[1] // 2 - 1
    if model is None:
        model = DensityModel(n_channels, config.components, seed=config.seed)
    else:
        model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    points = sum(it.points for it in items)
    initial = corpus_loss(model, items)
    log.info("initial loss %.3f nats (%.4f bpp)", initial, initial / math.log(2) / points)
    # the optimizer walks ``model``; ``avg`` is the weight average that gets evaluated
    avg = model.copy()
    best, best_nats, best_epoch = model.copy(), initial, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        for i in rng.permutation(len(items)):
            _, grads = model.loss_and_grad(items[i].sample)
            opt.step(model.params, grads)
            for k, v in model.params.items():
                avg.params[k] = config.ema * avg.params[k] + (1.0 - config.ema) * v
        nats = corpus_loss(avg, items)
        if not math.isfinite(nats) or nats > 10 * initial:
            raise TrainingDiverged(
                f"epoch {epoch}: loss {nats:.3f} nats vs initial {initial:.3f}; "
                f"lr={config.lr}, components={model.components!r}"
            )
        bpp = nats / math.log(2) / points
        history.append((epoch, nats, bpp))
        log.info("epoch %d: %.3f nats, %.4f bpp", epoch, nats, bpp)
        if nats < best_nats or not config.keep_best:
            best, best_nats, best_epoch = avg.copy(), nats, epoch
    best.round_to_f32()
    return TrainResult(best, initial, history, best_epoch)


def gradient_check(model: DensityModel, sample, h: float = 1e-5, names=None, rng=None, max_per_group=None):
    """Relative error between analytic and central-difference gradients per group.

    Error for a group is ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``
    over the group's flattened entries.
    """
    _, grads = model.loss_and_grad(sample)
    groups = model.parameter_groups()
    out = {}
    for group, members in groups.items():
        if names is not None and group not in names:
            continue
        entries = [(name, idx) for name in members for idx in np.ndindex(model.params[name].shape)]
        if max_per_group is not None and len(entries) > max_per_group:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(entries), max_per_group, replace=False)
            entries = [entries[i] for i in sorted(pick)]
        analytic, numeric = [], []
        for name, idx in entries:
            p = model.params[name]
            old = p[idx]
            p[idx] = old + h
            up = model.loss(sample)
            p[idx] = old - h
            down = model.loss(sample)
            p[idx] = old
            analytic.append(grads[name][idx])
            numeric.append((up - down) / (2 * h))
        a, n = np.asarray(analytic), np.asarray(numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        out[group] = float(np.linalg.norm(a - n) / scale)
    return out
