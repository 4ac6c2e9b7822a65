"""Loss, augmentation, sphere sampling, voting inference, IoU metrics and the
training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aggregation import AggregatorConfig
from .autodiff import Tape, Tensor, add, cross_entropy, save_checkpoint, scale, sum_squares
from .geometry import GeometryError, PointCloud
from .network import (
    FEATURE_RECIPES, ConfigError, NetworkSpec, PreparedCloud, SegmentationNet, prepare_cloud, stack_prepared,
)

log = logging.getLogger(__name__)

__all__ = [
    "AugmentConfig", "TrainConfig", "ConfusionMatrix", "CoverageError", "TrainingDivergedError",
    "loss", "l2_parameters", "augment", "lift_features", "sample_training_sphere", "vote_inference",
    "predict_direct", "recalibrate_norm", "miou", "mean_part_iou", "train", "TrainResult", "SGD", "cosine_lr",
]


class CoverageError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    rot_z: bool = True
    scale_range: tuple[float, float] = (0.7, 1.3)
    jitter_sigma: float = 0.001
    color_drop_p: float = 0.2

    def __post_init__(self):
        self.scale_range = (float(self.scale_range[0]), float(self.scale_range[1]))
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0 <= self.color_drop_p <= 1:
            raise ValueError(f"color_drop_p must be a probability, got {self.color_drop_p}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rot_z=False, scale_range=(1.0, 1.0), jitter_sigma=0.0, color_drop_p=0.0)


# scale ranges of the published recipes
AUGMENT_PRESETS = {
    "s3dis": AugmentConfig(True, (0.7, 1.3), 0.001, 0.2),
    "scannet": AugmentConfig(True, (0.9, 1.1), 0.001, 0.2),
    "partnet": AugmentConfig(False, (0.8, 1.2), 0.001, 0.0),
}


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 30
    steps_per_epoch: int | None = None
    batch_size: int = 1
    sphere_radius: float = 2.0
    min_sphere_points: int = 64
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    feature_recipe: str = "zrgb1"
    vote_stride: float | None = None
    val_every: int = 1
    recalibration_batches: int = 4
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.feature_recipe not in FEATURE_RECIPES:
            raise ConfigError(f"unknown feature recipe {self.feature_recipe!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.val_every < 1 or self.recalibration_batches < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and val_every >= 1 are required")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def l2_parameters(named_params) -> list[Tensor]:
    """Weight matrices subject to L2 (biases and normalization params excluded)."""
    out = []
    for name, p in named_params:
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "gamma", "beta"):
            continue
        out.append(p)
    return out


def loss(logits: Tensor, labels: np.ndarray, weights: Sequence[Tensor] = (), weight_decay: float = 0.0) -> Tensor:
    """Mean cross-entropy plus ``weight_decay * sum ||W||^2``."""
    total = cross_entropy(logits, labels)
    if weight_decay and weights:
        reg = sum_squares(weights[0])
        for w in weights[1:]:
            reg = add(reg, sum_squares(w))
        total = add(total, scale(reg, weight_decay))
    return total


# ---------------------------------------------------------------------------
# data pipeline
# ---------------------------------------------------------------------------


def augment(cloud: PointCloud, aug: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    """Random z-rotation, isotropic scaling, Gaussian jitter and whole-sample color drop."""
    pos = cloud.positions.copy()
    if aug.rot_z:
        theta = rng.uniform(0.0, 2 * math.pi)
        c, s = math.cos(theta), math.sin(theta)
        x, y = pos[:, 0].copy(), pos[:, 1].copy()
        pos[:, 0] = c * x - s * y
        pos[:, 1] = s * x + c * y
    lo, hi = aug.scale_range
    if (lo, hi) != (1.0, 1.0):
        pos *= rng.uniform(lo, hi)
    if aug.jitter_sigma > 0:
        pos += rng.normal(0.0, aug.jitter_sigma, pos.shape)
    feats = cloud.features
    if aug.color_drop_p > 0 and rng.random() < aug.color_drop_p:
        feats = np.zeros_like(feats)
    return PointCloud(pos, feats.copy(), None if cloud.labels is None else cloud.labels.copy())


def lift_features(cloud: PointCloud, recipe: str = "zrgb1", z_offset: float = 0.0) -> PointCloud:
    """Build network input features from RGB features and positions.

    ``zrgb1`` -> (z, r, g, b, 1); ``rgb1`` -> (r, g, b, 1); ``xyz1`` -> (x, y, z, 1).
    """
    n = len(cloud)
    one = np.ones((n, 1), np.float32)
    if recipe == "zrgb1":
        f = np.concatenate([(cloud.positions[:, 2:3] + z_offset).astype(np.float32), cloud.features[:, :3], one], 1)
    elif recipe == "rgb1":
        f = np.concatenate([cloud.features[:, :3], one], 1)
    elif recipe == "xyz1":
        f = np.concatenate([cloud.positions.astype(np.float32), one], 1)
    else:
        raise ConfigError(f"unknown feature recipe {recipe!r}")
    return PointCloud(cloud.positions, f, cloud.labels)


def sample_training_sphere(scene: PointCloud, radius: float, rng: np.random.Generator,
                           min_points: int = 64, max_tries: int = 10) -> tuple[PointCloud, np.ndarray]:
    """Points within ``radius`` of a random scene point, recentered on it.

    Returns the crop and its anchor. Crops below ``min_points`` are redrawn.
    """
    if len(scene) == 0:
        raise GeometryError("cannot sample from an empty scene")
    need = min(min_points, len(scene))
    for _ in range(max_tries):
        anchor = scene.positions[rng.integers(len(scene))]
        d = scene.positions - anchor
        sel = np.flatnonzero((d * d).sum(axis=1) <= radius * radius)
        if sel.size >= need:
            crop = scene.subset(sel)
            crop.positions = crop.positions - anchor
            return crop, anchor.copy()
    raise GeometryError(f"no sphere of radius {radius} with >= {need} points after {max_tries} tries")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict_direct(model: SegmentationNet, cloud: PointCloud, recipe: str = "zrgb1",
                   category: int = 0) -> np.ndarray:
    """Logits from one forward pass over the whole cloud (eval mode, no tape)."""
    was_training = model.training
    model.eval()
    try:
        prepared = prepare_cloud(lift_features(cloud, recipe), model.spec)
        return model(prepared, category).data
    finally:
        model.train(was_training)


def vote_inference(scene: PointCloud, model: SegmentationNet, radius: float, stride: float | None = None,
                   recipe: str = "zrgb1", category: int = 0, return_logits: bool = False,
                   on_sphere: Callable[[np.ndarray, np.ndarray, np.ndarray], None] | None = None):
    """Average logits over regularly spaced overlapping spheres, then argmax.

    Sphere centers sit on a lattice of spacing ``stride`` (default ``radius``)
    anchored at the scene's minimum corner and covering its bounding box.
    ``on_sphere(center, point_indices, logits)`` is called per evaluated sphere.
    """
    stride = radius if stride is None else stride
    if not 0 < stride < 2 * radius:
        raise ValueError(f"stride must lie in (0, 2 * radius), got {stride} for radius {radius}")
    pos = scene.positions
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    steps = [np.arange(int(math.ceil((hi[a] - lo[a]) / stride)) + 1) * stride + lo[a] for a in range(3)]
    centers = np.stack(np.meshgrid(*steps, indexing="ij"), -1).reshape(-1, 3)
    sums = None
    counts = np.zeros(len(scene), dtype=np.int64)
    was_training = model.training
    model.eval()
    try:
        for c in centers:
            d = pos - c
            sel = np.flatnonzero((d * d).sum(axis=1) <= radius * radius)
            if sel.size == 0:
                continue
            crop = lift_features(scene.subset(sel), recipe)
            logits = model(prepare_cloud(crop, model.spec), category).data
            if sums is None:
                sums = np.zeros((len(scene), logits.shape[1]), dtype=np.float64)
            sums[sel] += logits
            counts[sel] += 1
            if on_sphere is not None:
                on_sphere(c, sel, logits)
    finally:
        model.train(was_training)
    if sums is None or (counts == 0).any():
        missing = int((counts == 0).sum()) if sums is not None else len(scene)
        raise CoverageError(f"{missing} points not covered by any sphere (stride {stride}, radius {radius})")
    avg = sums / counts[:, None]
    labels = avg.argmax(axis=1)
    if return_logits:
        return labels, avg, counts
    return labels


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Counts with rows indexed by ground truth and columns by prediction."""

    num_classes: int
    counts: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes) or (self.counts < 0).any():
            raise ValueError("confusion matrix must be square with non-negative counts")

    def update(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt, pred = np.asarray(gt).ravel(), np.asarray(pred).ravel()
        k = self.num_classes
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm: ConfusionMatrix | np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where TP+FP+FN = 0, excluded from the mean) and mean IoU."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    return iou, float(np.nanmean(iou))


def mean_part_iou(per_category: Sequence[ConfusionMatrix | np.ndarray]) -> float:
    """Mean over shape categories of each category's mean part IoU."""
    return float(np.mean([miou(cm)[1] for cm in per_category]))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))


class SGD:
    """Momentum SGD: ``v = mu * v + g``, ``w -= lr * v``."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= np.asarray(lr * v, dtype=p.dtype)


@dataclass
class TrainResult:
    model: SegmentationNet
    history: list[dict]
    best_miou: float | None
    checkpoint: Path | None = None


def _sample_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _prepare_sample(scene: PointCloud, spec: NetworkSpec, cfg: TrainConfig, rng: np.random.Generator) -> PreparedCloud:
    crop, anchor = sample_training_sphere(scene, cfg.sphere_radius, rng, cfg.min_sphere_points)
    crop = augment(crop, cfg.aug, rng)
    crop = lift_features(crop, cfg.feature_recipe, z_offset=float(anchor[2]))
    return prepare_cloud(crop, spec, rng)


def recalibrate_norm(model: SegmentationNet, scenes: Sequence[PointCloud], spec: NetworkSpec,
                     cfg: TrainConfig, epoch: int = 0) -> None:
    """Re-estimate normalization running statistics at the current weights.

    Running averages collected while weights move quickly lag behind them; this
    resets every normalization state and refills it from fresh training batches
    (forward only, no parameter change).
    """
    for _, state in model.named_buffers():
        state.reset()
    was_training = model.training
    model.train()
    try:
        for i in range(cfg.recalibration_batches):
            batch = [_prepare_sample(scenes[(i * cfg.batch_size + b) % len(scenes)], spec, cfg,
                                     _sample_rng(cfg.seed, epoch, i, b, 2)) for b in range(cfg.batch_size)]
            model(stack_prepared(batch), full_resolution=False)
    finally:
        model.train(was_training)


def evaluate(model: SegmentationNet, scenes: Sequence[PointCloud], num_classes: int, cfg: TrainConfig) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for scene in scenes:
        pred = vote_inference(scene, model, cfg.sphere_radius, cfg.vote_stride, cfg.feature_recipe)
        cm.update(scene.labels, pred)
    return cm


def train(train_scenes: Sequence[PointCloud], val_scenes: Sequence[PointCloud], net_spec: NetworkSpec,
          agg: AggregatorConfig, cfg: TrainConfig, output_dir: str | os.PathLike | None = None,
          model: SegmentationNet | None = None) -> TrainResult:
    """Sphere-sampled SGD training with per-epoch validation by sphere voting.

    Writes ``metrics.csv`` (``epoch,step,loss,val_miou``) and the best
    checkpoint (``best.salaw`` plus ``best.buffers.salaw``) into ``output_dir``.
    Sample preparation is deterministic per (seed, epoch, step, slot), so worker
    count does not change results.
    """
    if not train_scenes:
        raise ValueError("no training scenes")
    for s in list(train_scenes) + list(val_scenes):
        s.validate(net_spec.num_classes)
        if s.labels is None:
            raise ValueError("training and validation scenes need labels")
    model = model if model is not None else SegmentationNet(net_spec, agg, seed=cfg.seed)
    model.train()
    named = list(model.named_parameters())
    decay = l2_parameters(named)
    opt = SGD([p for _, p in named], cfg.momentum)
    steps_per_epoch = cfg.steps_per_epoch or len(train_scenes)
    total_steps = cfg.epochs * steps_per_epoch
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    best, best_path = None, None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = _sample_rng(cfg.seed, epoch).permutation(steps_per_epoch * cfg.batch_size) % len(train_scenes)
            jobs = []
            for s in range(steps_per_epoch):
                for b in range(cfg.batch_size):
                    scene = train_scenes[order[s * cfg.batch_size + b]]
                    args = (scene, net_spec, cfg, _sample_rng(cfg.seed, epoch, s, b, 1))
                    jobs.append(pool.submit(_prepare_sample, *args) if pool else args)
            losses = []
            for s in range(steps_per_epoch):
                batch = [job.result() if pool else _prepare_sample(*job)
                         for job in jobs[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
                prepared = stack_prepared(batch)
                model.zero_grad()
                with Tape() as tape:
                    logits = model(prepared, full_resolution=False)
                    value = loss(logits, prepared.labels, decay, cfg.weight_decay)
                if not np.isfinite(value.data):
                    raise TrainingDivergedError(f"loss became {float(value.data)} at epoch {epoch}, step {step}")
                tape.backward(value)
                step_loss = float(value.data)
                opt.step(cosine_lr(cfg.lr, step, total_steps))
                losses.append(step_loss)
                step += 1
            row = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "val_miou": ""}
            last = epoch == cfg.epochs - 1
            if cfg.recalibration_batches and (last or (val_scenes and (epoch + 1) % cfg.val_every == 0)):
                recalibrate_norm(model, train_scenes, net_spec, cfg, epoch)
            if val_scenes and ((epoch + 1) % cfg.val_every == 0 or last):
                _, m = miou(evaluate(model, val_scenes, net_spec.num_classes, cfg))
                model.train()
                row["val_miou"] = m
                if best is None or m > best:
                    best = m
                    if out is not None:
                        best_path = _save(model, out / "best.salaw")
            elif not val_scenes and last and out is not None:
                best_path = _save(model, out / "best.salaw")
            history.append(row)
            log.info("epoch %d step %d loss %.4f val_miou %s", epoch, step, row["loss"], row["val_miou"])
            if out is not None:
                _write_log(out / "metrics.csv", history)
    finally:
        if pool:
            pool.shutdown(cancel_futures=True)
    return TrainResult(model, history, best, best_path)


def _save(model: SegmentationNet, path: Path) -> Path:
    save_checkpoint(path, model.state_dict())
    save_checkpoint(path.with_suffix(".buffers.salaw"), model.buffer_dict())
    return path


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "loss", "val_miou"])
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
