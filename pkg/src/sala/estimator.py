"""scikit-learn style wrapper around network training and sphere-voting inference.

Samples are whole scenes: ``X`` is a list of :class:`PointCloud` (RGB features,
optional labels) and ``y`` an optional list of per-point label arrays.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .aggregation import AggregatorConfig
from .geometry import PointCloud
from .network import FEATURE_RECIPES, NetworkSpec, SegmentationNet
from .training import AugmentConfig, ConfusionMatrix, TrainConfig, miou, train, vote_inference

__all__ = ["SALASegmenter", "check_clouds"]


def check_clouds(X, y=None, require_labels: bool = False) -> tuple[list[PointCloud], list[np.ndarray] | None]:
    """Validate scenes and labels; a single cloud is accepted as a list of one."""
    if isinstance(X, PointCloud):
        X = [X]
        if y is not None and not isinstance(y, (list, tuple)):
            y = [y]
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a non-empty list of PointCloud scenes")
    for i, c in enumerate(X):
        if not isinstance(c, PointCloud):
            raise TypeError(f"X[{i}] is {type(c).__name__}, expected PointCloud")
        c.validate()
        if c.features.shape[1] < 3:
            raise ValueError(f"X[{i}] needs at least 3 (RGB) feature channels, got {c.features.shape[1]}")
    if y is not None:
        if len(y) != len(X):
            raise ValueError(f"{len(y)} label arrays for {len(X)} scenes")
        y = [np.asarray(l) for l in y]
        for i, (c, l) in enumerate(zip(X, y)):
            if l.shape != (len(c),):
                raise ValueError(f"y[{i}] has shape {l.shape}, expected ({len(c)},)")
    elif require_labels:
        if any(c.labels is None for c in X):
            raise ValueError("labels are required: pass y or clouds with labels")
        y = [c.labels for c in X]
    return list(X), y


class SALASegmenter(ClassifierMixin, BaseEstimator):
    """Semantic segmentation of point cloud scenes.

    Parameters mirror the experiment configuration; see ``NetworkSpec`` and
    ``TrainConfig`` for their meaning. ``validation_fraction`` holds out the
    last scenes for per-epoch validation and best-checkpoint selection.
    """

    def __init__(self, C: int = 18, groups: int = 2, preset: str = "sala",
                 blocks_per_stage: Sequence[int] = (3, 3, 3, 4, 1), base_grid: float = 0.08,
                 base_radius: float = 0.2, epochs: int = 30, steps_per_epoch: int | None = 8,
                 batch_size: int = 4, lr: float = 0.05, weight_decay: float = 1e-3,
                 sphere_radius: float = 1.0, feature_recipe: str = "zrgb1", augment: bool = True,
                 vote_stride: float | None = None, validation_fraction: float = 0.0,
                 random_state: int = 0, workers: int = 1):
        self.C = C
        self.groups = groups
        self.preset = preset
        self.blocks_per_stage = blocks_per_stage
        self.base_grid = base_grid
        self.base_radius = base_radius
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.sphere_radius = sphere_radius
        self.feature_recipe = feature_recipe
        self.augment = augment
        self.vote_stride = vote_stride
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.workers = workers

    def _train_config(self) -> TrainConfig:
        aug = AugmentConfig(True, (0.9, 1.1), 0.001, 0.0) if self.augment else AugmentConfig.disabled()
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                           steps_per_epoch=self.steps_per_epoch, batch_size=self.batch_size,
                           sphere_radius=self.sphere_radius, aug=aug, feature_recipe=self.feature_recipe,
                           vote_stride=self.vote_stride, val_every=max(1, self.epochs // 3),
                           seed=self.random_state, workers=self.workers)

    def fit(self, X, y=None):
        X, y = check_clouds(X, y, require_labels=True)
        if self.feature_recipe not in FEATURE_RECIPES:
            raise ValueError(f"unknown feature_recipe {self.feature_recipe!r}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        all_labels = np.concatenate(y)
        if all_labels.size == 0:
            raise ValueError("no labeled points")
        self.classes_ = np.unique(all_labels)
        scenes = [PointCloud(c.positions, c.features[:, :3], np.searchsorted(self.classes_, l))
                  for c, l in zip(X, y)]
        n_val = int(round(self.validation_fraction * len(scenes)))
        if n_val >= len(scenes):
            raise ValueError("validation_fraction leaves no training scenes")
        tr, va = scenes[:len(scenes) - n_val], scenes[len(scenes) - n_val:]
        self.spec_ = NetworkSpec(C=self.C, blocks_per_stage=tuple(self.blocks_per_stage),
                                 num_classes=len(self.classes_), in_features=FEATURE_RECIPES[self.feature_recipe],
                                 base_grid=self.base_grid, base_radius=self.base_radius)
        agg = AggregatorConfig(self.preset, self.groups)
        result = train(tr, va, self.spec_, agg, self._train_config())
        self.model_: SegmentationNet = result.model
        self.history_ = result.history
        self.best_val_miou_ = result.best_miou
        self.n_features_in_ = X[0].features.shape[1]
        return self

    def predict(self, X):
        """Per-point labels for every scene (one array per scene)."""
        check_is_fitted(self, "model_")
        X, _ = check_clouds(X)
        cfg = self._train_config()
        out = []
        for c in X:
            scene = PointCloud(c.positions, c.features[:, :3])
            pred = vote_inference(scene, self.model_, cfg.sphere_radius, cfg.vote_stride, cfg.feature_recipe)
            out.append(self.classes_[pred])
        return out

    def score(self, X, y=None, sample_weight=None) -> float:
        """Mean IoU over all points of all scenes."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        X, y = check_clouds(X, y, require_labels=True)
        pred = self.predict(X)
        cm = ConfusionMatrix(len(self.classes_))
        for yt, yp in zip(y, pred):
            known = np.isin(yt, self.classes_)
            cm.update(np.searchsorted(self.classes_, yt[known]), np.searchsorted(self.classes_, yp[known]))
        return miou(cm)[1]
