"""Synthetic labeled indoor rooms for desk-scale experiments.

A room is a floor plus two walls (planes), box "furniture" standing on the
floor and spherical "clutter". Points are spread over all primitive surfaces
proportionally to area, so label frequencies follow surface-area ratios.
Features are per-class pseudo-colors with per-object and per-point variation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, write_sptc

PRIMITIVE_KINDS = ("plane", "box", "sphere")

_BASE_COLORS = np.array([
    [0.62, 0.60, 0.55],
    [0.55, 0.42, 0.32],
    [0.35, 0.48, 0.62],
    [0.45, 0.58, 0.38],
    [0.62, 0.40, 0.50],
    [0.40, 0.40, 0.45],
])


@dataclass
class SyntheticSceneSpec:
    num_rooms: int = 6
    room_size: float = 4.0
    classes: int = 3
    density: float = 420.0
    primitives: tuple[str, ...] | None = None
    noise_sigma: float = 0.005
    color_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("a synthetic scene needs at least 2 classes")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.primitives is None:
            kinds = ["plane"] + [("box", "sphere")[i % 2] for i in range(self.classes - 1)]
            self.primitives = tuple(kinds)
        self.primitives = tuple(self.primitives)
        if len(self.primitives) != self.classes:
            raise ValueError(f"{len(self.primitives)} primitive kinds for {self.classes} classes")
        bad = set(self.primitives) - set(PRIMITIVE_KINDS)
        if bad:
            raise ValueError(f"unknown primitive kinds {sorted(bad)}")

    @property
    def height(self) -> float:
        return 0.75 * self.room_size


@dataclass
class _Surface:
    kind: str  # "rect" or "sphere"
    label: int
    area: float
    params: tuple
    color: np.ndarray = field(default=None)  # type: ignore[assignment]


def _rect(origin, u, v, label):
    origin, u, v = (np.asarray(a, float) for a in (origin, u, v))
    return _Surface("rect", label, float(np.linalg.norm(np.cross(u, v))), (origin, u, v))


def room_surfaces(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[_Surface]:
    """Randomly furnished room as a list of labeled surfaces."""
    L, H = spec.room_size, spec.height
    out: list[_Surface] = []
    for c, kind in enumerate(spec.primitives):
        base = _BASE_COLORS[c % len(_BASE_COLORS)]
        if kind == "plane":
            parts = [_rect((0, 0, 0), (L, 0, 0), (0, L, 0), c),
                     _rect((0, 0, 0), (L, 0, 0), (0, 0, H), c), _rect((0, 0, 0), (0, L, 0), (0, 0, H), c)]
            if spec.primitives.index("plane") != c:
                # extra plane classes become free-standing partitions
                x = rng.uniform(0.25 * L, 0.75 * L)
                parts = [_rect((x, 0.1 * L, 0), (0, 0.5 * L, 0), (0, 0, 0.6 * H), c)]
        elif kind == "box":
            parts = []
            for _ in range(int(rng.integers(4, 8))):
                w, d, h = rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.4, 1.1)
                x0, y0 = rng.uniform(0.1, L - w - 0.1), rng.uniform(0.1, L - d - 0.1)
                o = np.array([x0, y0, 0.0])
                ex, ey, ez = np.array([w, 0, 0]), np.array([0, d, 0]), np.array([0, 0, h])
                faces = [_rect(o + ez, ex, ey, c), _rect(o, ex, ez, c), _rect(o + ey, ex, ez, c),
                         _rect(o, ey, ez, c), _rect(o + ex, ey, ez, c)]
                col = np.clip(base + rng.normal(0, spec.color_jitter, 3), 0, 1)
                for f in faces:
                    f.color = col
                parts += faces
        else:
            parts = []
            for _ in range(int(rng.integers(5, 10))):
                r = rng.uniform(0.2, 0.5)
                ctr = np.array([rng.uniform(r + 0.1, L - r - 0.1), rng.uniform(r + 0.1, L - r - 0.1),
                                r + rng.uniform(0, 0.8)])
                s = _Surface("sphere", c, 4 * np.pi * r * r, (ctr, r))
                s.color = np.clip(base + rng.normal(0, spec.color_jitter, 3), 0, 1)
                parts.append(s)
        for p in parts:
            if p.color is None:
                p.color = np.clip(base + rng.normal(0, spec.color_jitter, 3), 0, 1)
        out += parts
    return out


def _sample_surface(s: _Surface, n: int, rng: np.random.Generator) -> np.ndarray:
    if s.kind == "rect":
        o, u, v = s.params
        a, b = rng.random((n, 1)), rng.random((n, 1))
        return o + a * u + b * v
    ctr, r = s.params
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return ctr + r * d


def generate_room(spec: SyntheticSceneSpec, rng: np.random.Generator) -> PointCloud:
    """One labeled room with RGB features in [0, 1]."""
    surfaces = room_surfaces(spec, rng)
    areas = np.array([s.area for s in surfaces])
    total = int(round(spec.density * spec.room_size ** 2 * spec.height))
    counts = rng.multinomial(total, areas / areas.sum())
    pos, col, lab = [], [], []
    for s, n in zip(surfaces, counts):
        if n == 0:
            continue
        pos.append(_sample_surface(s, n, rng))
        col.append(s.color + rng.normal(0, 0.03, (n, 3)))
        lab.append(np.full(n, s.label))
    positions = np.concatenate(pos) + rng.normal(0, spec.noise_sigma, (total, 3))
    colors = np.clip(np.concatenate(col), 0, 1).astype(np.float32)
    order = rng.permutation(total)
    return PointCloud(positions[order], colors[order], np.concatenate(lab)[order])


def generate_synthetic(spec: SyntheticSceneSpec) -> list[PointCloud]:
    rng = np.random.default_rng(spec.seed)
    return [generate_room(spec, rng) for _ in range(spec.num_rooms)]


def area_fractions(spec: SyntheticSceneSpec, seed: int) -> np.ndarray:
    """Per-class surface-area share of the room drawn from ``seed``."""
    surfaces = room_surfaces(spec, np.random.default_rng(seed))
    areas = np.zeros(spec.classes)
    for s in surfaces:
        areas[s.label] += s.area
    return areas / areas.sum()


def write_dataset(scenes: list[PointCloud], directory: str | os.PathLike, prefix: str = "scene") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, cloud in enumerate(scenes):
        p = directory / f"{prefix}_{i:03d}.sptc"
        write_sptc(p, cloud)
        paths.append(p)
    return paths
