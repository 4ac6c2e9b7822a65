"""U-Net style segmentation network built around a local aggregation operator.

Encoder: a unary stem lifting the input features to ``C`` channels, then one
stage per resolution level. Stage 0 stacks residual blocks at width ``C``;
stage ``l > 0`` opens with a strided residual block pooling onto the coarser
level and widens to ``C * 2**l``. Decoder: nearest-neighbor upsampling, skip
concatenation and a unary conv per level, then a final unary conv and a
classifier head (optionally one per shape category).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .aggregation import Aggregator, AggregatorConfig
from .autodiff import Tensor, add, concat_lastdim, gather_rows, max_reduce_neighbors
from .geometry import (
    NeighborIndex, PointCloud, ResolutionLevel, build_pyramid, nn_interpolate_map, relative_positions,
)
from .layers import Linear, Module, Unary

__all__ = [
    "BlockKind", "BlockSpec", "NetworkSpec", "ConfigError", "PreparedCloud", "prepare_cloud",
    "stack_prepared", "ResidualBlock", "StridedResidualBlock", "Decoder", "SegmentationNet", "FEATURE_RECIPES",
]

# input feature recipes and their widths
FEATURE_RECIPES = {"zrgb1": 5, "rgb1": 4, "xyz1": 4}


class ConfigError(ValueError):
    pass


class BlockKind(str, Enum):
    RESIDUAL = "residual"
    STRIDED_RESIDUAL = "strided_residual"
    UNARY = "unary"


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    in_ch: int
    out_ch: int
    bottleneck: int = 2

    def __post_init__(self):
        if self.kind is not BlockKind.UNARY and self.out_ch % self.bottleneck:
            raise ConfigError(f"width {self.out_ch} not divisible by bottleneck ratio {self.bottleneck}")

    @property
    def mid_ch(self) -> int:
        return self.out_ch // self.bottleneck


@dataclass
class NetworkSpec:
    C: int = 36
    blocks_per_stage: tuple[int, ...] = (3, 3, 3, 4, 1)
    num_classes: int = 13
    in_features: int = 5
    heads: tuple[int, ...] | None = None
    bottleneck: int = 2
    base_grid: float = 0.04
    base_radius: float = 0.1
    k_max: int = 32
    neighbor_select: str = "nearest"
    leaky_slope: float = 0.1

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if self.heads is not None:
            self.heads = tuple(int(h) for h in self.heads)
        if not self.blocks_per_stage or min(self.blocks_per_stage) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.C < 1 or self.C % self.bottleneck:
            raise ConfigError(f"C={self.C} must be a positive multiple of the bottleneck ratio")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    @property
    def stages(self) -> int:
        return len(self.blocks_per_stage)

    @property
    def widths(self) -> list[int]:
        return [self.C * 2 ** s for s in range(self.stages)]

    def head_sizes(self) -> tuple[int, ...]:
        return self.heads if self.heads is not None else (self.num_classes,)

    def block_specs(self) -> list[list[BlockSpec]]:
        """Encoder blocks per stage (the stem is not included)."""
        out = []
        prev = self.C
        for s, (n, w) in enumerate(zip(self.blocks_per_stage, self.widths)):
            stage = []
            for b in range(n):
                kind = BlockKind.STRIDED_RESIDUAL if (s > 0 and b == 0) else BlockKind.RESIDUAL
                stage.append(BlockSpec(kind, prev, w, self.bottleneck))
                prev = w
            out.append(stage)
        return out


@dataclass
class PreparedCloud:
    """Network input: a resolution pyramid with neighbor lists and offsets."""

    levels: list[ResolutionLevel]
    input_map: np.ndarray
    rel: list[np.ndarray]
    pool_rel: list[np.ndarray | None]
    num_input: int

    @property
    def features(self) -> np.ndarray:
        return self.levels[0].cloud.features

    @property
    def labels(self) -> np.ndarray | None:
        return self.levels[0].cloud.labels


def prepare_cloud(cloud: PointCloud, spec: NetworkSpec, rng: np.random.Generator | None = None,
                  origin=(0.0, 0.0, 0.0)) -> PreparedCloud:
    if cloud.features.shape[1] != spec.in_features:
        raise ConfigError(f"cloud has {cloud.features.shape[1]} features, network expects {spec.in_features}")
    levels = build_pyramid(cloud, spec.base_grid, spec.base_radius, spec.stages, spec.k_max,
                           spec.neighbor_select, rng, origin=origin)
    input_map = nn_interpolate_map(cloud, levels[0].cloud)
    rel, pool_rel = [], []
    for i, lvl in enumerate(levels):
        pts = lvl.cloud.positions
        rel.append(relative_positions(pts, pts, lvl.neighbors))
        pool_rel.append(None if i == 0 else relative_positions(pts, levels[i - 1].cloud.positions,
                                                               lvl.pool_neighbors))
    return PreparedCloud(levels, input_map, rel, pool_rel, len(cloud))


def _stack_neighbors(parts: Sequence[NeighborIndex], offsets: Sequence[int]) -> NeighborIndex:
    k = max(p.k for p in parts)
    idx, mask = [], []
    for p, off in zip(parts, offsets):
        pad = k - p.k
        # padding repeats the first neighbor, as the ball query does
        idx.append(np.concatenate([p.indices, np.repeat(p.indices[:, :1], pad, axis=1)], 1) + off)
        mask.append(np.concatenate([p.mask, np.zeros((len(p.mask), pad), bool)], 1))
    return NeighborIndex(np.concatenate(idx), np.concatenate(mask), parts[0].radius)


def _pad_rel(rels: Sequence[np.ndarray]) -> np.ndarray:
    k = max(r.shape[1] for r in rels)
    return np.concatenate([np.concatenate([r, np.zeros((r.shape[0], k - r.shape[1], 3), r.dtype)], 1)
                           for r in rels])


def stack_prepared(samples: Sequence[PreparedCloud]) -> PreparedCloud:
    """Merge prepared clouds into one disconnected batch (normalization sees all of them)."""
    if len(samples) == 1:
        return samples[0]
    n_levels = len(samples[0].levels)
    if any(len(s.levels) != n_levels for s in samples):
        raise ConfigError("cannot stack pyramids of different depths")
    sizes = np.array([[len(lvl.cloud) for lvl in s.levels] for s in samples])
    offsets = np.vstack([np.zeros((1, n_levels), np.int64), np.cumsum(sizes, axis=0)[:-1]])
    levels = []
    for i in range(n_levels):
        lv = [s.levels[i] for s in samples]
        labels = None if any(l.cloud.labels is None for l in lv) else np.concatenate([l.cloud.labels for l in lv])
        cloud = PointCloud(np.concatenate([l.cloud.positions for l in lv]),
                           np.concatenate([l.cloud.features for l in lv]), labels)
        up = None
        if i + 1 < n_levels:
            up = np.concatenate([l.upsample_map + offsets[j, i + 1] for j, l in enumerate(lv)])
        nbr = _stack_neighbors([l.neighbors for l in lv], offsets[:, i])
        pool = None
        if i > 0:
            # pooling indices point into the finer level
            pool = _stack_neighbors([l.pool_neighbors for l in lv], offsets[:, i - 1])
        levels.append(ResolutionLevel(cloud, lv[0].grid_size, lv[0].ball_radius, up, nbr, pool))
    input_map = np.concatenate([s.input_map + offsets[j, 0] for j, s in enumerate(samples)])
    rel = [_pad_rel([s.rel[i] for s in samples]) for i in range(n_levels)]
    pool_rel = [None] + [_pad_rel([s.pool_rel[i] for s in samples]) for i in range(1, n_levels)]
    return PreparedCloud(levels, input_map, rel, pool_rel, int(sum(s.num_input for s in samples)))


class ResidualBlock(Module):
    """Bottleneck unary -> aggregation -> unary, plus an identity or 1x1 shortcut."""

    def __init__(self, spec: BlockSpec, agg: AggregatorConfig, rng: np.random.Generator,
                 norm: bool = True, slope: float = 0.1):
        m = spec.mid_ch
        self.spec = spec
        self.reduce = Unary(spec.in_ch, m, rng, "leaky", norm, slope)
        self.agg = Aggregator(agg.with_channels(m, m), rng, norm)
        self.expand = Unary(m, spec.out_ch, rng, None, norm)
        self.shortcut = Unary(spec.in_ch, spec.out_ch, rng, None, norm) if spec.in_ch != spec.out_ch else None

    def _branch(self, x: Tensor, nbr: NeighborIndex, rel: np.ndarray) -> Tensor:
        return self.expand(self.agg(self.reduce(x), nbr, rel))

    def __call__(self, x: Tensor, nbr: NeighborIndex, rel: np.ndarray) -> Tensor:
        if x.shape[0] != nbr.indices.shape[0]:
            raise ConfigError(f"features for {x.shape[0]} points at a level with {nbr.indices.shape[0]} points")
        sc = x if self.shortcut is None else self.shortcut(x)
        return add(sc, self._branch(x, nbr, rel))


class StridedResidualBlock(ResidualBlock):
    """Residual block pooling fine features onto coarser centers.

    ``nbr`` queries the coarse centers against the fine support; the shortcut
    max-pools the fine input over the same neighborhoods.
    """

    def __call__(self, x: Tensor, nbr: NeighborIndex, rel: np.ndarray) -> Tensor:
        if nbr.indices.shape[0] == 0:
            raise ConfigError("coarse cloud is empty")
        if nbr.indices.max() >= x.shape[0]:
            raise ConfigError("pooling neighbors index past the fine features")
        pooled, _ = max_reduce_neighbors(gather_rows(x, nbr.indices), nbr.mask)
        sc = pooled if self.shortcut is None else self.shortcut(pooled)
        return add(sc, self._branch(x, nbr, rel))


class Decoder(Module):
    def __init__(self, widths: Sequence[int], rng: np.random.Generator, norm: bool = True, slope: float = 0.1):
        self.ups = [Unary(widths[l] + widths[l - 1], widths[l - 1], rng, "leaky", norm, slope)
                    for l in range(len(widths) - 1, 0, -1)]
        self.final = Unary(widths[0], widths[0], rng, "leaky", norm, slope)

    def __call__(self, feats: Sequence[Tensor], prepared: PreparedCloud, full_resolution: bool = True) -> Tensor:
        if len(feats) != len(prepared.levels) or len(feats) != len(self.ups) + 1:
            raise ConfigError(f"decoder needs features for {len(self.ups) + 1} levels, got {len(feats)}")
        x = feats[-1]
        for step, unary in enumerate(self.ups):
            lvl = len(feats) - 2 - step
            up = gather_rows(x, prepared.levels[lvl].upsample_map)
            x = unary(concat_lastdim([up, feats[lvl]]))
        x = self.final(x)
        if full_resolution:
            x = gather_rows(x, prepared.input_map)
        return x


class SegmentationNet(Module):
    def __init__(self, spec: NetworkSpec, agg: AggregatorConfig, seed: int | np.random.Generator = 0,
                 norm: bool = True):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.spec = spec
        self.agg_config = agg
        slope = spec.leaky_slope
        self.stem = Unary(spec.in_features, spec.C, rng, "leaky", norm, slope)
        self.stages = []
        for stage_specs in spec.block_specs():
            blocks = []
            for bs in stage_specs:
                cls = StridedResidualBlock if bs.kind is BlockKind.STRIDED_RESIDUAL else ResidualBlock
                blocks.append(cls(bs, agg, rng, norm, slope))
            self.stages.append(_Stage(blocks))
        self.decoder = Decoder(spec.widths, rng, norm, slope)
        self.heads = [Linear(spec.C, n, rng) for n in spec.head_sizes()]

    def encode(self, prepared: PreparedCloud) -> list[Tensor]:
        if len(prepared.levels) != self.spec.stages:
            raise ConfigError(f"pyramid has {len(prepared.levels)} levels, network has {self.spec.stages} stages")
        x = self.stem(Tensor(prepared.features, dtype=self.stem.linear.weight.dtype))
        feats = []
        for s, stage in enumerate(self.stages):
            lvl = prepared.levels[s]
            for b, block in enumerate(stage.blocks):
                if isinstance(block, StridedResidualBlock):
                    x = block(x, lvl.pool_neighbors, prepared.pool_rel[s])
                else:
                    x = block(x, lvl.neighbors, prepared.rel[s])
            feats.append(x)
        return feats

    def __call__(self, prepared: PreparedCloud, category: int = 0, full_resolution: bool = True) -> Tensor:
        """Logits per input point (or per level-0 point when ``full_resolution`` is off)."""
        if not 0 <= category < len(self.heads):
            raise ConfigError(f"category {category} out of range for {len(self.heads)} heads")
        feats = self.encode(prepared)
        x = self.decoder(feats, prepared, full_resolution)
        return self.heads[category](x)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks
