"""Analytical parameter / multiply-accumulate accounting and weight footprints.

MAC convention: a dense layer on M rows costs ``M * c_in * c_out``. Batch norm,
softmax, activations, assignment scaling and max/sum reductions cost no MACs;
their elementwise op counts are reported separately as ``other_ops``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import AggregatorConfig, Family
from .autodiff import CHECKPOINT_MAGIC, load_checkpoint
from .geometry import PointCloud, build_pyramid, grid_subsample
from .network import BlockKind, NetworkSpec

__all__ = [
    "CostRow", "CostReport", "count_params", "count_macs", "weight_footprint", "checkpoint_header_bytes",
    "benchmark_point_counts", "format_report", "REFERENCE",
]

# published efficiency figures of the two-group models, keyed by C
REFERENCE = {
    36: {"params": 1.6e6, "gmacs": 12.9, "memory_mb": 13.5},
    18: {"params": 0.41e6, "gmacs": 4.6, "memory_mb": 3.8},
}


@dataclass
class CostRow:
    name: str
    params: int = 0
    macs: int = 0
    other_ops: int = 0


@dataclass
class CostReport:
    params: int
    macs: int = 0
    weight_bytes: int = 0
    breakdown: list[CostRow] = field(default_factory=list)
    point_counts: list[int] = field(default_factory=list)
    k: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    @property
    def other_ops(self) -> int:
        return sum(r.other_ops for r in self.breakdown)

    def to_json(self) -> dict:
        d = asdict(self)
        d["gmacs"] = self.gmacs
        d["other_ops"] = self.other_ops
        return d


def _unary(rows: int, c_in: int, c_out: int) -> tuple[int, int, int]:
    return c_in * c_out + 2 * c_out, rows * c_in * c_out, 3 * rows * c_out


def _aggregator(cfg: AggregatorConfig, n: int, k: int) -> tuple[int, int, int]:
    p, S, co = cfg.hidden, cfg.groups, cfg.c_out
    params = cfg.encoder_rows * cfg.encoder_cols + 2 * co
    macs = other = 0
    nk = n * k
    if cfg.family is Family.KPCONV_RIGID:
        macs += nk * S * cfg.c_in + n * S * cfg.c_in * co
        other += nk * S * 5
    else:
        params += 3 * p + p
        macs += nk * 3 * p
        other += nk * p
        if cfg.learns_assignment:
            params += p * S + S
            macs += nk * p * S
            other += nk * S * 3
        width = cfg.c_in + (p if cfg.position_in_features else 0)
        macs += nk * width * co * S
        other += nk * S * co * 2
    other += n * co * 4
    return params, macs, other


def _walk(spec: NetworkSpec, agg: AggregatorConfig, counts: Sequence[int], k: int) -> list[CostRow]:
    rows: list[CostRow] = []

    def add(name, triple):
        rows.append(CostRow(name, *triple))

    add("stem", _unary(counts[0], spec.in_features, spec.C))
    for s, stage in enumerate(spec.block_specs()):
        for b, bs in enumerate(stage):
            strided = bs.kind is BlockKind.STRIDED_RESIDUAL
            n_out = counts[s]
            n_in = counts[s - 1] if strided else counts[s]
            m = bs.mid_ch
            name = f"stage{s}.block{b}"
            add(name + ".reduce", _unary(n_in, bs.in_ch, m))
            add(name + ".agg", _aggregator(agg.with_channels(m, m), n_out, k))
            add(name + ".expand", _unary(n_out, m, bs.out_ch))
            if bs.in_ch != bs.out_ch:
                add(name + ".shortcut", _unary(n_out, bs.in_ch, bs.out_ch))
    w = spec.widths
    for lvl in range(spec.stages - 1, 0, -1):
        add(f"decoder.up{lvl}", _unary(counts[lvl - 1], w[lvl] + w[lvl - 1], w[lvl - 1]))
    add("decoder.final", _unary(counts[0], spec.C, spec.C))
    for h, n in enumerate(spec.head_sizes()):
        add(f"head{h}", (spec.C * n + n, counts[0] * spec.C * n, 0))
    return rows


def count_params(spec: NetworkSpec, agg: AggregatorConfig) -> CostReport:
    """Exact learnable scalar count, biases and normalization params included."""
    rows = _walk(spec, agg, [0] * spec.stages, 0)
    for r in rows:
        r.macs = r.other_ops = 0
    return CostReport(params=sum(r.params for r in rows), breakdown=rows)


def count_macs(spec: NetworkSpec, agg: AggregatorConfig, point_counts_per_level: Sequence[int],
               k: int = 32) -> CostReport:
    """MACs of one forward pass given per-level point counts and a padded neighbor count ``k``."""
    if len(point_counts_per_level) != spec.stages:
        raise ValueError(f"need {spec.stages} level counts, got {len(point_counts_per_level)}")
    rows = _walk(spec, agg, list(point_counts_per_level), k)
    params = sum(r.params for r in rows)
    return CostReport(params=params, macs=sum(r.macs for r in rows),
                      weight_bytes=4 * params + checkpoint_header_bytes(spec, agg),
                      breakdown=rows, point_counts=[int(c) for c in point_counts_per_level], k=k)


def checkpoint_header_bytes(spec: NetworkSpec, agg: AggregatorConfig) -> int:
    """Non-payload bytes of a parameter checkpoint for this architecture."""
    from .network import SegmentationNet

    net = SegmentationNet(spec, agg, seed=0)
    size = len(CHECKPOINT_MAGIC) + 8
    for name, p in net.named_parameters():
        size += 4 + len(name.encode("utf-8")) + 4 + 8 * p.ndim
    return size


def weight_footprint(path: str | os.PathLike) -> dict:
    """File size of a checkpoint next to its raw float32 payload size."""
    tensors = load_checkpoint(path)
    params = int(sum(t.size for t in tensors.values()))
    size = os.path.getsize(path)
    return {"file_bytes": size, "params": params, "raw_f32_bytes": 4 * params, "header_bytes": size - 4 * params}


def benchmark_point_counts(spec: NetworkSpec, n_points: int = 15000, seed: int = 0,
                           room_density: float = 2500.0) -> list[int]:
    """Per-level point counts of a seeded synthetic crop with ``n_points`` at level 0.

    A dense synthetic room is grid-subsampled at the base grid size; the
    ``n_points`` subsampled points nearest to a seeded anchor form the crop
    whose pyramid is measured.
    """
    from .synthetic import SyntheticSceneSpec, generate_room

    rng = np.random.default_rng(seed)
    room = generate_room(SyntheticSceneSpec(density=room_density, seed=seed), rng)
    sub = grid_subsample(room, spec.base_grid)
    if len(sub) < n_points:
        raise ValueError(f"benchmark room has only {len(sub)} points at grid {spec.base_grid}")
    anchor = sub.positions[rng.integers(len(sub))]
    d = ((sub.positions - anchor) ** 2).sum(axis=1)
    crop = sub.subset(np.argsort(d, kind="stable")[:n_points])
    levels = build_pyramid(PointCloud(crop.positions), spec.base_grid, spec.base_radius, spec.stages,
                           with_neighbors=False)
    return [len(lvl.cloud) for lvl in levels]


def format_report(report: CostReport, title: str = "") -> str:
    lines = [title] if title else []
    width = max([len(r.name) for r in report.breakdown] + [6])
    lines.append(f"{'module':<{width}}  {'params':>10}  {'MACs':>14}  {'other-ops':>12}")
    for r in report.breakdown:
        lines.append(f"{r.name:<{width}}  {r.params:>10,}  {r.macs:>14,}  {r.other_ops:>12,}")
    lines.append(f"{'total':<{width}}  {report.params:>10,}  {report.macs:>14,}  {report.other_ops:>12,}")
    if report.point_counts:
        lines.append(f"points per level: {report.point_counts}, k = {report.k}")
        lines.append(f"GMACs: {report.gmacs:.3f}")
    if report.weight_bytes:
        lines.append(f"weight bytes (f32 checkpoint): {report.weight_bytes:,}")
    lines += report.notes
    return "\n".join(lines)


def write_report_json(report: CostReport, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
