"""Finite-difference gradient checks for every learnable operator.

Each case builds a tiny float64 instance from a seed, projects its output onto
a fixed random direction to get a scalar, and compares the tape gradient with
central differences on a random sample of input and parameter coordinates.
Coordinates whose stencil ``x - eps .. x + eps`` changes a branch decision
(ReLU mask, max-pool argmax, hard threshold) are skipped, since the function
is not differentiable there.

The error is norm-wise: ``|a - n| / max(|a|, |n|)`` over the kept coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .aggregation import Aggregator, AggregatorConfig, Family
from .autodiff import (
    BatchNormState, KinkRecorder, Tape, Tensor, add, batch_norm, cross_entropy, linear, mul, softmax_lastdim, sum_all,
)
from .geometry import NeighborIndex
from .network import BlockKind, BlockSpec, ResidualBlock, StridedResidualBlock
from .training import l2_parameters, loss

__all__ = ["GradCase", "CaseResult", "CASES", "check_case", "run_suite", "format_results"]

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


@dataclass
class GradCase:
    name: str
    build: Builder
    note: str = ""


@dataclass
class CaseResult:
    name: str
    seeds: int
    max_error: float
    worst_seed: int
    checked: int
    skipped: int
    seconds: float

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error < tol and self.checked > 0


def _t(rng, *shape, grad=True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def _neighbors(rng, n_centers: int, n_support: int, k: int) -> tuple[NeighborIndex, np.ndarray]:
    idx = rng.integers(0, n_support, size=(n_centers, k))
    mask = rng.random((n_centers, k)) < 0.75
    mask[:, 0] = True
    idx = np.where(mask, idx, idx[:, :1])
    rel = rng.uniform(-1, 1, (n_centers, k, 3)) * 0.1
    rel[~mask] = 0
    return NeighborIndex(idx, mask, 0.1), rel


def _module_params(module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _randomize(module, rng) -> None:
    # zero-initialized parts (assignment layer, biases) would hide gradient paths
    for _, p in module.named_parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)


def _linear_case(rng):
    x, W, b = _t(rng, 5, 4), _t(rng, 4, 3), _t(rng, 3)
    return (lambda: linear(x, W, b)), {"x": x, "W": W, "b": b}


def _softmax_case(rng):
    x = _t(rng, 6, 4)
    return (lambda: softmax_lastdim(x)), {"x": x}


def _batch_norm_case(rng):
    x, g, b = _t(rng, 7, 3), _t(rng, 3), _t(rng, 3)
    return (lambda: batch_norm(x, g, b, BatchNormState(3), training=True)), {"x": x, "gamma": g, "beta": b}


def _aggregator_case(family: Family, groups: int = 2, exclude: tuple[str, ...] = ()) -> Builder:
    def build(rng):
        cfg = AggregatorConfig(family, groups, c_in=3, c_out=4, pos_hidden=4)
        agg = Aggregator(cfg, rng, norm=False)
        agg.astype(np.float64)
        _randomize(agg, rng)
        nbr, rel = _neighbors(rng, 4, 6, 4)
        x = _t(rng, 6, 3)
        params = {"x": x, **{k: v for k, v in _module_params(agg, "agg").items()
                             if not any(k.startswith(e) for e in exclude)}}
        return (lambda: agg.aggregate(x, nbr, rel)), params
    return build


def _block_case(strided: bool) -> Builder:
    def build(rng):
        spec = BlockSpec(BlockKind.STRIDED_RESIDUAL if strided else BlockKind.RESIDUAL, 4, 6 if strided else 4)
        cls = StridedResidualBlock if strided else ResidualBlock
        block = cls(spec, AggregatorConfig(Family.SALA, 2, pos_hidden=4), rng, norm=True)
        block.astype(np.float64)
        _randomize(block, rng)
        n_support = 8
        n_centers = 5 if strided else n_support
        nbr, rel = _neighbors(rng, n_centers, n_support, 4)
        x = _t(rng, n_support, 4)
        return (lambda: block(x, nbr, rel)), {"x": x, **_module_params(block, "block")}
    return build


def _loss_case(rng):
    logits, W1, W2 = _t(rng, 6, 4), _t(rng, 3, 3), _t(rng, 4)
    labels = rng.integers(0, 4, 6)
    named = [("a.weight", W1), ("a.bias", W2)]
    decay = l2_parameters(named)

    def fwd():
        # the bias is excluded from L2; tie it in linearly so it still has a gradient
        return add(loss(logits, labels, decay, 0.05), sum_all(W2))
    return fwd, {"logits": logits, "W1": W1, "b": W2}


def _cross_entropy_case(rng):
    logits = _t(rng, 8, 5)
    labels = rng.integers(0, 5, 8)
    return (lambda: cross_entropy(logits, labels)), {"logits": logits}


CASES: list[GradCase] = [
    GradCase("linear", _linear_case),
    GradCase("softmax", _softmax_case),
    GradCase("batch_norm", _batch_norm_case),
    GradCase("sala", _aggregator_case(Family.SALA)),
    GradCase("sala-s4", _aggregator_case(Family.SALA, 4)),
    GradCase("sala-sum", _aggregator_case(Family.SALA_SUM)),
    GradCase("sala-hard", _aggregator_case(Family.SALA_HARD, exclude=("agg.pos.", "agg.assign.")),
             "position and assignment layers excluded: the straight-through gradient is a surrogate"),
    GradCase("sala-ones", _aggregator_case(Family.SALA_NOASSIGN)),
    GradCase("sala-nopos", _aggregator_case(Family.SALA_NOPOS)),
    GradCase("pointwise", _aggregator_case(Family.POINTWISE)),
    GradCase("kpconv-rigid", _aggregator_case(Family.KPCONV_RIGID, 3)),
    GradCase("residual_block", _block_case(False)),
    GradCase("strided_residual_block", _block_case(True)),
    GradCase("cross_entropy", _cross_entropy_case),
    GradCase("loss_l2", _loss_case),
]


def _scalar(fn: Callable[[], Tensor], direction: np.ndarray | None, rng) -> tuple[Tensor, np.ndarray]:
    out = fn()
    if direction is None:
        direction = rng.standard_normal(out.shape)
    return sum_all(mul(out, Tensor(direction, dtype=np.float64))), direction


def check_case(case: GradCase, seed: int, eps: float = 1e-3, max_coords: int = 24) -> tuple[float, int, int]:
    """Relative error, kept coordinates and skipped coordinates for one seed."""
    rng = np.random.default_rng(seed)
    fn, params = case.build(rng)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        value, direction = _scalar(fn, None, rng)
    tape.backward(value)

    def probe() -> tuple[float, str]:
        with KinkRecorder() as rec:
            v, _ = _scalar(fn, direction, rng)
        return float(v.data), rec.digest()

    _, base_kinks = probe()
    coords = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    pick = rng.permutation(len(coords))[:max_coords]
    analytic, numeric = [], []
    skipped = 0
    for j in pick:
        name, i = coords[j]
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        f_plus, k_plus = probe()
        flat[i] = orig - eps
        f_minus, k_minus = probe()
        flat[i] = orig
        if not (k_plus == k_minus == base_kinks):
            skipped += 1
            continue
        g = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
        analytic.append(g)
        numeric.append((f_plus - f_minus) / (2 * eps))
    if not analytic:
        return 0.0, 0, skipped
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    err = 0.0 if scale < 1e-12 else float(np.linalg.norm(a - n) / scale)
    return err, len(analytic), skipped


def run_suite(seeds: int = 100, eps: float = 1e-3, cases: list[GradCase] | None = None,
              first_seed: int = 0) -> list[CaseResult]:
    results = []
    for case in cases or CASES:
        t0 = time.perf_counter()
        worst, worst_seed, kept, skipped = 0.0, first_seed, 0, 0
        for seed in range(first_seed, first_seed + seeds):
            err, k, s = check_case(case, seed, eps)
            kept += k
            skipped += s
            if err > worst:
                worst, worst_seed = err, seed
        results.append(CaseResult(case.name, seeds, worst, worst_seed, kept, skipped, time.perf_counter() - t0))
    return results


def format_results(results: list[CaseResult], tol: float = 1e-3) -> str:
    lines = [f"{'case':<24} {'seeds':>5} {'max rel err':>12} {'kept':>6} {'skipped':>7}  status"]
    for r in results:
        status = "PASS" if r.passed(tol) else f"FAIL (seed {r.worst_seed})"
        lines.append(f"{r.name:<24} {r.seeds:>5} {r.max_error:>12.3e} {r.checked:>6} {r.skipped:>7}  {status}")
    return "\n".join(lines)
