"""Local aggregation operators: SALA, its ablation variants, the pointwise-MLP
degenerate case and the rigid kernel-point convolution baseline.

Every operator maps support features ``(M, c_in)`` plus a neighbor index of
``N`` centers to center features ``(N, c_out)``. The functional pieces
(:func:`positional_encode`, :func:`soft_assign`, :func:`sala_forward`, ...)
work on already-gathered neighbor tensors; :class:`Aggregator` wires them up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import (
    Tensor, concat_lastdim, gather_rows, linear, max_reduce_neighbors, mul, relu, reshape,
    softmax_lastdim, straight_through_threshold, sum_axis, sum_reduce_neighbors,
)
from .geometry import NeighborIndex
from .layers import BatchNorm, Linear, Module, kaiming_uniform

__all__ = [
    "Family", "AggregatorConfig", "Aggregator", "UnsupportedConfigError", "positional_encode",
    "soft_assign", "hard_assign", "ones_assign", "sala_forward", "pointwise_forward",
    "kpconv_influence", "kpconv_rigid_forward", "make_kernel_points", "canonical_order",
]


class UnsupportedConfigError(ValueError):
    pass


class Family(str, Enum):
    SALA = "sala"
    SALA_SUM = "sala-sum"
    SALA_HARD = "sala-hard"
    SALA_NOASSIGN = "sala-ones"
    SALA_NOPOS = "sala-nopos"
    POINTWISE = "pointwise"
    KPCONV_RIGID = "kpconv-rigid"


@dataclass
class AggregatorConfig:
    family: Family = Family.SALA
    groups: int = 2
    c_in: int = 0
    c_out: int = 0
    pos_hidden: int | None = None
    sigma: float = 0.5
    kernel_points: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.family = Family(self.family)
        if self.family is Family.POINTWISE:
            self.groups = 1
        if self.groups < 1:
            raise UnsupportedConfigError(f"groups must be >= 1, got {self.groups}")
        if self.family is Family.SALA_HARD and self.groups != 2:
            raise UnsupportedConfigError("hard assignment thresholds at 0.5 and needs exactly 2 groups")
        if self.family is Family.KPCONV_RIGID:
            if not self.sigma > 0:
                raise UnsupportedConfigError(f"kernel point influence needs sigma > 0, got {self.sigma}")
            if self.kernel_points is None:
                self.kernel_points = make_kernel_points(self.groups, 1.0)
            self.kernel_points = np.asarray(self.kernel_points, dtype=np.float64)
            if self.kernel_points.shape != (self.groups, 3):
                raise UnsupportedConfigError(f"expected {self.groups} kernel points, got {self.kernel_points.shape}")
            if np.any(np.linalg.norm(self.kernel_points, axis=1) > 1 + 1e-9):
                raise UnsupportedConfigError("kernel points must lie inside the unit ball")

    def with_channels(self, c_in: int, c_out: int) -> "AggregatorConfig":
        return AggregatorConfig(self.family, self.groups, c_in, c_out, self.pos_hidden, self.sigma,
                                None if self.kernel_points is None else self.kernel_points.copy())

    @property
    def hidden(self) -> int:
        if self.pos_hidden is not None:
            return self.pos_hidden
        return max(8, self.c_out // 4)

    @property
    def reduce(self) -> str:
        return "sum" if self.family in (Family.SALA_SUM, Family.KPCONV_RIGID) else "max"

    @property
    def uses_position_mlp(self) -> bool:
        return self.family is not Family.KPCONV_RIGID

    @property
    def position_in_features(self) -> bool:
        return self.family not in (Family.SALA_NOPOS, Family.KPCONV_RIGID)

    @property
    def learns_assignment(self) -> bool:
        return self.family in (Family.SALA, Family.SALA_SUM, Family.SALA_HARD, Family.SALA_NOPOS)

    @property
    def encoder_rows(self) -> int:
        """Input width of the stacked group weights."""
        if self.family is Family.KPCONV_RIGID:
            return self.groups * self.c_in
        return self.c_in + (self.hidden if self.position_in_features else 0)

    @property
    def encoder_cols(self) -> int:
        if self.family is Family.KPCONV_RIGID:
            return self.c_out
        return self.groups * self.c_out


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------


def _mask_tensor(mask: np.ndarray, dtype, trailing: int = 1) -> Tensor:
    return Tensor(np.asarray(mask, dtype=dtype).reshape(mask.shape + (1,) * trailing))


def positional_encode(rel: Tensor | np.ndarray, weight: Tensor, bias: Tensor | None,
                      mask: np.ndarray | None = None) -> Tensor:
    """Lift relative positions (N, k, 3) with one dense layer and ReLU."""
    rel = rel if isinstance(rel, Tensor) else Tensor(rel, dtype=weight.dtype)
    r = relu(linear(rel, weight, bias))
    if mask is not None:
        r = mul(r, _mask_tensor(mask, r.dtype))
    return r


def soft_assign(r: Tensor, weight: Tensor, bias: Tensor | None, mask: np.ndarray | None = None) -> Tensor:
    """Group membership probabilities (N, k, S); masked neighbors get all-zero rows."""
    q = softmax_lastdim(linear(r, weight, bias))
    if mask is not None:
        q = mul(q, _mask_tensor(mask, q.dtype))
    return q


def hard_assign(Q: Tensor) -> Tensor:
    """Binarize two-group assignments at 0.5 with a straight-through backward."""
    if Q.shape[-1] != 2:
        raise UnsupportedConfigError(f"hard assignment needs exactly 2 groups, got {Q.shape[-1]}")
    return straight_through_threshold(Q, 0.5)


def ones_assign(mask: np.ndarray, groups: int, dtype=np.float32) -> Tensor:
    """All-ones assignment on valid slots, zeros on masked ones."""
    mask = np.asarray(mask, dtype=bool)
    return Tensor(np.repeat(mask[..., None], groups, axis=-1).astype(dtype))


def _check_simplex(Q: Tensor, mask: np.ndarray | None, tol: float = 1e-4) -> None:
    sums = Q.data.sum(axis=-1)
    if mask is not None:
        sums = sums[np.asarray(mask, bool)]
    if sums.size and (np.abs(sums - 1).max() > tol or Q.data.min() < -tol):
        raise AssertionError(f"assignment rows leave the simplex (max |sum-1| = {np.abs(sums - 1).max():.3g})")


def sala_forward(f: Tensor, r: Tensor | None, Q: Tensor, W: Tensor, reduce: str = "max",
                 mask: np.ndarray | None = None, simplex: bool = True) -> Tensor:
    """Soft-assignment aggregation of gathered neighbor features.

    ``f`` is (N, k, c_in), ``r`` the encoded positions (N, k, p) or None,
    ``Q`` (N, k, S) and ``W`` the S group weights stacked column-wise into
    (c_in + p, S * c_out). Each group scales the encoded neighbor features by
    its assignment, reduces over neighbors, and the S results are summed.
    """
    N, k = f.shape[:2]
    S = Q.shape[-1]
    if mask is None:
        mask = np.ones((N, k), dtype=bool)
    if simplex:
        _check_simplex(Q, mask)
    fstar = concat_lastdim([r, f]) if r is not None else f
    if W.shape[0] != fstar.shape[-1] or W.shape[1] % S:
        raise ValueError(f"group weights {W.shape} do not fit inputs of width {fstar.shape[-1]} and {S} groups")
    c_out = W.shape[1] // S
    enc = reshape(linear(fstar, W), (N, k, S, c_out))
    enc = reshape(mul(enc, reshape(Q, (N, k, S, 1))), (N, k, S * c_out))
    if reduce == "max":
        red, _ = max_reduce_neighbors(enc, mask)
    elif reduce == "sum":
        red = sum_reduce_neighbors(enc, mask)
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    return sum_axis(reshape(red, (N, S, c_out)), 1)


def pointwise_forward(f: Tensor, r: Tensor | None, W: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Shared dense layer on every neighbor followed by a max over neighbors."""
    fstar = concat_lastdim([r, f]) if r is not None else f
    if mask is None:
        mask = np.ones(f.shape[:2], dtype=bool)
    out, _ = max_reduce_neighbors(linear(fstar, W), mask)
    return out


def kpconv_influence(rel: np.ndarray, kernel_points: np.ndarray, sigma: float) -> np.ndarray:
    """Linear correlation ``max(0, 1 - |r - x_g| / sigma)``, shape (N, k, S)."""
    if not sigma > 0:
        raise UnsupportedConfigError(f"sigma must be positive, got {sigma}")
    rel = np.asarray(rel, dtype=np.float64)
    d = rel[..., None, :] - np.asarray(kernel_points, dtype=np.float64)
    dist = np.sqrt((d * d).sum(axis=-1))
    return np.maximum(0.0, 1.0 - dist / sigma)


def kpconv_rigid_forward(f: Tensor, H: np.ndarray | Tensor, W: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Double sum over neighbors and kernel points of ``h * W_g f_j``.

    ``W`` stacks the S kernel weights row-wise into (S * c_in, c_out).
    """
    N, k, c_in = f.shape
    H = H if isinstance(H, Tensor) else Tensor(np.asarray(H, dtype=f.dtype))
    S = H.shape[-1]
    if mask is None:
        mask = np.ones((N, k), dtype=bool)
    weighted = mul(reshape(f, (N, k, 1, c_in)), reshape(H, (N, k, S, 1)))
    pooled = sum_reduce_neighbors(weighted, mask)
    return linear(reshape(pooled, (N, S * c_in)), W)


def make_kernel_points(S: int, radius: float = 1.0) -> np.ndarray:
    """Deterministic kernel: origin plus S-1 Fibonacci-sphere points at 0.66 radius."""
    if not 1 <= S <= 32:
        raise UnsupportedConfigError(f"kernel point count must be in 1..32, got {S}")
    pts = np.zeros((S, 3))
    m = S - 1
    if m:
        i = np.arange(m) + 0.5
        z = 1 - 2 * i / m
        rho = np.sqrt(np.maximum(0.0, 1 - z * z))
        theta = math.pi * (1 + math.sqrt(5)) * i
        pts[1:] = np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1) * (0.66 * radius)
    return pts


def canonical_order(nbr: NeighborIndex) -> np.ndarray:
    """Per-center slot order placing valid neighbors first, by ascending index."""
    key = np.where(nbr.mask, nbr.indices, np.iinfo(np.int64).max)
    return np.argsort(key, axis=1, kind="stable")


# ---------------------------------------------------------------------------
# operator module
# ---------------------------------------------------------------------------


class Aggregator(Module):
    """One local aggregation layer followed by batch norm and ReLU.

    Neighbor lists are first put into canonical order so the result does not
    depend on how the caller ordered neighbors, down to the last bit.
    """

    def __init__(self, config: AggregatorConfig, rng: np.random.Generator, norm: bool = True):
        self.config = config
        cfg = config
        if cfg.uses_position_mlp:
            self.pos = Linear(3, cfg.hidden, rng)
        if cfg.learns_assignment:
            self.assign = Linear(cfg.hidden, cfg.groups, rng)
            self.assign.weight.data[:] = 0
        fan_in = cfg.encoder_rows
        self.groups_weight = Tensor(kaiming_uniform(rng, fan_in, (cfg.encoder_rows, cfg.encoder_cols)),
                                    requires_grad=True)
        self.norm = BatchNorm(cfg.c_out, enabled=norm)

    def __call__(self, x: Tensor, nbr: NeighborIndex, rel: np.ndarray) -> Tensor:
        return relu(self.norm(self.aggregate(x, nbr, rel)))

    def aggregate(self, x: Tensor, nbr: NeighborIndex, rel: np.ndarray) -> Tensor:
        """Raw operator output (N, c_out) before normalization."""
        cfg = self.config
        order = canonical_order(nbr)
        idx = np.take_along_axis(nbr.indices, order, axis=1)
        mask = np.take_along_axis(nbr.mask, order, axis=1)
        rel = np.take_along_axis(np.asarray(rel), order[..., None], axis=1)
        f = gather_rows(x, idx)
        if cfg.family is Family.KPCONV_RIGID:
            H = kpconv_influence(rel, cfg.kernel_points * nbr.radius, cfg.sigma * nbr.radius)
            return kpconv_rigid_forward(f, H, self.groups_weight, mask)
        r = positional_encode(Tensor(rel, dtype=x.dtype), self.pos.weight, self.pos.bias, mask)
        r_feat = r if cfg.position_in_features else None
        if cfg.family is Family.POINTWISE:
            return pointwise_forward(f, r_feat, self.groups_weight, mask)
        if cfg.family is Family.SALA_NOASSIGN:
            Q = ones_assign(mask, cfg.groups, x.dtype)
            return sala_forward(f, r_feat, Q, self.groups_weight, cfg.reduce, mask, simplex=False)
        Q = soft_assign(r, self.assign.weight, self.assign.bias, mask)
        if cfg.family is Family.SALA_HARD:
            return sala_forward(f, r_feat, hard_assign(Q), self.groups_weight, "max", mask, simplex=False)
        return sala_forward(f, r_feat, Q, self.groups_weight, cfg.reduce, mask)

    def assignments(self, nbr: NeighborIndex, rel: np.ndarray) -> np.ndarray:
        """Assignment matrix Q (N, k, S) the layer would use, in the caller's slot order."""
        cfg = self.config
        dtype = self.groups_weight.dtype
        if cfg.family is Family.KPCONV_RIGID:
            return kpconv_influence(rel, cfg.kernel_points * nbr.radius, cfg.sigma * nbr.radius)
        if not cfg.learns_assignment:
            return ones_assign(nbr.mask, cfg.groups, dtype).data
        r = positional_encode(Tensor(rel, dtype=dtype), self.pos.weight, self.pos.bias, nbr.mask)
        Q = soft_assign(r, self.assign.weight, self.assign.bias, nbr.mask)
        return hard_assign(Q).data if cfg.family is Family.SALA_HARD else Q.data
