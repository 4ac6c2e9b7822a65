import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sala.aggregation import (
    Aggregator, AggregatorConfig, Family, UnsupportedConfigError, canonical_order, hard_assign, kpconv_influence,
    kpconv_rigid_forward, make_kernel_points, ones_assign, sala_forward, soft_assign,
)
from sala.autodiff import Tensor
from sala.geometry import NeighborIndex, ball_query, relative_positions

ALL_FAMILIES = list(Family)


def random_neighborhood(rng, n=6, m=12, k=5):
    pos = rng.uniform(0, 0.3, (m, 3))
    centers = pos[:n]
    idx = np.stack([rng.choice(m, k, replace=False) for _ in range(n)])
    mask = rng.random((n, k)) < 0.8
    mask[:, 0] = True
    idx = np.where(mask, idx, idx[:, :1])
    nbr = NeighborIndex(idx, mask, 0.3)
    return pos, nbr, relative_positions(centers, pos, nbr)


def make_agg(family, rng, groups=2, c_in=4, c_out=6):
    groups = 3 if family is Family.KPCONV_RIGID and groups == 2 else groups
    agg = Aggregator(AggregatorConfig(family, groups, c_in, c_out), rng, norm=False)
    for _, p in agg.named_parameters():
        p.data = (p.data + 0.2 * rng.standard_normal(p.shape)).astype(np.float32)
    return agg


# -- hand cases --------------------------------------------------------------


def test_sala_hand_case_max_and_sum():
    f = Tensor(np.array([[[1.0], [2.0]]]))
    Q = Tensor(np.array([[[0.25, 0.75], [1.0, 0.0]]]))
    W = Tensor(np.array([[3.0, -1.0]]))
    # group 0: max(0.75, 6) = 6; group 1: max(-0.75, 0) = 0
    assert sala_forward(f, None, Q, W, "max").data.tolist() == [[6.0]]
    # group 0: 0.75 + 6; group 1: -0.75 + 0
    assert sala_forward(f, None, Q, W, "sum").data.tolist() == [[6.0]]


def test_sala_masked_slot_is_ignored():
    f = Tensor(np.array([[[1.0], [50.0]]]))
    Q = Tensor(np.array([[[1.0, 0.0], [1.0, 0.0]]]))
    W = Tensor(np.array([[1.0, 1.0]]))
    out = sala_forward(f, None, Q, W, "max", mask=np.array([[True, False]]), simplex=False)
    assert out.data.tolist() == [[1.0]]


def test_sala_rejects_rows_off_the_simplex():
    f = Tensor(np.ones((1, 2, 1)))
    Q = Tensor(np.array([[[0.7, 0.7], [0.5, 0.5]]]))
    with pytest.raises(AssertionError):
        sala_forward(f, None, Q, Tensor(np.ones((1, 2))))


def test_kpconv_influence_values():
    kp = np.array([[0.0, 0, 0], [0.4, 0, 0]])
    sigma = 0.2
    rel = np.array([[[0.0, 0, 0], [0.4, 0, 0], [0.05, 0, 0], [0.0, 0.3, 0]]])
    h = kpconv_influence(rel, kp, sigma)
    assert h[0, 0, 0] == 1.0 and h[0, 1, 1] == 1.0
    assert h[0, 2, 0] == pytest.approx(0.75, abs=1e-12)
    assert h[0, 3, 0] == 0.0
    assert h[0, 1, 0] == 0.0


def test_kpconv_hand_case_n1_k2_s2():
    kp = np.array([[0.0, 0, 0], [0.5, 0, 0]])
    rel = np.array([[[0.0, 0, 0], [0.5, 0, 0]]])
    f = np.array([[[1.0, 2.0], [3.0, -1.0]]])
    W = np.array([[1.0], [0.0], [0.0], [1.0]])  # W_0 = [1, 0]^T, W_1 = [0, 1]^T stacked by rows
    H = kpconv_influence(rel, kp, 1.0)
    out = kpconv_rigid_forward(Tensor(f), H, Tensor(W)).data
    expect = 0.0
    for g in range(2):
        for j in range(2):
            d = float(np.linalg.norm(rel[0, j] - kp[g]))
            h = max(0.0, 1.0 - d / 1.0)
            expect += h * float(f[0, j] @ W[2 * g:2 * g + 2, 0])
    assert expect == pytest.approx(2.5)
    assert abs(out[0, 0] - expect) < 1e-6


def test_kernel_points_inside_unit_ball():
    for S in (1, 2, 5, 15):
        kp = make_kernel_points(S)
        assert kp.shape == (S, 3)
        assert (np.linalg.norm(kp, axis=1) <= 1).all()
        assert np.allclose(kp[0], 0)
    with pytest.raises(UnsupportedConfigError):
        make_kernel_points(0)


# -- degenerate S = 1 --------------------------------------------------------


def test_single_group_sala_equals_pointwise_bitwise():
    for trial in range(50):
        rng = np.random.default_rng(trial)
        pos, nbr, rel = random_neighborhood(rng)
        sala = make_agg(Family.SALA, rng, groups=1)
        pw = Aggregator(AggregatorConfig(Family.POINTWISE, 1, 4, 6), rng, norm=False)
        pw.pos.weight.data = sala.pos.weight.data.copy()
        pw.pos.bias.data = sala.pos.bias.data.copy()
        pw.groups_weight.data = sala.groups_weight.data.copy()
        x = Tensor(rng.standard_normal((12, 4)).astype(np.float32))
        a = sala.aggregate(x, nbr, rel).data
        b = pw.aggregate(x, nbr, rel).data
        assert a.tobytes() == b.tobytes()


# -- permutation invariance --------------------------------------------------


@pytest.mark.parametrize("family", ALL_FAMILIES, ids=[f.value for f in ALL_FAMILIES])
def test_permutation_invariance_bit_exact(family):
    rng = np.random.default_rng(99)
    agg = make_agg(family, rng)
    for trial in range(150):
        pos, nbr, rel = random_neighborhood(rng)
        x = Tensor(rng.standard_normal((12, 4)).astype(np.float32))
        base = agg.aggregate(x, nbr, rel).data
        perm = np.stack([rng.permutation(nbr.k) for _ in range(nbr.indices.shape[0])])
        shuffled = NeighborIndex(np.take_along_axis(nbr.indices, perm, 1), np.take_along_axis(nbr.mask, perm, 1),
                                 nbr.radius)
        out = agg.aggregate(x, shuffled, np.take_along_axis(rel, perm[..., None], 1)).data
        assert out.tobytes() == base.tobytes()


def test_canonical_order_puts_valid_slots_first():
    nbr = NeighborIndex(np.array([[5, 2, 9, 5]]), np.array([[True, True, False, True]]), 1.0)
    order = canonical_order(nbr)
    assert np.take_along_axis(nbr.indices, order, 1).tolist() == [[2, 5, 5, 9]]
    assert np.take_along_axis(nbr.mask, order, 1).tolist() == [[True, True, True, False]]


# -- assignments -------------------------------------------------------------


def test_soft_assignment_rows_on_simplex_large_sample():
    rng = np.random.default_rng(4)
    r = Tensor((rng.standard_normal((1000, 100, 8)) * 3).astype(np.float32))
    for S in (2, 4, 8):
        W = Tensor((rng.standard_normal((8, S)) * 5).astype(np.float32))
        b = Tensor(rng.standard_normal(S).astype(np.float32))
        Q = soft_assign(r, W, b).data.astype(np.float64)
        assert Q.shape == (1000, 100, S)
        assert np.abs(Q.sum(-1) - 1).max() <= 1e-6
        assert Q.min() >= 0 and Q.max() <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.floats(0.01, 50), st.integers(0, 2 ** 31))
def test_soft_assignment_simplex_property(S, scale, seed):
    rng = np.random.default_rng(seed)
    r = Tensor((rng.standard_normal((20, 7, 4)) * scale).astype(np.float32))
    Q = soft_assign(r, Tensor(rng.standard_normal((4, S)).astype(np.float32)), None).data
    assert np.abs(Q.astype(np.float64).sum(-1) - 1).max() <= 1e-6


def test_assignment_layer_starts_uniform():
    rng = np.random.default_rng(0)
    agg = Aggregator(AggregatorConfig(Family.SALA, 4, 4, 8), rng, norm=False)
    _, nbr, rel = random_neighborhood(rng)
    Q = agg.assignments(nbr, rel)
    assert np.allclose(Q[nbr.mask], 0.25)
    assert (Q[~nbr.mask] == 0).all()


def test_hard_assignment_binary_and_two_groups_only():
    Q = Tensor(np.array([[[0.2, 0.8], [0.5, 0.5]]]))
    assert hard_assign(Q).data.tolist() == [[[0.0, 1.0], [1.0, 1.0]]]
    with pytest.raises(UnsupportedConfigError):
        hard_assign(Tensor(np.full((1, 1, 3), 1 / 3)))
    with pytest.raises(UnsupportedConfigError):
        AggregatorConfig(Family.SALA_HARD, 3)


def test_ones_assignment_respects_mask():
    Q = ones_assign(np.array([[True, False]]), 3).data
    assert Q.tolist() == [[[1, 1, 1], [0, 0, 0]]]


# -- configuration -----------------------------------------------------------


def test_config_shapes_per_family():
    cfg = AggregatorConfig(Family.SALA, 2, 16, 16)
    assert cfg.hidden == 8 and cfg.encoder_rows == 24 and cfg.encoder_cols == 32
    assert AggregatorConfig(Family.SALA_NOPOS, 2, 16, 16).encoder_rows == 16
    kp = AggregatorConfig(Family.KPCONV_RIGID, 15, 16, 32)
    assert (kp.encoder_rows, kp.encoder_cols) == (240, 32)
    assert AggregatorConfig(Family.POINTWISE, 5).groups == 1
    assert AggregatorConfig(Family.SALA_SUM).reduce == "sum"


@pytest.mark.parametrize("kwargs", [dict(groups=0), dict(family="kpconv-rigid", sigma=0.0),
                                    dict(family="kpconv-rigid", groups=2, kernel_points=np.ones((2, 3)))])
def test_config_rejects_unsupported(kwargs):
    with pytest.raises(UnsupportedConfigError):
        AggregatorConfig(**kwargs)


def test_aggregator_with_real_ball_query_and_norm():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 1, (200, 3))
    nbr = ball_query(pts, pts, 0.2, 16)
    rel = relative_positions(pts, pts, nbr)
    for fam in ALL_FAMILIES:
        agg = Aggregator(AggregatorConfig(fam, 3 if fam is Family.KPCONV_RIGID else 2, 5, 8), rng)
        out = agg(Tensor(rng.standard_normal((200, 5)).astype(np.float32)), nbr, rel)
        assert out.shape == (200, 8) and np.isfinite(out.data).all() and (out.data >= 0).all()
