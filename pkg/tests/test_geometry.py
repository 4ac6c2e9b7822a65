import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sala import geometry
from sala.autodiff import EmptyNeighborhoodError
from sala.geometry import (
    GeometryError, PointCloud, ball_query, build_pyramid, grid_subsample, nn_interpolate_map, read_sptc,
    relative_positions, write_sptc,
)

from conftest import random_cloud


# -- brute-force oracles -----------------------------------------------------


def subsample_oracle(cloud, g, origin=(0.0, 0.0, 0.0)):
    buckets = {}
    for i, p in enumerate(cloud.positions):
        key = tuple(int(math.floor(v)) for v in (p - np.asarray(origin)) / g)
        buckets.setdefault(key, []).append(i)
    pos, feats, labels = [], [], []
    for key in sorted(buckets):
        members = buckets[key]
        s = np.zeros(3)
        f = np.zeros(cloud.features.shape[1])
        for i in members:
            s += cloud.positions[i]
            f += cloud.features[i].astype(np.float64)
        pos.append(s / len(members))
        feats.append((f / len(members)).astype(np.float32))
        if cloud.labels is not None:
            votes = np.bincount(cloud.labels[members])
            labels.append(int(np.argmax(votes)))
    return np.array(pos), np.array(feats), np.array(labels)


def sq(a, b):
    d = a - b
    return d[0] * d[0] + d[1] * d[1] + d[2] * d[2]


def ball_oracle(centers, support, r, k_max, self_query):
    out = []
    for i, c in enumerate(centers):
        cands = [(not (self_query and j == i), sq(support[j], c), j)
                 for j in range(len(support)) if sq(support[j], c) <= r * r]
        out.append([j for _, _, j in sorted(cands)[:k_max]])
    return out


def nn_oracle(fine, coarse):
    return np.array([int(np.argmin([sq(c, f) for c in coarse])) for f in fine])


# -- grid subsampling --------------------------------------------------------


def test_grid_subsample_matches_oracle_on_random_clouds():
    for trial in range(100):
        rng = np.random.default_rng(trial)
        cloud = random_cloud(rng, int(rng.integers(1, 501)), labels=4)
        g = float(rng.uniform(0.05, 0.4))
        sub = grid_subsample(cloud, g)
        pos, feats, labels = subsample_oracle(cloud, g)
        assert np.array_equal(sub.positions, pos)
        assert np.array_equal(sub.features, feats)
        assert np.array_equal(sub.labels, labels)


def test_grid_subsample_single_voxel_gives_barycenter():
    cloud = PointCloud(np.array([[0.1, 0.1, 0.1], [0.3, 0.1, 0.1], [0.2, 0.4, 0.1]]), labels=[2, 1, 1])
    sub = grid_subsample(cloud, 1.0)
    assert len(sub) == 1
    assert np.allclose(sub.positions[0], [0.2, 0.2, 0.1])
    assert sub.labels[0] == 1


def test_grid_subsample_label_tie_goes_to_smaller_label():
    cloud = PointCloud(np.zeros((4, 3)) + 0.5, labels=[3, 1, 3, 1])
    assert grid_subsample(cloud, 1.0).labels[0] == 1


def test_grid_subsample_is_idempotent_in_cell_count():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 400)
    once = grid_subsample(cloud, 0.2)
    # every barycenter stays inside its own cell, so a second pass keeps all of them
    assert len(grid_subsample(once, 0.2)) == len(once)


def test_grid_subsample_rejects_bad_input():
    with pytest.raises(GeometryError):
        grid_subsample(PointCloud(np.zeros((3, 3))), 0.0)
    with pytest.raises(GeometryError):
        grid_subsample(PointCloud(np.zeros((0, 3))), 0.1)
    with pytest.raises(GeometryError):
        grid_subsample(PointCloud(np.array([[0.0, np.nan, 0.0]])), 0.1)


# -- ball query --------------------------------------------------------------


@pytest.mark.parametrize("force_grid", [False, True])
def test_ball_query_matches_oracle_on_random_clouds(monkeypatch, force_grid):
    if force_grid:
        monkeypatch.setattr(geometry, "BRUTE_FORCE_LIMIT", 0)
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        cloud = random_cloud(rng, int(rng.integers(1, 501)))
        r = float(rng.uniform(0.05, 0.3))
        k = int(rng.integers(1, 40))
        nbr = ball_query(cloud.positions, cloud.positions, r, k, self_query=True)
        expect = ball_oracle(cloud.positions, cloud.positions, r, k, True)
        for i, row in enumerate(expect):
            assert nbr.indices[i, : len(row)].tolist() == row
            assert nbr.mask[i].sum() == len(row)
            assert not nbr.mask[i, len(row):].any()
            assert (nbr.indices[i, len(row):] == row[0]).all()


def test_ball_query_cross_clouds_match_oracle(monkeypatch):
    monkeypatch.setattr(geometry, "BRUTE_FORCE_LIMIT", 0)
    rng = np.random.default_rng(7)
    centers = rng.uniform(0, 1, (60, 3))
    support = rng.uniform(0, 1, (300, 3))
    nbr = ball_query(centers, support, 0.25, 16, self_query=False)
    for i, row in enumerate(ball_oracle(centers, support, 0.25, 16, False)):
        assert nbr.indices[i, : len(row)].tolist() == row


def test_ball_query_self_first_even_with_duplicates():
    pts = np.zeros((5, 3))
    nbr = ball_query(pts, pts, 0.1, 8, self_query=True)
    assert nbr.indices[:, 0].tolist() == list(range(5))


def test_ball_query_padding_to_k_max():
    pts = np.array([[0.0, 0, 0], [0.05, 0, 0], [5, 5, 5]])
    nbr = ball_query(pts, pts, 0.1, 6, pad_to_k_max=True)
    assert nbr.indices.shape == (3, 6)
    assert nbr.counts().tolist() == [2, 2, 1]


def test_ball_query_empty_neighborhood_names_center():
    with pytest.raises(EmptyNeighborhoodError) as err:
        ball_query(np.array([[0.0, 0, 0], [9.0, 9, 9]]), np.zeros((2, 3)), 0.5, 4, self_query=False)
    assert err.value.center == 1


def test_ball_query_random_selection_is_seeded():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 0.2, (80, 3))
    a = ball_query(pts, pts, 0.5, 10, "random", np.random.default_rng(1))
    b = ball_query(pts, pts, 0.5, 10, "random", np.random.default_rng(1))
    assert np.array_equal(a.indices, b.indices)
    assert (a.indices[:, 0] == np.arange(80)).all()
    full = ball_query(pts, pts, 0.5, 80)
    assert not np.array_equal(a.indices, full.indices[:, :10])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 120), st.floats(0.02, 0.6), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_ball_query_property_all_within_radius(n, r, k, seed):
    pts = np.random.default_rng(seed).uniform(0, 1, (n, 3))
    nbr = ball_query(pts, pts, r, k)
    rel = relative_positions(pts, pts, nbr)
    d = np.sqrt((rel.astype(np.float64) ** 2).sum(-1))
    assert (d[nbr.mask] <= r + 1e-6).all()
    assert (nbr.counts() >= 1).all() and (nbr.counts() <= k).all()
    assert (rel[~nbr.mask] == 0).all()


# -- nearest-neighbor upsampling --------------------------------------------


@pytest.mark.parametrize("force_grid", [False, True])
def test_nn_interpolate_map_matches_oracle(monkeypatch, force_grid):
    if force_grid:
        monkeypatch.setattr(geometry, "BRUTE_FORCE_LIMIT", 0)
    for trial in range(100):
        rng = np.random.default_rng(2000 + trial)
        fine = rng.uniform(0, 1, (int(rng.integers(1, 501)), 3))
        coarse = rng.uniform(0, 1, (int(rng.integers(1, 120)), 3))
        assert np.array_equal(nn_interpolate_map(fine, coarse), nn_oracle(fine, coarse))


def test_nn_interpolate_map_ties_to_lower_index():
    coarse = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert nn_interpolate_map(np.zeros((1, 3)), coarse).tolist() == [0]


def test_nn_interpolate_map_far_points_found():
    coarse = np.zeros((4, 3))
    fine = np.array([[100.0, 0, 0]])
    assert nn_interpolate_map(fine, coarse, start_radius=1e-3).tolist() == [0]


# -- pyramid -----------------------------------------------------------------


def test_pyramid_levels_shrink_and_maps_are_valid():
    rng = np.random.default_rng(11)
    cloud = random_cloud(rng, 3000, extent=2.0)
    levels = build_pyramid(cloud, 0.05, 0.12, 4, k_max=16)
    sizes = [len(l.cloud) for l in levels]
    assert sizes == sorted(sizes, reverse=True)
    for i, lvl in enumerate(levels):
        assert lvl.grid_size == pytest.approx(0.05 * 2 ** i)
        assert lvl.neighbors.indices.shape[0] == sizes[i]
        if i + 1 < len(levels):
            assert lvl.upsample_map.shape == (sizes[i],)
            assert lvl.upsample_map.max() < sizes[i + 1]
        if i > 0:
            assert lvl.pool_neighbors.indices.max() < sizes[i - 1]
    assert levels[-1].upsample_map is None


def test_pyramid_rejects_zero_levels():
    with pytest.raises(GeometryError):
        build_pyramid(PointCloud(np.zeros((2, 3))), 0.1, 0.2, 0)


# -- SPTC1 -------------------------------------------------------------------


def test_sptc_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 50, labels=5)
    path = tmp_path / "a.sptc"
    write_sptc(path, cloud)
    back = read_sptc(path)
    assert np.array_equal(back.positions, cloud.positions.astype(np.float32))
    assert np.array_equal(back.features, cloud.features)
    assert np.array_equal(back.labels, cloud.labels)


def test_sptc_without_labels_and_truncated(tmp_path):
    cloud = PointCloud(np.ones((4, 3)), np.zeros((4, 2)))
    path = tmp_path / "b.sptc"
    write_sptc(path, cloud)
    assert read_sptc(path).labels is None
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(GeometryError):
        read_sptc(path)
    path.write_bytes(b"NOPE\n")
    with pytest.raises(GeometryError):
        read_sptc(path)


def test_point_cloud_validation():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((3, 3)), labels=[0, -1, 0])
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((3, 3)), labels=[0, 4, 0]).validate(num_classes=3)
