"""Acceptance criteria 1-11, one test each.

Every test prints a single ``[acceptance N] PASS|FAIL: ...`` line (outside
pytest's capture) and then asserts. Criterion 9 trains two networks and takes
roughly ten minutes on one core.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from sala import geometry
from sala.aggregation import Aggregator, AggregatorConfig, Family, kpconv_influence, kpconv_rigid_forward, soft_assign
from sala.autodiff import Tensor, load_checkpoint, save_checkpoint
from sala.cli import load_scenes
from sala.config import parse_config
from sala.cost import benchmark_point_counts, count_macs, count_params
from sala.geometry import NeighborIndex, ball_query, grid_subsample, nn_interpolate_map
from sala.gradcheck import CASES, run_suite
from sala.network import NetworkSpec, SegmentationNet
from sala.training import ConfusionMatrix, miou, predict_direct, train, vote_inference

from conftest import random_cloud, tiny_scene
from test_aggregation import make_agg, random_neighborhood
from test_geometry import ball_oracle, nn_oracle, subsample_oracle

SMOKE_CFG = Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg"


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_01_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(seeds=100, eps=1e-3)
    seconds = time.perf_counter() - t0
    bad = [r.name for r in results if not r.passed(1e-3)]
    worst = max(results, key=lambda r: r.max_error)
    names = {r.name for r in results}
    covered = {"linear", "softmax", "sala", "sala-sum", "sala-hard", "sala-ones", "sala-nopos", "pointwise",
               "kpconv-rigid", "residual_block", "strided_residual_block", "loss_l2"} <= names
    ok = not bad and covered and seconds < 120 and len(results) == len(CASES)
    report(1, ok, f"{len(results)} operators x 100 seeds, worst {worst.name} {worst.max_error:.2e}, "
                  f"failing {bad}, {seconds:.1f} s")


def test_02_single_group_degenerates_to_pointwise(report):
    equal = 0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        _, nbr, rel = random_neighborhood(rng)
        sala = make_agg(Family.SALA, rng, groups=1)
        pw = Aggregator(AggregatorConfig(Family.POINTWISE, 1, 4, 6), rng, norm=False)
        pw.pos.weight.data = sala.pos.weight.data.copy()
        pw.pos.bias.data = sala.pos.bias.data.copy()
        pw.groups_weight.data = sala.groups_weight.data.copy()
        x = Tensor(rng.standard_normal((12, 4)).astype(np.float32))
        equal += sala.aggregate(x, nbr, rel).data.tobytes() == pw.aggregate(x, nbr, rel).data.tobytes()
    report(2, equal == 50, f"{equal}/50 neighborhoods bitwise equal")


def test_03_permutation_invariance(report):
    failures = {}
    for family in Family:
        rng = np.random.default_rng(3)
        agg = make_agg(family, rng)
        bad = 0
        for _ in range(1000):
            _, nbr, rel = random_neighborhood(rng)
            x = Tensor(rng.standard_normal((12, 4)).astype(np.float32))
            base = agg.aggregate(x, nbr, rel).data
            perm = np.stack([rng.permutation(nbr.k) for _ in range(nbr.indices.shape[0])])
            shuffled = NeighborIndex(np.take_along_axis(nbr.indices, perm, 1),
                                     np.take_along_axis(nbr.mask, perm, 1), nbr.radius)
            out = agg.aggregate(x, shuffled, np.take_along_axis(rel, perm[..., None], 1)).data
            bad += out.tobytes() != base.tobytes()
        failures[family.value] = bad
    report(3, not any(failures.values()), f"1000 trials per family, non-identical: {failures}")


def test_04_soft_assignment_simplex(report):
    rng = np.random.default_rng(4)
    worst_sum, lo, hi, rows = 0.0, 1.0, 0.0, 0
    for S in (2, 3, 4, 8, 16):
        r = Tensor((rng.standard_normal((100, 200, 8)) * rng.uniform(0.1, 10)).astype(np.float32))
        W = Tensor((rng.standard_normal((8, S)) * rng.uniform(0.1, 10)).astype(np.float32))
        b = Tensor(rng.standard_normal(S).astype(np.float32))
        Q = soft_assign(r, W, b).data.reshape(-1, S).astype(np.float64)
        rows += Q.shape[0]
        worst_sum = max(worst_sum, float(np.abs(Q.sum(1) - 1).max()))
        lo, hi = min(lo, float(Q.min())), max(hi, float(Q.max()))
    ok = rows == 100000 and worst_sum <= 1e-6 and lo >= 0 and hi <= 1
    report(4, ok, f"{rows} rows, max |sum-1| {worst_sum:.1e}, range [{lo:.3g}, {hi:.3g}]")


def test_05_parameter_counts(tmp_path, report):
    agg = AggregatorConfig(Family.SALA, 2)
    p36 = count_params(NetworkSpec(C=36), agg).params
    p18 = count_params(NetworkSpec(C=18), agg).params
    exact = True
    for C in (18, 36):
        model = SegmentationNet(NetworkSpec(C=C), agg, seed=0)
        path = tmp_path / f"c{C}.salaw"
        save_checkpoint(path, model.state_dict())
        stored = sum(a.size for a in load_checkpoint(path).values())
        exact &= count_params(NetworkSpec(C=C), agg).params == model.num_parameters() == stored
    ok = abs(p36 / 1.6e6 - 1) <= 0.1 and abs(p18 / 0.41e6 - 1) <= 0.1 and 3.4 <= p36 / p18 <= 4.6 and exact
    report(5, ok, f"C=36 {p36:,}, C=18 {p18:,}, ratio {p36 / p18:.2f}, count == model == serialized: {exact}")


def test_06_mac_accounting(report):
    agg = AggregatorConfig(Family.SALA, 2)
    spec36, spec72 = NetworkSpec(C=36), NetworkSpec(C=72)
    counts = benchmark_point_counts(spec36, 15000, seed=0)
    g36 = count_macs(spec36, agg, counts, k=32).gmacs
    g72 = count_macs(spec72, agg, counts, k=32).gmacs
    ok = 12.9 / 2 <= g36 <= 12.9 * 2 and 3.5 <= g72 / g36 <= 4.5
    report(6, ok, f"points per level {counts}, C=36 {g36:.2f} GMACs, doubling C x{g72 / g36:.3f}")


def test_07_geometry_oracles(monkeypatch, report):
    mismatches = {"grid_subsample": 0, "ball_query": 0, "nn_interpolate_map": 0}
    for force_grid in (False, True):
        monkeypatch.setattr(geometry, "BRUTE_FORCE_LIMIT", 0 if force_grid else 10 ** 9)
        for trial in range(100):
            rng = np.random.default_rng(7000 + trial)
            cloud = random_cloud(rng, int(rng.integers(1, 501)), labels=4)
            g = float(rng.uniform(0.05, 0.4))
            sub = grid_subsample(cloud, g)
            pos, feats, labels = subsample_oracle(cloud, g)
            mismatches["grid_subsample"] += not (np.array_equal(sub.positions, pos)
                                                 and np.array_equal(sub.features, feats)
                                                 and np.array_equal(sub.labels, labels))
            r, k = float(rng.uniform(0.05, 0.3)), int(rng.integers(1, 40))
            nbr = ball_query(cloud.positions, cloud.positions, r, k, self_query=True)
            expect = ball_oracle(cloud.positions, cloud.positions, r, k, True)
            mismatches["ball_query"] += any(
                nbr.indices[i, : len(row)].tolist() != row or nbr.mask[i].sum() != len(row)
                for i, row in enumerate(expect))
            coarse = rng.uniform(0, 1, (int(rng.integers(1, 120)), 3))
            mismatches["nn_interpolate_map"] += not np.array_equal(
                nn_interpolate_map(cloud.positions, coarse), nn_oracle(cloud.positions, coarse))
    report(7, not any(mismatches.values()), f"100 clouds x (brute, grid) paths, mismatches {mismatches}")


def test_08_kpconv_influence(report):
    sigma = 0.4
    kp = np.array([[0.0, 0.0, 0.0], [0.3, 0.1, -0.2]])
    rel = np.array([[kp[0], kp[1], [sigma / 4, 0, 0], [sigma, 0, 0], [0, 0, 1.5 * sigma]]])
    h = kpconv_influence(rel, kp, sigma)
    at_kernel = h[0, 0, 0] == 1.0 and h[0, 1, 1] == 1.0
    quarter = abs(h[0, 2, 0] - 0.75) <= 1e-12
    beyond = h[0, 3, 0] == 0.0 and h[0, 4, 0] == 0.0 and h[0, 4, 1] == 0.0
    # N=1, k=2, S=2: scalar oracle sum_g sum_j h(j, g) * f_j . W_g
    kp2 = np.array([[0.0, 0, 0], [0.5, 0, 0]])
    rel2 = np.array([[[0.1, 0, 0], [0.45, 0, 0]]])
    f = np.array([[[1.0, 2.0], [3.0, -1.0]]])
    W = np.array([[0.5, -1.0], [2.0, 0.25], [-1.5, 1.0], [0.75, 3.0]])  # rows: W_0 (2x2) then W_1
    sig2 = 0.6
    oracle = np.zeros(2)
    for g in range(2):
        for j in range(2):
            d = float(np.linalg.norm(rel2[0, j] - kp2[g]))
            oracle += max(0.0, 1 - d / sig2) * (f[0, j] @ W[2 * g: 2 * g + 2])
    out = kpconv_rigid_forward(Tensor(f, dtype=np.float64), kpconv_influence(rel2, kp2, sig2),
                               Tensor(W, dtype=np.float64)).data[0]
    hand = float(np.abs(out - oracle).max())
    ok = at_kernel and quarter and beyond and hand <= 1e-6
    report(8, ok, f"h(x,x)=1 {at_kernel}, h(sigma/4)={h[0, 2, 0]:.6f}, zero beyond sigma {beyond}, "
                  f"hand case error {hand:.1e}")


def test_09_end_to_end_learning(tmp_path, report):
    t0 = time.perf_counter()
    best = {}
    for preset in ("sala", "sala-ones"):
        cfg = parse_config(SMOKE_CFG, overrides={"aggregator.preset": preset, "output.dir": str(tmp_path / preset),
                                                 "training.workers": 1})
        train_scenes, val_scenes = load_scenes(cfg)
        result = train(train_scenes, val_scenes, cfg.network, cfg.aggregator, cfg.training, cfg.output_dir)
        best[preset] = result.best_miou
    minutes = (time.perf_counter() - t0) / 60
    points = [len(s) for s in train_scenes + val_scenes]
    ok = best["sala"] >= 0.85 and best["sala"] > best["sala-ones"] and minutes < 15
    report(9, ok, f"val mIoU sala {best['sala']:.3f} vs sala-ones {best['sala-ones']:.3f}, "
                  f"{int(np.mean(points))} points/scene, {minutes:.1f} min for both runs")


def test_10_voting(report):
    model = SegmentationNet(NetworkSpec(C=8, blocks_per_stage=(1, 1, 1), num_classes=3, base_grid=0.04,
                                        base_radius=0.1), AggregatorConfig(), seed=10).eval()
    radius = 1.0
    small = tiny_scene(np.random.default_rng(10), 500)
    small.positions *= 0.1  # extent 0.12 <= stride 1.5: a single sphere covers the scene
    labels, avg, counts = vote_inference(small, model, radius, stride=1.5 * radius, return_logits=True)
    plain = predict_direct(model, small)
    one_sphere = bool((counts == 1).all() and np.array_equal(labels, plain.argmax(1))
                      and np.array_equal(avg, plain.astype(np.float64)))
    scene = tiny_scene(np.random.default_rng(11), 1500)
    scene.positions *= 2.0
    first, _, counts = vote_inference(scene, model, 0.6, return_logits=True)
    second = vote_inference(scene, model, 0.6)
    ok = one_sphere and counts.min() >= 2 and np.array_equal(first, second)
    report(10, ok, f"one sphere equals plain argmax {one_sphere}, min coverage at stride=r {int(counts.min())}, "
                   f"repeat identical {np.array_equal(first, second)}")


def test_11_metric_correctness(report):
    cases = [
        ([[1, 1], [1, 1]], 1 / 3),
        ([[5, 0], [0, 7]], 1.0),
        ([[3, 1, 0], [2, 4, 0], [0, 0, 0]], (3 / 6 + 4 / 7) / 2),
        ([[0, 4], [0, 0]], 0.0),
    ]
    exact = []
    for counts, expect in cases:
        cm = ConfusionMatrix(len(counts))
        cm.counts[:] = np.array(counts)
        exact.append(miou(cm)[1] == expect)
    report(11, all(exact), f"{sum(exact)}/{len(cases)} hand-built matrices exact, [[1,1],[1,1]] -> 1/3")
