import math

import numpy as np
import pytest
from scipy.stats import chi2

from trajflow.dpgp import Clustering, ContractError, DpConfig
from trajflow.gp import GpHyper, MotionPattern, WeightParams, gp_posterior
from trajflow.transitions import (DbscanParams, SharedRun, TestConfig, TransitionPoint,
                                  accepted_runs, check_lineage, cut_labels, dbscan,
                                  discover_transition_points, find_shared_runs, floor_cov,
                                  iterative_cluster, p_value, point_total, split_on_runs,
                                  test_statistic as statistic)
from trajflow.trajectory import TrajPoint, VelocitySample

from conftest import line
from oracles import core_clusters, dbscan_reference


@pytest.fixture
def lane(hyper):
    return MotionPattern(0, [line(k, (0, 0.2 * k), (10, 0.2 * k), 11) for k in range(3)], hyper)


def test_statistic_termwise(lane, hyper, wp):
    other = MotionPattern(1, [line(9, (0, 0.1), (10, 0.1), 11)], hyper)
    q = VelocitySample(TrajPoint(4.0, 0.3), 2.0, 0.0)
    pred = gp_posterior(lane, (4.0, 0.3))
    ll = sum(-0.5 * math.log(2 * math.pi * pred.var[a])
             - ((q.vx, q.vy)[a] - pred.mean[a]) ** 2 / (2 * pred.var[a])
             for a in (0, 1))
    # all 3 members pass within epsilon: weight (1 + 3/3)^beta
    assert statistic(q, other, lane, wp) == pytest.approx(ll + wp.beta * math.log(2.0))


def test_p_value_is_chi_square_tail(lane, wp):
    pred = gp_posterior(lane, (5.0, 0.2))
    sd = np.sqrt(pred.var)
    # a velocity at squared Mahalanobis distance 5.991 sits on the 5% tail
    off = math.sqrt(5.991 / 2)
    v = pred.mean + off * sd
    p = p_value(((5.0, 0.2), v), lane, wp)
    assert p == pytest.approx(chi2.sf(5.991, 2), rel=1e-9)
    assert p == pytest.approx(0.05, abs=1e-4)
    assert p_value(((5.0, 0.2), pred.mean), lane, wp) == pytest.approx(1.0)
    # outside every member's neighbourhood the test rejects outright
    assert p_value(((5.0, 9.0), pred.mean), lane, wp) == 0.0


def test_accepted_runs():
    acc = np.array([1, 1, 1, 0, 1, 1, 1, 0, 0, 1, 1], bool)
    assert accepted_runs(acc, 3, 0) == [(0, 2), (4, 6)]
    assert accepted_runs(acc, 3, 1) == [(0, 6)]
    assert accepted_runs(acc, 2, 2) == [(0, 10)]
    assert accepted_runs(acc, 8, 1) == []
    assert accepted_runs(np.zeros(5, bool), 1) == []


def test_cut_labels_absorbs_single_points():
    assert cut_labels(10, [(3, 6)]) == [(0, 2, False), (3, 6, True), (7, 9, False)]
    # one leftover point at the end joins the run before it
    assert cut_labels(10, [(0, 8)]) == [(0, 9, True)]
    assert cut_labels(10, [(1, 9)]) == [(0, 9, True)]
    assert cut_labels(10, [(0, 3), (5, 9)]) == [(0, 9, True)]
    with pytest.raises(ContractError):
        cut_labels(5, [(2, 5)])


def test_find_shared_runs(hyper, wp):
    # a branch joining the lane at x = 5 shares the second half only
    lane = MotionPattern(0, [line(k, (0, 0.2 * k), (10, 0.2 * k), 21) for k in range(3)], hyper)
    branch_trajs = []
    for k in range(3):
        t = line(10 + k, (5, -5), (5, 0.2 * k), 11)
        pts = np.vstack([t.points, line(0, (5.5, 0.2 * k), (10, 0.2 * k), 10).points])
        branch_trajs.append(type(t)(t.id, pts, 0.5))
    branch = MotionPattern(1, branch_trajs, hyper)
    runs = find_shared_runs(branch, lane, TestConfig(), wp)
    assert runs and all(r.kind == "merge" for r in runs)
    assert all(r.index_range[1] == 20 for r in runs)
    with pytest.raises(ContractError):
        find_shared_runs(lane, lane)
    # support below min_support: nothing reported
    assert find_shared_runs(branch, lane, TestConfig(min_support=1.0, min_run=30), wp) == []


def test_split_on_runs_conserves_points(hyper):
    a = MotionPattern(0, [line(k, (0, k), (10, k), 11) for k in range(2)], hyper)
    b = MotionPattern(1, [line(5, (0, 9), (10, 9), 11)], hyper)
    cl = Clustering([a, b])
    runs = [SharedRun("0", (4, 10), "merge"), SharedRun("5", (0, 5), "branch")]
    out = split_on_runs(cl, 0, runs, 1)
    assert len(out) == 3
    assert point_total(out.trajectories) == point_total(cl.trajectories)
    check_lineage(out, list(cl.trajectories))
    new = out.pattern(out.next_id - 1)
    assert sorted((t.root_id, t.root_range) for t in new.members) == [("0", (4, 10)), ("5", (0, 5))]
    with pytest.raises(ContractError):
        split_on_runs(cl, 1, [SharedRun("0", (0, 3), "branch")])
    with pytest.raises(ContractError):
        split_on_runs(cl, 0, [])


def test_check_lineage_detects_loss(hyper):
    t = line(0, (0, 0), (10, 0), 11)
    half = MotionPattern(0, [t.segment(0, 6)], hyper)
    with pytest.raises(AssertionError):
        check_lineage(Clustering([half]), [t])


def test_iterative_cluster_cuts_the_shared_corridor(y_merge):
    cfg = DpConfig(hyper=GpHyper.for_scene(y_merge.diagonal), seed=0, sweeps=5)
    seen = []
    res = iterative_cluster(y_merge, cfg, on_iteration=lambda k, c: seen.append(c))
    cl = res.clustering
    assert res.converged and res.splits >= 1
    for c in seen:
        assert point_total(c.trajectories) == point_total(y_merge.trajectories)
        check_lineage(c, y_merge.trajectories)
    assert len(cl) == 3
    tps = discover_transition_points(cl, DbscanParams.for_scene(y_merge.diagonal))
    got = sorted(tuple(np.round(tp.mean).astype(int)) for tp in tps)
    assert got == [(0, 10), (20, -10), (20, 10), (40, 10)]


@pytest.mark.parametrize("seed", range(50))
def test_dbscan_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 201))
    centres = rng.uniform(0, 50, size=(int(rng.integers(1, 6)), 2))
    pts = centres[rng.integers(0, len(centres), n)] + rng.normal(0, 2.0, (n, 2))
    pts = np.vstack([pts, rng.uniform(0, 50, size=(n // 10, 2))])
    eps, min_pts = float(rng.uniform(0.5, 3.0)), int(rng.integers(2, 6))
    clusters, noise = dbscan(pts, DbscanParams(eps, min_pts))
    ref, ref_noise = dbscan_reference(pts, eps, min_pts)
    got = {frozenset(c) for c in clusters}
    assert set(noise) == ref_noise
    assert core_clusters(got, pts, eps, min_pts) == core_clusters(ref, pts, eps, min_pts)
    # every border point sits within eps of a core point of its cluster
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    core = (d <= eps).sum(1) >= min_pts
    for c in clusters:
        for i in c:
            assert core[i] or any(core[j] and d[i, j] <= eps for j in c)


def test_transition_point_floor_and_gate():
    tp = TransitionPoint("tp0", np.zeros(2), np.zeros((2, 2)))
    assert np.linalg.eigvalsh(tp.cov).min() >= 1e-6 - 1e-15
    assert np.allclose(floor_cov(np.diag([4.0, 1.0])), np.diag([4.0, 1.0]))
    tp = TransitionPoint("tp1", np.zeros(2), np.diag([4.0, 1.0]))
    assert tp.mahalanobis2([[2.0, 1.0]])[0] == pytest.approx(2.0)
    back = TransitionPoint.from_dict(tp.to_dict())
    assert back.id == "tp1" and np.allclose(back.cov, tp.cov)
