import math

import numpy as np
import pytest

from trajflow.dpgp import (NEW, Clustering, ContractError, DpConfig, _choose,
                           assignment_log_posteriors, bisect_members, cluster_dataset,
                           crp_priors, partition_score, split_gain)
from trajflow.gp import GpHyper, MotionPattern, WeightParams, weighted_log_likelihood

from conftest import line


def cfg_for(ds, **kw):
    base = dict(hyper=GpHyper.for_scene(ds.diagonal), seed=0, sweeps=5)
    base.update(kw)
    return DpConfig(**base)


def routes_of(clustering):
    return sorted(sorted(int(t.id) for t in p.members) for p in clustering.patterns)


def test_crp_priors_hold_out_the_trajectory():
    priors, new = crp_priors([3, 1], 5, 0.5)
    assert priors == pytest.approx([3 / 4.5, 1 / 4.5])
    assert new == pytest.approx(0.5 / 4.5)
    assert sum(priors) + new == pytest.approx(1.0)
    with pytest.raises(ContractError):
        crp_priors([3, 2], 5, 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        DpConfig(alpha=0)
    with pytest.raises(ValueError):
        DpConfig(assign="mode")
    with pytest.raises(ValueError):
        DpConfig(restarts=0)


def test_ties_go_to_lowest_id_and_new_loses():
    cfg = DpConfig()
    assert _choose([(3, -1.0), (1, -1.0), (NEW, -1.0)], cfg, None) == 3
    assert _choose([(1, -1.0), (3, -1.0)], cfg, None) == 1
    assert _choose([(1, -2.0), (NEW, -1.0)], cfg, None) == NEW
    assert _choose([(NEW, -1.0), (2, -1.0)], cfg, None) == NEW  # NEW listed first keeps it


def test_assignment_posteriors_include_crp_and_weights(two_lane):
    cfg = cfg_for(two_lane)
    hy = cfg.hyper
    a = MotionPattern(0, two_lane.trajectories[:6], hy)
    b = MotionPattern(1, two_lane.trajectories[6:], hy)
    cl = Clustering([a, b])
    t = two_lane.trajectories[0]
    scores = dict(assignment_log_posteriors(t, cl, cfg))
    assert set(scores) == {0, 1, NEW}
    n = 12
    # own pattern is scored without t, its support count then excludes t
    own = a.without(t.id)
    ll = weighted_log_likelihood(t, own, cfg.wp)  # weight (1 + c/m)
    c = own.support_counts(t.points, cfg.wp.epsilon)
    m = len(own.members)
    adj = cfg.wp.beta * (np.log1p((c + 1) / (m + 1)) - np.log1p(c / m)).sum()
    assert scores[0] == pytest.approx(math.log(5 / (0.5 + n - 1)) + ll + adj)
    assert scores[0] > scores[1] and scores[0] > scores[NEW]
    with pytest.raises(ContractError):
        assignment_log_posteriors(two_lane.trajectories[0], Clustering([b]), cfg)


def test_two_lanes_recovered(two_lane):
    cl = cluster_dataset(two_lane, cfg_for(two_lane))
    assert routes_of(cl) == [list(range(6)), list(range(6, 12))]
    cl.check_partition(two_lane.trajectories)


def test_clustering_is_deterministic(two_lane):
    cfg = cfg_for(two_lane, seed=4, split_moves=False)
    a = cluster_dataset(two_lane, cfg)
    b = cluster_dataset(two_lane, cfg)
    assert a.assignment == b.assignment


def test_warm_start_keeps_a_good_partition(two_lane):
    cfg = cfg_for(two_lane)
    init = {t.id: (0 if int(t.id) < 6 else 1) for t in two_lane}
    cl = cluster_dataset(two_lane, cfg, init=init)
    assert routes_of(cl) == [list(range(6)), list(range(6, 12))]


def test_on_sweep_sees_partitions(two_lane):
    seen = []
    cluster_dataset(two_lane, cfg_for(two_lane, split_moves=False),
                    on_sweep=lambda k, c: seen.append((k, len(c.assignment))))
    assert seen and all(n == 12 for _, n in seen)


def test_split_moves_separate_a_merge(y_merge):
    """A velocity field can fit two merging branches, so only a group move
    separates them; the score still prefers two patterns."""
    cfg = cfg_for(y_merge)
    members = list(y_merge.trajectories)
    halves = bisect_members(members)
    assert sorted(int(t.id) for t in halves[0]) in (list(range(8)), list(range(8, 16)))
    assert split_gain(members, halves, cfg) > 0
    cl = cluster_dataset(y_merge, cfg, init={t.id: 0 for t in y_merge})
    assert len(cl) == 1  # warm starts never split
    cl = cluster_dataset(y_merge, cfg)
    assert routes_of(cl) == [list(range(8)), list(range(8, 16))]


def test_partition_score_prefers_truth(two_lane):
    cfg = cfg_for(two_lane)
    hy = cfg.hyper
    good = Clustering([MotionPattern(0, two_lane.trajectories[:6], hy),
                       MotionPattern(1, two_lane.trajectories[6:], hy)])
    mixed = Clustering([MotionPattern(0, two_lane.trajectories[::2], hy),
                        MotionPattern(1, two_lane.trajectories[1::2], hy)])
    assert partition_score(good, cfg) > partition_score(mixed, cfg)


def test_bisect_degenerate():
    same = [line(k, (0, 0), (5, 0), 6) for k in range(3)]
    assert bisect_members(same) is None
    assert bisect_members(same[:1]) is None


def test_clustering_rejects_overlap(hyper):
    t = line(0, (0, 0), (5, 0), 6)
    with pytest.raises(ValueError):
        Clustering([MotionPattern(0, [t], hyper), MotionPattern(1, [t], hyper)])
    with pytest.raises(ValueError):
        Clustering([MotionPattern(0, [], hyper)])
