from fractions import Fraction

import numpy as np
import pytest

from trajflow.dpgp import Clustering
from trajflow.gp import MotionPattern
from trajflow.tpm import (PassageContext, PassageParams, Tpm, build_states, learn_tpm,
                          passes_through)
from trajflow.transitions import TransitionPoint

from conftest import polyline
from oracles import NODES, oracle_visits, random_scene, tpm_reference


@pytest.mark.parametrize("seed", range(8))
def test_tpm_matches_exhaustive_oracle(seed, hyper):
    rng = np.random.default_rng(seed)
    roots, cl, tps = random_scene(rng, hyper)
    tpm = learn_tpm(roots, cl, tps)
    ref = tpm_reference(oracle_visits(roots, cl, tps), tpm.ids)
    for (j, i), p in ref.items():
        assert tpm.prob(j, i) == p, (j, i)
    assert np.allclose(tpm.probs, [[float(ref[(j, i)]) for i in tpm.ids] for j in tpm.ids])


def simple(hyper, routes):
    """Tracks walking node sequences, one pattern per route."""
    tps = [TransitionPoint(f"tp{k}", np.array(c, float), np.eye(2)) for k, c in enumerate(NODES)]
    roots, pats = [], []
    for pid, (route, n) in enumerate(routes):
        trajs = [polyline(f"{pid}_{k}", [NODES[i] for i in route], 1.0, offset=(0, 0.1 * k))
                 for k in range(n)]
        roots += trajs
        pats.append(MotionPattern(pid, trajs, hyper))
    return roots, Clustering(pats), tps


def test_forced_unreachable_and_branching(hyper):
    roots, cl, tps = simple(hyper, [((0, 1), 3), ((0, 3), 1)])
    tpm = learn_tpm(roots, cl, tps)
    assert tpm.prob("tp1", "tp0") == 0  # never reached backwards
    assert tpm.prob("m0", "tp1") == 1  # forced: every m0 track ends at tp1
    assert tpm.prob("tp0", "tp1") == Fraction(3, 4)
    assert tpm.prob("tp0", "tp3") == Fraction(1, 4)
    assert tpm.prob("tp2", "tp0") == 0 and tpm.totals[tpm.index("tp2")] == 0
    assert tpm.row("tp2") == {s: 0.0 for s in tpm.ids}


def test_self_transition_needs_a_second_visit(hyper):
    roots, cl, tps = simple(hyper, [((0, 1, 2, 1), 2), ((0, 1), 2)])
    tpm = learn_tpm(roots, cl, tps)
    assert tpm.prob("tp1", "tp1") == Fraction(2, 4)
    assert tpm.prob("tp0", "tp0") == 0
    assert tpm.prob("m0", "m0") == 0  # one piece each, entered once


def test_clustered_endpoint_counts_as_a_visit(hyper):
    t = polyline("a", [(0, 0), (10, 0)], 1.0)
    pat = MotionPattern(0, [t], hyper)
    far = TransitionPoint("tp0", np.array([10.0, 5.0]), np.eye(2), members=[("a", 10)])
    ctx = PassageContext.build(Clustering([pat]), [far])
    states = build_states(Clustering([pat]), [far])
    assert [s.id for s in states] == ["tp0", "m0"]
    assert passes_through(t, states[0], ctx, PassageParams())
    assert passes_through(t, states[0], ctx, PassageParams(), after_index=9)
    assert not passes_through(t, states[0], ctx, PassageParams(), after_index=10)
    with pytest.raises(ValueError):
        passes_through(t.segment(0, 4), states[0], ctx, PassageParams())


def test_tpm_round_trip_and_validation(hyper):
    roots, cl, tps = simple(hyper, [((0, 1), 2)])
    tpm = learn_tpm(roots, cl, tps)
    back = Tpm.from_dict(tpm.to_dict())
    assert back.ids == tpm.ids and np.array_equal(back.counts, tpm.counts)
    with pytest.raises(ValueError):
        Tpm(tpm.states, tpm.counts + 5, tpm.totals)
    with pytest.raises(ValueError):
        build_states([], tps)


def test_passages_use_parent_trajectories(hyper):
    # a track split across two patterns still counts as one passage
    t = polyline("a", [NODES[0], NODES[1]], 1.0)
    cl = Clustering([MotionPattern(0, [t.segment(0, 9)], hyper),
                     MotionPattern(1, [t.segment(10, 20)], hyper)])
    tpm = learn_tpm([t], cl, [])
    assert tpm.prob("m0", "m1") == 1 and tpm.prob("m1", "m0") == 0
