"""Shared sub-trajectory discovery, iterative splitting and transition points.

Two motion patterns that overlap in position and velocity share a
sub-trajectory. Points of one pattern are tested against the other's GP;
runs of accepted points are cut out of both patterns and pooled into a new
pattern. After clustering settles, the start and end points of every
(sub-)trajectory are grouped with DBSCAN and each group is summarised by a
Gaussian: the transition points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .dpgp import Clustering, ContractError, DpConfig, cluster_dataset
from .gp import MotionPattern, WeightParams, log_weights, normal_logpdf
from .trajectory import Trajectory, VelocitySample

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6


@dataclass(frozen=True)
class TestConfig:
    """Hypothesis-test settings.

    significance
        Points whose p-value is at least this are accepted as shared.
    min_run
        Shortest run of accepted points that counts as a shared segment.
    min_support
        Fraction of a pattern's trajectories that must contain a run.
    max_gap
        Rejected points bridged inside a run when flanked by accepted ones.
    min_members
        Patterns smaller than this are never compared (singletons are
        usually unexplained trajectories, not flows).
    max_iter
        Guard on the number of split iterations.
    """

    __test__ = False  # not a pytest class

    significance: float = 0.05
    min_run: int = 6
    min_support: float = 0.5
    max_gap: int = 1
    min_members: int = 3
    max_iter: int = 25

    def __post_init__(self):
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must be in (0, 1)")
        if self.min_run < 1 or self.max_gap < 0 or self.min_members < 1 or self.max_iter < 1:
            raise ValueError("min_run, min_members, max_iter must be >= 1 and max_gap >= 0")
        if not 0.0 < self.min_support <= 1.0:
            raise ValueError("min_support must be in (0, 1]")


class SharedRun(NamedTuple):
    """Inclusive index range of a trajectory shared with another pattern.

    ``kind`` is ``branch`` for a shared head, ``merge`` for a shared tail,
    ``whole`` when the run covers the trajectory and ``inner`` otherwise.
    """

    trajectory_id: str
    index_range: tuple[int, int]
    kind: str

    def __len__(self):
        return self.index_range[1] - self.index_range[0] + 1


@dataclass(frozen=True)
class TransitionPoint:
    id: str
    mean: np.ndarray
    cov: np.ndarray
    source: str = "endpoint-cluster"
    size: int = 0
    members: tuple = ()  # (root trajectory id, root index) of every clustered end point

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(2))
        object.__setattr__(self, "cov", floor_cov(self.cov))
        object.__setattr__(self, "members", tuple((str(a), int(b)) for a, b in self.members))

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.cov)

    def mahalanobis2(self, pts) -> np.ndarray:
        d = np.asarray(pts, dtype=np.float64).reshape(-1, 2) - self.mean
        return np.einsum("ij,jk,ik->i", d, self.precision, d)

    def to_dict(self) -> dict:
        return {"id": self.id, "mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "source": self.source, "size": self.size,
                "members": [list(m) for m in self.members]}

    @classmethod
    def from_dict(cls, d) -> "TransitionPoint":
        return cls(d["id"], d["mean"], d["cov"], d.get("source", "endpoint-cluster"),
                   int(d.get("size", 0)), tuple(tuple(m) for m in d.get("members", ())))


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    min_pts: int = 3

    def __post_init__(self):
        if not self.eps > 0 or self.min_pts < 1:
            raise ValueError("eps must be > 0 and min_pts >= 1")

    @classmethod
    def for_scene(cls, diagonal: float, fraction: float = 0.03, min_pts: int = 3):
        return cls(fraction * diagonal, min_pts)


def floor_cov(cov, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetric 2x2 covariance with eigenvalues clipped to at least ``floor``."""
    c = np.asarray(cov, dtype=np.float64).reshape(2, 2)
    c = 0.5 * (c + c.T)
    w, v = np.linalg.eigh(c)
    if w.min() >= floor:
        return c
    return (v * np.maximum(w, floor)) @ v.T


# ---------------------------------------------------------------------------
# hypothesis test
# ---------------------------------------------------------------------------

def _as_sample(q):
    if isinstance(q, VelocitySample):
        return np.array([q.position.x, q.position.y]), np.array([q.vx, q.vy])
    pos, vel = q
    return np.asarray(pos, dtype=np.float64).reshape(2), np.asarray(vel, dtype=np.float64).reshape(2)


def test_statistic(q, m1: MotionPattern, m2: MotionPattern, wp: WeightParams) -> float:
    """log of the velocity density under ``m2``'s posterior times ``m2``'s positional weight.

    ``q`` is a :class:`VelocitySample` (or ``(position, velocity)``) of a
    trajectory in ``m1``; ``m1`` enters only through that membership.
    """
    pos, vel = _as_sample(q)
    mean, var = m2.gp.predict(pos.reshape(1, 2))
    ll = normal_logpdf(vel, mean[0], var[0]).sum()
    return float(ll + log_weights(pos.reshape(1, 2), m2, wp)[0])


test_statistic.__test__ = False


def mahalanobis2(points: np.ndarray, vel: np.ndarray, m2: MotionPattern) -> np.ndarray:
    mean, var = m2.gp.predict(points)
    return (((vel - mean) ** 2) / var).sum(axis=1)


def p_values(points: np.ndarray, vel: np.ndarray, m2: MotionPattern, epsilon: float) -> np.ndarray:
    """Vectorised :func:`p_value` for a trajectory's samples."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    vel = np.asarray(vel, dtype=np.float64).reshape(-1, 2)
    out = np.zeros(len(points))
    if len(m2.members) == 0 or len(points) == 0:
        return out
    inside = m2.support_counts(points, epsilon) > 0
    if inside.any():
        out[inside] = np.exp(-0.5 * mahalanobis2(points[inside], vel[inside], m2))
    return out


def p_value(q, m2: MotionPattern, wp: WeightParams | None = None) -> float:
    """Chi-square (2 dof) p-value of ``q``'s velocity under ``m2``'s posterior.

    Zero when no ``m2`` trajectory passes within ``wp.epsilon`` of ``q``.
    """
    wp = wp or WeightParams()
    pos, vel = _as_sample(q)
    return float(p_values(pos, vel, m2, wp.epsilon)[0])


def accepted_runs(accept: np.ndarray, min_run: int, max_gap: int = 0) -> list[tuple[int, int]]:
    """Maximal inclusive runs of ``True`` allowing interior gaps of up to ``max_gap``."""
    idx = np.flatnonzero(accept)
    if len(idx) == 0:
        return []
    runs = []
    a = b = int(idx[0])
    for i in idx[1:]:
        i = int(i)
        if i - b - 1 <= max_gap:
            b = i
        else:
            runs.append((a, b))
            a = b = i
    runs.append((a, b))
    return [(a, b) for a, b in runs if b - a + 1 >= min_run]


def _kind(a, b, n):
    if a == 0 and b == n - 1:
        return "whole"
    if a == 0:
        return "branch"
    if b == n - 1:
        return "merge"
    return "inner"


def _runs_of(m1, m2, tc, wp):
    out = []
    hit = 0
    for t in m1.members:
        p = p_values(t.points, t.vel, m2, wp.epsilon)
        runs = accepted_runs(p >= tc.significance, tc.min_run, tc.max_gap)
        if runs:
            hit += 1
        n = len(t.points)
        out.extend(SharedRun(t.id, (a, b), _kind(a, b, n)) for a, b in runs)
    return out, hit


def find_shared_runs(m1: MotionPattern, m2: MotionPattern, tc: TestConfig | None = None,
                     wp: WeightParams | None = None) -> list[SharedRun]:
    """Runs of ``m1`` points whose velocity and position agree with ``m2``.

    Empty unless at least ``tc.min_support`` of ``m1``'s trajectories
    contain a run.
    """
    tc = tc or TestConfig()
    wp = wp or WeightParams()
    if m1 is m2 or m1.id == m2.id:
        raise ContractError("a pattern is never compared with itself")
    if not m1.members or not m2.members:
        return []
    runs, hit = _runs_of(m1, m2, tc, wp)
    if hit < tc.min_support * len(m1.members):
        return []
    return runs


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _segments(labels: np.ndarray) -> list[tuple[int, int, bool]]:
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts - 1, [len(labels) - 1]])
    return [(int(a), int(b), bool(labels[a])) for a, b in zip(starts, stops)]


def cut_labels(n: int, ranges: Sequence[tuple[int, int]]) -> list[tuple[int, int, bool]]:
    """Split ``[0, n)`` into (start, stop, shared) segments of at least 2 points.

    A 1-point segment is absorbed by its preceding sibling (or the next one
    at the start).
    """
    labels = np.zeros(n, dtype=bool)
    for a, b in ranges:
        if not (0 <= a <= b < n):
            raise ContractError(f"run [{a}, {b}] out of range for {n} points")
        labels[a : b + 1] = True
    segs = _segments(labels)
    while len(segs) > 1:
        short = next((k for k, s in enumerate(segs) if s[1] == s[0]), None)
        if short is None:
            break
        a, _, _ = segs[short]
        labels[a] = segs[short - 1][2] if short > 0 else segs[short + 1][2]
        segs = _segments(labels)
    return segs


def split_trajectory(t: Trajectory, ranges) -> tuple[list[Trajectory], list[Trajectory]]:
    """(shared children, remaining children); a whole-trajectory run moves ``t`` unchanged."""
    segs = cut_labels(len(t.points), ranges)
    if len(segs) == 1:
        return ([t], []) if segs[0][2] else ([], [t])
    shared, rest = [], []
    for a, b, s in segs:
        (shared if s else rest).append(t.segment(a, b))
    return shared, rest


def split_on_runs(clustering: Clustering, m1: int, runs: Sequence[SharedRun],
                  m2: int | None = None) -> Clustering:
    """Cut the run segments out of their trajectories and pool them in one new pattern.

    Runs may reference trajectories of ``m1`` and, when given, ``m2``.
    Remainders stay in their source pattern; patterns left empty are
    removed.
    """
    if not runs:
        raise ContractError("split_on_runs needs at least one run")
    sources = {m1} | ({m2} if m2 is not None else set())
    by_traj: dict[str, list[tuple[int, int]]] = {}
    for r in runs:
        pid = clustering.assignment.get(r.trajectory_id)
        if pid not in sources:
            raise ContractError(f"run on {r.trajectory_id!r} is not in pattern(s) {sorted(sources)}")
        by_traj.setdefault(r.trajectory_id, []).append(tuple(r.index_range))

    new_members: list[Trajectory] = []
    updated = []
    for pid in sorted(sources):
        pat = clustering.pattern(pid)
        keep = []
        for t in pat.members:
            if t.id not in by_traj:
                keep.append(t)
                continue
            shared, rest = split_trajectory(t, by_traj[t.id])
            new_members.extend(shared)
            keep.extend(rest)
        updated.append(pat.with_members(keep) if keep else None)
    new_id = clustering.next_id
    new = MotionPattern(new_id, new_members, clustering.patterns[0].hyper,
                        clustering.patterns[0].max_train)
    drop = [pid for pid, p in zip(sorted(sources), updated) if p is None]
    return clustering.replace(new, *[p for p in updated if p is not None], drop=drop)


def point_total(items) -> int:
    return sum(len(t.points) for t in items)


def check_lineage(clustering: Clustering, roots: Sequence[Trajectory]) -> None:
    """Raise unless the clustering's pieces reassemble every root exactly."""
    pieces: dict[str, list[Trajectory]] = {}
    for t in clustering.trajectories:
        pieces.setdefault(t.root_id, []).append(t)
    for root in roots:
        got = sorted(pieces.pop(root.id, []), key=lambda t: t.root_range[0])
        if not got:
            raise AssertionError(f"trajectory {root.id!r} lost")
        pos = 0
        for t in got:
            a, b = t.root_range
            if a != pos or not np.array_equal(root.points[a : b + 1], t.points):
                raise AssertionError(f"pieces of {root.id!r} do not tile it at index {pos}")
            pos = b + 1
        if pos != len(root.points):
            raise AssertionError(f"pieces of {root.id!r} stop at {pos} of {len(root.points)}")
    if pieces:
        raise AssertionError(f"pieces of unknown trajectories: {sorted(pieces)[:5]}")


# ---------------------------------------------------------------------------
# iterative clustering
# ---------------------------------------------------------------------------

@dataclass
class IterativeResult:
    clustering: Clustering
    iterations: int = 0
    splits: int = 0
    converged: bool = True
    history: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def warning(self) -> str | None:
        if self.converged:
            return None
        return f"split guard reached after {self.iterations} iterations"


def first_split(clustering: Clustering, tc: TestConfig, wp: WeightParams):
    """First ordered pattern pair with shared runs in both directions, or ``None``."""
    pats = [p for p in clustering.patterns if len(p.members) >= tc.min_members]
    for m1 in pats:
        for m2 in pats:
            if m1.id == m2.id:
                continue
            r12 = find_shared_runs(m1, m2, tc, wp)
            if not r12:
                continue
            r21 = find_shared_runs(m2, m1, tc, wp)
            if not r21:
                continue
            return m1.id, m2.id, r12 + r21
    return None


def iterative_cluster(ds, cfg: DpConfig, tc: TestConfig | None = None,
                      on_iteration: Callable[[int, Clustering], None] | None = None,
                      init: Clustering | None = None) -> IterativeResult:
    """Alternate DP clustering and pairwise splitting until no pair shares runs."""
    tc = tc or TestConfig()
    clustering = init if init is not None else cluster_dataset(ds, cfg)
    res = IterativeResult(clustering)
    if on_iteration is not None:
        on_iteration(0, clustering)
    for it in range(1, tc.max_iter + 1):
        found = first_split(clustering, tc, cfg.wp)
        if found is None:
            res.clustering = clustering
            res.iterations = it - 1
            return res
        a, b, runs = found
        before = len(clustering)
        clustering = split_on_runs(clustering, a, runs, b)
        log.info("iteration %d: split patterns %d/%d on %d runs -> %d patterns",
                 it, a, b, len(runs), len(clustering))
        clustering = cluster_dataset(clustering.trajectories, cfg, init=clustering)
        res.splits += 1
        res.history.append((a, b, len(clustering) - before))
        if on_iteration is not None:
            on_iteration(it, clustering)
    res.clustering = clustering
    res.iterations = tc.max_iter
    res.converged = first_split(clustering, tc, cfg.wp) is None
    if not res.converged:
        log.warning(res.warning)
    return res


# ---------------------------------------------------------------------------
# transition points
# ---------------------------------------------------------------------------

def dbscan(points, params: DbscanParams) -> tuple[list[list[int]], list[int]]:
    """(clusters as lists of point indices, noise indices)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = kernels.dbscan_labels(pts, params.eps, params.min_pts)
    k = int(labels.max()) + 1 if len(labels) else 0
    clusters = [np.flatnonzero(labels == c).tolist() for c in range(k)]
    return clusters, np.flatnonzero(labels < 0).tolist()


def endpoints(clustering: Clustering, min_members: int = 1) -> tuple[np.ndarray, list]:
    """First and last point of every (sub-)trajectory, with (root id, root index) refs."""
    pts, refs = [], []
    for p in clustering.patterns:
        if len(p.members) < min_members:
            continue
        for t in p.members:
            a, b = t.root_range
            pts += [t.points[0], t.points[-1]]
            refs += [(t.root_id, a), (t.root_id, b)]
    return np.array(pts).reshape(-1, 2), refs


def fit_transition_point(tid: str, pts: np.ndarray, members=()) -> TransitionPoint:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    mean = pts.mean(axis=0)
    cov = np.cov(pts.T) if len(pts) > 1 else np.eye(2) * COV_FLOOR
    return TransitionPoint(tid, mean, cov, size=len(pts), members=tuple(members))


def discover_transition_points(clustering: Clustering, params: DbscanParams,
                               min_members: int = 1) -> list[TransitionPoint]:
    """Gaussian fits over DBSCAN clusters of (sub-)trajectory end points.

    Patterns with fewer than ``min_members`` members contribute no end points.
    """
    pts, refs = endpoints(clustering, min_members)
    if len(pts) == 0:
        return []
    clusters, _ = dbscan(pts, params)
    return [fit_transition_point(f"tp{k}", pts[idx], [refs[i] for i in idx])
            for k, idx in enumerate(clusters)]
