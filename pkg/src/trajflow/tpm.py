"""Transition probability matrix over patterns and transition points.

``p(s_i | s_j)`` is the share of the (parent) trajectories passing through
``s_j`` that pass through ``s_i`` at a strictly later index. Entries are
independent passage probabilities over every future horizon, so rows do
not sum to one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .dpgp import Clustering
from .transitions import TransitionPoint
from .trajectory import Trajectory, id_key

log = logging.getLogger(__name__)

CHI2_95_2DOF = 5.991464547107979


class State(NamedTuple):
    id: str
    kind: str  # "transition-point" | "pattern"
    ref: object


@dataclass(frozen=True)
class PassageParams:
    chi2_gate: float = CHI2_95_2DOF

    def __post_init__(self):
        if not self.chi2_gate > 0:
            raise ValueError("chi2_gate must be > 0")


def pattern_state_id(pid: int) -> str:
    return f"m{pid}"


def build_states(clustering: Clustering | Sequence[int],
                 tps: Sequence[TransitionPoint]) -> list[State]:
    """Transition points first (by id), then patterns (by id)."""
    pids = clustering.ids if isinstance(clustering, Clustering) else sorted(clustering)
    if not pids:
        raise ValueError("no motion patterns: cannot build a state set")
    states = [State(tp.id, "transition-point", tp.id)
              for tp in sorted(tps, key=lambda t: id_key(t.id))]
    states += [State(pattern_state_id(pid), "pattern", pid) for pid in pids]
    return states


class Lineage:
    """Which pattern each piece of every root trajectory belongs to."""

    def __init__(self, clustering: Clustering):
        starts: dict[str, list[tuple[int, int]]] = {}
        for p in clustering.patterns:
            for t in p.members:
                starts.setdefault(t.root_id, []).append((t.root_range[0], p.id))
        self.starts = {k: sorted(v) for k, v in starts.items()}

    def pieces(self, root_id: str) -> list[tuple[int, int]]:
        try:
            return self.starts[root_id]
        except KeyError:
            raise KeyError(f"trajectory {root_id!r} has no pieces in the clustering") from None


@dataclass
class PassageContext:
    tps: Mapping[str, TransitionPoint]
    lineage: Lineage
    tp_members: dict = None

    def __post_init__(self):
        if self.tp_members is None:
            self.tp_members = {}
            for tid, tp in self.tps.items():
                by_root: dict[str, list] = {}
                for rid, k in tp.members:
                    by_root.setdefault(rid, []).append((rid, k))
                self.tp_members[tid] = by_root

    @classmethod
    def build(cls, clustering: Clustering, tps: Sequence[TransitionPoint]) -> "PassageContext":
        return cls({tp.id: tp for tp in tps}, Lineage(clustering))


def _entries(mask: np.ndarray) -> np.ndarray:
    """Indices where a run of ``True`` starts."""
    prev = np.concatenate([[False], mask[:-1]])
    return np.flatnonzero(mask & ~prev)


def passage_indices(traj: Trajectory, s: State, ctx: PassageContext,
                    pp: PassageParams) -> np.ndarray:
    """Parent indices at which ``traj`` enters ``s``.

    A transition point is occupied at points inside its chi-square gate and
    at the trajectory's own end points that were clustered into it; each
    maximal occupied run is one visit, entered at its first index. A
    pattern is entered at the start index of each child piece assigned to it.
    """
    if s.kind == "transition-point":
        tp = ctx.tps[s.ref]
        mask = tp.mahalanobis2(traj.points) <= pp.chi2_gate
        for rid, k in ctx.tp_members.get(s.ref, {}).get(traj.id, ()):
            mask[k] = True
        return _entries(mask)
    if s.kind == "pattern":
        return np.array([a for a, pid in ctx.lineage.pieces(traj.id) if pid == s.ref],
                        dtype=np.int64)
    raise ValueError(f"unknown state kind {s.kind!r}")


def passes_through(traj: Trajectory, s: State, ctx: PassageContext, pp: PassageParams,
                   after_index: int = -1) -> bool:
    """True iff ``traj`` enters ``s`` at some index strictly greater than ``after_index``."""
    if traj.parent_id is not None:
        raise ValueError(f"{traj.id!r} is a sub-trajectory; pass the full parent")
    idx = passage_indices(traj, s, ctx, pp)
    return bool(len(idx) and idx.max() > after_index)


@dataclass(frozen=True)
class Tpm:
    states: tuple[State, ...]
    counts: np.ndarray  # counts[j, i] = d_j^i
    totals: np.ndarray  # totals[j] = d_j

    def __post_init__(self):
        n = len(self.states)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(n, n)
        totals = np.asarray(self.totals, dtype=np.int64).reshape(n)
        if (counts < 0).any() or (counts > totals[:, None]).any():
            raise ValueError("TPM counts must satisfy 0 <= d_j^i <= d_j")
        counts.setflags(write=False)
        totals.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "totals", totals)
        object.__setattr__(self, "_index", {s.id: k for k, s in enumerate(self.states)})

    @property
    def probs(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.counts / self.totals[:, None]
        return np.where(self.totals[:, None] > 0, p, 0.0)

    def prob(self, j: str, i: str) -> Fraction:
        """Exact ``p(i | j)``."""
        a, b = self._index[j], self._index[i]
        d = int(self.totals[a])
        return Fraction(int(self.counts[a, b]), d) if d else Fraction(0)

    def index(self, state_id: str) -> int:
        return self._index[state_id]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.states]

    def row(self, state_id: str) -> dict[str, float]:
        k = self._index[state_id]
        return dict(zip(self.ids, self.probs[k].tolist()))

    def to_dict(self) -> dict:
        return {
            "states": [{"id": s.id, "kind": s.kind, "ref": s.ref} for s in self.states],
            "counts": self.counts.tolist(),
            "totals": self.totals.tolist(),
            "probs": self.probs.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Tpm":
        states = tuple(State(s["id"], s["kind"], s["ref"]) for s in d["states"])
        return cls(states, np.array(d["counts"]), np.array(d["totals"]))


def learn_tpm(ds, clustering: Clustering, tps: Sequence[TransitionPoint],
              pp: PassageParams | None = None, states: Sequence[State] | None = None) -> Tpm:
    """Count passages over the full (parent) trajectories of ``ds``.

    A trajectory passes through ``s_j`` if it enters it at all; it then
    counts towards ``s_i`` if it enters ``s_i`` at an index strictly after
    its first entry into ``s_j``.
    """
    pp = pp or PassageParams()
    states = list(states) if states is not None else build_states(clustering, tps)
    ctx = PassageContext.build(clustering, tps)
    n = len(states)
    counts = np.zeros((n, n), dtype=np.int64)
    totals = np.zeros(n, dtype=np.int64)
    trajs = ds.trajectories if hasattr(ds, "trajectories") else list(ds)
    for t in trajs:
        first = np.full(n, -1, dtype=np.int64)
        last = np.full(n, -1, dtype=np.int64)
        for k, s in enumerate(states):
            idx = passage_indices(t, s, ctx, pp)
            if len(idx):
                first[k] = idx.min()
                last[k] = idx.max()
        inside = first >= 0
        totals += inside
        # i follows j when some entry into i (a second visit when i == j)
        # comes after the first entry into j
        counts += inside[:, None] & inside[None, :] & (last[None, :] > first[:, None])
    for k in np.flatnonzero(totals == 0):
        log.warning("state %s: no training trajectory passes through it", states[k].id)
    return Tpm(tuple(states), counts, totals)
