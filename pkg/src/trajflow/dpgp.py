"""Dirichlet-process clustering of trajectories into GP motion patterns."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gp import (GpHyper, MotionPattern, WeightParams, normal_logpdf, point_loglik,
                 MAX_TRAIN)
from .trajectory import Dataset, Trajectory, id_key

log = logging.getLogger(__name__)

NEW = "NEW"


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class DpConfig:
    alpha: float = 0.5
    init_clusters: int = 6
    sweeps: int = 5
    wp: WeightParams = field(default_factory=WeightParams)
    hyper: GpHyper = field(default_factory=GpHyper)
    seed: int = 0
    assign: str = "argmax"
    max_train: int = MAX_TRAIN
    restarts: int = 1
    split_moves: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.init_clusters < 1 or self.sweeps < 1 or self.restarts < 1:
            raise ValueError("init_clusters, sweeps and restarts must be >= 1")
        if self.assign not in ("argmax", "sample"):
            raise ValueError("assign must be 'argmax' or 'sample'")


class Clustering:
    """A partition of trajectories into motion patterns."""

    def __init__(self, patterns: Iterable[MotionPattern]):
        pats = sorted(patterns, key=lambda p: p.id)
        self.patterns: tuple[MotionPattern, ...] = tuple(pats)
        self._by_id = {p.id: p for p in pats}
        if len(self._by_id) != len(pats):
            raise ValueError("duplicate pattern ids")
        assignment = {}
        for p in pats:
            if not p.members:
                raise ValueError(f"pattern {p.id} is empty")
            for t in p.members:
                if t.id in assignment:
                    raise ValueError(f"trajectory {t.id!r} in patterns {assignment[t.id]} and {p.id}")
                assignment[t.id] = p.id
        self.assignment: dict[str, int] = assignment

    def __len__(self):
        return len(self.patterns)

    def __repr__(self):
        sizes = ", ".join(f"{p.id}:{len(p)}" for p in self.patterns)
        return f"Clustering({sizes})"

    def pattern(self, pid: int) -> MotionPattern:
        return self._by_id[pid]

    @property
    def ids(self) -> list[int]:
        return [p.id for p in self.patterns]

    @property
    def trajectories(self) -> list[Trajectory]:
        out = [t for p in self.patterns for t in p.members]
        return sorted(out, key=lambda t: id_key(t.id))

    @property
    def next_id(self) -> int:
        return max(self._by_id, default=-1) + 1

    def replace(self, *patterns: MotionPattern, drop: Sequence[int] = ()) -> "Clustering":
        by_id = dict(self._by_id)
        for pid in drop:
            by_id.pop(pid, None)
        for p in patterns:
            by_id[p.id] = p
        return Clustering(p for p in by_id.values() if p.members)

    def check_partition(self, items: Iterable[Trajectory] | None = None) -> None:
        """Raise if some item is missing or a pattern is empty."""
        for p in self.patterns:
            if not p.members:
                raise AssertionError(f"empty pattern {p.id}")
        if items is not None:
            want = {t.id for t in items}
            got = set(self.assignment)
            if want != got:
                raise AssertionError(
                    f"partition mismatch: missing {sorted(want - got)[:5]}, extra {sorted(got - want)[:5]}")


def crp_priors(cluster_sizes: Sequence[int], n_t: int, alpha: float) -> tuple[list[float], float]:
    """Chinese-restaurant priors with the evaluated trajectory held out."""
    if sum(cluster_sizes) != n_t - 1:
        raise ContractError(f"cluster sizes sum to {sum(cluster_sizes)}, expected n_t - 1 = {n_t - 1}")
    denom = alpha + n_t - 1
    return [s / denom for s in cluster_sizes], alpha / denom


class _Scorer:
    """Per-pattern likelihood pieces for candidate assignments, cached per pattern object."""

    def __init__(self, cfg: DpConfig):
        self.cfg = cfg
        self._cache: dict[int, tuple[MotionPattern, dict]] = {}

    def pieces(self, t: Trajectory, pat: MotionPattern, cache: bool = True):
        """(GP log-likelihood, support counts of the other members)."""
        if cache:
            slot = self._cache.get(id(pat))
            if slot is None or slot[0] is not pat:
                slot = (pat, {})
                self._cache[id(pat)] = slot
            hit = slot[1].get(t.id)
            if hit is not None:
                return hit
        ll = float(point_loglik(t.points, t.vel, pat.gp).sum())
        counts = pat.support_counts(t.points, self.cfg.wp.epsilon)
        out = (ll, counts)
        if cache:
            slot[1][t.id] = out
        return out

    def forget(self, pat: MotionPattern):
        self._cache.pop(id(pat), None)

    def candidate(self, t: Trajectory, pat: MotionPattern, cache: bool = True) -> float:
        """Log-likelihood of ``t`` if it joined ``pat`` (``pat`` must not contain ``t``)."""
        ll, counts = self.pieces(t, pat, cache)
        m = len(pat.members)
        beta = self.cfg.wp.beta
        if beta:
            ll += beta * float(np.log1p((counts + 1.0) / (m + 1.0)).sum())
        return ll

    def new(self, t: Trajectory) -> float:
        h = self.cfg.hyper
        ll = float(normal_logpdf(t.vel, 0.0, h.prior_var()).sum())
        return ll + self.cfg.wp.beta * math.log(2.0) * len(t.points)


def _log(x):
    return math.log(x) if x > 0 else -math.inf


def _posteriors(t, candidates, n_t, cfg, scorer, transient=None):
    """``transient`` is a pattern object scored without caching (the held-out view)."""
    sizes = [len(p.members) for _, p in candidates]
    priors, new_prior = crp_priors(sizes, n_t, cfg.alpha)
    out = []
    for (pid, pat), pr in zip(candidates, priors):
        cache = transient is not True and pat is not transient
        out.append((pid, _log(pr) + scorer.candidate(t, pat, cache)))
    out.append((NEW, _log(new_prior) + scorer.new(t)))
    return out


def assignment_log_posteriors(traj: Trajectory, clustering: Clustering,
                              cfg: DpConfig) -> list[tuple[int | str, float]]:
    """Unnormalised log posterior of each existing pattern and of a new one.

    ``traj`` is taken out of its current pattern first; a pattern left empty
    by that is not a candidate.
    """
    own = clustering.assignment.get(traj.id)
    if own is None:
        raise ContractError(f"trajectory {traj.id!r} is not in the clustering")
    n_t = len(clustering.assignment)
    candidates = []
    for p in clustering.patterns:
        if p.id == own:
            if len(p.members) == 1:
                continue
            p = p.without(traj.id)
        candidates.append((p.id, p))
    return _posteriors(traj, candidates, n_t, cfg, _Scorer(cfg), transient=True)


def _choose(scores, cfg, rng):
    if cfg.assign == "sample":
        vals = np.array([s for _, s in scores])
        w = np.exp(vals - vals.max())
        w /= w.sum()
        return scores[int(rng.choice(len(scores), p=w))][0]
    best, best_s = None, -math.inf
    for key, s in scores:
        if key == NEW:
            if best is None or s > best_s:
                best, best_s = NEW, s
        elif s > best_s:
            best, best_s = key, s
    return best


def _items_of(ds) -> list[Trajectory]:
    trajs = ds.trajectories if isinstance(ds, (Dataset, Clustering)) else list(ds)
    return sorted(trajs, key=lambda t: id_key(t.id))


def partition_score(clustering: Clustering, cfg: DpConfig) -> float:
    """Log CRP probability of the partition plus every trajectory's
    leave-self-out weighted log-likelihood within its own pattern.

    Used to pick among random restarts; higher is better.
    """
    n = len(clustering.assignment)
    sizes = [len(p.members) for p in clustering.patterns]
    score = len(sizes) * math.log(cfg.alpha) + sum(math.lgamma(s) for s in sizes)
    score -= sum(math.log(cfg.alpha + i) for i in range(n))
    scorer = _Scorer(cfg)
    for p in clustering.patterns:
        for t in p.members:
            if len(p.members) == 1:
                score += scorer.new(t)
            else:
                score += scorer.candidate(t, p.without(t.id), cache=False)
    return score


def cluster_dataset(ds, cfg: DpConfig, init: Clustering | Mapping[str, int] | None = None,
                    on_sweep=None) -> Clustering:
    """MAP sweeps of the DP mixture.

    Without ``init`` every trajectory starts in one of ``cfg.init_clusters``
    random groups. ``init`` warm-starts from an existing assignment.
    Trajectories are visited in ascending id order; the loop stops early
    after a sweep without changes.

    With ``cfg.restarts > 1`` (and no ``init``) the random start is repeated
    with derived seeds and the result with the best ``partition_score`` is
    kept; the first restart always uses ``cfg.seed`` itself. Cold starts are
    followed by ``refine_splits`` when ``cfg.split_moves`` is set.
    """
    if init is not None:
        return _cluster_once(ds, cfg, init, on_sweep, cfg.seed)
    if cfg.restarts == 1:
        return _cold_start(ds, cfg, on_sweep, cfg.seed)
    seeds = [cfg.seed] + [int(s.generate_state(1)[0])
                          for s in np.random.SeedSequence(cfg.seed).spawn(cfg.restarts - 1)]
    best, best_score = None, -math.inf
    for k, seed in enumerate(seeds):
        c = _cold_start(ds, cfg, on_sweep, seed)
        sc = partition_score(c, cfg) if len(c) else 0.0
        log.debug("restart %d (seed %d): %d patterns, score %.2f", k, seed, len(c), sc)
        if sc > best_score:
            best, best_score = c, sc
    return best


def _cold_start(ds, cfg, on_sweep, seed) -> Clustering:
    c = _cluster_once(ds, cfg, None, on_sweep, seed)
    if cfg.split_moves and len(c):
        c = refine_splits(c, cfg, on_sweep, seed)
    return c


def _cluster_once(ds, cfg, init, on_sweep, seed) -> Clustering:
    items = _items_of(ds)
    n = len(items)
    if n == 0:
        return Clustering(())
    rng = np.random.default_rng(seed)
    if init is None:
        labels = rng.integers(0, cfg.init_clusters, size=n)
        assign = {t.id: int(k) for t, k in zip(items, labels)}
    else:
        mapping = init.assignment if isinstance(init, Clustering) else dict(init)
        assign = {t.id: int(mapping[t.id]) for t in items}

    members: dict[int, list[Trajectory]] = {}
    for t in items:
        members.setdefault(assign[t.id], []).append(t)
    patterns = {pid: MotionPattern(pid, m, cfg.hyper, cfg.max_train) for pid, m in members.items()}
    next_id = max(patterns) + 1
    scorer = _Scorer(cfg)

    for sweep in range(cfg.sweeps):
        changed = 0
        for t in items:
            own = assign[t.id]
            pat = patterns[own]
            alone = len(pat.members) == 1
            minus = None if alone else pat.without(t.id)
            candidates = []
            for pid in sorted(patterns):
                if pid == own:
                    if minus is not None:
                        candidates.append((pid, minus))
                else:
                    candidates.append((pid, patterns[pid]))
            scores = _posteriors(t, candidates, n, cfg, scorer, transient=minus)
            choice = _choose(scores, cfg, rng)
            if choice == own or (choice == NEW and alone):
                continue
            changed += 1
            scorer.forget(pat)
            if alone:
                del patterns[own]
            else:
                patterns[own] = pat.without(t.id, keep_training=False)
            if choice == NEW:
                choice = next_id
                next_id += 1
                patterns[choice] = MotionPattern(choice, [t], cfg.hyper, cfg.max_train)
            else:
                scorer.forget(patterns[choice])
                patterns[choice] = patterns[choice].with_member(t)
            assign[t.id] = choice
        log.debug("sweep %d: %d changes, %d patterns", sweep, changed, len(patterns))
        if on_sweep is not None:
            on_sweep(sweep, Clustering(patterns.values()))
        if changed == 0:
            break
    return Clustering(patterns.values())


# ---------------------------------------------------------------------------
# split moves
# ---------------------------------------------------------------------------

def bisect_members(members: Sequence[Trajectory], iters: int = 20) -> tuple[list, list] | None:
    """2-means on (start, end) points, seeded deterministically by the farthest pair.

    Returns ``None`` when the members cannot be separated.
    """
    if len(members) < 2:
        return None
    x = np.array([np.concatenate([t.points[0], t.points[-1]]) for t in members])
    a = int(np.argmax(((x - x.mean(axis=0)) ** 2).sum(axis=1)))
    b = int(np.argmax(((x - x[a]) ** 2).sum(axis=1)))
    if a == b:
        return None
    centres = x[[a, b]].copy()
    lab = np.zeros(len(x), dtype=int)
    for it in range(iters):
        d = ((x[:, None, :] - centres[None]) ** 2).sum(axis=2)
        new = (d[:, 1] < d[:, 0]).astype(int)
        if new.min() == new.max():
            return None
        if it and (new == lab).all():
            break
        lab = new
        centres = np.array([x[lab == k].mean(axis=0) for k in (0, 1)])
    return ([t for t, l in zip(members, lab) if l == 0],
            [t for t, l in zip(members, lab) if l == 1])


def _members_loglik(members, cfg, scorer) -> float:
    if len(members) == 1:
        return scorer.new(members[0])
    pat = MotionPattern(-1, members, cfg.hyper, cfg.max_train)
    return sum(scorer.candidate(t, pat.without(t.id), cache=False) for t in members)


def split_gain(members: Sequence[Trajectory], halves, cfg: DpConfig,
               scorer: _Scorer | None = None) -> float:
    """Change in ``partition_score`` from splitting a pattern into ``halves``."""
    scorer = scorer or _Scorer(cfg)
    a, b = halves
    crp = (math.log(cfg.alpha) + math.lgamma(len(a)) + math.lgamma(len(b))
           - math.lgamma(len(members)))
    return (crp + _members_loglik(a, cfg, scorer) + _members_loglik(b, cfg, scorer)
            - _members_loglik(list(members), cfg, scorer))


def _endpoint_centre(p: MotionPattern) -> np.ndarray:
    return np.mean([np.concatenate([t.points[0], t.points[-1]]) for t in p.members], axis=0)


def _spread(halves) -> float:
    a, b = (np.mean([np.concatenate([t.points[0], t.points[-1]]) for t in h], axis=0)
            for h in halves)
    return float(np.linalg.norm(a - b))


def refine_splits(clustering: Clustering, cfg: DpConfig, on_sweep=None, seed: int = 0,
                  max_rounds: int = 3) -> Clustering:
    """Split and merge whole patterns when that raises ``partition_score``, then re-sweep.

    Sequential MAP sweeps move one trajectory at a time, so two routes that
    ended up sharing a pattern (for example two branches merging into one
    corridor, which a single velocity field can fit) are rarely pulled apart
    again, and one route spread over two patterns is rarely joined; both
    need a whole-group move. Merge proposals pair patterns whose mean end
    points lie within one GP length scale; split proposals bisect a pattern
    on its members' end points and are only considered when the halves lie
    farther apart than that, so the two moves never undo each other.
    """
    scorer = _Scorer(cfg)
    reach = max(cfg.hyper.u_x, cfg.hyper.u_y)
    for _ in range(max_rounds):
        accepted = False
        next_id = clustering.next_id
        out = []
        for p in clustering.patterns:
            halves = bisect_members(p.members) if len(p.members) >= 4 else None
            if halves is not None and _spread(halves) <= reach:
                halves = None
            if halves is not None and split_gain(p.members, halves, cfg, scorer) > 0:
                log.debug("split pattern %d into %d + %d", p.id, len(halves[0]), len(halves[1]))
                out.append(MotionPattern(p.id, halves[0], cfg.hyper, cfg.max_train))
                out.append(MotionPattern(next_id, halves[1], cfg.hyper, cfg.max_train))
                next_id += 1
                accepted = True
            else:
                out.append(p)
        pats = {p.id: p for p in out}
        centres = {pid: _endpoint_centre(p) for pid, p in pats.items()}
        for a in sorted(pats):
            for b in sorted(pats):
                if b <= a or a not in pats or b not in pats:
                    continue
                if np.linalg.norm(centres[a] - centres[b]) > reach:
                    continue
                union = list(pats[a].members) + list(pats[b].members)
                halves = (list(pats[a].members), list(pats[b].members))
                if split_gain(union, halves, cfg, scorer) < 0:
                    log.debug("merge patterns %d and %d", a, b)
                    pats[a] = MotionPattern(a, union, cfg.hyper, cfg.max_train)
                    centres[a] = _endpoint_centre(pats[a])
                    del pats[b]
                    accepted = True
        if not accepted:
            break
        out = Clustering(pats.values())
        clustering = _cluster_once(out, cfg, out, on_sweep, seed)
    return clustering
