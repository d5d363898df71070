"""Gaussian-process motion patterns: position -> velocity regression.

Each motion pattern owns two independent GPs (one per velocity axis) that
share the same RBF input correlation. Posterior means and variances are
computed with triangular solves against cached Cholesky factors.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from . import kernels
from .trajectory import TrajPoint, Trajectory, id_key, velocities

LOG_2PI = math.log(2.0 * math.pi)
MAX_TRAIN = 400


class GpNumericalError(ArithmeticError):
    """Gram matrix could not be factorised even after jitter."""


@dataclass(frozen=True)
class GpHyper:
    sigma_x: float = 1.0
    sigma_y: float = 1.0
    sigma_n: float = 0.1
    u_x: float = 1.0
    u_y: float = 1.0

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "sigma_n", "u_x", "u_y"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"GpHyper.{name} must be finite and > 0, got {v}")

    @classmethod
    def for_scene(cls, diagonal: float, **overrides) -> "GpHyper":
        """Defaults with length scales at 10% of the scene diagonal."""
        u = 0.1 * diagonal
        base = dict(sigma_x=1.0, sigma_y=1.0, sigma_n=0.2, u_x=u, u_y=u)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def signal_var(self) -> np.ndarray:
        return np.array([self.sigma_x**2, self.sigma_y**2])

    def prior_var(self) -> np.ndarray:
        return self.signal_var() + self.sigma_n**2


@dataclass(frozen=True)
class WeightParams:
    epsilon: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")


class VelocityPrediction:
    __slots__ = ("mean", "var")

    def __init__(self, mean, var):
        self.mean = (float(mean[0]), float(mean[1]))
        self.var = (float(var[0]), float(var[1]))

    def __repr__(self):
        return f"VelocityPrediction(mean={self.mean}, var={self.var})"


def rbf_kernel(p, p2, hyper: GpHyper, axis: str = "x", same_index: bool = False) -> float:
    """Covariance between two inputs for one velocity axis.

    ``same_index`` marks the Gram diagonal, where the noise term applies.
    """
    sig = hyper.sigma_x if axis == "x" else hyper.sigma_y
    dx = p[0] - p2[0]
    dy = p[1] - p2[1]
    k = sig**2 * math.exp(-(dx * dx) / (2 * hyper.u_x**2) - (dy * dy) / (2 * hyper.u_y**2))
    if same_index:
        k += hyper.sigma_n**2
    return k


def _factor(gram: np.ndarray, jitter: float, name) -> np.ndarray:
    try:
        return cholesky(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    g = gram.copy()
    g[np.diag_indices_from(g)] += jitter
    try:
        return cholesky(g, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise GpNumericalError(f"Gram matrix of pattern {name} is not positive definite") from None


class GpField:
    """Two-output GP over a fixed training set.

    ``x`` are training positions ``(N, 2)``, ``f`` the matching velocities.
    """

    def __init__(self, x: np.ndarray, f: np.ndarray, hyper: GpHyper, name=None):
        self.x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 2)
        self.f = np.ascontiguousarray(f, dtype=np.float64).reshape(-1, 2)
        self.hyper = hyper
        self.name = name
        n = len(self.x)
        self._chol = []
        self._alpha = np.zeros((n, 2))
        if n == 0:
            return
        corr = kernels.rbf_cross(self.x, self.x, hyper.u_x, hyper.u_y)
        sig2 = hyper.signal_var()
        shared = sig2[0] == sig2[1]
        for axis in (0, 1):
            if axis == 1 and shared:
                self._chol.append(self._chol[0])
            else:
                gram = sig2[axis] * corr
                gram[np.diag_indices(n)] += hyper.sigma_n**2
                self._chol.append(_factor(gram, 1e-8 * hyper.sigma_x**2, name))
        for axis in (0, 1):
            L = self._chol[axis]
            z = solve_triangular(L, self.f[:, axis], lower=True, check_finite=False)
            self._alpha[:, axis] = solve_triangular(L, z, lower=True, trans="T",
                                                    check_finite=False)

    def __len__(self):
        return len(self.x)

    @property
    def chol(self):
        return tuple(self._chol)

    def predict(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance ``(Q, 2)`` at query positions ``q``."""
        q = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 2)
        h = self.hyper
        prior = h.prior_var()
        mean = np.zeros((len(q), 2))
        var = np.tile(prior, (len(q), 1))
        if len(self.x) == 0 or len(q) == 0:
            return mean, var
        corr = kernels.rbf_cross(self.x, q, h.u_x, h.u_y)
        sig2 = h.signal_var()
        v0 = None
        for axis in (0, 1):
            ks = sig2[axis] * corr
            mean[:, axis] = ks.T @ self._alpha[:, axis]
            if axis == 1 and self._chol[1] is self._chol[0] and v0 is not None:
                v = v0
            else:
                v = solve_triangular(self._chol[axis], corr, lower=True, check_finite=False)
                v0 = v
            var[:, axis] = prior[axis] - sig2[axis] ** 2 * np.einsum("ij,ij->j", v, v)
        return mean, var


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _seed_for(ids: Iterable[str]) -> int:
    return zlib.crc32("\x1f".join(sorted(ids, key=id_key)).encode())


class MotionPattern:
    """A cluster of (sub-)trajectories with its velocity GP.

    Immutable: membership changes produce a new pattern via
    :meth:`with_member` / :meth:`without`.
    """

    def __init__(self, id: int, members: Sequence[Trajectory], hyper: GpHyper,
                 max_train: int = MAX_TRAIN, *, _train_rows=None):
        self.id = int(id)
        self.members = tuple(sorted(members, key=lambda t: id_key(t.id)))
        ids = [t.id for t in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError(f"pattern {id}: duplicate member ids")
        self.hyper = hyper
        self.max_train = int(max_train)
        self.member_ids = frozenset(ids)
        self._index = {t.id: k for k, t in enumerate(self.members)}

        if self.members:
            self.points = np.concatenate([t.points for t in self.members])
            self.vel = np.concatenate([t.vel for t in self.members])
            self.owner = np.concatenate(
                [np.full(len(t.points), k, dtype=np.int64) for k, t in enumerate(self.members)]
            )
        else:
            self.points = np.zeros((0, 2))
            self.vel = np.zeros((0, 2))
            self.owner = np.zeros(0, dtype=np.int64)

        if _train_rows is None:
            _train_rows = self._subsample()
        self.train_rows = _train_rows
        self.gp = GpField(self.points[_train_rows], self.vel[_train_rows], hyper, name=self.id)

    def _subsample(self) -> np.ndarray:
        n = len(self.points)
        if n <= self.max_train:
            return np.arange(n)
        rng = np.random.default_rng(_seed_for(self.member_ids))
        return np.sort(rng.choice(n, size=self.max_train, replace=False))

    def __len__(self):
        return len(self.members)

    def __repr__(self):
        return f"MotionPattern(id={self.id}, members={len(self.members)}, train={len(self.gp)})"

    def __contains__(self, traj) -> bool:
        tid = traj.id if isinstance(traj, Trajectory) else str(traj)
        return tid in self.member_ids

    @property
    def training(self) -> tuple[np.ndarray, np.ndarray]:
        return self.gp.x, self.gp.f

    def with_member(self, traj: Trajectory) -> "MotionPattern":
        return MotionPattern(self.id, self.members + (traj,), self.hyper, self.max_train)

    def with_members(self, members: Sequence[Trajectory]) -> "MotionPattern":
        return MotionPattern(self.id, members, self.hyper, self.max_train)

    def without(self, traj_id: str, *, keep_training: bool = True) -> "MotionPattern":
        """Pattern with one member removed.

        With ``keep_training`` the current training subsample minus the
        member's rows is kept (leave-self-out view); otherwise the
        training set is resampled from the remaining members.
        """
        traj_id = traj_id.id if isinstance(traj_id, Trajectory) else str(traj_id)
        if traj_id not in self.member_ids:
            return self
        k = self._index[traj_id]
        rest = self.members[:k] + self.members[k + 1:]
        if not keep_training:
            return MotionPattern(self.id, rest, self.hyper, self.max_train)
        keep_pts = self.owner != k
        # row indices into the concatenated point array of ``rest``
        new_index = np.cumsum(keep_pts) - 1
        rows = self.train_rows[keep_pts[self.train_rows]]
        return MotionPattern(self.id, rest, self.hyper, self.max_train,
                             _train_rows=new_index[rows])

    def support_counts(self, q: np.ndarray, epsilon: float) -> np.ndarray:
        """Members with at least one point within ``epsilon`` of each query."""
        return kernels.support_counts(q, self.points, self.owner, len(self.members), epsilon)


def empty_pattern(hyper: GpHyper, id: int = -1) -> MotionPattern:
    return MotionPattern(id, (), hyper)


def gp_posterior(pattern: MotionPattern, query) -> VelocityPrediction:
    mean, var = pattern.gp.predict(np.asarray(query, dtype=np.float64).reshape(1, 2))
    return VelocityPrediction(mean[0], var[0])


def point_loglik(points: np.ndarray, vel: np.ndarray, gp: GpField) -> np.ndarray:
    """Per-point ``log N(vx) + log N(vy)`` under the GP posterior."""
    mean, var = gp.predict(points)
    return normal_logpdf(vel, mean, var).sum(axis=1)


def _self_out(traj: Trajectory, pattern: MotionPattern) -> MotionPattern:
    return pattern.without(traj.id) if traj.id in pattern.member_ids else pattern


def gp_log_likelihood(traj: Trajectory, pattern: MotionPattern) -> float:
    """Log GP likelihood of ``traj``'s velocities; members are scored leave-self-out."""
    pat = _self_out(traj, pattern)
    return float(point_loglik(traj.points, traj.vel, pat.gp).sum())


def weight_from_counts(counts, n_members, beta) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if n_members <= 0:
        return np.ones_like(counts)
    return (1.0 + counts / n_members) ** beta


def log_weight_from_counts(counts, n_members, beta) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if n_members <= 0 or beta == 0:
        return np.zeros_like(counts)
    return beta * np.log1p(counts / n_members)


def positional_weight(p, pattern: MotionPattern, wp: WeightParams) -> float:
    """``(1 + n_eps / n_m) ** beta`` for a single position."""
    c = pattern.support_counts(np.asarray(p, dtype=np.float64).reshape(1, 2), wp.epsilon)
    return float(weight_from_counts(c, len(pattern.members), wp.beta)[0])


def log_weights(points: np.ndarray, pattern: MotionPattern, wp: WeightParams) -> np.ndarray:
    c = pattern.support_counts(points, wp.epsilon)
    return log_weight_from_counts(c, len(pattern.members), wp.beta)


def weighted_log_likelihood(traj: Trajectory, pattern: MotionPattern, wp: WeightParams) -> float:
    """GP log-likelihood plus the summed log positional weights."""
    return gp_log_likelihood(traj, pattern) + float(log_weights(traj.points, pattern, wp).sum())


def window_loglik(points: np.ndarray, dt: float, pattern: MotionPattern,
                  wp: WeightParams) -> float:
    """Weighted log-likelihood of a bare point sequence (no membership)."""
    points = np.asarray(points, dtype=np.float64)
    vel = velocities(points, dt)
    ll = point_loglik(points, vel, pattern.gp).sum()
    return float(ll + log_weights(points, pattern, wp).sum())


def point_scores(points: np.ndarray, dt: float, patterns: Sequence[MotionPattern],
                 wp: WeightParams) -> np.ndarray:
    """Weighted log-likelihood of every point under every pattern, shape (n, P).

    Summing a column gives ``window_loglik`` for that pattern.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    vel = velocities(points, dt)
    out = np.empty((len(points), len(patterns)))
    for c, p in enumerate(patterns):
        out[:, c] = point_loglik(points, vel, p.gp) + log_weights(points, p, wp)
    return out


__all__ = [
    "GpHyper", "WeightParams", "VelocityPrediction", "MotionPattern", "GpField",
    "GpNumericalError", "rbf_kernel", "gp_posterior", "gp_log_likelihood",
    "positional_weight", "weighted_log_likelihood", "TrajPoint",
]
