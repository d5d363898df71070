"""Trajectory data model: points, datasets, resampling and velocity estimation."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

DT_RTOL = 0.01


class TrajPoint(NamedTuple):
    x: float
    y: float


class VelocitySample(NamedTuple):
    position: TrajPoint
    vx: float
    vy: float


class TrajectoryError(ValueError):
    """Raised when a trajectory or dataset violates its invariants."""


_num_re = re.compile(r"^-?\d+$")


def id_key(ident: str):
    """Natural sort key: numeric ids order numerically, before textual ones."""
    s = str(ident)
    if _num_re.match(s):
        return (0, int(s), "")
    parts = re.split(r"(\d+)", s)
    return (1, 0, tuple((int(p) if p.isdigit() else p) for p in parts))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True).reshape(-1, 2)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A time-ordered 2-D point sequence sampled at a constant step ``dt``.

    Sub-trajectories produced by splitting keep the id of the root
    trajectory in ``parent_id`` and their inclusive index interval in the
    root in ``parent_range``.
    """

    id: str
    points: np.ndarray
    dt: float
    parent_id: str | None = None
    parent_range: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "points", _frozen(self.points))
        if len(self.points) < 2:
            raise TrajectoryError(f"trajectory {self.id!r} has fewer than 2 points")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise TrajectoryError(f"trajectory {self.id!r} has invalid dt={self.dt}")
        if (self.parent_id is None) != (self.parent_range is None):
            raise TrajectoryError("parent_id and parent_range must be set together")
        if self.parent_range is not None:
            a, b = (int(v) for v in self.parent_range)
            if a < 0 or b < a or b - a + 1 != len(self.points):
                raise TrajectoryError(
                    f"parent_range {self.parent_range} inconsistent with "
                    f"{len(self.points)} points in {self.id!r}"
                )
            object.__setattr__(self, "parent_range", (a, b))

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def vel(self) -> np.ndarray:
        """Velocity at every point, shape ``(n, 2)``."""
        v = velocities(self.points, self.dt)
        v.setflags(write=False)
        return v

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.id == other.id
            and self.dt == other.dt
            and self.parent_id == other.parent_id
            and self.parent_range == other.parent_range
            and np.array_equal(self.points, other.points)
        )

    __hash__ = object.__hash__

    @property
    def root_id(self) -> str:
        return self.parent_id if self.parent_id is not None else self.id

    @property
    def root_range(self) -> tuple[int, int]:
        if self.parent_range is not None:
            return self.parent_range
        return (0, len(self.points) - 1)

    def segment(self, start: int, stop: int, new_id: str | None = None) -> "Trajectory":
        """Inclusive slice ``[start, stop]`` carrying root lineage."""
        if not (0 <= start <= stop < len(self.points)):
            raise TrajectoryError(f"segment [{start}, {stop}] out of range for {self.id!r}")
        r0 = self.root_range[0]
        rng = (r0 + start, r0 + stop)
        return Trajectory(
            id=new_id or f"{self.root_id}[{rng[0]}:{rng[1]}]",
            points=self.points[start : stop + 1],
            dt=self.dt,
            parent_id=self.root_id,
            parent_range=rng,
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    units: str = "meters"
    bounds: tuple[float, float, float, float] | None = None
    n_t: int = field(init=False)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "n_t", len(trajs))
        if self.bounds is None and trajs:
            object.__setattr__(self, "bounds", bounds_of(trajs))
        elif self.bounds is not None:
            object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    def __len__(self) -> int:
        return self.n_t

    def __iter__(self):
        return iter(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.units == other.units
            and self.bounds == other.bounds
            and self.trajectories == other.trajectories
        )

    __hash__ = object.__hash__

    @property
    def dt(self) -> float:
        if not self.trajectories:
            raise TrajectoryError("empty dataset has no time step")
        return self.trajectories[0].dt

    @property
    def diagonal(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return float(math.hypot(x1 - x0, y1 - y0))

    def by_id(self) -> dict[str, Trajectory]:
        return {t.id: t for t in self.trajectories}

    def subset(self, ids: Sequence[str]) -> "Dataset":
        lookup = self.by_id()
        return Dataset(tuple(lookup[i] for i in ids), units=self.units, bounds=self.bounds)


def bounds_of(trajs: Sequence[Trajectory]) -> tuple[float, float, float, float]:
    pts = np.concatenate([t.points for t in trajs])
    finite = pts[np.all(np.isfinite(pts), axis=1)]
    if len(finite) == 0:
        return (0.0, 0.0, 0.0, 0.0)
    lo = finite.min(axis=0)
    hi = finite.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def downsample(traj: Trajectory, keep_every: int) -> Trajectory:
    """Keep every ``keep_every``-th point; the final point is always kept."""
    if keep_every < 1:
        raise ValueError("keep_every must be >= 1")
    if keep_every == 1:
        return traj
    n = len(traj.points)
    idx = list(range(0, n, keep_every))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    if len(idx) < 2:
        raise TrajectoryError(f"downsampling {traj.id!r} leaves fewer than 2 points")
    return Trajectory(
        id=traj.id,
        points=traj.points[idx],
        dt=traj.dt * keep_every,
    )


def velocities(points: np.ndarray, dt: float) -> np.ndarray:
    """Forward differences, backward difference at the last point."""
    points = np.asarray(points, dtype=np.float64)
    v = np.empty_like(points)
    v[:-1] = (points[1:] - points[:-1]) / dt
    v[-1] = v[-2]
    return v


def estimate_velocities(traj: Trajectory) -> list[VelocitySample]:
    v = velocities(traj.points, traj.dt)
    return [
        VelocitySample(TrajPoint(float(p[0]), float(p[1])), float(u[0]), float(u[1]))
        for p, u in zip(traj.points, v)
    ]


@dataclass
class ValidationReport:
    issues: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, kind: str, detail: str):
        self.issues.append((kind, detail))

    def __str__(self):
        if self.ok:
            return "dataset OK"
        return "\n".join(f"{k}: {d}" for k, d in self.issues)


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Report dt consistency, non-finite points, duplicate ids and out-of-bounds points."""
    rep = ValidationReport()
    seen = set()
    dt0 = ds.trajectories[0].dt if ds.trajectories else None
    x0, y0, x1, y1 = ds.bounds if ds.bounds is not None else (-np.inf,) * 2 + (np.inf,) * 2
    for t in ds.trajectories:
        if t.id in seen:
            rep.add("duplicate id", t.id)
        seen.add(t.id)
        if dt0 is not None and abs(t.dt - dt0) > DT_RTOL * dt0:
            rep.add("inconsistent dt", f"{t.id}: {t.dt} vs {dt0}")
        bad = np.flatnonzero(~np.all(np.isfinite(t.points), axis=1))
        for i in bad:
            rep.add("non-finite point", f"{t.id}[{i}]")
        p = t.points
        with np.errstate(invalid="ignore"):
            out = np.flatnonzero(
                np.isfinite(p).all(axis=1)
                & ((p[:, 0] < x0) | (p[:, 0] > x1) | (p[:, 1] < y0) | (p[:, 1] > y1))
            )
        for i in out:
            rep.add("out of bounds", f"{t.id}[{i}]")
    return rep
