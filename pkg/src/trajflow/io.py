"""Reading and writing trajectory files (csv, json, duke-frames)."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .trajectory import DT_RTOL, Dataset, Trajectory, TrajectoryError, id_key

log = logging.getLogger(__name__)

FORMATS = ("csv", "json", "duke-frames")


class ParseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    return "json" if suffix == ".json" else "csv"


def _read_rows(path, columns):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns {missing}; header is {header}")
        idx = [header.index(c) for c in columns]
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            tid = row[idx[0]].strip()
            if not tid:
                raise ParseError(path, line, "empty track id")
            try:
                vals = [float(row[i]) for i in idx[1:]]
            except ValueError as exc:
                raise ParseError(path, line, str(exc)) from None
            rows.append((tid, *vals, line))
    return rows


def _uniform_step(tid, times):
    diffs = np.diff(times)
    step = float(np.median(diffs))
    if not step > 0:
        raise TrajectoryError(f"track {tid!r}: non-increasing timestamps")
    if np.max(np.abs(diffs - step)) > DT_RTOL * step:
        raise TrajectoryError(
            f"track {tid!r}: non-uniform time step (median {step:g}, "
            f"range {diffs.min():g}..{diffs.max():g})"
        )
    # exact first step when it agrees, so written files reload bit-exactly
    first = float(times[1] - times[0])
    if abs(first - step) <= 1e-9 * step:
        step = first
    return step


def _assemble(path, rows, time_scale, units):
    tracks = defaultdict(list)
    for tid, t, x, y, _line in rows:
        tracks[tid].append((t, x, y))
    trajs = []
    dropped = 0
    dt_ref = None
    for tid in sorted(tracks, key=id_key):
        pts = sorted(tracks[tid], key=lambda r: r[0])
        if len(pts) < 2:
            dropped += 1
            continue
        arr = np.asarray(pts, dtype=np.float64)
        dt = _uniform_step(tid, arr[:, 0]) * time_scale
        if dt_ref is None:
            dt_ref = dt
        elif abs(dt - dt_ref) > DT_RTOL * dt_ref:
            raise TrajectoryError(f"track {tid!r}: dt {dt:g} differs from dataset dt {dt_ref:g}")
        trajs.append((tid, arr[:, 1:]))
    if dropped:
        log.warning("%s: dropped %d track(s) with fewer than 2 points", path, dropped)
    return Dataset(tuple(Trajectory(tid, p, dt_ref) for tid, p in trajs), units=units)


def load_trajectories(path, format: str | None = None, fps: float | None = None,
                      units: str = "meters") -> Dataset:
    """Load a dataset; one trajectory per track id, points ordered by time."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = format or guess_format(path)
    if fmt == "csv":
        rows = _read_rows(path, ["track_id", "t", "x", "y"])
        return _assemble(path, rows, 1.0, units)
    if fmt == "duke-frames":
        if not fps or fps <= 0:
            raise ValueError("duke-frames format requires a positive fps")
        rows = _read_rows(path, ["track_id", "frame", "x", "y"])
        return _assemble(path, rows, 1.0 / fps, units)
    if fmt == "json":
        return _load_json(path, units)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _load_json(path, units):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if isinstance(doc, dict):
        units = doc.get("units", units)
        doc = doc.get("trajectories", [])
    trajs = []
    dropped = 0
    dt_ref = None
    for k, rec in enumerate(doc):
        try:
            tid, dt, pts = str(rec["id"]), float(rec["dt"]), rec["points"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, k + 1, f"record {k}: {exc!r}") from None
        if len(pts) < 2:
            dropped += 1
            continue
        if dt_ref is None:
            dt_ref = dt
        elif abs(dt - dt_ref) > DT_RTOL * dt_ref:
            raise TrajectoryError(f"track {tid!r}: dt {dt:g} differs from dataset dt {dt_ref:g}")
        trajs.append(Trajectory(tid, np.asarray(pts, dtype=np.float64), dt_ref))
    if dropped:
        log.warning("%s: dropped %d track(s) with fewer than 2 points", path, dropped)
    return Dataset(tuple(trajs), units=units)


def save_trajectories(ds: Dataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or guess_format(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["track_id", "t", "x", "y"])
            for t in ds.trajectories:
                for i, (x, y) in enumerate(t.points):
                    w.writerow([t.id, repr(i * t.dt), repr(float(x)), repr(float(y))])
    elif fmt == "json":
        doc = [
            {"id": t.id, "dt": t.dt, "points": [[float(x), float(y)] for x, y in t.points]}
            for t in ds.trajectories
        ]
        path.write_text(json.dumps(doc))
    else:
        raise ValueError(f"cannot write format {fmt!r}")


def iter_replay(ds: Dataset):
    """Yield ``(track_id, point)`` in timestamp order across all tracks."""
    events = []
    for t in ds.trajectories:
        for i, p in enumerate(t.points):
            events.append((i * t.dt, id_key(t.id), i, t.id, p))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    for _, _, _, tid, p in events:
        yield tid, (float(p[0]), float(p[1]))
