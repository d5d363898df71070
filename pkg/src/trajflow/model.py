"""The trained model: patterns, transition points, TPM and settings.

``train`` runs the offline pipeline (iterative clustering, pruning,
transition-point discovery, TPM learning, threshold calibration).
``save_model`` / ``load_model`` persist it as a versioned JSON document;
loading rebuilds every GP factor and re-checks all invariants.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .dpgp import Clustering
from .gp import GpHyper, MotionPattern, WeightParams, log_weights, normal_logpdf
from .online import OnlineConfig
from .tpm import PassageParams, Tpm, build_states, learn_tpm, pattern_state_id
from .trajectory import Dataset, Trajectory, id_key
from .transitions import (TransitionPoint, discover_transition_points,
                          iterative_cluster)

log = logging.getLogger(__name__)

MODEL_VERSION = 1
MODEL_KIND = "trajflow-model"


class ModelError(ValueError):
    """Invalid or unreadable model file."""


@dataclass(frozen=True)
class TrainedModel:
    patterns: tuple[MotionPattern, ...]
    tps: tuple[TransitionPoint, ...]
    tpm: Tpm
    hyper: GpHyper
    wp: WeightParams
    pp: PassageParams
    online: OnlineConfig
    dt: float
    bounds: tuple[float, float, float, float]
    units: str = "meters"
    config: dict = field(default_factory=dict)
    outliers: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {p.id: p for p in self.patterns})

    def pattern(self, pid: int) -> MotionPattern:
        return self._by_id[pid]

    @staticmethod
    def pattern_state(pid: int) -> str:
        return pattern_state_id(pid)

    def tp(self, tid: str) -> TransitionPoint:
        for t in self.tps:
            if t.id == tid:
                return t
        raise KeyError(tid)

    @property
    def clustering(self) -> Clustering:
        return Clustering(self.patterns)

    def summary(self) -> str:
        lines = [
            f"model v{MODEL_VERSION}: {len(self.patterns)} motion patterns, "
            f"{len(self.tps)} transition points, {len(self.tpm.states)} states",
            f"dt={self.dt:g} s, units={self.units}, l_thresh={self.online.l_thresh:.4f}, "
            f"window={self.online.window_size}",
        ]
        for p in self.patterns:
            lines.append(f"  pattern {p.id}: {len(p.members)} (sub-)trajectories, "
                         f"{len(p.gp)} GP samples")
        for t in self.tps:
            lines.append(f"  {t.id}: mean=({t.mean[0]:.2f}, {t.mean[1]:.2f}) n={t.size}")
        if self.outliers:
            lines.append(f"  {len(self.outliers)} training trajectories left unexplained")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# window scores (vectorised replay of the online sliding window)
# ---------------------------------------------------------------------------

def window_scores(points: np.ndarray, dt: float, patterns: Sequence[MotionPattern],
                  wp: WeightParams, window_size: int) -> np.ndarray:
    """Anomaly score of every online window of a trajectory.

    Entry ``k - 1`` is the score a streaming session reports after point
    ``k`` (``k >= 1``): the median over the window of each point's best
    weighted log-likelihood under any pattern.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        return np.zeros(0)
    fwd = (pts[1:] - pts[:-1]) / dt  # velocity leaving point i
    inner = np.full(n - 1, -np.inf)
    last = np.full(n - 1, -np.inf)
    for p in patterns:
        mean, var = p.gp.predict(pts)
        lw = log_weights(pts, p, wp)
        # point i scored with its forward velocity (i < n-1) ...
        inner = np.maximum(inner, normal_logpdf(fwd, mean[:-1], var[:-1]).sum(axis=1) + lw[:-1])
        # ... or, as the window's last point, with the velocity arriving at it
        last = np.maximum(last, normal_logpdf(fwd, mean[1:], var[1:]).sum(axis=1) + lw[1:])
    out = np.empty(n - 1)
    for k in range(1, n):
        a = max(0, k - window_size + 1)
        out[k - 1] = np.median(np.append(inner[a:k], last[k - 1]))
    return out


def calibrate_threshold(trajs: Sequence[Trajectory], patterns, wp, window_size: int,
                        percentile: float, margin: float = 0.0) -> float:
    """``percentile`` of the training windows' anomaly scores, less ``margin``."""
    vals = [window_scores(t.points, t.dt, patterns, wp, window_size) for t in trajs]
    vals = np.concatenate(vals) if vals else np.zeros(0)
    if len(vals) == 0:
        return -math.inf
    return float(np.percentile(vals, percentile)) - margin


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for t in ds.trajectories:
        h.update(t.id.encode())
        h.update(np.float64(t.dt).tobytes())
        h.update(np.ascontiguousarray(t.points).tobytes())
    return h.hexdigest()


def prune(clustering: Clustering, min_size: int) -> tuple[Clustering, list[str]]:
    """Drop patterns with fewer than ``min_size`` members, to a fixed point.

    A root with a piece in a dropped pattern is unexplained: all its pieces
    leave the model (the TPM needs complete lineage), which may shrink
    another pattern below ``min_size`` in turn. Returns the kept clustering
    and the unexplained root ids.
    """
    pats = list(clustering.patterns)
    dropped: set[str] = set()
    while True:
        small = [p for p in pats if len(p.members) < min_size]
        if not small:
            break
        dropped |= {t.root_id for p in small for t in p.members}
        nxt = []
        for p in pats:
            if len(p.members) < min_size:
                continue
            members = [t for t in p.members if t.root_id not in dropped]
            if members:
                nxt.append(p if len(members) == len(p.members) else p.with_members(members))
        pats = nxt
    if not pats:
        raise ModelError(f"no motion pattern keeps {min_size} or more members")
    return Clustering(pats), sorted(dropped, key=id_key)


def train(ds: Dataset, cfg: RunConfig | None = None,
          on_iteration: Callable[[int, Clustering], None] | None = None) -> TrainedModel:
    """Offline pipeline from a dataset to a :class:`TrainedModel`."""
    cfg = cfg or RunConfig()
    cfg.validate()
    if ds.n_t == 0:
        raise ModelError("empty dataset")
    t0 = time.perf_counter()
    diag = ds.diagonal
    dp = cfg.dp_config(diag)
    res = iterative_cluster(ds, dp, cfg.test_config(), on_iteration=on_iteration)
    clustering, outliers = prune(res.clustering, cfg.model.min_pattern_size)
    modelled = [t for t in ds.trajectories if t.id not in set(outliers)]

    tps = discover_transition_points(clustering, cfg.dbscan_params(diag))
    pp = PassageParams(cfg.model.chi2_gate)
    tpm = learn_tpm(modelled, clustering, tps, pp, build_states(clustering, tps))
    online = cfg.online_config()
    wp = cfg.weight_params()
    if cfg.online.l_thresh is None:
        thr = calibrate_threshold(modelled, clustering.patterns, wp, online.window_size,
                                  cfg.online.threshold_percentile, cfg.online.threshold_margin)
        online = online.with_threshold(thr)
    model = TrainedModel(
        patterns=clustering.patterns,
        tps=tuple(tps),
        tpm=tpm,
        hyper=dp.hyper,
        wp=wp,
        pp=pp,
        online=online,
        dt=ds.dt,
        bounds=tuple(ds.bounds),
        units=ds.units,
        config=cfg.to_dict(),
        outliers=tuple(outliers),
        provenance={
            "dataset_sha256": dataset_digest(ds),
            "n_trajectories": ds.n_t,
            "seed": cfg.seed,
            "iterations": res.iterations,
            "splits": res.splits,
            "converged": res.converged,
            "train_seconds": round(time.perf_counter() - t0, 3),
        },
    )
    validate_model(model)
    return model


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _traj_to_dict(t: Trajectory) -> dict:
    d = {"id": t.id, "dt": t.dt, "points": t.points.tolist()}
    if t.parent_id is not None:
        d["parent_id"] = t.parent_id
        d["parent_range"] = list(t.parent_range)
    return d


def _traj_from_dict(d) -> Trajectory:
    pr = d.get("parent_range")
    return Trajectory(d["id"], np.array(d["points"], dtype=np.float64), float(d["dt"]),
                      d.get("parent_id"), tuple(pr) if pr is not None else None)


def model_to_dict(model: TrainedModel) -> dict:
    h = model.hyper
    return {
        "kind": MODEL_KIND,
        "version": MODEL_VERSION,
        "dt": model.dt,
        "bounds": list(model.bounds),
        "units": model.units,
        "hyper": {"sigma_x": h.sigma_x, "sigma_y": h.sigma_y, "sigma_n": h.sigma_n,
                  "u_x": h.u_x, "u_y": h.u_y},
        "weight": {"epsilon": model.wp.epsilon, "beta": model.wp.beta},
        "passage": {"chi2_gate": model.pp.chi2_gate},
        "online": {"window_size": model.online.window_size, "l_thresh": model.online.l_thresh,
                   "p_min": model.online.p_min},
        "patterns": [
            {"id": p.id, "max_train": p.max_train, "train_rows": p.train_rows.tolist(),
             "members": [_traj_to_dict(t) for t in p.members]}
            for p in model.patterns
        ],
        "transition_points": [tp.to_dict() for tp in model.tps],
        "tpm": model.tpm.to_dict(),
        "outliers": list(model.outliers),
        "config": model.config,
        "provenance": model.provenance,
    }


def model_from_dict(d: dict) -> TrainedModel:
    if not isinstance(d, dict) or d.get("kind") != MODEL_KIND:
        raise ModelError("not a trajflow model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelError(f"model version mismatch: file has {d.get('version')!r}, "
                         f"this build reads {MODEL_VERSION}")
    try:
        hyper = GpHyper(**d["hyper"])
        patterns = []
        for pd in d["patterns"]:
            members = [_traj_from_dict(m) for m in pd["members"]]
            rows = np.array(pd["train_rows"], dtype=np.int64)
            p = MotionPattern(pd["id"], members, hyper, pd["max_train"], _train_rows=rows)
            patterns.append(p)
        model = TrainedModel(
            patterns=tuple(patterns),
            tps=tuple(TransitionPoint.from_dict(t) for t in d["transition_points"]),
            tpm=Tpm.from_dict(d["tpm"]),
            hyper=hyper,
            wp=WeightParams(**d["weight"]),
            pp=PassageParams(**d["passage"]),
            online=OnlineConfig(**d["online"]),
            dt=float(d["dt"]),
            bounds=tuple(d["bounds"]),
            units=d.get("units", "meters"),
            config=d.get("config", {}),
            outliers=tuple(d.get("outliers", ())),
            provenance=d.get("provenance", {}),
        )
    except ModelError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelError(f"invalid model: {type(exc).__name__}: {exc}") from None
    validate_model(model)
    return model


def validate_model(model: TrainedModel) -> None:
    """Raise :class:`ModelError` on any internal inconsistency."""
    if not model.patterns:
        raise ModelError("model has no patterns")
    ids = [p.id for p in model.patterns]
    if len(set(ids)) != len(ids):
        raise ModelError("duplicate pattern ids")
    seen = set()
    for p in model.patterns:
        if not p.members:
            raise ModelError(f"pattern {p.id} is empty")
        for t in p.members:
            if t.id in seen:
                raise ModelError(f"trajectory {t.id!r} is in two patterns")
            seen.add(t.id)
        if len(p.train_rows) and (p.train_rows.min() < 0 or p.train_rows.max() >= len(p.points)):
            raise ModelError(f"pattern {p.id}: training rows out of range")
    tp_ids = set()
    for tp in model.tps:
        if tp.id in tp_ids:
            raise ModelError(f"duplicate transition point {tp.id}")
        tp_ids.add(tp.id)
        c = tp.cov
        if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
            raise ModelError(f"transition point {tp.id}: covariance is not positive definite")
    for s in model.tpm.states:
        if s.kind == "transition-point" and s.ref not in tp_ids:
            raise ModelError(f"TPM state {s.id} references missing transition point {s.ref}")
        if s.kind == "pattern" and s.ref not in model._by_id:
            raise ModelError(f"TPM state {s.id} references missing pattern {s.ref}")
        if s.kind not in ("transition-point", "pattern"):
            raise ModelError(f"TPM state {s.id}: unknown kind {s.kind!r}")
    missing = [pid for pid in ids if pattern_state_id(pid) not in model.tpm.ids]
    if missing:
        raise ModelError(f"patterns without TPM state: {missing}")
    if not model.dt > 0:
        raise ModelError("dt must be > 0")


def _validate_tp_cov(raw_tps):
    for t in raw_tps:
        c = np.asarray(t["cov"], dtype=np.float64)
        if c.shape != (2, 2) or not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
            raise ModelError(f"transition point {t.get('id')}: covariance is not positive definite")


def save_model(model: TrainedModel, path) -> None:
    path = Path(path)
    text = json.dumps(model_to_dict(model), separators=(",", ":"))
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "wt", encoding="utf-8") as fh:
                fh.write(text)
        else:
            path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write model {path}: {exc.strerror}") from exc


def load_model(path) -> TrainedModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read model {path}: {exc.strerror}") from exc
    try:
        if raw[:2] == b"\x1f\x8b":
            raw = gzip.decompress(raw)
        d = json.loads(raw.decode("utf-8"))
    except (OSError, EOFError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"{path}: cannot parse model file ({exc})") from None
    if isinstance(d, dict) and "transition_points" in d:
        _validate_tp_cov(d["transition_points"])
    return model_from_dict(d)
