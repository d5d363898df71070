"""Metrics and evaluation drivers.

Prediction accuracy
    Share of a test trajectory's decision steps (before it reaches its final
    transition point) whose predicted state set contains that final state.
Transition prediction time (TPT)
    Steps after leaving a transition point until the true next transition
    point is the most probable transition point in the prediction.
Anomaly detection
    A trajectory counts as detected only if every window made entirely of
    anomalous points is flagged; false positives are nominal trajectories
    with any flagged window.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import RunConfig, thread_limit
from .dpgp import Clustering
from .model import TrainedModel, train
from .online import OnlineConfig, replay
from .sim import SceneSpec, SceneTruth, generate_intersection, inject_anomalies
from .trajectory import Dataset, Trajectory, id_key

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# clustering error
# ---------------------------------------------------------------------------

def signatures(clustering: Clustering) -> dict[str, tuple[int, ...]]:
    """Sequence of pattern ids visited by every root trajectory."""
    pieces: dict[str, list[tuple[int, int]]] = {}
    for p in clustering.patterns:
        for t in p.members:
            pieces.setdefault(t.root_id, []).append((t.root_range[0], p.id))
    return {k: tuple(pid for _, pid in sorted(v)) for k, v in pieces.items()}


def clustering_error(result: Clustering, truth: SceneTruth | dict,
                     outliers: Sequence[str] = ()) -> float:
    """Percent of trajectories whose cluster does not match the ground truth.

    Each trajectory's result label is the sequence of patterns its pieces
    fall in (identical for every trajectory of one route). Labels are matched
    one-to-one to true routes by maximum overlap; anomalies are correct when
    they end up unexplained (``outliers``) or in an unmatched cluster.
    """
    routes = truth.route if isinstance(truth, SceneTruth) else dict(truth)
    sig = signatures(result)
    ids = sorted(set(sig) | set(outliers), key=id_key)
    if not ids:
        return 0.0
    out = set(outliers)
    label = {i: (None if i in out else sig.get(i)) for i in ids}
    true = {i: routes.get(i, "anomaly") for i in ids}
    res_labels = sorted({l for l in label.values() if l is not None})
    true_labels = sorted({l for l in true.values() if l != "anomaly"})
    match: dict = {}
    if res_labels and true_labels:
        ri = {l: k for k, l in enumerate(res_labels)}
        ti = {l: k for k, l in enumerate(true_labels)}
        overlap = np.zeros((len(res_labels), len(true_labels)))
        for i in ids:
            if label[i] is not None and true[i] != "anomaly":
                overlap[ri[label[i]], ti[true[i]]] += 1
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        match = {res_labels[r]: true_labels[c] for r, c in zip(rows, cols) if overlap[r, c] > 0}
    wrong = 0
    for i in ids:
        if true[i] == "anomaly":
            wrong += label[i] is not None and label[i] in match
        else:
            wrong += label[i] is None or match.get(label[i]) != true[i]
    return 100.0 * wrong / len(ids)


# ---------------------------------------------------------------------------
# prediction metrics
# ---------------------------------------------------------------------------

def constant_velocity_predict(window, horizon: int) -> np.ndarray:
    """Extrapolate the window's mean velocity for ``horizon`` steps."""
    w = np.asarray(window, dtype=np.float64).reshape(-1, 2)
    if len(w) < 2:
        raise ValueError("window needs at least 2 points")
    step = (w[-1] - w[0]) / (len(w) - 1)
    k = np.arange(1, int(horizon) + 1)[:, None]
    return w[-1] + k * step


def _gate_mask(model: TrainedModel, points: np.ndarray) -> dict[str, np.ndarray]:
    return {tp.id: tp.mahalanobis2(points) <= model.pp.chi2_gate for tp in model.tps}


def final_state(model: TrainedModel, points: np.ndarray) -> str | None:
    """Transition point nearest (Mahalanobis) to the trajectory's last point."""
    if not model.tps:
        return None
    d = [float(tp.mahalanobis2(points[-1])[0]) for tp in model.tps]
    return model.tps[int(np.argmin(d))].id


def visits(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (entry, exit) index ranges of the ``True`` runs of ``mask``."""
    out = []
    k, n = 0, len(mask)
    while k < n:
        if mask[k]:
            a = k
            while k + 1 < n and mask[k + 1]:
                k += 1
            out.append((a, k))
        k += 1
    return out


def tp_sequence(model: TrainedModel, points: np.ndarray) -> list[tuple[str, int, int]]:
    """Transition points in the order the trajectory visits them, as (id, entry, exit)."""
    seq = []
    for tid, m in _gate_mask(model, points).items():
        seq += [(tid, a, b) for a, b in visits(m)]
    seq.sort(key=lambda v: (v[1], v[2]))
    # drop re-entries into the point just visited (gate flicker)
    clean = []
    for v in seq:
        if clean and clean[-1][0] == v[0]:
            clean[-1] = (v[0], clean[-1][1], max(clean[-1][2], v[2]))
        else:
            clean.append(v)
    return clean


def _top_tp(model: TrainedModel, predicted: dict[str, float], position) -> str | None:
    tp_pos = {tp.id: tp.mean for tp in model.tps}
    cands = [(p, s) for s, p in predicted.items() if s in tp_pos]
    if not cands:
        return None
    best = max(p for p, _ in cands)
    tied = [s for p, s in cands if p == best]
    return min(tied, key=lambda s: (float(np.hypot(*(tp_pos[s] - position))), id_key(s)))


@dataclass
class TrajectoryResult:
    track_id: str
    steps: int
    correct: int
    baseline_correct: int
    tpt_steps: list[int] = field(default_factory=list)
    flagged: int = 0

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.steps if self.steps else math.nan

    @property
    def baseline_accuracy(self) -> float:
        return 100.0 * self.baseline_correct / self.steps if self.steps else math.nan


def evaluate_trajectory(model: TrainedModel, traj: Trajectory,
                        cfg: OnlineConfig | None = None) -> TrajectoryResult | None:
    cfg = cfg or model.online
    pts = traj.points
    goal = final_state(model, pts)
    if goal is None:
        return None
    outs = replay(pts, model, cfg, traj.id)
    goal_tp = model.tp(goal)
    in_goal = goal_tp.mahalanobis2(pts) <= model.pp.chi2_gate
    reached = int(np.argmax(in_goal)) if in_goal.any() else len(pts)
    res = TrajectoryResult(traj.id, 0, 0, 0, flagged=sum(o.anomaly for o in outs))
    for k, o in enumerate(outs):
        if not o.decided or k >= reached:
            continue
        res.steps += 1
        res.correct += goal in o.predicted
        window = pts[max(0, k - cfg.window_size + 1): k + 1]
        horizon = len(pts) - 1 - k
        if horizon > 0:
            end = constant_velocity_predict(window, horizon)[-1]
        else:
            end = pts[k]
        res.baseline_correct += bool(goal_tp.mahalanobis2(end)[0] <= model.pp.chi2_gate)
    seq = tp_sequence(model, pts)
    for (g, _, exit_), (nxt, entry, _) in zip(seq[:-1], seq[1:]):
        start = exit_ + 1
        t = None
        for k in range(start, entry + 1):
            o = outs[k]
            if o.decided and not o.anomaly and _top_tp(model, o.predicted, pts[k]) == nxt:
                t = k - start
                break
        res.tpt_steps.append(t if t is not None else entry - start)
    return res


def evaluate_prediction(model: TrainedModel, test, cfg: OnlineConfig | None = None) -> dict:
    """Accuracy, baseline accuracy, TPT and nominal false-positive rate over ``test``."""
    trajs = test.trajectories if isinstance(test, Dataset) else list(test)
    results = []
    for t in trajs:
        r = evaluate_trajectory(model, t, cfg)
        if r is None or r.steps == 0:
            log.warning("trajectory %s has no decision steps; excluded", t.id)
            continue
        results.append(r)
    if not results:
        return {"prediction_accuracy": math.nan, "baseline_accuracy": math.nan,
                "tpt_steps": math.nan, "tpt_seconds": math.nan,
                "false_positive_rate": math.nan, "n_test": 0}
    tpt = [s for r in results for s in r.tpt_steps]
    tpt_steps = float(np.mean(tpt)) if tpt else 0.0
    return {
        "prediction_accuracy": float(np.mean([r.accuracy for r in results])),
        "baseline_accuracy": float(np.mean([r.baseline_accuracy for r in results])),
        "tpt_steps": tpt_steps,
        "tpt_seconds": tpt_steps * model.dt,
        "false_positive_rate": 100.0 * sum(r.flagged > 0 for r in results) / len(results),
        "n_test": len(results),
    }


def anomalous_windows(mask: np.ndarray, window_size: int) -> list[int]:
    """Steps whose window (ending there, at least 2 points) is made only of anomalous points."""
    out = []
    for k in range(1, len(mask)):
        a = max(0, k - window_size + 1)
        if mask[a : k + 1].all():
            out.append(k)
    return out


def evaluate_anomalies(model: TrainedModel, anomalies: Sequence[Trajectory],
                       masks: dict[str, np.ndarray], cfg: OnlineConfig | None = None) -> dict:
    """Strict detection rate: every fully anomalous window of a trajectory must be flagged."""
    cfg = cfg or model.online
    detected = evaluated = 0
    window_hits = window_total = 0
    for t in anomalies:
        need = anomalous_windows(np.asarray(masks[t.id], dtype=bool), cfg.window_size)
        if not need:
            continue
        outs = replay(t.points, model, cfg, t.id)
        flags = [outs[k].anomaly for k in need]
        evaluated += 1
        detected += all(flags)
        window_hits += sum(flags)
        window_total += len(flags)
    return {
        "anomaly_detection_rate": 100.0 * detected / evaluated if evaluated else math.nan,
        "anomaly_window_rate": 100.0 * window_hits / window_total if window_total else math.nan,
        "n_anomalies": evaluated,
    }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRICS = ("prediction_accuracy", "baseline_accuracy", "tpt_seconds", "tpt_steps",
           "anomaly_detection_rate", "false_positive_rate", "clustering_error")


@dataclass
class MetricsReport:
    per_fold: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def _values(self, key):
        v = [f.get(key) for f in self.per_fold]
        return [x for x in v if x is not None and not (isinstance(x, float) and math.isnan(x))]

    def mean(self, key) -> float:
        v = self._values(key)
        return float(np.mean(v)) if v else math.nan

    def summary(self) -> dict:
        out = {}
        for key in METRICS:
            v = self._values(key)
            if v:
                out[key] = {"mean": float(np.mean(v)), "min": float(np.min(v)),
                            "max": float(np.max(v))}
        return out

    @property
    def prediction_accuracy(self):
        return self.mean("prediction_accuracy")

    @property
    def tpt_seconds(self):
        return self.mean("tpt_seconds")

    @property
    def anomaly_detection_rate(self):
        return self.mean("anomaly_detection_rate")

    @property
    def false_positive_rate(self):
        return self.mean("false_positive_rate")

    @property
    def clustering_error(self):
        return self.mean("clustering_error")

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x
        return json.dumps(clean({"summary": self.summary(), "per_fold": self.per_fold,
                                 "meta": self.meta}), indent=2)

    def to_csv(self) -> str:
        keys = []
        for f in self.per_fold:
            keys += [k for k in f if k not in keys]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for f in self.per_fold:
            w.writerow(f)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _workers(n_tasks: int) -> int:
    cap = thread_limit()
    n = cap if cap is not None else (os.cpu_count() or 1)
    return max(1, min(n, n_tasks))


def _map(fn, tasks):
    n = _workers(len(tasks))
    if n == 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, tasks))


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    if k < 2 or n < k:
        raise ValueError(f"k-fold needs 2 <= k <= n (k={k}, n={n})")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _fold_task(args):
    fold, ds, test_idx, cfg, anomalies, masks = args
    test_set = set(test_idx.tolist())
    train_ds = Dataset(tuple(t for i, t in enumerate(ds.trajectories) if i not in test_set),
                       units=ds.units, bounds=ds.bounds)
    test = [ds.trajectories[i] for i in test_idx]
    model = train(train_ds, cfg)
    row = {"fold": fold, "n_train": train_ds.n_t, "n_patterns": len(model.patterns),
           "n_transition_points": len(model.tps)}
    row.update(evaluate_prediction(model, test))
    if anomalies:
        row.update(evaluate_anomalies(model, anomalies, masks))
    return row


def run_kfold(ds: Dataset, k: int = 10, cfg: RunConfig | None = None,
              anomalies: Sequence[Trajectory] = (), masks: dict | None = None,
              seed: int | None = None) -> MetricsReport:
    """Train on k-1 folds, replay the held-out fold (and any anomalies) per fold."""
    cfg = cfg or RunConfig()
    seed = cfg.seed if seed is None else seed
    folds = kfold_indices(ds.n_t, k, seed)
    tasks = [(i, ds, f, cfg, list(anomalies), masks or {}) for i, f in enumerate(folds)]
    rows = _map(_fold_task, tasks)
    return MetricsReport(rows, {"k": k, "seed": seed, "n_trajectories": ds.n_t})


def _robust_task(args):
    spec_dict, fraction, trial, cfg = args
    spec = SceneSpec.from_dict(spec_dict)
    ds, truth = generate_intersection(spec)
    ds, truth = inject_anomalies(ds, fraction, seed=trial, spec=spec, truth=truth)
    model = train(ds, cfg)
    return {
        "fraction": fraction,
        "trial": trial,
        "n_trajectories": ds.n_t,
        "clustering_error": clustering_error(model.clustering, truth, model.outliers),
        "n_patterns": len(model.patterns),
        "n_transition_points": len(model.tps),
    }


def robustness_sweep(spec: SceneSpec, fractions=(0.1, 0.2, 0.3), trials: int = 5,
                     cfg: RunConfig | None = None) -> MetricsReport:
    """Clustering error and structure counts with injected anomalies."""
    cfg = cfg or RunConfig(seed=spec.seed)
    tasks = [(spec.to_dict(), f, t, cfg) for f in fractions for t in range(trials)]
    rows = _map(_robust_task, tasks)
    return MetricsReport(rows, {"fractions": list(fractions), "trials": trials})


def anomaly_set(spec: SceneSpec, n: int, seed: int = 1000) -> tuple[list[Trajectory], dict]:
    """``n`` anomalies with their per-point anomalous masks."""
    ds, truth = generate_intersection(spec)
    frac = n / ds.n_t
    ds2, truth2 = inject_anomalies(ds, min(frac, 1.0), seed=seed, spec=spec, truth=truth)
    anomalies = [t for t in ds2.trajectories if t.id in truth2.anomalies][:n]
    return anomalies, {t.id: truth2.anomalous_points[t.id] for t in anomalies}
