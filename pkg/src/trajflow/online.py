"""Streaming inference: sliding-window assignment, state prediction, anomaly flags."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .gp import point_scores

if TYPE_CHECKING:  # pragma: no cover
    from .model import TrainedModel

ANOMALY = "ANOMALY"


@dataclass(frozen=True)
class OnlineConfig:
    window_size: int = 6
    l_thresh: float = -math.inf
    p_min: float = 0.0

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if not 0.0 <= self.p_min < 1.0:
            raise ValueError("p_min must be in [0, 1)")

    def with_threshold(self, l_thresh: float) -> "OnlineConfig":
        return OnlineConfig(self.window_size, float(l_thresh), self.p_min)


@dataclass
class StepOutput:
    track_id: str
    step: int
    assigned: int | str | None
    loglik: float | None
    active_tp: str | None = None
    predicted: dict[str, float] = field(default_factory=dict)
    eliminated: list[str] = field(default_factory=list)

    @property
    def anomaly(self) -> bool:
        return self.assigned == ANOMALY

    @property
    def decided(self) -> bool:
        return self.assigned is not None

    def to_json(self) -> dict:
        return {
            "track_id": self.track_id,
            "step": self.step,
            "assigned": self.assigned,
            "loglik": self.loglik,
            "anomaly": self.anomaly,
            "active_tp": self.active_tp,
            "predicted": self.predicted,
            "eliminated": self.eliminated,
        }


@dataclass
class TrackSession:
    track_id: str
    window_size: int = 6
    buffer: deque = field(default=None)
    history: list = field(default_factory=list)
    steps: int = 0

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = deque(maxlen=self.window_size)

    def push(self, point) -> None:
        self.buffer.append(np.asarray(point, dtype=np.float64).reshape(2))
        self.steps += 1

    @property
    def window(self) -> np.ndarray:
        return np.array(self.buffer).reshape(-1, 2)


def assign_window(window: Sequence, model: "TrainedModel") -> tuple[int, float, float]:
    """Best pattern for a window, its score, and the window's anomaly score.

    The pattern maximises the window's summed weighted log-likelihood (ties
    go to the lowest pattern id); its per-point average is the second value.
    The anomaly score is the median, over the window's points, of each
    point's best log-likelihood under any pattern: a window straddling two
    patterns at a junction scores as well as its halves, and one sharp
    corner sample cannot drag a nominal window down.
    """
    pts = np.asarray(window, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("window needs at least 2 points")
    if not model.patterns:
        raise ValueError("model has no patterns")
    s = point_scores(pts, model.dt, model.patterns, model.wp)
    total = s.sum(axis=0)
    c = int(np.argmax(total))  # first maximum, patterns are sorted by id
    return model.patterns[c].id, float(total[c] / len(pts)), float(np.median(s.max(axis=1)))


def active_transition_point(position, model: "TrainedModel") -> str | None:
    """Transition point whose gate contains ``position``; nearest in Mahalanobis distance."""
    best, best_d = None, math.inf
    for tp in model.tps:
        d = float(tp.mahalanobis2(position)[0])
        if d <= model.pp.chi2_gate and d < best_d:
            best, best_d = tp.id, d
    return best


def predict_states(assigned: int, position, model: "TrainedModel",
                   cfg: OnlineConfig) -> tuple[str | None, dict[str, float], list[str]]:
    """(active transition point, predicted states, eliminated states).

    Inside a transition point's gate its TPM row takes precedence over the
    assigned pattern's row.
    """
    active = active_transition_point(position, model)
    sid = active if active is not None else model.pattern_state(assigned)
    row = model.tpm.row(sid)
    predicted = {k: v for k, v in row.items() if v > cfg.p_min}
    eliminated = [k for k, v in row.items() if v <= cfg.p_min]
    return active, predicted, eliminated


def detect_anomaly(window_loglik: float, cfg: OnlineConfig) -> str:
    return "anomaly" if window_loglik <= cfg.l_thresh else "nominal"


def step(session: TrackSession, point, model: "TrainedModel", cfg: OnlineConfig) -> StepOutput:
    """Feed one point; returns a decision once the buffer holds 2 points."""
    session.push(point)
    out = StepOutput(session.track_id, session.steps - 1, None, None)
    if len(session.buffer) >= 2:
        window = session.window
        pid, _, score = assign_window(window, model)
        out.loglik = score
        if detect_anomaly(score, cfg) == "anomaly":
            out.assigned = ANOMALY
        else:
            out.assigned = pid
            out.active_tp, out.predicted, out.eliminated = predict_states(
                pid, window[-1], model, cfg)
    session.history.append(out)
    return out


def replay(points: np.ndarray, model: "TrainedModel", cfg: OnlineConfig,
           track_id: str = "track") -> list[StepOutput]:
    """Run a whole trajectory through a fresh session."""
    s = TrackSession(track_id, cfg.window_size)
    return [step(s, p, model, cfg) for p in np.asarray(points)]
