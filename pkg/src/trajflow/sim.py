"""Synthetic scene generation and anomaly injection.

A scene is a set of named nodes and routes through them. Every route can be
walked forwards and backwards; each walking direction uses its own lane,
offset to the right of the direction of travel. Ground truth (route per
trajectory, sub-pattern per point, transition-point locations) is derived
from the route topology.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .trajectory import Dataset, Trajectory


@dataclass
class RouteSpec:
    name: str
    nodes: list[str]
    count: int
    reverse_count: int = 0


@dataclass
class SceneSpec:
    nodes: dict[str, tuple[float, float]]
    routes: list[RouteSpec]
    bounds: tuple[float, float, float, float]
    speed: float = 1.4
    speed_jitter: float = 0.1
    lateral_noise_std: float = 0.25
    point_noise_std: float = 0.02
    lane_offset: float = 5.0
    end_jitter: float = 1.0
    dt: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.nodes = {k: tuple(map(float, v)) for k, v in self.nodes.items()}
        self.routes = [r if isinstance(r, RouteSpec) else RouteSpec(**r) for r in self.routes]
        self.bounds = tuple(map(float, self.bounds))
        for r in self.routes:
            if r.count < 0 or r.reverse_count < 0 or r.count + r.reverse_count < 1:
                raise ValueError(f"route {r.name!r}: counts must be >= 0 with at least one trajectory")
            missing = [n for n in r.nodes if n not in self.nodes]
            if missing or len(r.nodes) < 2:
                raise ValueError(f"route {r.name!r}: bad node list {r.nodes}")
        if self.lateral_noise_std < 0 or self.point_noise_std < 0:
            raise ValueError("noise levels must be >= 0")
        if not (self.speed > 0 and self.dt > 0):
            raise ValueError("speed and dt must be > 0")

    @property
    def diagonal(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return math.hypot(x1 - x0, y1 - y0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nodes"] = {k: list(v) for k, v in self.nodes.items()}
        d["bounds"] = list(self.bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        path = Path(path)
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:  # python < 3.11
                import tomli as tomllib
            d = tomllib.loads(path.read_text())
        else:
            d = json.loads(path.read_text())
        d = d.get("scene", d)
        if "routes" in d and isinstance(d["routes"], dict):
            d["routes"] = [dict(name=k, **v) for k, v in d["routes"].items()]
        return cls.from_dict(d)


def default_intersection(seed: int = 0, **overrides) -> SceneSpec:
    """Two-lane intersection: a main east-west road, a northern branch and
    a southern branch. Three routes walked in both directions give six
    route classes, ten sub-patterns and twelve transition points."""
    nodes = {
        "W": (0.0, 15.0),
        "J1": (14.0, 15.0),
        "N": (14.0, 30.0),
        "J2": (27.0, 15.0),
        "S": (27.0, 0.0),
        "E": (40.0, 15.0),
    }
    routes = [
        RouteSpec("west-north", ["W", "J1", "N"], 17, 17),
        RouteSpec("west-east", ["W", "J1", "J2", "E"], 14, 14),
        RouteSpec("south-east", ["S", "J2", "E"], 14, 14),
    ]
    spec = dict(nodes=nodes, routes=routes, bounds=(0.0, 0.0, 40.0, 30.0), seed=seed)
    spec.update(overrides)
    return SceneSpec(**spec)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def offset_polyline(pts: np.ndarray, d: float) -> np.ndarray:
    """Parallel polyline ``d`` to the right of the direction of travel (mitred corners)."""
    pts = np.asarray(pts, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    seg /= np.linalg.norm(seg, axis=1, keepdims=True)
    normals = np.column_stack([seg[:, 1], -seg[:, 0]])
    out = np.empty_like(pts)
    out[0] = pts[0] + d * normals[0]
    out[-1] = pts[-1] + d * normals[-1]
    for k in range(1, len(pts) - 1):
        n1, n2 = normals[k - 1], normals[k]
        out[k] = pts[k] + d * (n1 + n2) / (1.0 + float(n1 @ n2))
    return out


def _arc(pts):
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])


def sample_polyline(pts: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions at arc lengths ``s`` and the index of the segment each falls on."""
    cum = _arc(pts)
    s = np.clip(s, 0.0, cum[-1])
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 2)
    frac = (s - cum[seg]) / np.maximum(cum[seg + 1] - cum[seg], 1e-12)
    pos = pts[seg] + frac[:, None] * (pts[seg + 1] - pts[seg])
    return pos, seg


def chaikin(pts: np.ndarray, rounds: int = 2) -> np.ndarray:
    for _ in range(rounds):
        q = 0.75 * pts[:-1] + 0.25 * pts[1:]
        r = 0.25 * pts[:-1] + 0.75 * pts[1:]
        inner = np.empty((2 * len(q), 2))
        inner[0::2] = q
        inner[1::2] = r
        pts = np.vstack([pts[:1], inner, pts[-1:]])
    return pts


# ---------------------------------------------------------------------------
# ground truth topology
# ---------------------------------------------------------------------------

@dataclass
class SceneTruth:
    """Labels that come with a generated dataset."""

    route: dict[str, str] = field(default_factory=dict)
    point_labels: dict[str, list[str]] = field(default_factory=dict)
    sub_patterns: list[str] = field(default_factory=list)
    transition_points: dict[str, tuple[float, float]] = field(default_factory=dict)
    route_tps: dict[str, list[str]] = field(default_factory=dict)
    lanes: dict[str, np.ndarray] = field(default_factory=dict)
    anomalies: set[str] = field(default_factory=set)
    anomalous_points: dict[str, np.ndarray] = field(default_factory=dict)

    def label_of(self, tid: str) -> str:
        return self.route.get(tid, "anomaly")

    def merged(self, other: "SceneTruth") -> "SceneTruth":
        out = SceneTruth(
            route={**self.route, **other.route},
            point_labels={**self.point_labels, **other.point_labels},
            sub_patterns=list(dict.fromkeys(self.sub_patterns + other.sub_patterns)),
            transition_points={**self.transition_points, **other.transition_points},
            route_tps={**self.route_tps, **other.route_tps},
            lanes={**self.lanes, **other.lanes},
            anomalies=self.anomalies | other.anomalies,
            anomalous_points={**self.anomalous_points, **other.anomalous_points},
        )
        return out

    def to_dict(self) -> dict:
        return {
            "route": self.route,
            "sub_patterns": self.sub_patterns,
            "transition_points": {k: list(v) for k, v in self.transition_points.items()},
            "route_tps": self.route_tps,
            "anomalies": sorted(self.anomalies),
            "point_labels": self.point_labels,
        }


def _directed_routes(spec: SceneSpec):
    """(route key, direction, node list, count) for every walked direction."""
    for r in spec.routes:
        if r.count:
            yield f"{r.name}>", "fwd", list(r.nodes), r.count
        if r.reverse_count:
            yield f"{r.name}<", "rev", list(reversed(r.nodes)), r.reverse_count


def _topology(spec: SceneSpec):
    """Sub-pattern chains and transition-point nodes per direction.

    Lanes are direction-specific, so a node walked in both directions gives
    two transition points. Transition nodes are route ends and nodes where
    the set of routes using consecutive edges changes.
    """
    directed = list(_directed_routes(spec))
    edge_routes: dict[tuple[str, str], set[str]] = {}
    for key, _, nodes, _ in directed:
        for u, v in zip(nodes[:-1], nodes[1:]):
            edge_routes.setdefault((u, v), set()).add(key)
    tp_nodes = set()
    for key, _, nodes, _ in directed:
        tp_nodes.add(nodes[0])
        tp_nodes.add(nodes[-1])
        for k in range(1, len(nodes) - 1):
            e_in = (nodes[k - 1], nodes[k])
            e_out = (nodes[k], nodes[k + 1])
            if edge_routes[e_in] != edge_routes[e_out]:
                tp_nodes.add(nodes[k])
    # every node where any walked route changes its route-set is a TP for
    # all lanes passing it in that walking sense
    chains: dict[str, list[str]] = {}
    for key, _, nodes, _ in directed:
        labels = []
        start = nodes[0]
        for k in range(1, len(nodes)):
            if nodes[k] in tp_nodes:
                lab = f"{start}>{nodes[k]}"
                labels.extend([lab] * (k - nodes.index(start, 0)))
                start = nodes[k]
        chains[key] = labels
    return directed, tp_nodes, chains


def _route_tps(nodes, tp_nodes):
    return [n for n in nodes if n in tp_nodes]


def generate_intersection(spec: SceneSpec | None = None) -> tuple[Dataset, SceneTruth]:
    """Sample trajectories along every route of ``spec``.

    Each trajectory follows its lane with a constant lateral offset drawn
    from ``N(0, lateral_noise_std)``, walks at ``speed`` +/- ``speed_jitter``
    (uniform), starts and stops up to ``end_jitter`` inside the route ends and
    carries independent ``point_noise_std`` jitter per sample.
    """
    spec = spec or default_intersection()
    rng = np.random.default_rng(spec.seed)
    directed, tp_nodes, chains = _topology(spec)
    half = 0.5 * spec.lane_offset
    truth = SceneTruth()

    # transition point truth: lane position of each TP node per walking sense
    tp_acc: dict[str, list[np.ndarray]] = {}
    for key, sense, nodes, _ in directed:
        raw = np.array([spec.nodes[n] for n in nodes])
        lane = offset_polyline(raw, half)
        truth.lanes[key] = lane
        for n, p in zip(nodes, lane):
            if n in tp_nodes:
                tp_acc.setdefault(f"{sense}:{n}", []).append(p)
        truth.route_tps[key] = [f"{sense}:{n}" for n in _route_tps(nodes, tp_nodes)]
    truth.transition_points = {k: tuple(np.mean(v, axis=0)) for k, v in sorted(tp_acc.items())}
    subs = []
    for key, sense, _, _ in directed:
        for lab in chains[key]:
            full = f"{sense}:{lab}"
            if full not in subs:
                subs.append(full)
    truth.sub_patterns = subs

    total = sum(c for *_, c in directed)
    # ids are handed out in random order so routes interleave like real arrivals
    order = rng.permutation(total)
    trajs = []
    k = 0
    for key, sense, nodes, count in directed:
        raw = np.array([spec.nodes[n] for n in nodes])
        edge_labels = [f"{sense}:{lab}" for lab in chains[key]]
        for _ in range(count):
            off = half + rng.normal(0.0, spec.lateral_noise_std) if spec.lateral_noise_std else half
            lane = offset_polyline(raw, off)
            length = _arc(lane)[-1]
            speed = spec.speed + rng.uniform(-spec.speed_jitter, spec.speed_jitter)
            s0 = rng.uniform(0.0, spec.end_jitter) if spec.end_jitter else 0.0
            s1 = length - (rng.uniform(0.0, spec.end_jitter) if spec.end_jitter else 0.0)
            step = speed * spec.dt
            n = int(math.floor((s1 - s0) / step)) + 1
            s = s0 + step * np.arange(n)
            pos, seg = sample_polyline(lane, s)
            if spec.point_noise_std:
                pos = pos + rng.normal(0.0, spec.point_noise_std, size=pos.shape)
            pos = np.clip(pos, spec.bounds[:2], spec.bounds[2:])
            tid = str(int(order[k]))
            k += 1
            trajs.append(Trajectory(tid, pos, spec.dt))
            truth.route[tid] = key
            truth.point_labels[tid] = [edge_labels[j] for j in seg]
    trajs.sort(key=lambda t: int(t.id))
    return Dataset(tuple(trajs), units="meters", bounds=spec.bounds), truth


def route_mix(spec: SceneSpec) -> dict[str, float]:
    """Share of each route among forward walkers leaving the same start node."""
    by_start: dict[str, int] = {}
    for key, _, nodes, count in _directed_routes(spec):
        by_start[nodes[0] + key[-1]] = by_start.get(nodes[0] + key[-1], 0) + count
    return {
        key: count / by_start[nodes[0] + key[-1]]
        for key, _, nodes, count in _directed_routes(spec)
    }


# ---------------------------------------------------------------------------
# anomalies
# ---------------------------------------------------------------------------

def _nominal_mask(points, vel, lanes, radius, max_angle):
    """True where a point is off every lane or heads against the lane direction."""
    off = np.ones(len(points), dtype=bool)
    cos_max = math.cos(max_angle)
    for lane in lanes.values():
        a = lane[:-1]
        b = lane[1:]
        ab = b - a
        L2 = (ab**2).sum(axis=1)
        t = np.clip(((points[:, None, :] - a[None]) * ab[None]).sum(-1) / L2[None], 0, 1)
        proj = a[None] + t[..., None] * ab[None]
        d = np.linalg.norm(points[:, None, :] - proj, axis=2)
        heading = ab / np.sqrt(L2)[:, None]
        speed = np.linalg.norm(vel, axis=1, keepdims=True)
        u = vel / np.maximum(speed, 1e-12)
        cosang = u @ heading.T
        ok = (d <= radius) & (cosang >= cos_max)
        off &= ~ok.any(axis=1)
    return off


def random_walk_trajectory(rng, bounds, speed, dt, point_noise_std, n_way=(3, 5),
                           min_points=12, tid="a0") -> Trajectory:
    x0, y0, x1, y1 = bounds
    margin = 0.05 * min(x1 - x0, y1 - y0)
    while True:
        m = int(rng.integers(n_way[0], n_way[1] + 1))
        way = np.column_stack([
            rng.uniform(x0 + margin, x1 - margin, m),
            rng.uniform(y0 + margin, y1 - margin, m),
        ])
        path = chaikin(way, 3)
        length = _arc(path)[-1]
        step = speed * dt
        n = int(length // step) + 1
        if n >= min_points:
            break
    pos, _ = sample_polyline(path, step * np.arange(n))
    if point_noise_std:
        pos = pos + rng.normal(0.0, point_noise_std, size=pos.shape)
    return Trajectory(tid, pos, dt)


def inject_anomalies(ds: Dataset, fraction: float, seed: int = 0,
                     spec: SceneSpec | None = None,
                     truth: SceneTruth | None = None) -> tuple[Dataset, SceneTruth]:
    """Append ``ceil(fraction * n_t)`` random-waypoint trajectories labelled anomalous.

    Anomalies use uniform waypoints inside the scene bounds, smoothed by
    corner cutting, with the scene's speed distribution and point jitter.
    When lane geometry is known, each anomaly also gets a per-point mask of
    samples that are off every lane or walk against it.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    n_new = math.ceil(fraction * ds.n_t - 1e-9)
    base = truth if truth is not None else SceneTruth()
    if n_new == 0:
        return ds, base
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA40]))
    speed = spec.speed if spec else 1.4
    jitter = spec.speed_jitter if spec else 0.1
    noise = spec.point_noise_std if spec else 0.02
    bounds = spec.bounds if spec else ds.bounds
    radius = 3.0 * (spec.lateral_noise_std if spec else 0.25) + 0.5
    existing = {t.id for t in ds.trajectories}
    new = []
    extra = SceneTruth()
    k = 0
    while len(new) < n_new:
        tid = f"a{seed}-{k}"
        k += 1
        if tid in existing:
            continue
        v = speed + rng.uniform(-jitter, jitter)
        t = random_walk_trajectory(rng, bounds, v, ds.dt, noise, tid=tid)
        new.append(t)
        extra.anomalies.add(tid)
        extra.point_labels[tid] = ["anomaly"] * len(t)
        if base.lanes:
            extra.anomalous_points[tid] = _nominal_mask(
                t.points, t.vel, base.lanes, radius, math.radians(45))
        else:
            extra.anomalous_points[tid] = np.ones(len(t), dtype=bool)
    out = Dataset(ds.trajectories + tuple(new), units=ds.units, bounds=ds.bounds)
    return out, base.merged(extra)
