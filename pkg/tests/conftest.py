import numpy as np
import pytest

from trajflow.gp import GpHyper, WeightParams
from trajflow.trajectory import Dataset, Trajectory


def line(tid, start, end, n, dt=0.5, noise=0.0, rng=None):
    """Straight trajectory of ``n`` evenly spaced points."""
    s = np.linspace(0.0, 1.0, n)[:, None]
    pts = np.asarray(start, float) + s * (np.asarray(end, float) - np.asarray(start, float))
    if noise:
        pts = pts + (rng or np.random.default_rng(0)).normal(0.0, noise, pts.shape)
    return Trajectory(str(tid), pts, dt)


def polyline(tid, nodes, step, dt=0.5, offset=(0.0, 0.0)):
    """Walk ``nodes`` at a fixed spacing ``step``."""
    nodes = np.asarray(nodes, float) + np.asarray(offset, float)
    seg = np.diff(nodes, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    s = np.arange(0.0, cum[-1] + 1e-9, step)
    pts = np.column_stack([np.interp(s, cum, nodes[:, 0]), np.interp(s, cum, nodes[:, 1])])
    return Trajectory(str(tid), pts, dt)


@pytest.fixture
def hyper():
    return GpHyper(1.0, 1.0, 0.2, 4.0, 4.0)


@pytest.fixture
def wp():
    return WeightParams(1.0, 2.0)


def make_two_lane():
    """Two parallel corridors walked in opposite directions, 6 tracks each."""
    rng = np.random.default_rng(1)
    trajs = []
    for k in range(6):
        y = 5.0 + rng.normal(0, 0.1)
        trajs.append(line(k, (0, y), (30, y), 43, noise=0.02, rng=rng))
    for k in range(6, 12):
        y = 15.0 + rng.normal(0, 0.1)
        trajs.append(line(k, (30, y), (0, y), 43, noise=0.02, rng=rng))
    return Dataset(tuple(trajs), bounds=(0, 0, 30, 20))


@pytest.fixture
def two_lane():
    return make_two_lane()


@pytest.fixture(scope="session")
def lane_model():
    """Model trained on the two-lane scene."""
    from trajflow.model import train
    return train(make_two_lane())


@pytest.fixture
def y_merge():
    """Two branches (south and west) joining one corridor heading east."""
    trajs = []
    rng = np.random.default_rng(2)
    for k in range(8):
        off = rng.normal(0, 0.1)
        trajs.append(polyline(k, [(0, 10), (20, 10), (40, 10)], 0.7, offset=(0, off)))
    for k in range(8, 16):
        off = rng.normal(0, 0.1)
        trajs.append(polyline(k, [(20, -10), (20, 10), (40, 10)], 0.7, offset=(off, 0)))
    return Dataset(tuple(trajs), bounds=(0, -10, 40, 20))
