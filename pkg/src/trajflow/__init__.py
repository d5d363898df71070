"""Two-level pedestrian motion models: GP motion patterns, transition points
and a transition probability matrix, with streaming prediction and anomaly
detection."""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig
from .dpgp import Clustering, DpConfig, cluster_dataset
from .gp import GpHyper, MotionPattern, WeightParams
from .io import load_trajectories, save_trajectories
from .model import ModelError, TrainedModel, load_model, save_model, train
from .online import OnlineConfig, StepOutput, TrackSession, replay, step
from .sim import SceneSpec, default_intersection, generate_intersection, inject_anomalies
from .tpm import Tpm, learn_tpm
from .trajectory import Dataset, Trajectory, TrajectoryError
from .transitions import TestConfig, TransitionPoint, iterative_cluster

__all__ = [
    "ConfigError", "RunConfig", "Clustering", "DpConfig", "cluster_dataset", "GpHyper",
    "MotionPattern", "WeightParams", "load_trajectories", "save_trajectories", "ModelError",
    "TrainedModel", "load_model", "save_model", "train", "OnlineConfig", "StepOutput",
    "TrackSession", "replay", "step", "SceneSpec", "default_intersection",
    "generate_intersection", "inject_anomalies", "Tpm", "learn_tpm", "Dataset", "Trajectory",
    "TrajectoryError", "TestConfig", "TransitionPoint", "iterative_cluster",
]
