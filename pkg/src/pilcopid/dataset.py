"""Expert datasets: PID error features and GP transition pairs from rollouts."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .plant import STATE_DIM, PlantState, Trajectory, as_state_array

# x and theta
DEFAULT_CHANNELS = (0, 2)
CHANNEL_NAMES = {0: "x", 1: "x_dot", 2: "theta", 3: "theta_dot"}


class EmptyDatasetError(ValueError):
    pass


@dataclass
class ErrorRecord:
    """Error features of one time step, one entry per feedback channel."""

    e: np.ndarray
    i: np.ndarray
    d: np.ndarray

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.e, self.i, self.d])


def feature_names(channels: Sequence[int] = DEFAULT_CHANNELS) -> List[str]:
    names = [CHANNEL_NAMES[c] for c in channels]
    return [f"{kind}_{n}" for kind in ("e", "i", "d") for n in names]


def _check_channels(channels: Sequence[int]) -> np.ndarray:
    channels = np.asarray(channels, dtype=int)
    if channels.size == 0:
        raise ValueError("at least one feedback channel is required")
    if np.any(channels < 0) or np.any(channels >= STATE_DIM):
        raise ValueError(f"channel index out of range: {channels.tolist()}")
    return channels


def error_features(states: np.ndarray, x_des, channels: Sequence[int], dt: float) -> np.ndarray:
    """Feature matrix ``[e..., i..., d...]`` for every row of ``states``.

    The integral is the running ``dt``-weighted sum from the first row and the
    derivative a backward difference with the first row's predecessor taken
    equal to itself.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    channels = _check_channels(channels)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    e = as_state_array(x_des)[channels] - states[:, channels]
    integral = np.cumsum(dt * e, axis=0)
    prev = np.vstack([e[:1], e[:-1]])
    deriv = (e - prev) / dt
    return np.hstack([e, integral, deriv])


def compute_errors(traj: Trajectory, x_des=PlantState(), channels=DEFAULT_CHANNELS, dt=None) -> List[ErrorRecord]:
    dt = traj.dt if dt is None else dt
    k = len(_check_channels(channels))
    feats = error_features(traj.states, x_des, channels, dt)
    return [ErrorRecord(row[:k], row[k : 2 * k], row[2 * k :]) for row in feats]


@dataclass
class AugmentedDataset:
    """Error features paired with the controls applied at the same step."""

    error_features: np.ndarray
    controls: np.ndarray
    sources: list = field(default_factory=list)
    channels: tuple = DEFAULT_CHANNELS
    states: np.ndarray = None

    def __post_init__(self):
        self.error_features = np.atleast_2d(np.asarray(self.error_features, dtype=float))
        controls = np.asarray(self.controls, dtype=float)
        width = controls.shape[-1] if controls.ndim == 2 else 1
        self.controls = controls.reshape(len(self.error_features), width if controls.size == 0 else -1)
        if not (np.all(np.isfinite(self.error_features)) and np.all(np.isfinite(self.controls))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return len(self.error_features)

    @property
    def feature_names(self) -> List[str]:
        return feature_names(self.channels)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            n_u = self.controls.shape[1]
            writer.writerow(self.feature_names + (["u"] if n_u == 1 else [f"u{j}" for j in range(n_u)]))
            for feats, u in zip(self.error_features, self.controls):
                writer.writerow([repr(float(v)) for v in (*feats, *u)])

    @classmethod
    def from_csv(cls, path, channels=DEFAULT_CHANNELS) -> "AugmentedDataset":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        k = 3 * len(channels)
        return cls(data[:, :k], data[:, k:], channels=tuple(channels))


def augment(trajectories: Sequence[Trajectory], x_des=PlantState(), channels=DEFAULT_CHANNELS, dt=None) -> AugmentedDataset:
    """Concatenate per-trajectory (features, control) pairs.

    Row ``k`` of a trajectory pairs the features computed from state ``k`` with
    the control applied at state ``k``, so the last state of each trajectory
    contributes no row. Running sums restart at every trajectory.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise EmptyDatasetError("no trajectories to augment")
    dt = trajectories[0].dt if dt is None else dt
    if any(not np.isclose(t.dt, dt) for t in trajectories):
        raise ValueError("trajectories use different sampling times")
    feats, controls, states, sources = [], [], [], []
    for idx, traj in enumerate(trajectories):
        n = len(traj)
        feats.append(error_features(traj.states[:n], x_des, channels, dt))
        controls.append(traj.controls)
        states.append(traj.states[:n])
        sources.extend([idx] * n)
    return AugmentedDataset(
        np.vstack(feats), np.vstack(controls), sources, tuple(channels), np.vstack(states)
    )


def gp_training_pairs(trajectories: Sequence[Trajectory]):
    """Stack ``([x u], x_next - x)`` pairs over every transition."""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    inputs = [np.hstack([t.states[:-1], t.controls]) for t in trajectories if len(t)]
    if not inputs:
        raise EmptyDatasetError("no transitions")
    targets = [np.diff(t.states, axis=0) for t in trajectories if len(t)]
    return np.vstack(inputs), np.vstack(targets)
