"""Cart-pole plant: stochastic discrete-time simulation and closed-loop rollouts.

The pole is a uniform rod of length ``pole_length`` hinged on the cart through a
frictionless pivot. ``theta`` is measured from the upright position (positive
tilts the pole towards +x) and is never wrapped.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

STATE_NAMES = ("x", "x_dot", "theta", "theta_dot")
STATE_DIM = 4
CONTROL_DIM = 1


class DivergenceError(RuntimeError):
    """Raised when the simulated state stops being finite."""

    def __init__(self, message, state=None, step_index=None):
        super().__init__(message)
        self.state = state
        self.step_index = step_index


@dataclass(frozen=True)
class PlantState:
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"non-finite plant state: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PlantState":
        a = np.asarray(a, dtype=float).reshape(STATE_DIM)
        return cls(*(float(v) for v in a))


StateLike = Union[PlantState, Sequence[float], np.ndarray]


def as_state_array(state: StateLike) -> np.ndarray:
    if isinstance(state, PlantState):
        return state.as_array()
    return np.asarray(state, dtype=float)


@dataclass(frozen=True)
class PlantParams:
    """Physical and simulation parameters of the cart-pole.

    ``noise_cov`` holds the diagonal of the additive process-noise covariance,
    one variance per state. ``substeps`` is the number of RK4 sub-steps used to
    integrate the continuous dynamics across one sampling interval ``dt``.
    """

    cart_mass: float = 0.5
    pendulum_mass: float = 0.2
    pole_length: float = 0.5
    gravity: float = 9.81
    cart_friction: float = 0.1
    noise_cov: tuple = (1e-6, 1e-6, 1e-6, 1e-6)
    dt: float = 0.05
    u_max: float = 10.0
    substeps: int = 10

    def __post_init__(self):
        object.__setattr__(self, "noise_cov", tuple(float(v) for v in self.noise_cov))
        for name in ("cart_mass", "pendulum_mass", "pole_length", "dt", "u_max"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if len(self.noise_cov) != STATE_DIM:
            raise ValueError("noise_cov needs one variance per state")
        if any(not math.isfinite(v) or v < 0 for v in self.noise_cov):
            raise ValueError("noise variances must be non-negative")
        if self.cart_friction < 0:
            raise ValueError("cart_friction must be non-negative")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.noise_cov))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["noise_cov"] = list(self.noise_cov)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantParams":
        d = dict(d)
        if "noise_cov" in d:
            d["noise_cov"] = tuple(d["noise_cov"])
        return cls(**d)


@dataclass(frozen=True)
class Disturbance:
    """External input on the matched (cart force) or unmatched (pole torque) channel."""

    channel: str = "matched"
    profile: str = "impulse"
    magnitude: float = 5.0
    start_time: float = 2.0
    duration: float = 0.0

    def __post_init__(self):
        if self.channel not in ("matched", "unmatched"):
            raise ValueError(f"unknown disturbance channel {self.channel!r}")
        if self.profile not in ("impulse", "step"):
            raise ValueError(f"unknown disturbance profile {self.profile!r}")

    def active_steps(self, dt: float) -> range:
        start = int(round(self.start_time / dt))
        if self.profile == "impulse":
            return range(start, start + 1)
        if self.duration < dt:
            raise ValueError("step disturbance duration must be at least one sample")
        return range(start, start + int(round(self.duration / dt)))

    def forces(self, step_index: int, dt: float) -> tuple:
        """(matched force, unmatched torque) acting during ``step_index``."""
        if step_index not in self.active_steps(dt):
            return 0.0, 0.0
        if self.channel == "matched":
            return float(self.magnitude), 0.0
        return 0.0, float(self.magnitude)


@dataclass
class Trajectory:
    states: np.ndarray
    controls: np.ndarray
    times: np.ndarray
    params_used: PlantParams = field(default_factory=PlantParams)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, CONTROL_DIM)
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        n = len(self.controls)
        if len(self.states) != n + 1 or len(self.times) != n + 1:
            raise ValueError(
                f"inconsistent trajectory lengths: {len(self.states)} states, "
                f"{n} controls, {len(self.times)} times"
            )
        if n > 0:
            gaps = np.diff(self.times)
            if np.any(gaps <= 0) or not np.allclose(gaps, self.params_used.dt, rtol=1e-9, atol=1e-12):
                raise ValueError("times must be uniformly spaced by dt")

    def __len__(self):
        return len(self.controls)

    @property
    def dt(self) -> float:
        return self.params_used.dt

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", *STATE_NAMES, "u"])
            for k, (t, s) in enumerate(zip(self.times, self.states)):
                u = repr(float(self.controls[k, 0])) if k < len(self.controls) else ""
                writer.writerow([repr(float(t)), *(repr(float(v)) for v in s), u])

    @classmethod
    def from_csv(cls, path, params: Optional[PlantParams] = None) -> "Trajectory":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        times = [float(r["t"]) for r in rows]
        states = [[float(r[name]) for name in STATE_NAMES] for r in rows]
        controls = [float(r["u"]) for r in rows[:-1]]
        if params is None:
            dt = times[1] - times[0] if len(times) > 1 else PlantParams().dt
            params = PlantParams(dt=dt)
        return cls(states, controls, times, params)


def derivatives(s: np.ndarray, force, torque, params: PlantParams) -> np.ndarray:
    """Continuous-time cart-pole vector field; ``s`` may carry leading batch axes."""
    x_dot, theta, theta_dot = s[..., 1], s[..., 2], s[..., 3]
    M, m = params.cart_mass, params.pendulum_mass
    lc = 0.5 * params.pole_length
    inertia = m * params.pole_length**2 / 3.0  # about the pivot
    sin, cos = np.sin(theta), np.cos(theta)

    a11 = M + m
    a12 = m * lc * cos
    det = a11 * inertia - a12 * a12
    rhs1 = force - params.cart_friction * x_dot + m * lc * sin * theta_dot**2
    rhs2 = torque + m * params.gravity * lc * sin
    x_ddot = (inertia * rhs1 - a12 * rhs2) / det
    theta_ddot = (a11 * rhs2 - a12 * rhs1) / det
    return np.stack([x_dot, x_ddot, theta_dot, theta_ddot], axis=-1)


def integrate(s: np.ndarray, force, torque, params: PlantParams) -> np.ndarray:
    """Zero-order-hold RK4 integration over one sampling interval."""
    h = params.dt / int(params.substeps)
    for _ in range(int(params.substeps)):
        k1 = derivatives(s, force, torque, params)
        k2 = derivatives(s + 0.5 * h * k1, force, torque, params)
        k3 = derivatives(s + 0.5 * h * k2, force, torque, params)
        k4 = derivatives(s + h * k3, force, torque, params)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return s


def step(
    state: StateLike,
    u,
    params: PlantParams,
    disturbance_force=(0.0, 0.0),
    noise_draw=None,
) -> np.ndarray:
    """Advance the plant by one sample.

    The control is clamped to ``[-u_max, u_max]``; the matched disturbance is
    added to the clamped force and the unmatched one enters as a pole torque.
    ``noise_draw`` is added after integration.

    Returns:
        The successor state as an array of shape ``(4,)`` (or ``(B, 4)`` for a
        batch of states).
    """
    s = as_state_array(state)
    u = np.asarray(u, dtype=float)
    if u.ndim and u.shape[-1] == CONTROL_DIM and u.ndim == s.ndim:
        u = u[..., 0]
    if not np.all(np.isfinite(u)):
        raise ValueError(f"non-finite control {u}")
    force = np.clip(u, -params.u_max, params.u_max) + disturbance_force[0]
    nxt = integrate(s, force, disturbance_force[1], params)
    if noise_draw is not None:
        nxt = nxt + np.asarray(noise_draw, dtype=float)
    if not np.all(np.isfinite(nxt)):
        raise DivergenceError("plant state became non-finite", state=s)
    return nxt


def energy(state: StateLike, params: PlantParams) -> np.ndarray:
    """Total mechanical energy (kinetic plus potential, pivot height as reference)."""
    s = as_state_array(state)
    x_dot, theta, theta_dot = s[..., 1], s[..., 2], s[..., 3]
    M, m = params.cart_mass, params.pendulum_mass
    lc = 0.5 * params.pole_length
    inertia = m * params.pole_length**2 / 3.0
    kinetic = (
        0.5 * (M + m) * x_dot**2
        + m * lc * x_dot * theta_dot * np.cos(theta)
        + 0.5 * inertia * theta_dot**2
    )
    return kinetic + m * params.gravity * lc * np.cos(theta)


def sample_params(mean: PlantParams, cov=(0.0025, 0.005), seed=None, max_draws: int = 100) -> PlantParams:
    """Draw pendulum mass and pole length from a diagonal Gaussian around ``mean``.

    Draws with a non-positive mass or length are rejected and resampled.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    var = np.asarray(cov, dtype=float)
    if var.shape != (2,) or np.any(var < 0):
        raise ValueError("cov must hold two non-negative variances (m, l)")
    if np.all(var == 0):
        return mean
    rng = np.random.default_rng(seed)
    centre = np.array([mean.pendulum_mass, mean.pole_length])
    for _ in range(max_draws):
        m, l = centre + np.sqrt(var) * rng.standard_normal(2)
        if m > 0 and l > 0:
            return replace(mean, pendulum_mass=float(m), pole_length=float(l))
    raise RuntimeError(f"no positive (m, l) draw in {max_draws} attempts")


Controller = Callable[[np.ndarray], float]


def rollout(
    controller: Controller,
    x0: StateLike,
    horizon: int,
    params: PlantParams,
    disturbance: Optional[Disturbance] = None,
    seed=None,
    noise: bool = True,
) -> Trajectory:
    """Run ``controller`` in closed loop for ``horizon`` steps.

    Process noise is drawn from ``N(0, diag(noise_cov))`` with a generator
    seeded from ``seed``; ``noise=False`` gives a deterministic rollout.
    Controllers exposing ``reset()`` are reset first.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if hasattr(controller, "reset"):
        controller.reset()
    rng = np.random.default_rng(seed)
    std = params.noise_std
    states = np.empty((horizon + 1, STATE_DIM))
    controls = np.empty((horizon, CONTROL_DIM))
    states[0] = as_state_array(x0)
    for k in range(horizon):
        u = float(np.asarray(controller(states[k].copy()), dtype=float).reshape(-1)[0])
        d = disturbance.forces(k, params.dt) if disturbance is not None else (0.0, 0.0)
        w = std * rng.standard_normal(STATE_DIM) if noise else None
        try:
            states[k + 1] = step(states[k], u, params, d, w)
        except (DivergenceError, ValueError) as exc:
            raise DivergenceError(
                f"rollout diverged at step {k}: {exc}", state=states[k].copy(), step_index=k
            ) from exc
        controls[k, 0] = u
    times = params.dt * np.arange(horizon + 1)
    return Trajectory(states, controls, times, params)


@dataclass
class BatchRollout:
    """Deterministic closed-loop rollouts of many initial conditions at once."""

    states: np.ndarray  # (B, horizon + 1, 4)
    controls: np.ndarray  # (B, horizon)
    times: np.ndarray
    diverged: np.ndarray  # (B,) bool
    params_used: PlantParams

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.controls[i], self.times, self.params_used)


def batch_rollout(
    controller,
    x0s,
    horizon: int,
    params: PlantParams,
    disturbance: Optional[Disturbance] = None,
    divergence_bound: float = 1e6,
) -> BatchRollout:
    """Vectorized noise-free rollouts.

    ``controller`` maps a ``(B, 4)`` state batch to ``(B,)`` controls. Rows whose
    state leaves the finite range (or exceeds ``divergence_bound``) are marked
    diverged and frozen at NaN.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    batch = len(x0s)
    if hasattr(controller, "reset"):
        controller.reset()
    states = np.full((batch, horizon + 1, STATE_DIM), np.nan)
    controls = np.full((batch, horizon), np.nan)
    diverged = np.zeros(batch, dtype=bool)
    states[:, 0] = x0s
    s = x0s.copy()
    for k in range(horizon):
        u = np.asarray(controller(s), dtype=float).reshape(batch)
        u = np.where(diverged, 0.0, u)
        d = disturbance.forces(k, params.dt) if disturbance is not None else (0.0, 0.0)
        force = np.clip(u, -params.u_max, params.u_max) + d[0]
        with np.errstate(all="ignore"):
            s = integrate(np.where(diverged[:, None], 0.0, s), force, d[1], params)
        bad = ~np.all(np.isfinite(s), axis=1) | np.any(np.abs(s) > divergence_bound, axis=1)
        diverged |= bad
        s[diverged] = np.nan
        states[:, k + 1] = s
        controls[:, k] = np.where(diverged, np.nan, u)
        s = np.where(diverged[:, None], 0.0, s)
    if diverged.any():
        logger.debug("%d of %d batch rollouts diverged", int(diverged.sum()), batch)
    return BatchRollout(states, controls, params.dt * np.arange(horizon + 1), diverged, params)
