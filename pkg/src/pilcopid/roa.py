"""Region of attraction from closed-loop trajectory data.

Each initial condition in the ``(theta, theta_dot)`` slice (cart at rest at
the origin) is rolled out without noise. The accumulated squared state norm
serves as a converse-Lyapunov value; a quadratic form is fitted to the
converged samples and its largest sublevel set free of non-converged samples
is reported as the region of attraction.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .plant import BatchRollout, PlantParams, PlantState, Trajectory, as_state_array, batch_rollout

FEATURES = ("theta^2", "theta*theta_dot", "theta_dot^2", "theta", "theta_dot")


class FitQualityError(ValueError):
    pass


class EmptyRoaError(ValueError):
    pass


@dataclass
class LyapunovSample:
    theta0: float
    theta_dot0: float
    V: float
    converged: bool
    trajectory_ref: Optional[int] = None

    def __post_init__(self):
        if not self.V >= 0:
            raise ValueError("V must be non-negative")
        if math.isfinite(self.V) != bool(self.converged):
            raise ValueError("V is finite exactly when the rollout converged")


def _tail_start(n_states: int) -> int:
    return n_states - max(1, int(math.ceil(0.1 * n_states)))


def lyapunov_values(states: np.ndarray, x_des, dt: float, tail_tol: float = 0.05):
    """Vectorized :func:`lyapunov_value` over ``(B, T, n)`` state arrays."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[None]
    x_des = np.asarray(x_des, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        sq = np.sum((states - x_des) ** 2, axis=-1)
        V = np.sum(sq, axis=1) * dt
        norms = np.sqrt(sq[:, _tail_start(states.shape[1]) :])
        converged = np.all(np.isfinite(sq), axis=1) & np.all(norms < tail_tol, axis=1)
    V = np.where(converged, V, np.inf)
    return V, converged


def lyapunov_value(traj, x_des=PlantState(), dt: Optional[float] = None, tail_tol: float = 0.05):
    """Converse-Lyapunov value ``sum ||s - s_des||^2 dt`` of one trajectory.

    ``traj`` is a :class:`Trajectory` or an array of states. Convergence means
    the state stays within ``tail_tol`` of ``x_des`` over the final 10% of
    steps. Non-converged or diverged trajectories get ``V = inf``.
    """
    if isinstance(traj, Trajectory):
        states, dt = traj.states, traj.dt if dt is None else dt
    else:
        states = np.asarray(traj, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
    if dt is None or dt <= 0:
        raise ValueError("a positive dt is required")
    x_des = as_state_array(x_des) if states.shape[-1] == 4 else np.zeros(states.shape[-1])
    V, conv = lyapunov_values(states, x_des, dt, tail_tol)
    return float(V[0]), bool(conv[0])


def sample_grid(theta_range=(-0.6, 0.6), theta_dot_range=(-2.0, 2.0), resolution=(41, 41)) -> np.ndarray:
    """Uniform grid of initial states ``[0, 0, theta, theta_dot]``, shape ``(n, 4)``."""
    nt, nd = (resolution, resolution) if np.isscalar(resolution) else resolution
    if nt < 1 or nd < 1 or theta_range[0] > theta_range[1] or theta_dot_range[0] > theta_dot_range[1]:
        raise ValueError("ranges must be non-empty")
    th, thd = np.meshgrid(np.linspace(*theta_range, nt), np.linspace(*theta_dot_range, nd), indexing="ij")
    grid = np.zeros((th.size, 4))
    grid[:, 2] = th.ravel()
    grid[:, 3] = thd.ravel()
    return grid


def quadratic_features(theta, theta_dot) -> np.ndarray:
    theta, theta_dot = np.asarray(theta, dtype=float), np.asarray(theta_dot, dtype=float)
    return np.stack([theta**2, theta * theta_dot, theta_dot**2, theta, theta_dot], axis=-1)


@dataclass
class LyapunovFit:
    """``V*(q) = q^T P q + l^T q`` over ``q = (theta, theta_dot)``; zero at the origin."""

    coeffs: np.ndarray
    r2: float

    @property
    def P(self) -> np.ndarray:
        a, b, c = self.coeffs[:3]
        return np.array([[a, b / 2], [b / 2, c]])

    @property
    def linear(self) -> np.ndarray:
        return np.asarray(self.coeffs[3:5])

    @property
    def positive_definite(self) -> bool:
        return bool(np.all(np.linalg.eigvalsh(self.P) > 0))

    def __call__(self, theta, theta_dot):
        return quadratic_features(theta, theta_dot) @ self.coeffs

    def to_dict(self) -> dict:
        return {"features": list(FEATURES), "coeffs": [float(c) for c in self.coeffs], "r2": self.r2}


def fit_lyapunov(samples: Sequence[LyapunovSample], require_pd: bool = True) -> LyapunovFit:
    """Least-squares quadratic fit of ``V`` over the converged samples."""
    conv = [s for s in samples if s.converged]
    if len(conv) < 6:
        raise FitQualityError(f"need at least 6 converged samples, got {len(conv)}")
    A = quadratic_features([s.theta0 for s in conv], [s.theta_dot0 for s in conv])
    v = np.array([s.V for s in conv])
    coeffs = np.linalg.lstsq(A, v, rcond=None)[0]
    resid = v - A @ coeffs
    ss_tot = np.sum((v - v.mean()) ** 2)
    r2 = float(1.0 - np.sum(resid**2) / ss_tot) if ss_tot > 0 else 1.0
    fit = LyapunovFit(coeffs, r2)
    if require_pd and not fit.positive_definite:
        raise FitQualityError("quadratic part is indefinite; refine or widen the sample grid")
    return fit


def level_set(fit: LyapunovFit, samples: Sequence[LyapunovSample], n_boundary: int = 32, box=None):
    """Maximal level ``c*`` whose sublevel set holds only converged samples.

    With ``box = ((theta_lo, theta_hi), (theta_dot_lo, theta_dot_hi))`` the
    level is further capped so that the ellipse stays inside the sampled
    rectangle; beyond it no sample can refute the estimate.

    Returns:
        ``(c_star, boundary)`` with ``boundary`` of shape ``(n_boundary, 2)``
        lying on the ellipse ``V* = c*``.
    """
    if not fit.positive_definite:
        raise FitQualityError("level sets need a positive-definite quadratic part")
    th = np.array([s.theta0 for s in samples])
    thd = np.array([s.theta_dot0 for s in samples])
    conv = np.array([s.converged for s in samples], dtype=bool)
    if not conv.any():
        raise EmptyRoaError("no converged samples")
    vstar = fit(th, thd)
    if conv.all():
        c_star = float(vstar.max())
    else:
        v_bad = vstar[~conv].min()
        below = vstar[conv & (vstar < v_bad)]
        if below.size == 0:
            raise EmptyRoaError("every sublevel set contains a non-converged sample")
        c_star = float(below.max())
    if box is not None:
        c_star = min(c_star, box_level(fit, box))
    return c_star, ellipse_points(fit, c_star, n_boundary)


def box_level(fit: LyapunovFit, box) -> float:
    """Largest level whose ellipse fits inside ``box``."""
    P = fit.P
    q0 = -0.5 * np.linalg.solve(P, fit.linear)
    half_width = np.sqrt(np.diag(np.linalg.inv(P)))  # ellipse extent per unit radius
    lo, hi = np.array([b[0] for b in box]), np.array([b[1] for b in box])
    room = np.minimum(q0 - lo, hi - q0)
    if np.any(room <= 0):
        raise EmptyRoaError("the minimum of V* lies outside the sampled box")
    r = float(np.min(room / half_width))
    return r * r - float(q0 @ P @ q0)


def ellipse_points(fit: LyapunovFit, c: float, n: int = 32) -> np.ndarray:
    """Points ``q`` with ``V*(q) = c``, evenly spaced in angle."""
    P = fit.P
    q0 = -0.5 * np.linalg.solve(P, fit.linear)
    r2 = c + q0 @ P @ q0
    if r2 <= 0:
        raise EmptyRoaError(f"level {c} lies below the minimum of V*")
    L = np.linalg.cholesky(P)
    phi = 2 * np.pi * np.arange(n) / n
    circle = np.stack([np.cos(phi), np.sin(phi)])
    return (q0[:, None] + math.sqrt(r2) * np.linalg.solve(L.T, circle)).T


@dataclass
class BoundaryReport:
    points: np.ndarray
    converged: np.ndarray
    rollouts: BatchRollout

    @property
    def fraction(self) -> float:
        return float(np.mean(self.converged)) if len(self.converged) else 0.0


ControllerFactory = Callable[[], Callable]


def simulate_grid(controller_factory: ControllerFactory, initial_states, params: PlantParams, horizon: int = 200, x_des=PlantState(), tail_tol=0.05):
    """Deterministic rollouts of all initial states; returns ``(V, converged, rollouts)``."""
    rollouts = batch_rollout(controller_factory(), initial_states, horizon, params)
    V, conv = lyapunov_values(rollouts.states, as_state_array(x_des), params.dt, tail_tol)
    return V, conv, rollouts


def verify_boundary(controller_factory: ControllerFactory, points, params: PlantParams, horizon: int = 200, x_des=PlantState(), tail_tol=0.05) -> BoundaryReport:
    """Roll out from every ``(theta, theta_dot)`` point and flag convergence."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise ValueError("no boundary points")
    x0 = np.zeros((len(points), 4))
    x0[:, 2:] = points
    _, conv, rollouts = simulate_grid(controller_factory, x0, params, horizon, x_des, tail_tol)
    return BoundaryReport(points, conv, rollouts)


@dataclass
class RoaEstimate:
    samples: List[LyapunovSample]
    fit: LyapunovFit
    c_star: float
    boundary_points: np.ndarray
    report: Optional[BoundaryReport] = None
    sharpness: Optional[float] = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["theta0", "theta_dot0", "V", "converged"])
            for s in self.samples:
                writer.writerow([repr(s.theta0), repr(s.theta_dot0), repr(s.V), int(s.converged)])

    def summary(self) -> dict:
        out = {
            "lyapunov": self.fit.to_dict(),
            "c_star": self.c_star,
            "n_samples": len(self.samples),
            "n_converged": sum(s.converged for s in self.samples),
            "boundary_points": self.boundary_points.tolist(),
        }
        if self.report is not None:
            out["boundary_converged"] = [bool(c) for c in self.report.converged]
            out["boundary_fraction"] = self.report.fraction
        if self.sharpness is not None:
            out["outer_fraction_2x"] = self.sharpness
        return out

    def write_summary(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=1)


def estimate_roa(
    controller_factory: ControllerFactory,
    params: PlantParams,
    theta_range=(-0.6, 0.6),
    theta_dot_range=(-2.0, 2.0),
    resolution=(41, 41),
    horizon: int = 200,
    tail_tol: float = 0.05,
    n_boundary: int = 32,
    verify: bool = True,
) -> RoaEstimate:
    """Grid rollouts, quadratic fit, maximal level set and boundary verification."""
    grid = sample_grid(theta_range, theta_dot_range, resolution)
    V, conv, _ = simulate_grid(controller_factory, grid, params, horizon, tail_tol=tail_tol)
    samples = [LyapunovSample(float(g[2]), float(g[3]), float(v), bool(c), i) for i, (g, v, c) in enumerate(zip(grid, V, conv))]
    fit = fit_lyapunov(samples)
    c_star, boundary = level_set(fit, samples, n_boundary, box=(theta_range, theta_dot_range))
    est = RoaEstimate(samples, fit, c_star, boundary)
    if verify:
        est.report = verify_boundary(controller_factory, boundary, params, horizon, tail_tol=tail_tol)
        # points twice as far out should not all converge, else the grid is too narrow
        outer = verify_boundary(controller_factory, 2 * boundary, params, horizon, tail_tol=tail_tol)
        est.sharpness = outer.fraction
    return est
