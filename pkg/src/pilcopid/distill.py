"""Distill an expert policy into PID gains by forward-KL (maximum-likelihood) fitting.

The PID policy is Gaussian, ``u ~ N(K e~, sigma^2)``, where ``e~`` stacks the
proportional, integral and derivative errors of every feedback channel in the
order ``[e_1 .. e_c, i_1 .. i_c, d_1 .. d_c]``. Minimizing the forward KL
divergence from the expert's closed-loop distribution over ``K`` reduces to
minimizing the negative log-likelihood of the expert's controls.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import optim
from .dataset import DEFAULT_CHANNELS, AugmentedDataset, EmptyDatasetError, augment, feature_names
from .plant import DivergenceError, PlantParams, PlantState, as_state_array, rollout, sample_params

logger = logging.getLogger(__name__)

STRUCTURES = ("coupled", "decoupled")


class DataQualityError(ValueError):
    pass


class ConditioningError(np.linalg.LinAlgError):
    pass


def structure_mask(structure: str, n_channels: int = 2, integral: bool = True) -> np.ndarray:
    """Boolean pattern of free gain entries.

    ``coupled``: one input fed by every channel, ``K`` is ``1 x 3c``.
    ``decoupled``: input ``j`` sees only channel ``j``, ``K`` is ``c x 3c``.
    With ``integral=False`` the integral block is pinned to zero (PD law).
    """
    if structure == "coupled":
        mask = np.ones((1, 3 * n_channels), dtype=bool)
    elif structure == "decoupled":
        mask = np.zeros((n_channels, 3 * n_channels), dtype=bool)
        for j in range(n_channels):
            mask[j, [j, n_channels + j, 2 * n_channels + j]] = True
    else:
        raise ValueError(f"unknown PID structure {structure!r}")
    if not integral:
        mask[:, n_channels : 2 * n_channels] = False
    return mask


@dataclass
class PIDGains:
    structure: str
    K: np.ndarray
    sigma_phi: np.ndarray
    channels: tuple = DEFAULT_CHANNELS
    integral: bool = True

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.sigma_phi = np.atleast_1d(np.asarray(self.sigma_phi, dtype=float))
        self.channels = tuple(int(c) for c in self.channels)
        mask = self.mask
        if self.K.shape != mask.shape:
            raise ValueError(f"{self.structure} gains need shape {mask.shape}, got {self.K.shape}")
        if np.any(self.K[~mask] != 0.0):
            raise ValueError("gain entries outside the structure pattern must be zero")
        if self.sigma_phi.shape == (1,) and self.n_inputs > 1:
            self.sigma_phi = np.repeat(self.sigma_phi, self.n_inputs)
        if self.sigma_phi.shape != (self.n_inputs,) or np.any(self.sigma_phi <= 0):
            raise ValueError("sigma_phi must be positive, one per input")

    @property
    def mask(self) -> np.ndarray:
        return structure_mask(self.structure, len(self.channels), self.integral)

    @property
    def n_inputs(self) -> int:
        return self.K.shape[0]

    @property
    def feature_order(self) -> str:
        return ",".join(feature_names(self.channels))

    def _block(self, k):
        c = len(self.channels)
        return self.K[:, k * c : (k + 1) * c]

    @property
    def kp(self):
        return self._block(0)

    @property
    def ki(self):
        return self._block(1)

    @property
    def kd(self):
        return self._block(2)

    def free(self) -> np.ndarray:
        return self.K[self.mask]

    def with_free(self, values) -> "PIDGains":
        K = np.zeros_like(self.K)
        K[self.mask] = values
        return replace(self, K=K)

    def without_integral(self) -> "PIDGains":
        c = len(self.channels)
        K = self.K.copy()
        K[:, c : 2 * c] = 0.0
        return replace(self, K=K, integral=False)

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "feature_order": self.feature_order,
            "channels": list(self.channels),
            "K": [float(v) for v in self.K.ravel()],
            "shape": list(self.K.shape),
            "sigma_phi": [float(v) for v in self.sigma_phi],
            "integral": self.integral,
        }

    @classmethod
    def from_dict(cls, d) -> "PIDGains":
        K = np.array(d["K"], dtype=float).reshape(d["shape"])
        gains = cls(d["structure"], K, d["sigma_phi"], tuple(d["channels"]), bool(d.get("integral", True)))
        if gains.feature_order != d.get("feature_order", gains.feature_order):
            raise ValueError("feature ordering in the gains file does not match its channels")
        return gains

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "PIDGains":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def initial_gains(structure="coupled", channels=DEFAULT_CHANNELS, sigma=1.0, rng=None, integral=True) -> PIDGains:
    """Gains with every free entry drawn from ``N(0, 1)``."""
    rng = np.random.default_rng(rng)
    mask = structure_mask(structure, len(channels), integral)
    K = np.zeros(mask.shape)
    K[mask] = rng.standard_normal(int(mask.sum()))
    return PIDGains(structure, K, np.full(mask.shape[0], sigma), tuple(channels), integral)


def _check(data: AugmentedDataset, gains: PIDGains):
    if np.any(gains.sigma_phi <= 0):
        raise ValueError("sigma_phi must be positive")
    if data.error_features.shape[1] != gains.K.shape[1] or data.controls.shape[1] != gains.n_inputs:
        raise ValueError(
            f"dataset ({data.error_features.shape[1]} features, {data.controls.shape[1]} inputs) "
            f"does not fit gains of shape {gains.K.shape}"
        )


def pid_nll(data: AugmentedDataset, gains: PIDGains) -> float:
    """Negative log-likelihood of the expert controls under the Gaussian PID policy."""
    _check(data, gains)
    resid = data.controls - data.error_features @ gains.K.T
    var = gains.sigma_phi**2
    n = len(data)
    return float(0.5 * n * np.sum(np.log(2 * math.pi * var)) + 0.5 * np.sum(resid**2 / var))


def pid_nll_gradient(data: AugmentedDataset, gains: PIDGains, learn_sigma: bool = False) -> np.ndarray:
    """Gradient of :func:`pid_nll` over the free gain entries (row-major), then ``log sigma``."""
    _check(data, gains)
    resid = data.controls - data.error_features @ gains.K.T
    var = gains.sigma_phi**2
    dK = -(resid / var).T @ data.error_features
    grad = dK[gains.mask]
    if learn_sigma:
        grad = np.concatenate([grad, len(data) - np.sum(resid**2, axis=0) / var])
    return grad


def closed_form_gains(data: AugmentedDataset, structure="coupled", ridge: float = 1e-8, integral: bool = True):
    """Least-squares gains respecting the structure's zero pattern.

    Returns:
        ``(K, sigma)`` with ``sigma`` the root-mean-square residual per input.
    """
    if len(data) == 0:
        raise EmptyDatasetError("empty dataset")
    F, U = data.error_features, data.controls
    if structure == "coupled":
        mask = np.ones((1, F.shape[1]), dtype=bool)
        if not integral:
            c = F.shape[1] // 3
            mask[:, c : 2 * c] = False
    else:
        mask = structure_mask(structure, F.shape[1] // 3, integral)
    if U.shape[1] != mask.shape[0]:
        raise ValueError("number of control inputs does not match the structure")
    K = np.zeros(mask.shape)
    for j in range(mask.shape[0]):
        A = F[:, mask[j]]
        if np.linalg.matrix_rank(A) == A.shape[1]:
            K[j, mask[j]] = np.linalg.lstsq(A, U[:, j], rcond=None)[0]
        else:
            G = A.T @ A
            G = G + ridge * max(np.trace(G), 1.0) * np.eye(len(G))
            if np.linalg.cond(G) > 1e15:
                raise ConditioningError("feature matrix rank deficient even with ridge")
            K[j, mask[j]] = np.linalg.solve(G, A.T @ U[:, j])
    resid = U - F @ K.T
    sigma = np.sqrt(np.mean(resid**2, axis=0))
    return K, sigma


@dataclass
class DistillConfig:
    epsilon: float = 1e-8
    max_iters: int = 2000
    learn_sigma: bool = True
    sigma_init_scale: float = 0.1
    structure: str = "coupled"
    integral: bool = True

    def __post_init__(self):
        if self.epsilon <= 0 or self.max_iters < 1:
            raise ValueError("epsilon must be positive and max_iters at least 1")


@dataclass
class DistillResult:
    gains: PIDGains
    trace: List[float]
    n_iter: int
    converged: bool
    grad_norm: float


def minimize_kld(data: AugmentedDataset, gains0: PIDGains, config: Optional[DistillConfig] = None) -> DistillResult:
    """Minimize the PID negative log-likelihood over the free gain entries.

    ``sigma_phi`` stays at its ``gains0`` value during the descent; with
    ``learn_sigma`` it is then refit to the residual maximum-likelihood value.
    ``trace`` holds the objective at the start and after every accepted step.
    """
    cfg = config or DistillConfig()
    if len(data) == 0:
        raise EmptyDatasetError("empty dataset")

    def fun_grad(k):
        g = gains0.with_free(k)
        return pid_nll(data, g), pid_nll_gradient(data, g)

    f0 = pid_nll(data, gains0)
    if not math.isfinite(f0):
        raise DataQualityError("objective is not finite for this dataset")
    res = optim.minimize(fun_grad, gains0.free(), max_iter=cfg.max_iters, gtol=1e-10 * len(data), ftol=cfg.epsilon, memory=20)
    if not all(math.isfinite(v) for v in res.trace):
        raise DataQualityError("objective became non-finite")
    gains = gains0.with_free(res.x)
    if cfg.learn_sigma:
        resid = data.controls - data.error_features @ gains.K.T
        gains = replace(gains, sigma_phi=np.maximum(np.sqrt(np.mean(resid**2, axis=0)), 1e-12))
    converged = res.converged or res.stalled
    return DistillResult(gains, res.trace, res.n_iter, converged, float(np.linalg.norm(res.grad)))


InitSampler = Callable[[np.random.Generator], np.ndarray]


def gaussian_init_sampler(mean=PlantState(), std=(0.1, 0.1, 0.1, 0.2)) -> InitSampler:
    mu, sd = as_state_array(mean), np.asarray(std, dtype=float)

    def sample(rng):
        return mu + sd * rng.standard_normal(len(mu))

    return sample


def collect_expert_data(
    plant_params: PlantParams,
    policy,
    n_rollouts: int,
    init_sampler: Optional[InitSampler] = None,
    seed=0,
    horizon: int = 100,
    param_cov=(0.0025, 0.005),
    randomize_params: bool = True,
    x_des=PlantState(),
    channels=DEFAULT_CHANNELS,
    return_trajectories: bool = False,
    fall_angle: float = math.pi / 2,
):
    """Roll out the expert from sampled initial states on sampled plants and augment the data.

    A rollout counts as diverged when the simulation blows up or the pole
    tilts beyond ``fall_angle``; diverged rollouts are dropped.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    rng = np.random.default_rng(seed)
    init_sampler = init_sampler or gaussian_init_sampler()
    trajectories, dropped = [], 0
    for _ in range(n_rollouts):
        params = sample_params(plant_params, param_cov, rng) if randomize_params else plant_params
        x0 = init_sampler(rng)
        noise_seed = int(rng.integers(2**31))
        try:
            traj = rollout(policy, x0, horizon, params, seed=noise_seed)
        except DivergenceError as exc:
            dropped += 1
            logger.debug("expert rollout dropped: %s", exc)
            continue
        if np.max(np.abs(traj.states[:, 2] - as_state_array(x_des)[2])) > fall_angle:
            dropped += 1
            continue
        trajectories.append(traj)
    if dropped:
        logger.warning("%d of %d expert rollouts diverged and were dropped", dropped, n_rollouts)
    if not trajectories:
        raise EmptyDatasetError("every expert rollout diverged")
    data = augment(trajectories, x_des, channels, plant_params.dt)
    return (data, trajectories) if return_trajectories else data


@dataclass
class ControllerState:
    integral: np.ndarray
    prev_error: Optional[np.ndarray] = None


def pid_control(gains: PIDGains, controller_state: Optional[ControllerState], e, dt: float, u_max: float = 10.0, anti_windup: bool = False):
    """One PID update.

    ``e`` holds the per-channel errors (leading batch axes allowed). The first
    call uses the current error as its own predecessor, so the derivative
    starts at zero.

    Returns:
        ``(u, new_state)`` with ``u`` clamped to ``[-u_max, u_max]``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = np.asarray(e, dtype=float)
    if controller_state is None:
        controller_state = ControllerState(np.zeros_like(e))
    prev = e if controller_state.prev_error is None else controller_state.prev_error
    integral = controller_state.integral + dt * e
    deriv = (e - prev) / dt
    features = np.concatenate([e, integral, deriv], axis=-1)
    raw = features @ gains.K.T
    u = np.clip(raw, -u_max, u_max)
    if anti_windup and np.any(u != raw):
        saturated = np.any(u != raw, axis=-1, keepdims=True)
        integral = np.where(saturated, controller_state.integral, integral)
        features = np.concatenate([e, integral, deriv], axis=-1)
        u = np.clip(features @ gains.K.T, -u_max, u_max)
    return u, ControllerState(integral, e)


class PIDController:
    """Stateful closed-loop PID; accepts a single state or a ``(B, 4)`` batch."""

    def __init__(self, gains: PIDGains, dt: float, u_max: float = 10.0, x_des=PlantState(), anti_windup=False, zero_integral=False):
        self.gains = gains.without_integral() if zero_integral else gains
        self.dt = dt
        self.u_max = u_max
        self.x_des = as_state_array(x_des)
        self.anti_windup = anti_windup
        self.channels = list(gains.channels)
        self.state: Optional[ControllerState] = None

    def reset(self):
        self.state = None

    def error(self, s) -> np.ndarray:
        return self.x_des[self.channels] - np.asarray(s, dtype=float)[..., self.channels]

    def __call__(self, s):
        u, self.state = pid_control(self.gains, self.state, self.error(s), self.dt, self.u_max, self.anti_windup)
        return u[..., 0] if np.ndim(s) > 1 else u


@dataclass
class DensityGrid:
    a_centers: np.ndarray
    b_centers: np.ndarray
    density: np.ndarray  # (len(a_centers), len(b_centers))
    bandwidth: tuple = (None, None)
    labels: tuple = ("a", "b")

    @property
    def cell_area(self) -> float:
        return float(np.diff(self.a_centers[:2])[0] * np.diff(self.b_centers[:2])[0])

    def mass(self) -> np.ndarray:
        return self.density * self.cell_area

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(
                f"# {self.labels[0]}: {self.a_centers[0]!r} {self.a_centers[-1]!r} {len(self.a_centers)}; "
                f"{self.labels[1]}: {self.b_centers[0]!r} {self.b_centers[-1]!r} {len(self.b_centers)}; "
                f"bandwidth: {self.bandwidth[0]!r} {self.bandwidth[1]!r}\n"
            )
            writer = csv.writer(f)
            writer.writerow([self.labels[0], self.labels[1], "density"])
            for i, a in enumerate(self.a_centers):
                for j, b in enumerate(self.b_centers):
                    writer.writerow([repr(float(a)), repr(float(b)), repr(float(self.density[i, j]))])


def silverman_bandwidth(samples) -> float:
    """Per-axis Silverman rule for a two-dimensional Gaussian product kernel."""
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    sd = samples.std(ddof=1)
    iqr = np.subtract(*np.percentile(samples, [75, 25])) / 1.349
    spread = min(sd, iqr) if iqr > 0 else sd
    return float(spread * n ** (-1.0 / 6.0))


def kde_joint(samples_a, samples_b, grid, bandwidth=None, labels=("a", "b")) -> DensityGrid:
    """Gaussian-kernel density of paired samples evaluated on a regular grid.

    ``grid`` is ``((a_lo, a_hi), (b_lo, b_hi), resolution)``; ``resolution`` may
    be an int or a pair. The result is normalized so that ``sum * cell_area == 1``.
    """
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("need at least two paired samples")
    (a_lo, a_hi), (b_lo, b_hi), res = grid
    na, nb = (res, res) if np.isscalar(res) else res
    ga, gb = np.linspace(a_lo, a_hi, na), np.linspace(b_lo, b_hi, nb)
    if bandwidth is None:
        bandwidth = (silverman_bandwidth(a), silverman_bandwidth(b))
    elif np.isscalar(bandwidth):
        bandwidth = (bandwidth, bandwidth)
    # floor keeps degenerate (zero-spread) samples resolvable on the grid
    ha = max(float(bandwidth[0]), ga[1] - ga[0])
    hb = max(float(bandwidth[1]), gb[1] - gb[0])
    if ha <= 0 or hb <= 0:
        raise ValueError("bandwidth must be positive")
    Ka = np.exp(-0.5 * ((ga[:, None] - a[None]) / ha) ** 2) / (math.sqrt(2 * math.pi) * ha)
    Kb = np.exp(-0.5 * ((gb[:, None] - b[None]) / hb) ** 2) / (math.sqrt(2 * math.pi) * hb)
    density = Ka @ Kb.T / len(a)
    total = density.sum() * (ga[1] - ga[0]) * (gb[1] - gb[0])
    if total <= 0:
        raise ValueError("no probability mass falls on the grid")
    return DensityGrid(ga, gb, density / total, (ha, hb), labels)


def kld_discrete(p_grid, q_grid, floor: float = 1e-12) -> float:
    """KL divergence ``sum p log(p / q)`` between two discrete distributions.

    Both inputs are rescaled to unit mass (so density grids on a shared
    grid can be passed directly); ``q`` is floored where ``p > 0``.
    """
    p = np.asarray(getattr(p_grid, "density", p_grid), dtype=float)
    q = np.asarray(getattr(q_grid, "density", q_grid), dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"grid shapes differ: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    p = p / p.sum()
    q = q / q.sum()
    support = p > 0
    value = np.sum(p[support] * np.log(p[support] / np.maximum(q[support], floor)))
    # flooring can push the sum a hair below zero
    return float(max(value, 0.0))


def pid_control_samples(data: AugmentedDataset, gains: PIDGains, u_max: float, seed=0) -> np.ndarray:
    """Controls drawn from the Gaussian PID policy on the dataset's error features, clamped."""
    rng = np.random.default_rng(seed)
    mean = data.error_features @ gains.K.T
    u = mean + gains.sigma_phi * rng.standard_normal(mean.shape)
    return np.clip(u, -u_max, u_max)


def joint_density_grids(data: AugmentedDataset, gains_initial: PIDGains, gains_final: PIDGains, u_max: float, resolution=80, seed=0):
    """Expert / initial-PID / final-PID joint densities of (u, x) and (u, theta).

    All six grids share the control axis ``[-u_max, u_max]`` and a state axis
    spanning the expert data with a margin, so their KL divergences compare.
    """
    if data.states is None:
        raise ValueError("dataset carries no states")
    u_expert = np.clip(data.controls[:, 0], -u_max, u_max)
    u_init = pid_control_samples(data, gains_initial, u_max, seed)[:, 0]
    u_final = pid_control_samples(data, gains_final, u_max, seed)[:, 0]
    grids = {}
    for idx, name in ((0, "x"), (2, "theta")):
        s = data.states[:, idx]
        lo, hi = s.min(), s.max()
        pad = 0.25 * (hi - lo) + 1e-6
        spec = ((-u_max, u_max), (lo - pad, hi + pad), resolution)
        bw = (silverman_bandwidth(u_expert), silverman_bandwidth(s))
        for tag, u in (("expert", u_expert), ("initial", u_init), ("final", u_final)):
            grids[(tag, name)] = kde_joint(u, s, spec, bandwidth=bw, labels=("u", name))
    return grids
