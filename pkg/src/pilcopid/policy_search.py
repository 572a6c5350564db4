"""Model-based policy search: RBF policy, saturating cost, and the outer learning loop.

The multi-step prediction propagates a Gaussian state through the policy and
the GP model by moment matching; its gradient with respect to the policy
parameters comes from reverse-mode differentiation of that propagation.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Protocol

import numpy as np

from . import gp as gplib
from . import optim
from ._jax import jax, jnp
from .dataset import gp_training_pairs
from .plant import (
    STATE_DIM,
    DivergenceError,
    PlantParams,
    PlantState,
    Trajectory,
    as_state_array,
    rollout,
    sample_params,
)

logger = logging.getLogger(__name__)


class PropagationError(RuntimeError):
    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class PilcoAbort(RuntimeError):
    """Loop aborted; ``result`` holds everything gathered so far."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class PolicyParams:
    """Squashed radial-basis-function network policy."""

    centers: np.ndarray
    weights: np.ndarray
    lengthscales: np.ndarray
    u_max: float = 10.0

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(len(self.centers), -1)
        self.lengthscales = np.asarray(self.lengthscales, dtype=float).reshape(self.centers.shape[1])
        if len(self.centers) < 1:
            raise ValueError("at least one basis function is required")
        if np.any(self.lengthscales <= 0) or self.u_max <= 0:
            raise ValueError("lengthscales and u_max must be positive")

    @property
    def n_basis(self) -> int:
        return len(self.centers)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.centers.ravel(), self.weights.ravel(), np.log(self.lengthscales)])

    def from_vector(self, phi) -> "PolicyParams":
        phi = np.asarray(phi, dtype=float)
        nc, nw = self.centers.size, self.weights.size
        return PolicyParams(
            phi[:nc].reshape(self.centers.shape),
            phi[nc : nc + nw].reshape(self.weights.shape),
            np.exp(phi[nc + nw :]),
            self.u_max,
        )

    def __call__(self, state):
        return policy_eval(self, state)

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "weights": self.weights.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "u_max": float(self.u_max),
        }

    @classmethod
    def from_dict(cls, d) -> "PolicyParams":
        return cls(np.array(d["centers"]), np.array(d["weights"]), np.array(d["lengthscales"]), d["u_max"])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def squash(z, u_max):
    """Smooth saturation onto ``[-u_max, u_max]``."""
    return u_max * (9.0 * np.sin(z) + np.sin(3.0 * z)) / 8.0


def policy_eval(policy: PolicyParams, state) -> np.ndarray:
    s = np.atleast_2d(as_state_array(state))
    r = (s[:, None, :] - policy.centers[None]) / policy.lengthscales
    z = np.exp(-0.5 * np.sum(r * r, axis=-1)) @ policy.weights  # (B, N)
    u = squash(z, policy.u_max)
    return u[0] if np.ndim(as_state_array(state)) == 1 else u


def random_policy(
    n_basis: int,
    init_mean,
    center_std,
    weight_std: float,
    lengthscales,
    u_max: float,
    rng,
) -> PolicyParams:
    """Policy with weights drawn from ``N(0, weight_std^2)`` and centers scattered around ``init_mean``."""
    rng = np.random.default_rng(rng)
    mu = as_state_array(init_mean)
    centers = mu + np.asarray(center_std, float) * rng.standard_normal((n_basis, STATE_DIM))
    weights = weight_std * rng.standard_normal((n_basis, 1))
    return PolicyParams(centers, weights, np.asarray(lengthscales, float), u_max)


@dataclass
class CostConfig:
    """Saturating cost on cart position and (linearized) pole-tip position.

    The immediate cost is ``1 - exp(-|s - target|_W^2 / (2 width^2))`` with
    ``W = e_x e_x^T + v v^T`` and ``v = [1, 0, pole_length, 0]`` so both the
    cart and the pole tip are pulled to the origin.
    """

    target: PlantState = field(default_factory=PlantState)
    width: float = 0.25
    horizon: int = 80
    init_mean: PlantState = field(default_factory=PlantState)
    init_cov: np.ndarray = field(default_factory=lambda: np.diag([0.05, 0.05, 0.1, 0.1]) ** 2)
    pole_length: float = 0.5

    def __post_init__(self):
        self.init_cov = np.asarray(self.init_cov, dtype=float)
        if self.init_cov.ndim == 1:
            self.init_cov = np.diag(self.init_cov)
        if self.width <= 0:
            raise ValueError("cost width must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if not np.allclose(self.init_cov, self.init_cov.T) or np.linalg.eigvalsh(self.init_cov).min() < -1e-12:
            raise ValueError("init_cov must be symmetric positive semidefinite")

    @property
    def weight_matrix(self) -> np.ndarray:
        v = np.array([1.0, 0.0, self.pole_length, 0.0])
        ex = np.array([1.0, 0.0, 0.0, 0.0])
        return np.outer(ex, ex) + np.outer(v, v)

    def to_dict(self) -> dict:
        return {
            "target": list(as_state_array(self.target)),
            "width": self.width,
            "horizon": self.horizon,
            "init_mean": list(as_state_array(self.init_mean)),
            "init_cov": self.init_cov.tolist(),
            "pole_length": self.pole_length,
        }

    @classmethod
    def from_dict(cls, d) -> "CostConfig":
        d = dict(d)
        for key in ("target", "init_mean"):
            if key in d:
                d[key] = PlantState.from_array(d[key])
        return cls(**d)


def immediate_cost(states, cost: CostConfig) -> np.ndarray:
    """Realized saturating cost of concrete states (last axis is the state)."""
    d = np.asarray(states, dtype=float) - as_state_array(cost.target)
    q = np.einsum("...i,ij,...j->...", d, cost.weight_matrix, d)
    return 1.0 - np.exp(-0.5 * q / cost.width**2)


def _expected_cost(m, S, target, Wt):
    eye = jnp.eye(m.shape[0])
    A = eye + Wt @ S
    d = m - target
    M = jnp.linalg.solve(A, Wt)  # (I + W S)^{-1} W, symmetric
    _, logdet = jnp.linalg.slogdet(A)
    return 1.0 - jnp.exp(-0.5 * logdet - 0.5 * d @ M @ d)


def expected_cost(state_mean, state_cov, cost: CostConfig) -> float:
    """Closed-form expectation of the saturating cost under ``N(state_mean, state_cov)``."""
    Wt = cost.weight_matrix / cost.width**2
    value = _expected_cost(
        jnp.asarray(as_state_array(state_mean)),
        jnp.asarray(state_cov, dtype=float),
        jnp.asarray(as_state_array(cost.target)),
        jnp.asarray(Wt),
    )
    return float(value)


def _squash_moments(m, v, u_max):
    """Mean, variance and E[d squash/dz] of the squashed output for z ~ N(m, v)."""
    e1, e9 = jnp.exp(-0.5 * v), jnp.exp(-4.5 * v)
    mean = u_max * (9.0 * e1 * jnp.sin(m) + e9 * jnp.sin(3.0 * m)) / 8.0
    e_sin2 = 0.5 * (1.0 - jnp.exp(-2.0 * v) * jnp.cos(2.0 * m))
    e_sin_sin3 = 0.5 * (jnp.exp(-2.0 * v) * jnp.cos(2.0 * m) - jnp.exp(-8.0 * v) * jnp.cos(4.0 * m))
    e_sin3_2 = 0.5 * (1.0 - jnp.exp(-18.0 * v) * jnp.cos(6.0 * m))
    second = u_max**2 * (81.0 * e_sin2 + 18.0 * e_sin_sin3 + e_sin3_2) / 64.0
    slope = u_max * (9.0 * e1 * jnp.cos(m) + 3.0 * e9 * jnp.cos(3.0 * m)) / 8.0
    return mean, jnp.maximum(second - mean**2, 0.0), slope


def policy_moments(centers, weights, lengthscales, u_max, m, S):
    """Gaussian approximation of the joint (state, control) distribution."""
    mz, Sz, Csz = gplib.moment_match(
        centers, weights.T, lengthscales[None], jnp.ones(1), m, S
    )
    mu_u, var_u, slope = _squash_moments(mz[0], Sz[0, 0], u_max)
    Csu = Csz[:, 0] * slope
    mean = jnp.concatenate([m, mu_u[None]])
    cov = jnp.block([[S, Csu[:, None]], [Csu[None, :], var_u[None, None]]])
    return mean, cov


def _propagate(policy_arrays, model, m0, S0, target, Wt, horizon, u_max):
    centers, weights, lengthscales = policy_arrays

    @jax.checkpoint
    def one_step(carry, _):
        m, S = carry
        mt, St = policy_moments(centers, weights, lengthscales, u_max, m, S)
        md, Sd, Cd = gplib.moment_match(m=mt, S=St, **model)
        Csd = Cd[: m.shape[0]]
        m1 = m + md
        S1 = S + Sd + Csd + Csd.T
        S1 = 0.5 * (S1 + S1.T)
        return (m1, S1), (m1, S1, _expected_cost(m1, S1, target, Wt))

    c0 = _expected_cost(m0, S0, target, Wt)
    if horizon == 0:
        return m0[None], S0[None], c0[None]
    _, (ms, Ss, cs) = jax.lax.scan(one_step, (m0, S0), None, length=horizon)
    means = jnp.concatenate([m0[None], ms])
    covs = jnp.concatenate([S0[None], Ss])
    costs = jnp.concatenate([c0[None], cs])
    return means, covs, costs


def _unpack(phi, n_basis, dim):
    nc = n_basis * dim
    centers = phi[:nc].reshape(n_basis, dim)
    weights = phi[nc : nc + n_basis].reshape(n_basis, 1)
    lengthscales = jnp.exp(phi[nc + n_basis :])
    return centers, weights, lengthscales


def _total_cost(phi, model, m0, S0, target, Wt, *, n_basis, horizon, u_max):
    policy_arrays = _unpack(phi, n_basis, m0.shape[0])
    _, _, costs = _propagate(policy_arrays, model, m0, S0, target, Wt, horizon, u_max)
    return jnp.sum(costs)


_value_and_grad = jax.jit(
    jax.value_and_grad(_total_cost), static_argnames=("n_basis", "horizon", "u_max")
)
_value = jax.jit(_total_cost, static_argnames=("n_basis", "horizon", "u_max"))


@jax.jit
def _propagate_jit(policy_arrays, model, m0, S0, target, Wt, horizon_marker, u_max):
    return _propagate(policy_arrays, model, m0, S0, target, Wt, horizon_marker.shape[0], u_max)


@dataclass
class RolloutPrediction:
    means: np.ndarray  # (T + 1, 4)
    covs: np.ndarray  # (T + 1, 4, 4)
    costs: np.ndarray  # (T + 1,)

    @property
    def J(self) -> float:
        return float(np.sum(self.costs))


def _cost_arrays(cost: CostConfig):
    return (
        jnp.asarray(as_state_array(cost.init_mean)),
        jnp.asarray(cost.init_cov),
        jnp.asarray(as_state_array(cost.target)),
        jnp.asarray(cost.weight_matrix / cost.width**2),
    )


def check_covariances(covs, tol: float = 1e-8) -> None:
    for k, S in enumerate(covs):
        scale = max(1.0, float(np.trace(S)))
        if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -tol * scale:
            raise PropagationError(f"state covariance lost positive semidefiniteness at step {k}", k)


def predict_rollout(model: gplib.GPModel, policy: PolicyParams, cost: CostConfig) -> RolloutPrediction:
    """Propagate ``N(init_mean, init_cov)`` for ``cost.horizon`` steps through policy and model."""
    m0, S0, target, Wt = _cost_arrays(cost)
    arrays = (jnp.asarray(policy.centers), jnp.asarray(policy.weights), jnp.asarray(policy.lengthscales))
    means, covs, costs = _propagate_jit(
        arrays, gplib.model_arrays(model), m0, S0, target, Wt, jnp.zeros(cost.horizon), float(policy.u_max)
    )
    prediction = RolloutPrediction(np.asarray(means), np.asarray(covs), np.asarray(costs))
    check_covariances(prediction.covs)
    return prediction


def rollout_objective(model: gplib.GPModel, policy: PolicyParams, cost: CostConfig):
    """``phi -> (J, dJ/dphi)`` over the flattened parameters of ``policy``'s shape."""
    model_arrays = gplib.model_arrays(model)
    m0, S0, target, Wt = _cost_arrays(cost)
    static = dict(n_basis=policy.n_basis, horizon=cost.horizon, u_max=float(policy.u_max))

    def fun_grad(phi):
        J, g = _value_and_grad(jnp.asarray(phi), model_arrays, m0, S0, target, Wt, **static)
        return float(J), np.asarray(g)

    def fun(phi):
        return float(_value(jnp.asarray(phi), model_arrays, m0, S0, target, Wt, **static))

    return fun_grad, fun


def numerical_policy_gradient(model, policy, cost, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the predicted cost-to-go."""
    _, fun = rollout_objective(model, policy, cost)
    return optim.central_difference(fun, policy.to_vector(), eps)


@dataclass
class OptConfig:
    max_iter: int = 60
    grad_tol_scale: float = 1e-2
    numerical_gradient: bool = False
    fd_eps: float = 1e-6


@dataclass
class OptInfo:
    J_initial: float
    J: float
    grad_norm: float
    n_iter: int
    trace: List[float]
    stalled: bool
    converged: bool


def optimize_policy(model, policy0: PolicyParams, cost: CostConfig, opt_config: Optional[OptConfig] = None, objective=None):
    """Descend the predicted cost-to-go from ``policy0``.

    ``objective`` optionally replaces the model-based ``phi -> (J, grad)``
    (used to plug in surrogate problems). Returns ``(policy, OptInfo)``; the
    returned policy never has a higher objective than ``policy0``.
    """
    cfg = opt_config or OptConfig()
    if objective is None:
        fun_grad, fun = rollout_objective(model, policy0, cost)
        if cfg.numerical_gradient:
            def objective(phi):
                return fun(phi), optim.central_difference(fun, phi, cfg.fd_eps)
        else:
            objective = fun_grad
    phi0 = policy0.to_vector()
    J0, _ = objective(phi0)
    res = optim.minimize(objective, phi0, max_iter=cfg.max_iter, gtol=cfg.grad_tol_scale * (1.0 + abs(J0)))
    if res.stalled and res.n_iter == 0:
        logger.warning("policy optimization stalled at the initial parameters")
    info = OptInfo(J0, res.fun, float(np.linalg.norm(res.grad)), res.n_iter, res.trace, res.stalled, res.converged)
    return policy0.from_vector(res.x), info


class PolicyBackend(Protocol):
    """Model learner plus policy improver used by :func:`pilco_loop`."""

    def learn_model(self, trajectories: List[Trajectory], seed: int): ...

    def improve_policy(self, model, policy: PolicyParams, cost: CostConfig): ...


@dataclass
class PilcoBackend:
    """GP dynamics model with moment-matching policy evaluation."""

    gp_restarts: int = 3
    gp_max_points: int = 400
    gp_max_iter: int = 200
    opt: OptConfig = field(default_factory=OptConfig)

    def learn_model(self, trajectories, seed):
        X, Y = gp_training_pairs(trajectories)
        return gplib.fit(X, Y, restarts=self.gp_restarts, seed=seed, max_points=self.gp_max_points, max_iter=self.gp_max_iter)

    def improve_policy(self, model, policy, cost):
        new_policy, info = optimize_policy(model, policy, cost, self.opt)
        return new_policy, info


@dataclass
class LoopConfig:
    n_iterations: int = 15
    n_basis: int = 50
    init_weight_std: float = 0.1
    center_std: tuple = (0.2, 0.2, 0.2, 0.4)
    init_lengthscales: tuple = (0.2, 0.2, 0.2, 0.4)
    task_threshold: float = 0.2
    randomize_params: bool = True
    param_cov: tuple = (0.0025, 0.005)
    gp_restarts: int = 3
    gp_max_points: int = 400
    gp_max_iter: int = 200
    opt: OptConfig = field(default_factory=OptConfig)
    max_rollout_retries: int = 3

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["opt"] = dict(self.opt.__dict__)
        d["center_std"] = list(self.center_std)
        d["init_lengthscales"] = list(self.init_lengthscales)
        d["param_cov"] = list(self.param_cov)
        return d

    @classmethod
    def from_dict(cls, d) -> "LoopConfig":
        d = dict(d)
        if "opt" in d:
            d["opt"] = OptConfig(**d["opt"])
        for key in ("center_std", "init_lengthscales", "param_cov"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class IterationLog:
    iteration: int
    J_predicted: float
    J_realized: float
    mean_cost: float
    n_transitions: int


@dataclass
class PilcoResult:
    policy: PolicyParams
    trajectories: List[Trajectory]
    log: List[IterationLog]
    model: Optional[gplib.GPModel] = None
    task_learned: bool = False

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "J_predicted", "J_realized"])
            for row in self.log:
                writer.writerow([row.iteration, repr(row.J_predicted), repr(row.J_realized)])


def sample_initial_state(cost: CostConfig, rng) -> np.ndarray:
    return rng.multivariate_normal(as_state_array(cost.init_mean), cost.init_cov)


def pilco_loop(
    plant_params: PlantParams,
    cost: CostConfig,
    loop_config: Optional[LoopConfig] = None,
    seed: int = 0,
    backend: Optional[PolicyBackend] = None,
) -> PilcoResult:
    """Learn a model, improve the policy against it, collect more data, repeat.

    Iteration 0 rolls out a random policy. Each later iteration refits the
    model on all data, optimizes the policy, and rolls it out on a plant whose
    pendulum mass and length are resampled. Stops at ``n_iterations`` or once
    the mean realized cost of the latest rollout is below ``task_threshold``.
    """
    cfg = loop_config or LoopConfig()
    if backend is None:
        backend = PilcoBackend(cfg.gp_restarts, cfg.gp_max_points, cfg.gp_max_iter, cfg.opt)
    rng = np.random.default_rng(seed)
    policy = random_policy(
        cfg.n_basis, cost.init_mean, cfg.center_std, cfg.init_weight_std, cfg.init_lengthscales, plant_params.u_max, rng
    )
    trajectories: List[Trajectory] = []
    log: List[IterationLog] = []
    result = PilcoResult(policy, trajectories, log)

    def collect(pol, iteration, J_pred):
        for _ in range(cfg.max_rollout_retries):
            params = sample_params(plant_params, cfg.param_cov, rng) if cfg.randomize_params else plant_params
            x0 = sample_initial_state(cost, rng)
            try:
                traj = rollout(pol, x0, cost.horizon, params, seed=int(rng.integers(2**31)))
            except DivergenceError as exc:
                logger.warning("iteration %d rollout diverged: %s", iteration, exc)
                continue
            costs = immediate_cost(traj.states, cost)
            trajectories.append(traj)
            log.append(
                IterationLog(iteration, J_pred, float(costs.sum()), float(costs.mean()), sum(len(t) for t in trajectories))
            )
            logger.info(
                "iteration %d: J_pred %.3f J_real %.3f mean cost %.3f", iteration, J_pred, costs.sum(), costs.mean()
            )
            return float(costs.mean())
        raise PilcoAbort(f"rollout diverged {cfg.max_rollout_retries} times in iteration {iteration}", result)

    collect(policy, 0, float("nan"))
    for it in range(1, cfg.n_iterations + 1):
        try:
            model = backend.learn_model(trajectories, int(rng.integers(2**31)))
        except (gplib.FitError, gplib.ConditioningError) as exc:
            raise PilcoAbort(f"model learning failed in iteration {it}: {exc}", result) from exc
        policy, info = backend.improve_policy(model, policy, cost)
        result.policy, result.model = policy, model
        mean_cost = collect(policy, it, info.J)
        if mean_cost < cfg.task_threshold:
            result.task_learned = True
            break
    return result
