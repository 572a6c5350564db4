"""Gaussian-process transition model with squared-exponential ARD kernels.

One independent GP head is fitted per output dimension; all heads share the
training inputs. Hyperparameters are optimized in log space.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import optim
from ._jax import jax, jnp

logger = logging.getLogger(__name__)

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class ConditioningError(np.linalg.LinAlgError):
    pass


class FitError(RuntimeError):
    pass


@dataclass
class KernelHyperparams:
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        self.signal_variance = float(self.signal_variance)
        self.noise_variance = float(self.noise_variance)
        if np.any(self.lengthscales <= 0) or self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ValueError("kernel hyperparameters must be strictly positive")

    def to_log(self) -> np.ndarray:
        return np.log(np.concatenate([self.lengthscales, [self.signal_variance, self.noise_variance]]))

    @classmethod
    def from_log(cls, log_params) -> "KernelHyperparams":
        p = np.exp(np.asarray(log_params, dtype=float))
        return cls(p[:-2], p[-2], p[-1])

    def to_dict(self) -> dict:
        return {
            "lengthscales": [float(v) for v in self.lengthscales],
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
        }


def kernel_eval(hp: KernelHyperparams, a, b) -> float:
    a, b = np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float))
    if a.shape != b.shape:
        raise ValueError("input dimension mismatch")
    r = (a - b) / hp.lengthscales
    return float(hp.signal_variance * np.exp(-0.5 * r @ r))


def kernel_matrix(A, B, lengthscales, signal_variance) -> np.ndarray:
    A = np.atleast_2d(A) / lengthscales
    B = np.atleast_2d(B) / lengthscales
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def cholesky_with_jitter(K: np.ndarray):
    """Cholesky factor of ``K``, escalating diagonal jitter up to 1e-6 if needed."""
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(len(K))), jitter * scale
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError("kernel matrix not positive definite after maximum jitter")


def _head_nlml(X, y, log_params):
    """Negative log marginal likelihood of one head and its gradient."""
    n, d = X.shape
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _head_nlml_unchecked(X, y, log_params, n, d)


def _head_nlml_unchecked(X, y, log_params, n, d):
    # trial steps of the line search may overflow; the non-finite result is rejected there
    ell = np.exp(log_params[:d])
    sf2, sn2 = np.exp(log_params[d]), np.exp(log_params[d + 1])
    Kse = kernel_matrix(X, X, ell, sf2)
    L, _ = cholesky_with_jitter(Kse + sn2 * np.eye(n))
    alpha = cho_solve((L, True), y)
    value = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * math.log(2 * math.pi)
    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    WK = W * Kse
    grad = np.empty(d + 2)
    Xs = X / ell
    for k in range(d):
        diff2 = (Xs[:, k : k + 1] - Xs[:, k : k + 1].T) ** 2
        grad[k] = -0.5 * np.sum(WK * diff2)
    grad[d] = -0.5 * np.sum(WK)
    grad[d + 1] = -0.5 * sn2 * np.trace(W)
    return value, grad


@dataclass
class GPModel:
    """Fitted GP heads with cached factorizations (treat as immutable)."""

    inputs: np.ndarray
    targets: np.ndarray
    hyperparams: List[KernelHyperparams]
    chol: List[np.ndarray] = field(default=None, repr=False)
    beta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(len(self.inputs), -1)
        if len(self.hyperparams) != self.targets.shape[1]:
            raise ValueError("one set of hyperparameters per output head is required")
        if self.chol is None:
            self.refactor()

    def refactor(self):
        chol, beta = [], []
        for hp, y in zip(self.hyperparams, self.targets.T):
            K = kernel_matrix(self.inputs, self.inputs, hp.lengthscales, hp.signal_variance)
            L, _ = cholesky_with_jitter(K + hp.noise_variance * np.eye(len(K)))
            chol.append(L)
            beta.append(cho_solve((L, True), y))
        self.chol = chol
        self.beta = np.array(beta)

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.targets.shape[1]

    @property
    def lengthscales(self) -> np.ndarray:
        return np.array([hp.lengthscales for hp in self.hyperparams])

    @property
    def signal_variances(self) -> np.ndarray:
        return np.array([hp.signal_variance for hp in self.hyperparams])

    @property
    def noise_variances(self) -> np.ndarray:
        return np.array([hp.noise_variance for hp in self.hyperparams])

    def inverse_gram(self) -> np.ndarray:
        n = len(self.inputs)
        return np.array([cho_solve((L, True), np.eye(n)) for L in self.chol])

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "heads": [hp.to_dict() for hp in self.hyperparams],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPModel":
        heads = [KernelHyperparams(**h) for h in d["heads"]]
        return cls(np.array(d["inputs"], dtype=float), np.array(d["targets"], dtype=float), heads)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "GPModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def log_marginal_likelihood(model: GPModel):
    """Evidence summed over heads and its gradient w.r.t. each head's log-hyperparameters.

    Returns:
        ``(value, grad)`` where ``grad`` has shape ``(n_outputs, n_inputs + 2)``
        ordered as ``[log lengthscales..., log signal_variance, log noise_variance]``.
    """
    total, grads = 0.0, []
    for hp, y in zip(model.hyperparams, model.targets.T):
        v, g = _head_nlml(model.inputs, y, hp.to_log())
        total -= v
        grads.append(-g)
    return total, np.array(grads)


def _initial_log_params(X, y):
    ell = X.std(0)
    ell = np.where(ell > 1e-8, ell, 1.0)
    sf2 = max(float(y.var()), 1e-8)
    return np.log(np.concatenate([ell, [sf2, sf2 / 100.0]]))


def fit(
    inputs,
    targets,
    restarts: int = 3,
    seed=0,
    max_points: Optional[int] = 400,
    max_iter: int = 200,
    init: Optional[List[KernelHyperparams]] = None,
) -> GPModel:
    """Fit every head by maximizing the evidence from several starting points.

    The first start uses data-driven defaults (or ``init``); the others are
    random perturbations of it in log space. Beyond ``max_points`` rows the
    data is uniformly subsampled.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.asarray(targets, dtype=float).reshape(len(X), -1)
    if len(X) < 2:
        raise ValueError("at least two training points are required")
    rng = np.random.default_rng(seed)
    if max_points is not None and len(X) > max_points:
        keep = np.sort(rng.choice(len(X), size=max_points, replace=False))
        X, Y = X[keep], Y[keep]
    n = len(X)
    heads = []
    for j, y in enumerate(Y.T):
        base = init[j].to_log() if init is not None else _initial_log_params(X, y)
        best, failures = None, []
        for r in range(max(1, restarts)):
            start = base if r == 0 else base + rng.normal(0.0, 1.0, size=base.shape)
            try:
                res = optim.minimize(
                    lambda p: tuple(v / n for v in _head_nlml(X, y, p)),
                    start,
                    max_iter=max_iter,
                    gtol=1e-5,
                )
            except (ValueError, np.linalg.LinAlgError) as exc:
                failures.append(str(exc))
                continue
            if best is None or res.fun < best.fun:
                best = res
        if best is None:
            raise FitError(f"all {restarts} restarts failed for head {j}: {failures}")
        logger.debug("head %d: nlml/n %.4f after %d iterations", j, best.fun, best.n_iter)
        heads.append(KernelHyperparams.from_log(best.x))
    return GPModel(X, Y, heads)


def predict(model: GPModel, x):
    """Posterior mean and variance (noise included) of every head at one input."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = np.empty(model.n_outputs)
    var = np.empty(model.n_outputs)
    for j, (hp, L) in enumerate(zip(model.hyperparams, model.chol)):
        k = kernel_matrix(model.inputs, x, hp.lengthscales, hp.signal_variance)[:, 0]
        mean[j] = k @ model.beta[j]
        v = solve_triangular(L, k, lower=True)
        var[j] = hp.signal_variance - v @ v + hp.noise_variance
    return mean, var


def predict_next_state(model: GPModel, state, control):
    """Next-state mean and variance: current state plus the predicted difference."""
    state = np.asarray(state, dtype=float)
    mean, var = predict(model, np.concatenate([state, np.atleast_1d(control)]))
    return state + mean, var


def moment_match(X, beta, lengthscales, signal_variance, m, S, inv_gram=None, noise_variance=None):
    """Exact moments of SE-kernel GP outputs under a Gaussian input ``N(m, S)``.

    With ``inv_gram=None`` the heads are treated as deterministic basis-function
    networks ``f_a(x) = sum_i beta_ai k_a(x_i, x)`` (no model variance).

    Returns:
        mean ``(E,)``, covariance ``(E, E)``, and input-output covariance ``(D, E)``.
    """
    lam = lengthscales**2  # (E, D)
    D = X.shape[1]
    eye = jnp.eye(D)
    zeta = X - m  # (n, D)

    B = S[None] + jax.vmap(jnp.diag)(lam)
    iB = jnp.linalg.inv(B)
    t = jnp.einsum("nd,edk->enk", zeta, iB)
    _, logdetB = jnp.linalg.slogdet(B)
    scale = signal_variance * jnp.exp(jnp.sum(jnp.log(lengthscales), axis=1) - 0.5 * logdetB)
    q = scale[:, None] * jnp.exp(-0.5 * jnp.sum(t * zeta[None], axis=-1))  # (E, n)
    bq = beta * q
    mean = jnp.sum(bq, axis=1)
    cross = S @ jnp.einsum("end,en->de", t, bq)

    v = zeta[None] / lam[:, None, :]  # (E, n, D)
    logk = jnp.log(signal_variance)[:, None] - 0.5 * jnp.sum(zeta[None] * v, axis=-1)
    inv_lam = 1.0 / lam
    R = S[None, None] * (inv_lam[:, None, None, :] + inv_lam[None, :, None, :]) + eye
    M = jnp.linalg.solve(R, jnp.broadcast_to(S, R.shape))
    M = 0.5 * (M + jnp.swapaxes(M, -1, -2))
    _, logdetR = jnp.linalg.slogdet(R)
    Mv = jnp.einsum("abde,aie->abid", M, v)  # (E, E, n, D)
    ua = jnp.sum(Mv * v[:, None], axis=-1)  # (E, E, n)
    ub = jnp.einsum("abjd,abjd->abj", jnp.einsum("abde,bje->abjd", M, v), v[None])
    cross_term = jnp.einsum("abid,bjd->abij", Mv, v)
    logQ = (
        logk[:, None, :, None]
        + logk[None, :, None, :]
        + 0.5 * (ua[..., :, None] + ub[..., None, :] + 2.0 * cross_term)
        - 0.5 * logdetR[:, :, None, None]
    )
    Q = jnp.exp(logQ)
    second = jnp.einsum("ai,abij,bj->ab", beta, Q, beta)
    if inv_gram is not None:
        trace = jnp.einsum("aij,aji->a", inv_gram, jnp.diagonal(Q, axis1=0, axis2=1).transpose(2, 0, 1))
        second = second + jnp.diag(signal_variance - trace)
    cov = second - jnp.outer(mean, mean)
    if noise_variance is not None:
        cov = cov + jnp.diag(noise_variance)
    cov = 0.5 * (cov + cov.T)
    return mean, cov, cross


_moment_match_jit = jax.jit(moment_match)


def model_arrays(model: GPModel) -> dict:
    """Arrays needed by :func:`moment_match` for a fitted model."""
    return {
        "X": jnp.asarray(model.inputs),
        "beta": jnp.asarray(model.beta),
        "lengthscales": jnp.asarray(model.lengthscales),
        "signal_variance": jnp.asarray(model.signal_variances),
        "inv_gram": jnp.asarray(model.inverse_gram()),
        "noise_variance": jnp.asarray(model.noise_variances),
    }


def predict_uncertain(model: GPModel, mean, cov):
    """Gaussian approximation of the prediction when the input is ``N(mean, cov)``.

    Returns:
        output mean ``(E,)``, output covariance ``(E, E)`` and the input-output
        cross-covariance ``(D, E)``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (model.n_inputs, model.n_inputs):
        raise ValueError("input covariance has the wrong shape")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError("input covariance must be symmetric")
    lam = model.lengthscales**2
    for row in lam:
        if np.linalg.cond(cov + np.diag(row)) > 1e14:
            raise ConditioningError("lengthscale-plus-covariance matrix is singular")
    arrays = model_arrays(model)
    mu, S, C = _moment_match_jit(m=jnp.asarray(mean), S=jnp.asarray(cov), **arrays)
    return np.asarray(mu), np.asarray(S), np.asarray(C)
