"""Gradient descent with limited-memory quasi-Newton directions and backtracking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

FunGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    trace: List[float] = field(default_factory=list)
    converged: bool = False
    stalled: bool = False
    message: str = ""


def _safe_eval(fun_grad: FunGrad, x: np.ndarray):
    try:
        f, g = fun_grad(x)
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        logger.debug("objective evaluation failed: %s", exc)
        return np.inf, None
    f = float(f)
    g = np.asarray(g, dtype=float)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return np.inf, None
    return f, g


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    return -q


def minimize(
    fun_grad: FunGrad,
    x0,
    max_iter: int = 100,
    gtol: float = 1e-6,
    ftol: Optional[float] = None,
    memory: int = 10,
    c1: float = 1e-4,
    max_backtracks: int = 40,
    callback=None,
) -> OptimResult:
    """Minimize a smooth function given its value and gradient.

    Every accepted iterate satisfies the Armijo condition, so ``trace`` (the
    objective at ``x0`` followed by every accepted iterate) is non-increasing.
    Iteration stops when the gradient norm drops to ``gtol``, when an accepted
    step decreases the objective by less than ``ftol``, or at ``max_iter``.
    If no decrease can be found the best point so far is returned with
    ``stalled=True``.
    """
    x = np.array(x0, dtype=float)
    f, g = _safe_eval(fun_grad, x)
    if g is None:
        raise ValueError("objective is not finite at the starting point")
    trace = [f]
    s_hist: list = []
    y_hist: list = []
    it = 0
    while it < max_iter:
        gnorm = np.linalg.norm(g)
        if gnorm <= gtol:
            return OptimResult(x, f, g, it, trace, converged=True, message="gradient tolerance")
        accepted = False
        for use_memory in (True, False):
            if use_memory and s_hist:
                d = _two_loop(g, s_hist, y_hist)
                step = 1.0
            else:
                d = -g
                step = min(1.0, 1.0 / gnorm)
            slope = g @ d
            if slope >= 0:
                continue
            for _ in range(max_backtracks):
                x_new = x + step * d
                f_new, g_new = _safe_eval(fun_grad, x_new)
                if g_new is not None and f_new <= f + c1 * step * slope:
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
            s_hist.clear()
            y_hist.clear()
        if not accepted:
            return OptimResult(x, f, g, it, trace, stalled=True, message="line search failed")
        it += 1
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if callback is not None:
            callback(x, f)
        if ftol is not None and decrease < ftol:
            return OptimResult(x, f, g, it, trace, converged=True, message="objective decrease below tolerance")
    return OptimResult(x, f, g, it, trace, message="iteration cap reached")


def central_difference(fun: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        grad.flat[i] = (fun(x + e) - fun(x - e)) / (2 * eps)
    return grad
