"""Gauss-Newton with Armijo backtracking for GP-penalized least squares.

The objective has the form

    f(theta) = sum_b theta_b^T K_b^{-1} theta_b + sum_s a_s theta_s^2 + |F(theta)|^2

where ``theta_b`` are latent blocks with factorized Gram systems, ``theta_s``
are free scalars with diagonal prior weights ``a_s`` (possibly zero) and
``F`` stacks every data, normalization and PDE residual.  Steps are computed
in whitened coordinates ``w_b = L_b^{-1} theta_b`` so the prior part is the
identity; the whitened block is eliminated through the residual-space matrix
``I + J_w J_w^T`` whenever that is the smaller system.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .gram import GramSystem

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, msg: str, iteration: int, diagnostics: "Diagnostics | None" = None):
        self.iteration = iteration
        self.diagnostics = diagnostics
        super().__init__(f"iteration {iteration}: {msg}")


@dataclass
class GNConfig:
    max_iters: int = 40
    rel_tol: float = 1e-7
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    min_step: float = 1e-10

    @classmethod
    def from_dict(cls, d: dict | None) -> "GNConfig":
        return cls(**(d or {}))


@dataclass
class Diagnostics:
    objective: list[float] = field(default_factory=list)
    residual_norm: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    message: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "residual_norm": self.residual_norm,
            "step_sizes": self.step_sizes,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
            "seconds": self.seconds,
        }


ResidualFn = Callable[[np.ndarray, bool], tuple]


@dataclass
class PenalizedLeastSquares:
    """Problem description consumed by :func:`gauss_newton`.

    ``residuals(theta, with_jacobian)`` returns ``(F, J)`` with ``J`` the
    Jacobian of ``F`` in natural coordinates (dense or sparse), or ``(F, None)``.
    ``monitor(theta)`` gives the norm reported per iteration (PDE residuals).
    """

    n: int
    blocks: list[tuple[slice, GramSystem]]
    scalar_idx: np.ndarray
    scalar_weights: np.ndarray
    residuals: ResidualFn
    monitor: Callable[[np.ndarray], float] | None = None

    def prior(self, theta) -> float:
        total = 0.0
        for sl, sys in self.blocks:
            w = sys.whiten(theta[sl])
            total += w @ w
        s = theta[self.scalar_idx]
        return float(total + np.sum(self.scalar_weights * s * s))

    def objective(self, theta) -> float:
        F, _ = self.residuals(theta, False)
        return self.prior(theta) + float(F @ F)

    def gradient(self, theta) -> np.ndarray:
        F, J = self.residuals(theta, True)
        g = 2.0 * (J.T @ F)
        g = np.asarray(g).ravel()
        for sl, sys in self.blocks:
            g[sl] += 2.0 * sys.solve(theta[sl])
        g[self.scalar_idx] += 2.0 * self.scalar_weights * theta[self.scalar_idx]
        return g


def _dense_cols(J, cols) -> np.ndarray:
    sub = J[:, cols]
    return sub.toarray() if sp.issparse(sub) else np.asarray(sub)


def gn_step(prob: PenalizedLeastSquares, theta: np.ndarray, F: np.ndarray, J):
    """Full Gauss-Newton step; returns ``(delta, predicted_objective, grad_dot_delta)``."""
    rows = F.shape[0]
    ws, jws = [], []
    for sl, sys in prob.blocks:
        ws.append(sys.whiten(theta[sl]))
        jws.append(_dense_cols(J, sl) @ sys.factor)
    w = np.concatenate(ws) if ws else np.zeros(0)
    Jw = np.hstack(jws) if jws else np.zeros((rows, 0))
    Js = _dense_cols(J, prob.scalar_idx)
    s = theta[prob.scalar_idx]
    a = prob.scalar_weights
    nw = w.size
    ns = s.size

    if rows <= nw:
        # eliminate the whitened block: S = I + Jw Jw^T (rows x rows)
        S = Jw @ Jw.T
        S[np.diag_indices_from(S)] += 1.0
        cS = sla.cho_factor(S, lower=True, check_finite=False)
        g = F - Jw @ w
        if ns:
            SiJs = sla.cho_solve(cS, Js, check_finite=False)
            C = np.diag(a) + Js.T @ SiJs
            C[np.diag_indices_from(C)] += 1e-12 * (1.0 + np.abs(np.diag(C)))
            rhs = a * s + SiJs.T @ g
            ds = -np.linalg.solve(C, rhs)
        else:
            ds = np.zeros(0)
        e = -Jw.T @ sla.cho_solve(cS, g + Js @ ds, check_finite=False)
        dw = e - w
    else:
        Jfull = np.hstack([Jw, Js])
        N = Jfull.T @ Jfull
        d = np.concatenate([np.ones(nw), a])
        N[np.diag_indices_from(N)] += d + 1e-12 * (1.0 + np.abs(np.diag(N)))
        rhs = np.concatenate([w, a * s]) + Jfull.T @ F
        step = -np.linalg.solve(N, rhs)
        dw, ds = step[:nw], step[nw:]

    delta = np.zeros_like(theta)
    off = 0
    for sl, sys in prob.blocks:
        n = sl.stop - sl.start
        delta[sl] = sys.unwhiten(dw[off : off + n])
        off += n
    delta[prob.scalar_idx] = ds

    lin = F + Jw @ dw + Js @ ds
    model = float((w + dw) @ (w + dw) + np.sum(a * (s + ds) ** 2) + lin @ lin)
    grad_dot = 2.0 * float((w + Jw.T @ F) @ dw + (a * s + Js.T @ F) @ ds)
    if not np.all(np.isfinite(delta)):
        raise np.linalg.LinAlgError("non-finite step")
    return delta, model, grad_dot


def gauss_newton(prob: PenalizedLeastSquares, theta0: np.ndarray, config: GNConfig | None = None):
    cfg = config or GNConfig()
    theta = np.array(theta0, dtype=float)
    diag = Diagnostics()
    t0 = time.perf_counter()
    f = prob.objective(theta)
    if not np.isfinite(f):
        raise SolverError("objective is not finite at the initial state", 0, diag)
    diag.objective.append(f)
    if prob.monitor is not None:
        diag.residual_norm.append(prob.monitor(theta))

    for it in range(1, cfg.max_iters + 1):
        F, J = prob.residuals(theta, True)
        try:
            delta, model, slope = gn_step(prob, theta, F, J)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"normal-equation solve failed: {exc}", it, diag) from exc
        predicted = f - model
        if predicted <= cfg.rel_tol * max(abs(f), 1e-300) or slope >= 0:
            diag.converged = True
            diag.message = "predicted decrease below tolerance"
            break
        t = 1.0
        while True:
            trial = theta + t * delta
            # long trial steps may overflow; a non-finite value just shrinks the step
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                f_new = prob.objective(trial)
            if np.isfinite(f_new) and f_new <= f + cfg.armijo_c1 * t * slope:
                break
            t *= cfg.armijo_shrink
            if t < cfg.min_step:
                break
        if t < cfg.min_step:
            diag.message = "line search failed"
            break
        if not np.isfinite(f_new):
            raise SolverError("objective became non-finite", it, diag)
        theta = trial
        rel = (f - f_new) / max(abs(f), 1e-300)
        f = f_new
        diag.objective.append(f)
        diag.step_sizes.append(t)
        diag.iterations = it
        if prob.monitor is not None:
            diag.residual_norm.append(prob.monitor(theta))
        log.debug("GN iter %d objective %.6e step %.3g", it, f, t)
        if rel < cfg.rel_tol:
            diag.converged = True
            diag.message = "relative decrease below tolerance"
            break
    else:
        diag.message = "max_iters reached"
    diag.seconds = time.perf_counter() - t0
    return theta, diag
