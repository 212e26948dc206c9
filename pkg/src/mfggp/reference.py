"""Reference solutions and synthetic observations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import FunctionField
from .functionals import LinearFunctional, gauss_legendre_rule
from .kernels import PeriodicKernelSpec
from .solver import Diagnostics, GNConfig, SolverError
from .stationary import (
    NonlocalGaussian,
    PowerLocal,
    RecoveredFields,
    StationaryInverse,
    StationaryProblemSpec,
)
from .timedep import TimeDependentInverse, TimeDependentProblemSpec, TimeSlicedFields


class InfeasibleError(ValueError):
    pass


@dataclass
class EnvironmentSpec:
    """Known environment of a game: potential, viscosity and coupling.

    Time-dependent games additionally set ``terminal``, ``initial``, ``T``
    and ``n_t``.
    """

    box: list[tuple[float, float]]
    potential: Callable[[np.ndarray], np.ndarray]
    nu: float = 1.0
    coupling: PowerLocal | NonlocalGaussian = field(default_factory=PowerLocal)
    terminal: Callable[[np.ndarray], np.ndarray] | None = None
    initial: Callable[[np.ndarray], np.ndarray] | None = None
    T: float = 1.0
    n_t: int = 1

    @property
    def dim(self) -> int:
        return len(self.box)


@dataclass
class Explicit1D:
    """``u = 0``, ``m = sqrt(V - Hbar)``; derivatives of ``m`` need ``dV``/``d2V``."""

    hbar: float
    potential: Callable
    dV: Callable | None = None
    d2V: Callable | None = None

    def m(self, x) -> np.ndarray:
        return np.sqrt(self.potential(np.asarray(x, dtype=float).ravel()) - self.hbar)

    def u(self, x) -> np.ndarray:
        return np.zeros(np.asarray(x, dtype=float).ravel().shape)

    def m_field(self) -> "_Explicit1DDensity":
        if self.dV is None or self.d2V is None:
            raise ValueError("derivatives of the potential are required")
        return _Explicit1DDensity(self)


class _Explicit1DDensity:
    dim = 1

    def __init__(self, sol: Explicit1D):
        self.sol = sol

    def __call__(self, x) -> np.ndarray:
        return self.sol.m(x)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        return (self.sol.dV(x) / (2.0 * self.sol.m(x)))[:, None]

    def laplacian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        m = self.sol.m(x)
        dv = self.sol.dV(x)
        return self.sol.d2V(x) / (2.0 * m) - dv**2 / (4.0 * m**3)


def solve_1d_explicit(V: Callable, grid_n: int = 512, tol: float = 1e-12, dV=None, d2V=None) -> Explicit1D:
    """Solve ``|u'|^2/2 + V = m^2 + Hbar``, ``(m u')' = 0``, ``int m = 1`` on [0, 1).

    The solution is ``u = 0``, ``m = sqrt(V - Hbar)`` with ``Hbar`` the root of
    ``int_0^1 sqrt(V - Hbar) dx = 1``, found by bisection.
    """
    rule = gauss_legendre_rule(grid_n, [(0.0, 1.0)])
    xq = rule.nodes[:, 0]
    vq = np.asarray(V(xq), dtype=float)
    vmin = min(vq.min(), np.asarray(V(np.linspace(0.0, 1.0, 8 * grid_n, endpoint=False))).min())

    def mass_gap(h: float) -> float:
        return rule.integrate(np.sqrt(np.maximum(vq - h, 0.0))) - 1.0

    lo, hi = vmin - 4.0, vmin - 1e-12
    f_lo, f_hi = mass_gap(lo), mass_gap(hi)
    if f_lo * f_hi > 0:
        raise InfeasibleError("potential admits no unit-mass solution in the bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = mass_gap(mid)
        if f_mid == 0.0 or (hi - lo) < 1e-15 * max(1.0, abs(mid)):
            break
        if f_mid > 0:
            lo = mid
        else:
            hi = mid
    h = 0.5 * (lo + hi)
    if abs(mass_gap(h)) > max(tol, 1e-12):
        raise InfeasibleError(f"bisection did not reach tolerance (gap {mass_gap(h):.2e})")
    return Explicit1D(h, V, dV, d2V)


def solve_forward_stationary(
    env: EnvironmentSpec,
    samples: np.ndarray,
    kernel_u: PeriodicKernelSpec,
    kernel_m: PeriodicKernelSpec,
    beta: float = 1e6,
    alpha_pen: float = 1e6,
    eta: float = 1e-8,
    gn: GNConfig | None = None,
) -> tuple[RecoveredFields, Diagnostics]:
    """Solve the game with everything known except ``(u, m, Hbar)``.

    The normalization weight defaults higher than on the inverse side so the
    reference density carries unit mass to about 1e-5.
    """
    spec = StationaryProblemSpec(
        box=env.box,
        collocation=samples,
        kernel_u=kernel_u,
        kernel_m=kernel_m,
        kernel_v=kernel_m,
        coupling=env.coupling,
        nu=env.nu,
        potential=env.potential,
        beta=beta,
        alpha_pen=alpha_pen,
        eta=eta,
    )
    problem = StationaryInverse(spec)
    state, diag = problem.solve(config=gn)
    if not np.all(np.isfinite(problem.to_vector(state))):
        raise SolverError("forward solve diverged", diag.iterations, diag)
    return problem.reconstruct(state), diag


def solve_forward_timedep(
    env: EnvironmentSpec,
    samples: np.ndarray,
    kernel_u: PeriodicKernelSpec,
    kernel_m: PeriodicKernelSpec,
    alpha_pen: float = 1e6,
    eta: float = 1e-8,
    gn: GNConfig | None = None,
) -> tuple[TimeSlicedFields, Diagnostics]:
    """Time-dependent game with known potential, terminal cost and initial density."""
    if env.terminal is None or env.initial is None:
        raise ValueError("terminal cost and initial density are required")
    spec = TimeDependentProblemSpec(
        box=env.box,
        collocation=samples,
        T=env.T,
        n_t=env.n_t,
        terminal=env.terminal,
        initial=env.initial,
        kernel_u=kernel_u,
        kernel_m=kernel_m,
        kernel_v=kernel_m,
        coupling=env.coupling,
        nu=env.nu,
        potential=env.potential,
        alpha_pen=alpha_pen,
        eta=eta,
    )
    problem = TimeDependentInverse(spec)
    state, diag = problem.solve(config=gn)
    if not np.all(np.isfinite(problem.to_vector(state))):
        raise SolverError("forward solve diverged", diag.iterations, diag)
    return problem.reconstruct(state), diag


@dataclass
class ObservationSet:
    points: np.ndarray | None
    functionals: list | None
    clean: np.ndarray
    noisy: np.ndarray
    gamma: float
    seed: int


def synthesize_observations(fld, functionals, gamma: float, seed: int) -> ObservationSet:
    """Apply ``functionals`` to ``fld`` and add i.i.d. N(0, gamma^2) noise.

    ``functionals`` is either an array of points (Diracs) or a list of
    :class:`LinearFunctional` objects.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if isinstance(functionals, np.ndarray) or (
        isinstance(functionals, Sequence) and len(functionals) and not hasattr(functionals[0], "__dataclass_fields__")
    ):
        points = np.atleast_2d(np.asarray(functionals, dtype=float))
        if points.shape[0] == 1 and points.shape[1] != getattr(fld, "dim", points.shape[1]):
            points = points.T
        clean = np.asarray(fld(points), dtype=float).ravel()
        funcs = None
    else:
        points = None
        funcs = list(functionals)
        clean = np.array([fld.apply(f) for f in funcs])
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape)
    noisy = clean + gamma * noise if gamma > 0 else clean.copy()
    return ObservationSet(points, funcs, clean, noisy, float(gamma), int(seed))
