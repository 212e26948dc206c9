"""Stationary mean field game recovery on a torus.

The game is

    -nu Lap u + |Du|^2 / 2 + V - Gamma(m) - Hbar = 0
    -nu Lap m - div(m Du)                       = 0
    mean(u) = 0,  integral(m) = 1

with ``Gamma(m) = |m|^alpha`` (local) or a quadrature-discretized Gaussian
convolution (non-local).  Unknown fields carry GP priors; the recovery
minimizes the RKHS norms plus data misfit, normalization penalties and the
penalized PDE residuals at the collocation points.

Latent layout (``M`` collocation points in ``d`` dimensions):

* ``z``   : u values (M), u partials (d blocks of M), u Laplacians (M)
* ``rho`` : same stencil for m, then m values at observation points that are
  not collocation points, then at quadrature nodes not already present
* ``v``   : V values at collocation points, then at extra V-observation points
* scalars: ``hbar`` followed by ``log_nu``, ``log_alpha``, ``log_sigma`` for
  whichever of those are unknown.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .fields import ConstantField, FunctionField, GPField
from .functionals import QuadratureRule, nonlocal_weights
from .gram import DEFAULT_ETA, FeatureSet, GramSystem, build_system
from .kernels import ID, LAP, PeriodicKernelSpec, partial
from .solver import Diagnostics, GNConfig, PenalizedLeastSquares, gauss_newton as _gauss_newton


class LayoutError(ValueError):
    pass


@dataclass
class PowerLocal:
    alpha: float = 2.0
    known: bool = True


@dataclass
class NonlocalGaussian:
    rule: QuadratureRule
    sigma: float = 1.0
    known: bool = True
    periodic: bool = False


@dataclass
class PointObservations:
    points: np.ndarray
    values: np.ndarray
    noise: float | np.ndarray = 1e-3

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.points.shape[0] != self.values.size:
            raise ValueError("observation points and values differ in length")
        noise = np.broadcast_to(np.asarray(self.noise, dtype=float), self.values.shape)
        if np.any(noise <= 0):
            raise ValueError("observation noise must be positive")

    @property
    def stds(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.noise, dtype=float), self.values.shape).astype(float)

    def __len__(self) -> int:
        return self.values.size


@dataclass
class StationaryProblemSpec:
    box: list[tuple[float, float]]
    collocation: np.ndarray
    kernel_u: PeriodicKernelSpec
    kernel_m: PeriodicKernelSpec
    kernel_v: PeriodicKernelSpec
    coupling: PowerLocal | NonlocalGaussian = field(default_factory=PowerLocal)
    nu: float = 1.0
    nu_known: bool = True
    m_obs: PointObservations | None = None
    v_obs: PointObservations | None = None
    # a known potential turns the problem into a forward solve (no v latents)
    potential: Callable[[np.ndarray], np.ndarray] | None = None
    beta: float = 1e4
    alpha_pen: float = 1e6
    hbar_prior_weight: float = 1.0
    scalar_prior_weight: float = 0.0
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        self.box = [(float(lo), float(hi)) for lo, hi in self.box]
        self.collocation = np.atleast_2d(np.asarray(self.collocation, dtype=float))
        if self.collocation.shape[1] != self.dim:
            raise LayoutError("collocation points do not match the box dimension")
        for k in (self.kernel_u, self.kernel_m, self.kernel_v):
            if k.dim != self.dim:
                raise LayoutError("kernel dimension does not match the domain")
        if self.alpha_pen < 0 or self.beta < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.nu < 0 or (not self.nu_known and self.nu <= 0):
            raise ValueError("viscosity must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.box]))

    @property
    def periods(self) -> tuple[float, ...]:
        return tuple(hi - lo for lo, hi in self.box)

    @property
    def unknown_scalars(self) -> list[str]:
        names = []
        if not self.nu_known:
            names.append("log_nu")
        if isinstance(self.coupling, PowerLocal) and not self.coupling.known:
            names.append("log_alpha")
        if isinstance(self.coupling, NonlocalGaussian) and not self.coupling.known:
            names.append("log_sigma")
        return names


def _point_key(x) -> tuple:
    return tuple(np.round(np.asarray(x, dtype=float), 12))


def merge_points(base: np.ndarray, extra: np.ndarray, offset: int = 0):
    """Index every ``extra`` point into ``base`` or into newly appended points.

    Returns ``(new_points, index)`` where ``index[i]`` is the position of
    ``extra[i]`` in ``concat(base, new_points)`` shifted by ``offset``.
    """
    lookup = {_point_key(p): i for i, p in enumerate(base)}
    new, idx = [], []
    for p in np.atleast_2d(extra):
        key = _point_key(p)
        if key not in lookup:
            lookup[key] = len(base) + len(new)
            new.append(p)
        idx.append(lookup[key])
    dim = base.shape[1]
    return np.asarray(new, dtype=float).reshape(-1, dim), np.asarray(idx, dtype=np.int64) + offset


@dataclass
class FieldLayout:
    """Index map of one field's features on a collocation stencil."""

    features: FeatureSet
    n_points: int
    dim: int
    extra_points: np.ndarray
    obs_idx: np.ndarray | None = None
    quad_idx: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.features)

    @property
    def val(self) -> np.ndarray:
        return np.arange(self.n_points)

    def grad(self, d: int) -> np.ndarray:
        return self.n_points * (1 + d) + np.arange(self.n_points)

    @property
    def lap(self) -> np.ndarray:
        return self.n_points * (1 + self.dim) + np.arange(self.n_points)


def stencil_layout(x: np.ndarray, obs_points=None, quad_nodes=None, derivatives: bool = True) -> FieldLayout:
    """Value/partials/Laplacian stencil at ``x`` plus deduplicated extra Diracs."""
    m, dim = x.shape
    n_stencil = m * (dim + 2) if derivatives else m
    groups = [(x, ID)]
    if derivatives:
        groups += [(x, partial(d)) for d in range(dim)] + [(x, LAP)]
    extra = np.zeros((0, dim))
    obs_idx = quad_idx = None
    value_pts = x
    if obs_points is not None and len(obs_points):
        new, idx = merge_points(value_pts, obs_points)
        value_pts = np.vstack([value_pts, new])
        extra = np.vstack([extra, new])
        obs_idx = np.where(idx < m, idx, idx - m + n_stencil)
    if quad_nodes is not None and len(quad_nodes):
        new, idx = merge_points(value_pts, quad_nodes)
        value_pts = np.vstack([value_pts, new])
        extra = np.vstack([extra, new])
        quad_idx = np.where(idx < m, idx, idx - m + n_stencil)
    if len(extra):
        groups.append((extra, ID))
    fs = FeatureSet.from_stencil(groups)
    if not derivatives:
        return FieldLayout(fs, m, 0, extra, obs_idx, quad_idx)
    return FieldLayout(fs, m, dim, extra, obs_idx, quad_idx)


def build_feature_sets(spec: StationaryProblemSpec):
    """Return ``(phi_u, phi_m, phi_v)`` field layouts; ``phi_v`` is ``None`` for known V."""
    x = spec.collocation
    quad = spec.coupling.rule.nodes if isinstance(spec.coupling, NonlocalGaussian) else None
    obs_m = spec.m_obs.points if spec.m_obs is not None else None
    phi_u = stencil_layout(x)
    phi_m = stencil_layout(x, obs_m, quad)
    phi_v = None
    if spec.potential is None:
        obs_v = spec.v_obs.points if spec.v_obs is not None else None
        phi_v = stencil_layout(x, obs_v, derivatives=False)
    return phi_u, phi_m, phi_v


@dataclass
class LatentState:
    z: np.ndarray
    rho: np.ndarray
    v: np.ndarray
    hbar: float = 0.0
    scalars: dict = field(default_factory=dict)

    def copy(self) -> "LatentState":
        return LatentState(self.z.copy(), self.rho.copy(), self.v.copy(), float(self.hbar), dict(self.scalars))


@dataclass
class RecoveredFields:
    u: GPField
    m: GPField
    V: GPField | FunctionField
    hbar: float
    scalars: dict

    def strategy(self, x) -> np.ndarray:
        """Optimal feedback ``-D_p H(x, Du) = -Du``."""
        return -self.u.grad(x)

    def V_minus_hbar(self, x) -> np.ndarray:
        return self.V(x) - self.hbar


def coupling_terms(coupling, x, m_vals, m_quad, param: float, periods):
    """Coupling at the collocation points and its derivatives.

    Returns ``(gamma, d_gamma_d_m_local, weights_matrix, d_gamma_d_logparam)``;
    exactly one of the middle two is not ``None``.
    """
    if isinstance(coupling, PowerLocal):
        a = param
        absm = np.abs(m_vals)
        gamma = absm**a
        with np.errstate(divide="ignore", invalid="ignore"):
            dm = np.where(absm > 0, a * absm ** (a - 1.0) * np.sign(m_vals), 0.0 if a > 1 else np.inf)
            logm = np.where(absm > 0, np.log(np.where(absm > 0, absm, 1.0)), 0.0)
        return gamma, dm, None, a * gamma * logm
    sigma = param
    W = nonlocal_weights(x, coupling.rule, sigma, periods if coupling.periodic else None)
    diff = x[:, None, :] - coupling.rule.nodes[None, :, :]
    if coupling.periodic:
        p = np.asarray(periods)
        diff = diff - p * np.round(diff / p)
    d2 = np.sum(diff**2, axis=-1)
    gamma = W @ m_quad
    dlog = (W * (d2 / sigma**2)) @ m_quad
    return gamma, None, W, dlog


class StationaryInverse:
    """A stationary problem instance with its factorized Gram systems."""

    def __init__(self, spec: StationaryProblemSpec, factorize: bool = True):
        self.spec = spec
        self.phi_u, self.phi_m, self.phi_v = build_feature_sets(spec)
        nu_, nm, nv = self.phi_u.size, self.phi_m.size, (self.phi_v.size if self.phi_v else 0)
        self.sl_z = slice(0, nu_)
        self.sl_rho = slice(nu_, nu_ + nm)
        self.sl_v = slice(nu_ + nm, nu_ + nm + nv)
        self.scalar_names = ["hbar"] + spec.unknown_scalars
        self.scalar_idx = np.arange(nu_ + nm + nv, nu_ + nm + nv + len(self.scalar_names))
        self.n = int(self.scalar_idx[-1] + 1)
        self.systems: dict[str, GramSystem] | None = None
        self.known_v = None
        if spec.potential is not None:
            self.known_v = np.asarray(spec.potential(spec.collocation), dtype=float).ravel()
        if factorize:
            self.factorize()

    # --- setup -----------------------------------------------------------
    def factorize(self) -> None:
        s = self.spec
        systems = {
            "u": build_system(s.kernel_u, self.phi_u.features, s.eta),
            "m": build_system(s.kernel_m, self.phi_m.features, s.eta),
        }
        if self.phi_v is not None:
            systems["v"] = build_system(s.kernel_v, self.phi_v.features, s.eta)
        self.systems = systems

    def _require_systems(self) -> dict[str, GramSystem]:
        if self.systems is None:
            raise RuntimeError("Gram systems are not factorized; call factorize() first")
        return self.systems

    # --- state <-> vector ------------------------------------------------
    def to_vector(self, st: LatentState) -> np.ndarray:
        if st.z.size != self.phi_u.size or st.rho.size != self.phi_m.size:
            raise LayoutError("latent state does not match the problem layout")
        if st.v.size != self.sl_v.stop - self.sl_v.start:
            raise LayoutError("latent v block does not match the problem layout")
        theta = np.empty(self.n)
        theta[self.sl_z] = st.z
        theta[self.sl_rho] = st.rho
        theta[self.sl_v] = st.v
        theta[self.scalar_idx[0]] = st.hbar
        for name, i in zip(self.scalar_names[1:], self.scalar_idx[1:]):
            theta[i] = st.scalars.get(name, 0.0)
        return theta

    def from_vector(self, theta: np.ndarray) -> LatentState:
        scalars = {name: float(theta[i]) for name, i in zip(self.scalar_names[1:], self.scalar_idx[1:])}
        return LatentState(
            theta[self.sl_z].copy(), theta[self.sl_rho].copy(), theta[self.sl_v].copy(),
            float(theta[self.scalar_idx[0]]), scalars,
        )

    def initial_state(self) -> LatentState:
        s = self.spec
        z = np.zeros(self.phi_u.size)
        rho = np.zeros(self.phi_m.size)
        rho[self.phi_m.val] = 1.0 / s.volume
        n_stencil = self.phi_m.n_points * (self.phi_m.dim + 2)
        rho[n_stencil:] = 1.0 / s.volume
        if s.m_obs is not None:
            rho[self.phi_m.obs_idx] = s.m_obs.values
        v = np.zeros(self.sl_v.stop - self.sl_v.start)
        return LatentState(z, rho, v, 0.0, {name: 0.0 for name in s.unknown_scalars})

    def scalar_values(self, theta_or_state) -> dict:
        """Physical values of nu, alpha / sigma at a state."""
        st = theta_or_state if isinstance(theta_or_state, LatentState) else self.from_vector(theta_or_state)
        s = self.spec
        out = {"nu": float(np.exp(st.scalars["log_nu"])) if "log_nu" in st.scalars else s.nu}
        if isinstance(s.coupling, PowerLocal):
            out["alpha"] = float(np.exp(st.scalars["log_alpha"])) if "log_alpha" in st.scalars else s.coupling.alpha
        else:
            out["sigma"] = float(np.exp(st.scalars["log_sigma"])) if "log_sigma" in st.scalars else s.coupling.sigma
        return out

    # --- residuals -------------------------------------------------------
    def _pde(self, theta: np.ndarray, with_jac: bool):
        s = self.spec
        pu, pm = self.phi_u, self.phi_m
        M, d = pu.n_points, pu.dim
        z = theta[self.sl_z]
        rho = theta[self.sl_rho]
        hbar = theta[self.scalar_idx[0]]
        sc = self.scalar_values(theta)
        nu = sc["nu"]
        param = sc["alpha"] if isinstance(s.coupling, PowerLocal) else sc["sigma"]

        ugrad = np.stack([z[pu.grad(j)] for j in range(d)], axis=1)
        ulap = z[pu.lap]
        mval = rho[pm.val]
        mgrad = np.stack([rho[pm.grad(j)] for j in range(d)], axis=1)
        mlap = rho[pm.lap]
        mquad = rho[pm.quad_idx] if pm.quad_idx is not None else None
        V = self.known_v if self.known_v is not None else theta[self.sl_v][np.arange(M)]
        gamma, dg_local, W, dg_log = coupling_terms(s.coupling, s.collocation, mval, mquad, param, s.periods)

        hjb = -nu * ulap + 0.5 * np.sum(ugrad**2, axis=1) + V - gamma - hbar
        fp = -nu * mlap - (ulap * mval + np.sum(ugrad * mgrad, axis=1))
        res = np.concatenate([hjb, fp])
        if not with_jac:
            return res, None

        rows, cols, vals = [], [], []
        r_h = np.arange(M)
        r_f = M + np.arange(M)
        oz, orho, ov = self.sl_z.start, self.sl_rho.start, self.sl_v.start

        def add(r, c, v):
            rows.append(np.broadcast_to(r, np.shape(v)).ravel())
            cols.append(np.broadcast_to(c, np.shape(v)).ravel())
            vals.append(np.ravel(v))

        # HJB
        add(r_h, oz + pu.lap, np.full(M, -nu))
        for j in range(d):
            add(r_h, oz + pu.grad(j), ugrad[:, j])
        if self.known_v is None:
            add(r_h, ov + np.arange(M), np.ones(M))
        add(r_h, self.scalar_idx[0], -np.ones(M))
        if dg_local is not None:
            add(r_h, orho + pm.val, -dg_local)
        else:
            add(r_h[:, None], (orho + pm.quad_idx)[None, :], -W)
        # FP
        add(r_f, orho + pm.lap, np.full(M, -nu))
        add(r_f, orho + pm.val, -ulap)
        add(r_f, oz + pu.lap, -mval)
        for j in range(d):
            add(r_f, oz + pu.grad(j), -mgrad[:, j])
            add(r_f, orho + pm.grad(j), -ugrad[:, j])
        # unknown scalars (log-parameterized)
        for name, i in zip(self.scalar_names[1:], self.scalar_idx[1:]):
            if name == "log_nu":
                add(r_h, i, -nu * ulap)
                add(r_f, i, -nu * mlap)
            else:
                add(r_h, i, -dg_log)
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * M, self.n)
        )
        return res, J

    def residuals(self, theta: np.ndarray, with_jac: bool = True):
        """Stacked data, normalization and weighted PDE residuals (and Jacobian)."""
        s = self.spec
        parts, jacs = [], []
        n = self.n
        if s.m_obs is not None and len(s.m_obs):
            idx = self.sl_rho.start + self.phi_m.obs_idx
            w = 1.0 / s.m_obs.stds
            parts.append(w * (theta[idx] - s.m_obs.values))
            if with_jac:
                jacs.append(sp.csr_matrix((w, (np.arange(idx.size), idx)), shape=(idx.size, n)))
        if s.v_obs is not None and len(s.v_obs) and self.phi_v is not None:
            idx = self.sl_v.start + self.phi_v.obs_idx
            w = 1.0 / s.v_obs.stds
            parts.append(w * (theta[idx] - s.v_obs.values))
            if with_jac:
                jacs.append(sp.csr_matrix((w, (np.arange(idx.size), idx)), shape=(idx.size, n)))
        if s.beta > 0:
            sb = np.sqrt(s.beta)
            M = self.phi_u.n_points
            iu = self.sl_z.start + self.phi_u.val
            im = self.sl_rho.start + self.phi_m.val
            parts.append(np.array([sb * theta[iu].mean(), sb * (theta[im].mean() - 1.0 / s.volume)]))
            if with_jac:
                r = np.concatenate([np.zeros(M), np.ones(M)])
                c = np.concatenate([iu, im])
                jacs.append(sp.csr_matrix((np.full(2 * M, sb / M), (r, c)), shape=(2, n)))
        pde, Jp = self._pde(theta, with_jac)
        sa = np.sqrt(s.alpha_pen)
        parts.append(sa * pde)
        F = np.concatenate(parts)
        if not with_jac:
            return F, None
        jacs.append(sa * Jp)
        return F, sp.vstack(jacs).tocsr()

    def least_squares(self) -> PenalizedLeastSquares:
        systems = self._require_systems()
        blocks = [(self.sl_z, systems["u"]), (self.sl_rho, systems["m"])]
        if "v" in systems:
            blocks.append((self.sl_v, systems["v"]))
        weights = np.array([self.spec.hbar_prior_weight] + [self.spec.scalar_prior_weight] * (len(self.scalar_names) - 1))
        return PenalizedLeastSquares(
            self.n, blocks, self.scalar_idx, weights, self.residuals,
            monitor=lambda th: float(np.linalg.norm(self._pde(th, False)[0])),
        )

    # --- public operations -----------------------------------------------
    def pde_residuals(self, state: LatentState) -> np.ndarray:
        return self._pde(self.to_vector(state), False)[0]

    def objective(self, state: LatentState) -> float:
        return self.least_squares().objective(self.to_vector(state))

    def gradient(self, state: LatentState) -> np.ndarray:
        return self.least_squares().gradient(self.to_vector(state))

    def solve(self, init: LatentState | None = None, config: GNConfig | None = None):
        theta0 = self.to_vector(init if init is not None else self.initial_state())
        theta, diag = _gauss_newton(self.least_squares(), theta0, config)
        return self.from_vector(theta), diag

    def reconstruct(self, state: LatentState) -> RecoveredFields:
        systems = self._require_systems()
        u = GPField(systems["u"], state.z)
        m = GPField(systems["m"], state.rho)
        if "v" in systems:
            V = GPField(systems["v"], state.v)
        else:
            V = FunctionField(self.spec.potential, self.spec.dim)
        return RecoveredFields(u, m, V, float(state.hbar), self.scalar_values(state))


def field_residuals(spec: StationaryProblemSpec, rec: RecoveredFields, x) -> tuple[np.ndarray, np.ndarray]:
    """HJB and FP residuals of reconstructed fields at arbitrary points.

    Small values at the collocation points do not imply small values in
    between; checking a separate point set catches fields that only satisfy
    the equations where they were imposed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    nu = rec.scalars["nu"]
    Du, Dm = rec.u.grad(x), rec.m.grad(x)
    lu, m = rec.u.laplacian(x), rec.m(x)
    c = spec.coupling
    if isinstance(c, PowerLocal):
        gamma = np.abs(m) ** rec.scalars["alpha"]
    else:
        W = nonlocal_weights(x, c.rule, rec.scalars["sigma"], spec.periods if c.periodic else None)
        gamma = W @ rec.m(c.rule.nodes)
    hjb = -nu * lu + 0.5 * np.sum(Du**2, axis=1) + rec.V(x) - gamma - rec.hbar
    fp = -nu * rec.m.laplacian(x) - (lu * m + np.sum(Du * Dm, axis=1))
    return hjb, fp


def _as_problem(p) -> StationaryInverse:
    return p if isinstance(p, StationaryInverse) else StationaryInverse(p, factorize=False)


def pde_residuals(problem, state: LatentState) -> np.ndarray:
    return _as_problem(problem).pde_residuals(state)


def objective(problem: StationaryInverse, state: LatentState) -> float:
    return problem.objective(state)


def gauss_newton(problem: StationaryInverse, init: LatentState | None = None, config: GNConfig | None = None):
    return problem.solve(init, config)


def reconstruct(problem: StationaryInverse, state: LatentState) -> RecoveredFields:
    return problem.reconstruct(state)


def exact_state(problem: StationaryInverse, u, m, V, hbar: float, scalars: dict | None = None) -> LatentState:
    """Load known fields into latents.

    ``u`` and ``m`` are objects with ``__call__``, ``grad`` and ``laplacian``
    (e.g. :class:`GPField` or :class:`ConstantField`); ``V`` is callable.
    """
    x = problem.spec.collocation
    z = _stencil_values(problem.phi_u, x, u)
    rho = _stencil_values(problem.phi_m, x, m)
    v = np.zeros(problem.sl_v.stop - problem.sl_v.start)
    if problem.phi_v is not None:
        v[: x.shape[0]] = V(x)
        if len(problem.phi_v.extra_points):
            v[x.shape[0]:] = V(problem.phi_v.extra_points)
    return LatentState(z, rho, v, float(hbar), dict(scalars or {}))


def _stencil_values(layout: FieldLayout, x, f) -> np.ndarray:
    out = np.zeros(layout.size)
    out[layout.val] = f(x)
    g = f.grad(x)
    for d in range(layout.dim):
        out[layout.grad(d)] = g[:, d]
    out[layout.lap] = f.laplacian(x)
    n_stencil = layout.n_points * (layout.dim + 2)
    if len(layout.extra_points):
        out[n_stencil:] = f(layout.extra_points)
    return out
