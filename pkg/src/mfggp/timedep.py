"""Time-dependent mean field game recovery with a forward-backward Euler scheme.

With ``dt = T / N_T`` and slices ``k = 0..N_T`` the discrete system is

    -(u_{k+1} - u_k)/dt - nu Lap u_k + |Du_k|^2/2 - Gamma(m_{k+1}) + V = 0
     (m_{k+1} - m_k)/dt - nu Lap m_{k+1} - (Lap u_k m_{k+1} + Du_k . Dm_{k+1}) = 0

for ``k = 0..N_T-1``, closed by ``u_{N_T} = phi`` and ``m_0 = mu``.  Each
slice carries its own u and m latents laid out exactly as in the stationary
module; V is one shared block unless ``shared_v`` is switched off.  There is
no effective Hamiltonian and no mass penalty.

Vector layout: all ``z_k`` (k ascending), all ``rho_k``, the V block(s),
then the unknown log-scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .fields import FunctionField, GPField
from .gram import DEFAULT_ETA, GramSystem, build_system
from .kernels import PeriodicKernelSpec
from .solver import Diagnostics, GNConfig, PenalizedLeastSquares, gauss_newton as _gauss_newton
from .stationary import (
    FieldLayout,
    LayoutError,
    NonlocalGaussian,
    PointObservations,
    PowerLocal,
    coupling_terms,
    stencil_layout,
)


@dataclass
class TimeDependentProblemSpec:
    box: list[tuple[float, float]]
    collocation: np.ndarray
    T: float
    n_t: int
    terminal: Callable[[np.ndarray], np.ndarray]
    initial: Callable[[np.ndarray], np.ndarray]
    kernel_u: PeriodicKernelSpec
    kernel_m: PeriodicKernelSpec
    kernel_v: PeriodicKernelSpec
    coupling: PowerLocal | NonlocalGaussian = field(default_factory=PowerLocal)
    nu: float = 1.0
    nu_known: bool = True
    # slice index -> observations; every slice must use the same points
    m_obs: dict[int, PointObservations] = field(default_factory=dict)
    # shared V: a single PointObservations; per-slice V: dict like m_obs
    v_obs: PointObservations | dict[int, PointObservations] | None = None
    potential: Callable[[np.ndarray], np.ndarray] | None = None
    shared_v: bool = True
    # optional per-slice kernels (length n_t + 1); default is the shared spec
    slice_kernels_u: Sequence[PeriodicKernelSpec] | None = None
    slice_kernels_m: Sequence[PeriodicKernelSpec] | None = None
    alpha_pen: float = 1e6
    scalar_prior_weight: float = 0.0
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        self.box = [(float(lo), float(hi)) for lo, hi in self.box]
        self.collocation = np.atleast_2d(np.asarray(self.collocation, dtype=float))
        if self.collocation.shape[1] != self.dim:
            raise LayoutError("collocation points do not match the box dimension")
        if int(self.n_t) != self.n_t or self.n_t < 1:
            raise ValueError("n_t must be a positive integer")
        self.n_t = int(self.n_t)
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.alpha_pen < 0:
            raise ValueError("alpha_pen must be nonnegative")
        if self.nu < 0 or (not self.nu_known and self.nu <= 0):
            raise ValueError("viscosity must be nonnegative")
        self.m_obs = self._check_slices(self.m_obs, "m_obs")
        if isinstance(self.v_obs, dict):
            if self.shared_v:
                raise ValueError("per-slice V observations need shared_v=False")
            self.v_obs = self._check_slices(self.v_obs, "v_obs")
        for name in ("slice_kernels_u", "slice_kernels_m"):
            ks = getattr(self, name)
            if ks is not None and len(ks) != self.n_t + 1:
                raise LayoutError(f"{name} needs {self.n_t + 1} kernels")

    def _check_slices(self, obs: dict, name: str) -> dict[int, PointObservations]:
        out = {}
        ref = None
        for key, o in (obs or {}).items():
            if int(key) != key or not 0 <= int(key) <= self.n_t:
                raise ValueError(f"{name}: slice index {key!r} is not in 0..{self.n_t}")
            if ref is None:
                ref = o.points
            elif o.points.shape != ref.shape or not np.allclose(o.points, ref, rtol=0, atol=1e-12):
                raise ValueError(f"{name}: observation points must be the same in every slice")
            out[int(key)] = o
        return out

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def n_slices(self) -> int:
        return self.n_t + 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

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

    def slice_of_time(self, t: float, tol: float = 1e-9) -> int:
        """Index of the slice at time ``t``; times between slices are rejected."""
        k = t / self.dt
        if abs(k - round(k)) > tol or not 0 <= round(k) <= self.n_t:
            raise ValueError(f"time {t} does not fall on a slice of the grid dt={self.dt}")
        return int(round(k))


@dataclass
class TimeSlicedLatentState:
    z: list[np.ndarray]
    rho: list[np.ndarray]
    v: list[np.ndarray]
    scalars: dict = field(default_factory=dict)

    def copy(self) -> "TimeSlicedLatentState":
        return TimeSlicedLatentState(
            [a.copy() for a in self.z], [a.copy() for a in self.rho], [a.copy() for a in self.v], dict(self.scalars)
        )


@dataclass
class TimeSlicedFields:
    times: np.ndarray
    u: list[GPField]
    m: list[GPField]
    V: list[GPField | FunctionField]
    scalars: dict

    def strategy(self, k: int, x) -> np.ndarray:
        return -self.u[k].grad(x)

    def grids(self, points: np.ndarray) -> dict[str, np.ndarray]:
        """Fields evaluated on ``points``, shape ``(n_slices, n_points)``."""
        return {
            "u": np.stack([f(points) for f in self.u]),
            "m": np.stack([f(points) for f in self.m]),
            "V": np.stack([f(points) for f in self.V]),
        }


class TimeDependentInverse:
    def __init__(self, spec: TimeDependentProblemSpec, factorize: bool = True):
        self.spec = spec
        s = spec
        x = s.collocation
        quad = s.coupling.rule.nodes if isinstance(s.coupling, NonlocalGaussian) else None
        obs_m = next(iter(s.m_obs.values())).points if s.m_obs else None
        self.phi_u: FieldLayout = stencil_layout(x)
        self.phi_m: FieldLayout = stencil_layout(x, obs_m, quad)
        self.phi_v: FieldLayout | None = None
        if s.potential is None:
            if isinstance(s.v_obs, dict):
                obs_v = next(iter(s.v_obs.values())).points if s.v_obs else None
            else:
                obs_v = s.v_obs.points if s.v_obs is not None else None
            self.phi_v = stencil_layout(x, obs_v, derivatives=False)
        ns = s.n_slices
        nu_, nm = self.phi_u.size, self.phi_m.size
        nv = self.phi_v.size if self.phi_v is not None else 0
        self.n_vblocks = 0 if self.phi_v is None else (1 if s.shared_v else ns)
        self.sl_z = [slice(k * nu_, (k + 1) * nu_) for k in range(ns)]
        off = ns * nu_
        self.sl_rho = [slice(off + k * nm, off + (k + 1) * nm) for k in range(ns)]
        off += ns * nm
        self.sl_v = [slice(off + k * nv, off + (k + 1) * nv) for k in range(self.n_vblocks)]
        off += self.n_vblocks * nv
        self.scalar_names = list(s.unknown_scalars)
        self.scalar_idx = np.arange(off, off + len(self.scalar_names), dtype=np.int64)
        self.n = off + len(self.scalar_names)
        self.known_v = None
        if s.potential is not None:
            self.known_v = np.asarray(s.potential(x), dtype=float).ravel()
        self.systems: dict[str, list[GramSystem]] | None = None
        if factorize:
            self.factorize()

    # --- setup -----------------------------------------------------------
    def factorize(self) -> None:
        s = self.spec
        cache: dict[tuple, GramSystem] = {}

        def get(kernel, layout, tag):
            key = (tag, kernel.dim, kernel.lengthscales, kernel.periods)
            if key not in cache:
                cache[key] = build_system(kernel, layout.features, s.eta)
            return cache[key]

        ku = s.slice_kernels_u or [s.kernel_u] * s.n_slices
        km = s.slice_kernels_m or [s.kernel_m] * s.n_slices
        systems = {
            "u": [get(k, self.phi_u, "u") for k in ku],
            "m": [get(k, self.phi_m, "m") for k in km],
            "v": [get(s.kernel_v, self.phi_v, "v") for _ in range(self.n_vblocks)],
        }
        self.systems = systems

    def _require_systems(self):
        if self.systems is None:
            raise RuntimeError("Gram systems are not factorized; call factorize() first")
        return self.systems

    # --- state <-> vector ------------------------------------------------
    def to_vector(self, st: TimeSlicedLatentState) -> np.ndarray:
        ns = self.spec.n_slices
        if len(st.z) != ns or len(st.rho) != ns or len(st.v) != self.n_vblocks:
            raise LayoutError("latent state does not match the number of slices")
        theta = np.empty(self.n)
        for k in range(ns):
            if st.z[k].size != self.phi_u.size or st.rho[k].size != self.phi_m.size:
                raise LayoutError(f"slice {k} does not match the problem layout")
            theta[self.sl_z[k]] = st.z[k]
            theta[self.sl_rho[k]] = st.rho[k]
        for k, sl in enumerate(self.sl_v):
            if st.v[k].size != sl.stop - sl.start:
                raise LayoutError("latent v block does not match the problem layout")
            theta[sl] = st.v[k]
        for name, i in zip(self.scalar_names, self.scalar_idx):
            theta[i] = st.scalars.get(name, 0.0)
        return theta

    def from_vector(self, theta: np.ndarray) -> TimeSlicedLatentState:
        return TimeSlicedLatentState(
            [theta[sl].copy() for sl in self.sl_z],
            [theta[sl].copy() for sl in self.sl_rho],
            [theta[sl].copy() for sl in self.sl_v],
            {name: float(theta[i]) for name, i in zip(self.scalar_names, self.scalar_idx)},
        )

    def initial_state(self) -> TimeSlicedLatentState:
        s = self.spec
        mu = np.asarray(s.initial(s.collocation), dtype=float).ravel()
        n_stencil = self.phi_m.n_points * (self.phi_m.dim + 2)
        mu_mean = float(np.mean(mu))
        zs, rhos = [], []
        for k in range(s.n_slices):
            zs.append(np.zeros(self.phi_u.size))
            rho = np.zeros(self.phi_m.size)
            rho[self.phi_m.val] = mu
            rho[n_stencil:] = mu_mean
            if k in s.m_obs:
                rho[self.phi_m.obs_idx] = s.m_obs[k].values
            rhos.append(rho)
        vs = [np.zeros(sl.stop - sl.start) for sl in self.sl_v]
        return TimeSlicedLatentState(zs, rhos, vs, {name: 0.0 for name in self.scalar_names})

    def scalar_values(self, theta_or_state) -> dict:
        st = theta_or_state if isinstance(theta_or_state, TimeSlicedLatentState) else self.from_vector(theta_or_state)
        s = self.spec
        out = {"nu": float(np.exp(st.scalars["log_nu"])) if "log_nu" in st.scalars else s.nu}
        if isinstance(s.coupling, PowerLocal):
            out["alpha"] = float(np.exp(st.scalars["log_alpha"])) if "log_alpha" in st.scalars else s.coupling.alpha
        else:
            out["sigma"] = float(np.exp(st.scalars["log_sigma"])) if "log_sigma" in st.scalars else s.coupling.sigma
        return out

    # --- residuals -------------------------------------------------------
    def _v_block(self, k: int) -> int:
        return 0 if self.spec.shared_v else k

    def _pde(self, theta: np.ndarray, with_jac: bool):
        """HJB rows (k = 0..N_T-1), FP rows, terminal rows, initial rows."""
        s = self.spec
        pu, pm = self.phi_u, self.phi_m
        M, d, nt = pu.n_points, pu.dim, s.n_t
        dt = s.dt
        sc = self.scalar_values(theta)
        nu = sc["nu"]
        param = sc["alpha"] if isinstance(s.coupling, PowerLocal) else sc["sigma"]
        x = s.collocation

        def ufeat(k):
            z = theta[self.sl_z[k]]
            return z[pu.val], np.stack([z[pu.grad(j)] for j in range(d)], axis=1), z[pu.lap]

        def mfeat(k):
            r = theta[self.sl_rho[k]]
            q = r[pm.quad_idx] if pm.quad_idx is not None else None
            return r[pm.val], np.stack([r[pm.grad(j)] for j in range(d)], axis=1), r[pm.lap], q

        U = [ufeat(k) for k in range(s.n_slices)]
        Mf = [mfeat(k) for k in range(s.n_slices)]
        hjb, fp, coup = [], [], []
        for k in range(nt):
            u0, g0, l0 = U[k]
            u1 = U[k + 1][0]
            m0 = Mf[k][0]
            m1, mg1, ml1, mq1 = Mf[k + 1]
            V = self.known_v if self.known_v is not None else theta[self.sl_v[self._v_block(k)]][:M]
            c = coupling_terms(s.coupling, x, m1, mq1, param, s.periods)
            coup.append(c)
            hjb.append(-(u1 - u0) / dt - nu * l0 + 0.5 * np.sum(g0**2, axis=1) - c[0] + V)
            fp.append((m1 - m0) / dt - nu * ml1 - (l0 * m1 + np.sum(g0 * mg1, axis=1)))
        term = U[nt][0] - np.asarray(s.terminal(x), dtype=float).ravel()
        init = Mf[0][0] - np.asarray(s.initial(x), dtype=float).ravel()
        res = np.concatenate(hjb + fp + [term, init])
        if not with_jac:
            return res, None

        rows, cols, vals = [], [], []

        def add(r, cidx, v):
            rows.append(np.broadcast_to(r, np.shape(v)).ravel())
            cols.append(np.broadcast_to(cidx, np.shape(v)).ravel())
            vals.append(np.ravel(v))

        ar = np.arange(M)
        for k in range(nt):
            rh = k * M + ar
            rf = (nt + k) * M + ar
            oz0, oz1 = self.sl_z[k].start, self.sl_z[k + 1].start
            or0, or1 = self.sl_rho[k].start, self.sl_rho[k + 1].start
            u0, g0, l0 = U[k]
            m1, mg1, ml1, _ = Mf[k + 1]
            _, dg_local, W, dg_log = coup[k]
            # HJB
            add(rh, oz1 + pu.val, np.full(M, -1.0 / dt))
            add(rh, oz0 + pu.val, np.full(M, 1.0 / dt))
            add(rh, oz0 + pu.lap, np.full(M, -nu))
            for j in range(d):
                add(rh, oz0 + pu.grad(j), g0[:, j])
            if dg_local is not None:
                add(rh, or1 + pm.val, -dg_local)
            else:
                add(rh[:, None], (or1 + pm.quad_idx)[None, :], -W)
            if self.known_v is None:
                add(rh, self.sl_v[self._v_block(k)].start + ar, np.ones(M))
            # FP
            add(rf, or1 + pm.val, np.full(M, 1.0 / dt) - l0)
            add(rf, or0 + pm.val, np.full(M, -1.0 / dt))
            add(rf, or1 + pm.lap, np.full(M, -nu))
            add(rf, oz0 + pu.lap, -m1)
            for j in range(d):
                add(rf, oz0 + pu.grad(j), -mg1[:, j])
                add(rf, or1 + pm.grad(j), -g0[:, j])
            for name, i in zip(self.scalar_names, self.scalar_idx):
                if name == "log_nu":
                    add(rh, i, -nu * l0)
                    add(rf, i, -nu * ml1)
                else:
                    add(rh, i, -dg_log)
        add(2 * nt * M + ar, self.sl_z[nt].start + pu.val, np.ones(M))
        add((2 * nt + 1) * M + ar, self.sl_rho[0].start + pm.val, np.ones(M))
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(res.size, self.n)
        )
        return res, J

    def residuals(self, theta: np.ndarray, with_jac: bool = True):
        s = self.spec
        parts, jacs = [], []
        n = self.n
        for k, obs in sorted(s.m_obs.items()):
            idx = self.sl_rho[k].start + self.phi_m.obs_idx
            w = 1.0 / obs.stds
            parts.append(w * (theta[idx] - obs.values))
            if with_jac:
                jacs.append(sp.csr_matrix((w, (np.arange(idx.size), idx)), shape=(idx.size, n)))
        if self.phi_v is not None and s.v_obs is not None:
            vo = s.v_obs if isinstance(s.v_obs, dict) else {0: s.v_obs}
            for k, obs in sorted(vo.items()):
                if len(obs) == 0:
                    continue
                idx = self.sl_v[k].start + self.phi_v.obs_idx
                w = 1.0 / obs.stds
                parts.append(w * (theta[idx] - obs.values))
                if with_jac:
                    jacs.append(sp.csr_matrix((w, (np.arange(idx.size), idx)), shape=(idx.size, n)))
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
        blocks = [(sl, sys) for sl, sys in zip(self.sl_z, systems["u"])]
        blocks += [(sl, sys) for sl, sys in zip(self.sl_rho, systems["m"])]
        blocks += [(sl, sys) for sl, sys in zip(self.sl_v, systems["v"])]
        weights = np.full(len(self.scalar_names), self.spec.scalar_prior_weight)
        return PenalizedLeastSquares(
            self.n, blocks, self.scalar_idx, weights, self.residuals,
            monitor=lambda th: float(np.linalg.norm(self._pde(th, False)[0])),
        )

    # --- public operations -----------------------------------------------
    def split_residuals(self, state: TimeSlicedLatentState) -> dict[str, np.ndarray]:
        """Unweighted residuals grouped as ``hjb``/``fp`` (n_t x M), ``terminal``, ``initial``."""
        r = self._pde(self.to_vector(state), False)[0]
        M, nt = self.phi_u.n_points, self.spec.n_t
        return {
            "hjb": r[: nt * M].reshape(nt, M),
            "fp": r[nt * M : 2 * nt * M].reshape(nt, M),
            "terminal": r[2 * nt * M : (2 * nt + 1) * M],
            "initial": r[(2 * nt + 1) * M :],
        }

    def td_residuals(self, state: TimeSlicedLatentState) -> np.ndarray:
        return self._pde(self.to_vector(state), False)[0]

    def objective(self, state: TimeSlicedLatentState) -> float:
        return self.least_squares().objective(self.to_vector(state))

    def gradient(self, state: TimeSlicedLatentState) -> np.ndarray:
        return self.least_squares().gradient(self.to_vector(state))

    def solve(self, init: TimeSlicedLatentState | None = None, config: GNConfig | None = None):
        theta0 = self.to_vector(init if init is not None else self.initial_state())
        theta, diag = _gauss_newton(self.least_squares(), theta0, config)
        return self.from_vector(theta), diag

    def reconstruct(self, state: TimeSlicedLatentState) -> TimeSlicedFields:
        systems = self._require_systems()
        s = self.spec
        us = [GPField(sys, z) for sys, z in zip(systems["u"], state.z)]
        ms = [GPField(sys, r) for sys, r in zip(systems["m"], state.rho)]
        if self.phi_v is None:
            Vs = [FunctionField(s.potential, s.dim)] * s.n_slices
        elif s.shared_v:
            Vs = [GPField(systems["v"][0], state.v[0])] * s.n_slices
        else:
            Vs = [GPField(sys, v) for sys, v in zip(systems["v"], state.v)]
        return TimeSlicedFields(s.times, us, ms, Vs, self.scalar_values(state))


def td_residuals(problem, state: TimeSlicedLatentState) -> np.ndarray:
    if not isinstance(problem, TimeDependentInverse):
        problem = TimeDependentInverse(problem, factorize=False)
    return problem.td_residuals(state)


def td_objective(problem: TimeDependentInverse, state: TimeSlicedLatentState) -> float:
    return problem.objective(state)


def td_gauss_newton(problem: TimeDependentInverse, init=None, config: GNConfig | None = None):
    return problem.solve(init, config)


def td_reconstruct(problem: TimeDependentInverse, state: TimeSlicedLatentState) -> TimeSlicedFields:
    return problem.reconstruct(state)


def td_exact_state(problem: TimeDependentInverse, u: Sequence, m: Sequence, V=None, scalars: dict | None = None):
    """Load per-slice fields (objects with ``__call__``/``grad``/``laplacian``) into latents."""
    from .stationary import _stencil_values

    x = problem.spec.collocation
    zs = [_stencil_values(problem.phi_u, x, f) for f in u]
    rhos = [_stencil_values(problem.phi_m, x, f) for f in m]
    vs = []
    for sl in problem.sl_v:
        v = np.zeros(sl.stop - sl.start)
        v[: x.shape[0]] = V(x)
        if len(problem.phi_v.extra_points):
            v[x.shape[0]:] = V(problem.phi_v.extra_points)
        vs.append(v)
    return TimeSlicedLatentState(zs, rhos, vs, dict(scalars or {}))
