"""Periodic product kernels on a torus and their analytic derivatives.

The kernel is

    k(x, y) = prod_d exp(-2 sin^2(pi (x_d - y_d) / P_d) / l_d^2)

Each one-dimensional factor is a function of the offset ``r = x_d - y_d``
only, so a mixed derivative of order ``a`` in ``x_d`` and ``b`` in ``y_d``
equals ``(-1)**b f_d^{(a+b)}(r)``.  All derivatives up to fourth order are
hand-derived closed forms; no finite differences or autodiff are used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_ORDER = 4

IDENTITY = "identity"
PARTIAL = "partial"
SECOND = "second"
LAPLACIAN = "laplacian"


class KernelInputError(ValueError):
    """Bad dimensions or unsupported derivative orders."""


@dataclass(frozen=True)
class PeriodicKernelSpec:
    dim: int
    lengthscales: tuple[float, ...]
    periods: tuple[float, ...]

    def __init__(self, dim: int, lengthscales=1.0, periods=1.0):
        if int(dim) < 1:
            raise KernelInputError(f"dim must be positive, got {dim}")
        ls = _broadcast(lengthscales, dim, "lengthscales")
        ps = _broadcast(periods, dim, "periods")
        if any(v <= 0 for v in ls) or any(v <= 0 for v in ps):
            raise KernelInputError("lengthscales and periods must be positive")
        object.__setattr__(self, "dim", int(dim))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "periods", ps)

    @property
    def omega(self) -> np.ndarray:
        return 2.0 * np.pi / np.asarray(self.periods)

    @property
    def inv_l2(self) -> np.ndarray:
        return 1.0 / np.asarray(self.lengthscales) ** 2

    def to_dict(self) -> dict:
        return {
            "family": "periodic",
            "dim": self.dim,
            "lengthscales": list(self.lengthscales),
            "periods": list(self.periods),
        }

    @classmethod
    def from_dict(cls, d: dict, dim: int | None = None) -> "PeriodicKernelSpec":
        family = d.get("family", "periodic")
        if family != "periodic":
            raise KernelInputError(f"unsupported kernel family {family!r}")
        return cls(d.get("dim", dim), d.get("lengthscales", 1.0), d.get("periods", 1.0))


def _broadcast(value, dim: int, name: str) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.repeat(arr, dim)
    if arr.size != dim:
        raise KernelInputError(f"{name} has {arr.size} entries, expected {dim}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class DerivOp:
    """A differential operator applied to one kernel argument.

    ``kind`` is one of ``identity``, ``partial`` (``dims=(d,)``), ``second``
    (``dims=(d, e)``, stored sorted) or ``laplacian``.
    """

    kind: str = IDENTITY
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind == IDENTITY or self.kind == LAPLACIAN:
            if self.dims:
                raise KernelInputError(f"{self.kind} takes no dimension indices")
        elif self.kind == PARTIAL:
            if len(self.dims) != 1:
                raise KernelInputError("partial needs exactly one dimension")
        elif self.kind == SECOND:
            if len(self.dims) != 2:
                raise KernelInputError("second partial needs two dimensions")
            object.__setattr__(self, "dims", tuple(sorted(self.dims)))
        else:
            raise KernelInputError(f"unknown operator kind {self.kind!r}")
        if any(d < 0 for d in self.dims):
            raise KernelInputError("negative dimension index")

    @property
    def order(self) -> int:
        return {IDENTITY: 0, PARTIAL: 1, SECOND: 2, LAPLACIAN: 2}[self.kind]

    def terms(self, dim: int) -> list[tuple[float, tuple[int, ...]]]:
        """Expand into ``(coefficient, multi-index)`` monomial derivatives."""
        if any(d >= dim for d in self.dims):
            raise KernelInputError(f"operator {self} out of range for dim={dim}")
        if self.kind == LAPLACIAN:
            out = []
            for d in range(dim):
                mi = [0] * dim
                mi[d] = 2
                out.append((1.0, tuple(mi)))
            return out
        mi = [0] * dim
        for d in self.dims:
            mi[d] += 1
        return [(1.0, tuple(mi))]

    def __str__(self) -> str:
        if self.dims:
            return f"{self.kind}{self.dims}"
        return self.kind


ID = DerivOp()
LAP = DerivOp(LAPLACIAN)


def partial(d: int) -> DerivOp:
    return DerivOp(PARTIAL, (d,))


def second(d: int, e: int) -> DerivOp:
    return DerivOp(SECOND, (d, e))


def factor_derivatives(r: np.ndarray, omega: float, inv_l2: float, max_order: int = MAX_ORDER):
    """Derivatives ``f^{(n)}(r)``, n = 0..max_order, of one kernel factor.

    With ``f = exp(g)`` and ``g(r) = (cos(omega r) - 1) / l^2``.
    """
    s = np.sin(omega * r)
    c = np.cos(omega * r)
    f0 = np.exp(inv_l2 * (c - 1.0))
    out = [f0]
    if max_order >= 1:
        g1 = -inv_l2 * omega * s
        out.append(g1 * f0)
    if max_order >= 2:
        g2 = -inv_l2 * omega**2 * c
        out.append((g2 + g1 * g1) * f0)
    if max_order >= 3:
        g3 = inv_l2 * omega**3 * s
        out.append((g3 + 3.0 * g1 * g2 + g1**3) * f0)
    if max_order >= 4:
        g4 = inv_l2 * omega**4 * c
        out.append((g4 + 4.0 * g1 * g3 + 3.0 * g2 * g2 + 6.0 * g1 * g1 * g2 + g1**4) * f0)
    return out


def _check_point(k: PeriodicKernelSpec, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (k.dim,):
        raise KernelInputError(f"point of shape {x.shape} does not match dim={k.dim}")
    return x


def kernel_eval(k: PeriodicKernelSpec, x, y) -> float:
    x = _check_point(k, x)
    y = _check_point(k, y)
    r = x - y
    return float(np.prod(np.exp(-2.0 * np.sin(np.pi * r / np.asarray(k.periods)) ** 2 * k.inv_l2)))


def kernel_deriv_eval(k: PeriodicKernelSpec, op_a: DerivOp, x, op_b: DerivOp, y) -> float:
    """``(op_a (x) op_b) k`` evaluated at ``(x, y)``; op_a acts on x, op_b on y."""
    x = _check_point(k, x)
    y = _check_point(k, y)
    block = kernel_block(k, x[None, :], op_a, y[None, :], op_b)
    return float(block[0, 0])


def kernel_block(k: PeriodicKernelSpec, xa, op_a: DerivOp, xb, op_b: DerivOp) -> np.ndarray:
    """Dense block ``[(op_a (x) op_b) k](xa_i, xb_j)`` for point arrays."""
    xa = np.asarray(xa, dtype=float).reshape(-1, k.dim)
    xb = np.asarray(xb, dtype=float).reshape(-1, k.dim)
    if op_a.order + op_b.order > MAX_ORDER:
        raise KernelInputError(f"combined derivative order {op_a.order + op_b.order} > {MAX_ORDER}")
    terms_a = op_a.terms(k.dim)
    terms_b = op_b.terms(k.dim)
    # highest per-dimension order that any term pair needs
    need = [0] * k.dim
    for _, ma in terms_a:
        for _, mb in terms_b:
            for d in range(k.dim):
                need[d] = max(need[d], ma[d] + mb[d])
    omega = k.omega
    inv_l2 = k.inv_l2
    derivs = []
    for d in range(k.dim):
        r = xa[:, d][:, None] - xb[:, d][None, :]
        derivs.append(factor_derivatives(r, omega[d], inv_l2[d], need[d]))
    out = np.zeros((xa.shape[0], xb.shape[0]))
    for ca, ma in terms_a:
        for cb, mb in terms_b:
            term = ca * cb * ((-1.0) ** sum(mb))
            prod = None
            for d in range(k.dim):
                fd = derivs[d][ma[d] + mb[d]]
                prod = fd if prod is None else prod * fd
            out += term * prod
    return out


def op_tables(ops: Sequence[DerivOp], dim: int):
    """Flatten operators into arrays consumed by the compiled Gram kernel.

    Returns ``(multi_index[n_ops, max_terms, dim], coef[n_ops, max_terms],
    n_terms[n_ops])``.
    """
    expanded = [op.terms(dim) for op in ops]
    max_terms = max(len(t) for t in expanded)
    mi = np.zeros((len(ops), max_terms, dim), dtype=np.int64)
    coef = np.zeros((len(ops), max_terms))
    nt = np.zeros(len(ops), dtype=np.int64)
    for i, terms in enumerate(expanded):
        nt[i] = len(terms)
        for t, (c, m) in enumerate(terms):
            coef[i, t] = c
            mi[i, t] = m
    return mi, coef, nt
