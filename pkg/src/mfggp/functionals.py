"""Linear functionals used as GP features and observations, plus quadrature."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .kernels import ID, IDENTITY, LAPLACIAN, PARTIAL, SECOND, DerivOp


@dataclass(frozen=True)
class PointEval:
    x: tuple[float, ...]

    def __init__(self, x):
        object.__setattr__(self, "x", _as_point(x))

    @property
    def op(self) -> DerivOp:
        return ID


@dataclass(frozen=True)
class PointDeriv:
    x: tuple[float, ...]
    op: DerivOp

    def __init__(self, x, op: DerivOp):
        object.__setattr__(self, "x", _as_point(x))
        object.__setattr__(self, "op", op)


@dataclass(frozen=True)
class WeightedSum:
    terms: tuple[tuple[float, PointEval | PointDeriv], ...]

    def __init__(self, terms):
        terms = tuple((float(w), f) for w, f in terms)
        if not all(np.isfinite(w) for w, _ in terms):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "terms", terms)


LinearFunctional = Union[PointEval, PointDeriv, WeightedSum]


def _as_point(x) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(x, dtype=float)))


def atoms(f: LinearFunctional) -> list[tuple[float, tuple[float, ...], DerivOp]]:
    """Expand ``f`` into weighted point-derivative atoms ``(w, x, op)``."""
    if isinstance(f, WeightedSum):
        out = []
        for w, g in f.terms:
            out.extend((w * w2, x, op) for w2, x, op in atoms(g))
        return out
    return [(1.0, f.x, f.op)]


def apply(f: LinearFunctional, g: Callable, derivatives: dict | None = None) -> float:
    """Pairing ``[f, g]``.

    ``g`` maps a point (1d array) to a value.  Derivative functionals look up
    callables in ``derivatives`` keyed by ``DerivOp`` (e.g. ``{partial(0): dg}``);
    a Laplacian falls back to summing ``second(d, d)`` entries if present.
    """
    total = 0.0
    for w, x, op in atoms(f):
        total += w * _apply_atom(g, derivatives or {}, np.asarray(x), op)
    return float(total)


def _apply_atom(g, derivatives, x, op: DerivOp) -> float:
    if op.kind == IDENTITY:
        return float(g(x))
    if op in derivatives:
        return float(derivatives[op](x))
    if op.kind == LAPLACIAN:
        from .kernels import second

        return float(sum(derivatives[second(d, d)](x) for d in range(x.size)))
    raise KeyError(f"no derivative supplied for {op}")


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (n, dim)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.shape[0] != weights.size:
            raise ValueError("nodes and weights differ in length")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def __len__(self) -> int:
        return self.weights.size


def gauss_legendre_rule(n_per_dim: int, domain: Sequence[tuple[float, float]]) -> QuadratureRule:
    """Tensor-product Gauss-Legendre rule on the box ``[(lo, hi), ...]``.

    Nodes are ordered with the first coordinate varying slowest.
    """
    if n_per_dim < 1:
        raise ValueError("n_per_dim must be >= 1")
    domain = [(float(lo), float(hi)) for lo, hi in domain]
    if not domain or any(hi <= lo for lo, hi in domain):
        raise ValueError(f"empty integration box {domain}")
    t, w = np.polynomial.legendre.leggauss(n_per_dim)
    axes_x = [0.5 * (hi - lo) * t + 0.5 * (hi + lo) for lo, hi in domain]
    axes_w = [0.5 * (hi - lo) * w for lo, hi in domain]
    grids = np.meshgrid(*axes_x, indexing="ij")
    wgrids = np.meshgrid(*axes_w, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return QuadratureRule(nodes, weights)


def nonlocal_weights(x, rule: QuadratureRule, sigma: float, periods=None) -> np.ndarray:
    """Matrix ``W[i, q] = w_q exp(-|x_i - y_q|^2 / (2 sigma^2))``.

    ``periods`` switches to the minimum-image distance on the torus.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    diff = x[:, None, :] - rule.nodes[None, :, :]
    if periods is not None:
        p = np.asarray(periods, dtype=float)
        diff = diff - p * np.round(diff / p)
    d2 = np.sum(diff**2, axis=-1)
    return rule.weights[None, :] * np.exp(-d2 / (2.0 * sigma**2))


def nonlocal_coupling_functional(sigma: float, rule: QuadratureRule, x, periods=None) -> WeightedSum:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    w = nonlocal_weights(x, rule, sigma, periods)[0]
    return WeightedSum([(wq, PointEval(y)) for wq, y in zip(w, rule.nodes)])
