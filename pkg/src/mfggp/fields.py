"""Continuous field evaluators built from representer formulas."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .functionals import LinearFunctional, atoms
from .gram import GramSystem
from .kernels import ID, LAP, DerivOp, partial


class GPField:
    """``x -> K_op(x, phi) (K(phi, phi) + eta R)^{-1} values``."""

    def __init__(self, system: GramSystem, values: np.ndarray):
        self.system = system
        self.values = np.asarray(values, dtype=float)
        self.coefficients = system.solve(self.values)

    @property
    def dim(self) -> int:
        return self.system.kernel.dim

    def _pts(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1, self.dim)

    def eval_op(self, x, op: DerivOp = ID) -> np.ndarray:
        return self.system.cross(self._pts(x), op) @ self.coefficients

    def __call__(self, x) -> np.ndarray:
        return self.eval_op(x, ID)

    def grad(self, x) -> np.ndarray:
        pts = self._pts(x)
        return np.stack([self.eval_op(pts, partial(d)) for d in range(self.dim)], axis=1)

    def laplacian(self, x) -> np.ndarray:
        return self.eval_op(x, LAP)

    def apply(self, f: LinearFunctional) -> float:
        return float(sum(w * self.eval_op(np.asarray(xa), op)[0] for w, xa, op in atoms(f)))


class FunctionField:
    """Wraps a known vectorized function ``f(points) -> values``."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int):
        self.fn = fn
        self.dim = dim

    def __call__(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return np.asarray(self.fn(pts), dtype=float).reshape(-1)

    def eval_op(self, x, op: DerivOp = ID) -> np.ndarray:
        if op != ID:
            raise NotImplementedError("derivatives of a plain function field are not available")
        return self(x)

    def apply(self, f: LinearFunctional) -> float:
        return float(sum(w * self.eval_op(np.asarray(xa), op)[0] for w, xa, op in atoms(f)))


class ConstantField(FunctionField):
    def __init__(self, value: float, dim: int):
        super().__init__(lambda p: np.full(p.shape[0], float(value)), dim)
        self.value = float(value)

    def grad(self, x) -> np.ndarray:
        return np.zeros((np.asarray(x, dtype=float).reshape(-1, self.dim).shape[0], self.dim))

    def laplacian(self, x) -> np.ndarray:
        return np.zeros(np.asarray(x, dtype=float).reshape(-1, self.dim).shape[0])

    def eval_op(self, x, op: DerivOp = ID) -> np.ndarray:
        if op == ID:
            return self(x)
        return np.zeros(np.asarray(x, dtype=float).reshape(-1, self.dim).shape[0])


def grid_points(box, n: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Uniform half-open grid on a torus box; first coordinate varies slowest."""
    axes = [lo + (hi - lo) * np.arange(n) / n for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts, tuple([n] * len(box))
