"""Operator-valued Gram matrices, block nuggets and Cholesky-backed solves."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ._backend import cross_matrix
from .functionals import LinearFunctional, PointDeriv, PointEval, WeightedSum, atoms
from .kernels import ID, DerivOp, KernelInputError, PeriodicKernelSpec

VALUE, FIRST, SECOND_ORDER, INTEGRAL = "value", "first", "second", "integral"
BLOCK_CODES = {VALUE: 0, FIRST: 1, SECOND_ORDER: 2, INTEGRAL: 3}
DEFAULT_ETA = 1e-8


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, msg: str | None = None):
        self.pivot = pivot
        super().__init__(msg or f"matrix is not positive definite (failing pivot index {pivot})")


def block_of(f: LinearFunctional) -> str:
    if isinstance(f, WeightedSum):
        return INTEGRAL
    return {0: VALUE, 1: FIRST, 2: SECOND_ORDER}[f.op.order]


@dataclass
class FeatureSet:
    """Array form of a feature list: every feature is ``sum_a C[f, a] * atom_a``.

    Atoms are point-derivative functionals ``(points[a], ops[op_ids[a]])``.
    ``weights`` is ``None`` when each feature is exactly one atom.
    """

    points: np.ndarray
    ops: list[DerivOp]
    op_ids: np.ndarray
    blocks: list[str]
    weights: sp.csr_matrix | None = None

    def __len__(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_stencil(cls, groups: Sequence[tuple[np.ndarray, DerivOp]]) -> "FeatureSet":
        """Concatenate groups of points sharing one operator, in order."""
        ops: list[DerivOp] = []
        pts, ids, blocks = [], [], []
        for x, op in groups:
            x = np.atleast_2d(np.asarray(x, dtype=float))
            if x.shape[0] == 0:
                continue
            if op not in ops:
                ops.append(op)
            pts.append(x)
            ids.append(np.full(x.shape[0], ops.index(op), dtype=np.int64))
            blocks.extend([{0: VALUE, 1: FIRST, 2: SECOND_ORDER}[op.order]] * x.shape[0])
        return cls(np.vstack(pts), ops, np.concatenate(ids), blocks)

    @classmethod
    def from_functionals(cls, features: Sequence[LinearFunctional], dim: int) -> "FeatureSet":
        ops: list[DerivOp] = []
        pts, ids, rows, cols, vals = [], [], [], [], []
        single = True
        for i, f in enumerate(features):
            expanded = atoms(f)
            if isinstance(f, WeightedSum) or len(expanded) != 1 or expanded[0][0] != 1.0:
                single = False
            for w, x, op in expanded:
                if len(x) != dim:
                    raise KernelInputError(f"feature {i} has a point of dim {len(x)}, kernel dim {dim}")
                if op not in ops:
                    ops.append(op)
                rows.append(i)
                cols.append(len(pts))
                vals.append(w)
                pts.append(x)
                ids.append(ops.index(op))
        points = np.asarray(pts, dtype=float).reshape(-1, dim)
        weights = None
        if not single:
            weights = sp.csr_matrix((vals, (rows, cols)), shape=(len(features), len(pts)))
        return cls(points, ops or [ID], np.asarray(ids, dtype=np.int64), [block_of(f) for f in features], weights)


def _as_featureset(features, dim: int) -> FeatureSet:
    if isinstance(features, FeatureSet):
        if features.points.shape[1] != dim:
            raise KernelInputError("feature points do not match kernel dimension")
        return features
    return FeatureSet.from_functionals(list(features), dim)


def assemble(kernel: PeriodicKernelSpec, features) -> np.ndarray:
    fs = _as_featureset(features, kernel.dim)
    g = cross_matrix(kernel, fs.points, fs.ops, fs.op_ids, fs.points, fs.ops, fs.op_ids, symmetric=True)
    if fs.weights is not None:
        c = fs.weights
        g = np.asarray(c @ (c @ g).T)
        g = 0.5 * (g + g.T)
    return g


def cross(kernel: PeriodicKernelSpec, x, op: DerivOp, features) -> np.ndarray:
    """``K_op(x, phi)``: rows are evaluation points, columns features."""
    fs = _as_featureset(features, kernel.dim)
    x = np.asarray(x, dtype=float).reshape(-1, kernel.dim)
    g = cross_matrix(kernel, x, [op], np.zeros(x.shape[0], dtype=np.int64), fs.points, fs.ops, fs.op_ids)
    if fs.weights is not None:
        g = np.asarray((fs.weights @ g.T).T)
    return g


def nugget_diagonal(matrix: np.ndarray, blocks: Sequence[str]) -> np.ndarray:
    """Diagonal of ``R``: each block gets its own largest Gram diagonal entry."""
    diag = np.diag(matrix)
    blocks = np.asarray(blocks)
    r = np.zeros_like(diag)
    for b in np.unique(blocks):
        idx = blocks == b
        r[idx] = diag[idx].max()
    return r


def add_nugget(matrix: np.ndarray, blocks: Sequence[str], eta: float) -> np.ndarray:
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if eta == 0:
        return matrix
    return matrix + np.diag(eta * nugget_diagonal(matrix, blocks))


def cholesky_lower(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("matrix must be square")
    c, info = sla.lapack.dpotrf(matrix, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(info - 1)
    if info < 0:  # pragma: no cover
        raise ValueError(f"dpotrf argument {-info} invalid")
    return c


@dataclass
class GramSystem:
    kernel: PeriodicKernelSpec
    features: FeatureSet
    matrix: np.ndarray
    nugget_eta: float
    factor: np.ndarray
    nugget: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def blocks(self) -> list[str]:
        return self.features.blocks

    def regularized(self) -> np.ndarray:
        return self.matrix + np.diag(self.nugget_eta * self.nugget)

    def whiten(self, z) -> np.ndarray:
        """``L^{-1} z``; its squared norm is the RKHS quadratic form."""
        return sla.solve_triangular(self.factor, z, lower=True, check_finite=False)

    def unwhiten(self, w) -> np.ndarray:
        return self.factor @ w

    def solve(self, z) -> np.ndarray:
        return sla.cho_solve((self.factor, True), z, check_finite=False)

    def quadratic_form(self, z) -> float:
        z = np.asarray(z, dtype=float)
        if z.shape[0] != self.size:
            raise ValueError(f"vector of length {z.shape[0]} for a system of size {self.size}")
        w = self.whiten(z)
        return float(w @ w)

    def cross(self, x, op: DerivOp = ID) -> np.ndarray:
        return cross(self.kernel, x, op, self.features)

    def representer_eval(self, coefficients, x, op: DerivOp = ID):
        return representer_eval(self, coefficients, x, op)


def factorize(
    matrix: np.ndarray,
    kernel: PeriodicKernelSpec | None = None,
    features: FeatureSet | None = None,
    eta: float = 0.0,
    blocks: Sequence[str] | None = None,
) -> GramSystem:
    """Cholesky-factorize ``matrix + eta R`` once and wrap it.

    With ``eta = 0`` the matrix is factorized as is.
    """
    matrix = np.asarray(matrix, dtype=float)
    if blocks is None:
        blocks = features.blocks if features is not None else [VALUE] * matrix.shape[0]
    r = nugget_diagonal(matrix, blocks) if eta > 0 else np.zeros(matrix.shape[0])
    factor = cholesky_lower(matrix + np.diag(eta * r))
    if features is None:
        features = FeatureSet(np.zeros((matrix.shape[0], 1)), [ID], np.zeros(matrix.shape[0], dtype=np.int64), list(blocks))
    return GramSystem(kernel, features, matrix, float(eta), factor, r)


def build_system(kernel: PeriodicKernelSpec, features, eta: float = DEFAULT_ETA) -> GramSystem:
    fs = _as_featureset(features, kernel.dim)
    return factorize(assemble(kernel, fs), kernel, fs, eta)


def quadratic_form(sys: GramSystem, z) -> float:
    return sys.quadratic_form(z)


def representer_eval(sys: GramSystem, coefficients, x, op: DerivOp = ID):
    """``K_op(x, phi) @ coefficients``; scalar for one point, array otherwise."""
    if sys.kernel is None:
        raise ValueError("system has no kernel attached")
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 0 or (x_arr.ndim == 1 and x_arr.size == sys.kernel.dim)
    vals = sys.cross(x_arr, op) @ np.asarray(coefficients, dtype=float)
    return float(vals[0]) if single else vals


def dump_binary(path, matrix: np.ndarray, eta: float, blocks: Sequence[str]) -> None:
    """Write ``b"MFGG"``, N (int64), eta (float64), N block codes (uint8), then
    the matrix as row-major little-endian float64."""
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    n = matrix.shape[0]
    with open(path, "wb") as fh:
        fh.write(b"MFGG")
        fh.write(struct.pack("<qd", n, float(eta)))
        fh.write(np.asarray([BLOCK_CODES[b] for b in blocks], dtype=np.uint8).tobytes())
        fh.write(matrix.tobytes())


def load_binary(path):
    inv = {v: k for k, v in BLOCK_CODES.items()}
    with open(path, "rb") as fh:
        if fh.read(4) != b"MFGG":
            raise ValueError("not a Gram dump")
        n, eta = struct.unpack("<qd", fh.read(16))
        codes = np.frombuffer(fh.read(n), dtype=np.uint8)
        matrix = np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n).copy()
    return matrix, eta, [inv[int(c)] for c in codes]
