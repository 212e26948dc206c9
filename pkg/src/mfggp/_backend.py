"""Selects the compiled Gram kernel when available, else a numpy fallback.

Set ``MFGGP_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from .kernels import DerivOp, PeriodicKernelSpec, kernel_block, op_tables

_compiled = None
if os.environ.get("MFGGP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _gramcore as _compiled  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on build
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def cross_matrix_numpy(k: PeriodicKernelSpec, xa, ops_a, ida, xb, ops_b, idb) -> np.ndarray:
    out = np.empty((xa.shape[0], xb.shape[0]))
    ida = np.asarray(ida)
    idb = np.asarray(idb)
    rows = {o: np.flatnonzero(ida == o) for o in np.unique(ida)}
    cols = {o: np.flatnonzero(idb == o) for o in np.unique(idb)}
    for oa, ri in rows.items():
        for ob, ci in cols.items():
            out[np.ix_(ri, ci)] = kernel_block(k, xa[ri], ops_a[oa], xb[ci], ops_b[ob])
    return out


def cross_matrix(
    k: PeriodicKernelSpec,
    xa: np.ndarray,
    ops_a: list[DerivOp],
    ida: np.ndarray,
    xb: np.ndarray,
    ops_b: list[DerivOp],
    idb: np.ndarray,
    symmetric: bool = False,
    backend: str | None = None,
) -> np.ndarray:
    """Matrix ``[(ops_a[ida_i] (x) ops_b[idb_j]) k](xa_i, xb_j)``.

    ``symmetric`` may only be set when both sides are the same atom list.
    """
    backend = backend or BACKEND
    xa = np.ascontiguousarray(xa, dtype=float).reshape(-1, k.dim)
    xb = np.ascontiguousarray(xb, dtype=float).reshape(-1, k.dim)
    for oa in ops_a:
        for ob in ops_b:
            if oa.order + ob.order > 4:
                from .kernels import KernelInputError

                raise KernelInputError(f"combined derivative order of {oa} and {ob} exceeds 4")
    if backend == "numpy" or _compiled is None:
        return cross_matrix_numpy(k, xa, ops_a, ida, xb, ops_b, idb)
    # both sides share one operator table
    ops = list(ops_a) + list(ops_b)
    mi, coef, nt = op_tables(ops, k.dim)
    ida = np.ascontiguousarray(ida, dtype=np.int64)
    idb = np.ascontiguousarray(np.asarray(idb, dtype=np.int64) + len(ops_a))
    return _compiled.cross_matrix(
        xa, ida, xb, idb, mi, coef, nt,
        np.ascontiguousarray(k.omega), np.ascontiguousarray(k.inv_l2), bool(symmetric),
    )
