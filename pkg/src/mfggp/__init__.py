"""Gaussian-process recovery of mean field games from partial noisy observations."""

from ._backend import BACKEND
from .kernels import ID, LAP, DerivOp, PeriodicKernelSpec, kernel_deriv_eval, kernel_eval, partial, second

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DerivOp",
    "ID",
    "LAP",
    "PeriodicKernelSpec",
    "kernel_deriv_eval",
    "kernel_eval",
    "partial",
    "second",
]
