# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled entry-wise assembly of operator-valued periodic-kernel matrices."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, exp

cnp.import_array()

DEF MAXDIM = 8
DEF NDER = 5


cdef inline void _factor(double r, double om, double a, double* f) noexcept nogil:
    cdef double s = sin(om * r)
    cdef double c = cos(om * r)
    cdef double f0 = exp(a * (c - 1.0))
    cdef double g1 = -a * om * s
    cdef double g2 = -a * om * om * c
    cdef double g3 = a * om * om * om * s
    cdef double g4 = a * om * om * om * om * c
    f[0] = f0
    f[1] = g1 * f0
    f[2] = (g2 + g1 * g1) * f0
    f[3] = (g3 + 3.0 * g1 * g2 + g1 * g1 * g1) * f0
    f[4] = (g4 + 4.0 * g1 * g3 + 3.0 * g2 * g2 + 6.0 * g1 * g1 * g2 + g1 * g1 * g1 * g1) * f0


def cross_matrix(double[:, ::1] xa, long[::1] ida,
                 double[:, ::1] xb, long[::1] idb,
                 long[:, :, ::1] mi, double[:, ::1] coef, long[::1] nterms,
                 double[::1] omega, double[::1] inv_l2, bint symmetric):
    cdef Py_ssize_t na = xa.shape[0]
    cdef Py_ssize_t nb = xb.shape[0]
    cdef Py_ssize_t dim = xa.shape[1]
    if dim > MAXDIM:
        raise ValueError("dimension too large for compiled kernel")
    out_arr = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double f[MAXDIM][NDER]
    cdef Py_ssize_t i, j, d, ta, tb, jstart
    cdef long oa, ob, o, nb_mi, na_mi
    cdef double acc, prod, sgn
    with nogil:
        for i in range(na):
            oa = ida[i]
            jstart = i if symmetric else 0
            for j in range(jstart, nb):
                ob = idb[j]
                for d in range(dim):
                    _factor(xa[i, d] - xb[j, d], omega[d], inv_l2[d], f[d])
                acc = 0.0
                for ta in range(nterms[oa]):
                    for tb in range(nterms[ob]):
                        prod = coef[oa, ta] * coef[ob, tb]
                        sgn = 1.0
                        for d in range(dim):
                            nb_mi = mi[ob, tb, d]
                            na_mi = mi[oa, ta, d]
                            if nb_mi % 2 == 1:
                                sgn = -sgn
                            prod = prod * f[d][na_mi + nb_mi]
                        acc = acc + sgn * prod
                out[i, j] = acc
                if symmetric:
                    out[j, i] = acc
    return out_arr
